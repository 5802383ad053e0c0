//! Channel, pitch and room augmentations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alaw;
use crate::error::{DspError, Result};
use crate::filter::Cascade;
use crate::resample::{resample, Resampler};
use crate::wav::{f64_to_i16, i16_to_f64, Waveform};

pub const MAX_POLICY_CENTS: i32 = 300;
pub const MAX_ROOM_SCALE: f64 = 100.0;
const WSOLA_FRAME_MS: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    CodecAlaw,
    BandlimitWideband,
    Pitch,
    Reverb,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::CodecAlaw,
        AugmentKind::BandlimitWideband,
        AugmentKind::Pitch,
        AugmentKind::Reverb,
    ];

    /// Suffix appended to utterance ids of augmented copies.
    pub fn suffix(self) -> &'static str {
        match self {
            AugmentKind::CodecAlaw => "alaw",
            AugmentKind::BandlimitWideband => "wideband",
            AugmentKind::Pitch => "pitch",
            AugmentKind::Reverb => "reverb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub pitch_cents: Option<i32>,
    pub room_scale: Option<f64>,
    pub seed: u64,
}

impl AugmentSpec {
    /// Draws kind-specific parameters: cents uniformly from the integers in
    /// `[-300, 300]`, room scale uniformly from `[0, 100]`.
    pub fn sample(kind: AugmentKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pitch_cents, room_scale) = match kind {
            AugmentKind::Pitch => (Some(rng.random_range(-MAX_POLICY_CENTS..=MAX_POLICY_CENTS)), None),
            AugmentKind::Reverb => (None, Some(rng.random_range(0.0..=MAX_ROOM_SCALE))),
            _ => (None, None),
        };
        Self { kind, pitch_cents, room_scale, seed: rng.random() }
    }

    pub fn apply(&self, w: &Waveform) -> Result<Waveform> {
        match self.kind {
            AugmentKind::CodecAlaw => alaw_codec(w),
            AugmentKind::BandlimitWideband => bandlimit_wideband(w),
            AugmentKind::Pitch => pitch_shift(w, self.pitch_cents.unwrap_or(0)),
            AugmentKind::Reverb => apply_reverb(w, self.room_scale.unwrap_or(0.0), self.seed),
        }
    }
}

/// Per-utterance seed derived from a root seed, the utterance id and the kind.
pub fn derive_seed(root: u64, utt: &str, kind: AugmentKind) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(utt.as_bytes());
    h.update([0u8]);
    h.update(kind.suffix().as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn require_rate(w: &Waveform, rate: u32, op: &str) -> Result<()> {
    if w.sample_rate != rate {
        return Err(DspError::Config(format!("{op} expects {rate} Hz input, got {}", w.sample_rate)));
    }
    Ok(())
}

fn fit_length(mut x: Vec<f64>, n: usize) -> Vec<f64> {
    x.resize(n, 0.0);
    x
}

/// Narrow-band telephone channel: 8 kHz resampling around G.711 A-law.
pub fn alaw_codec(w: &Waveform) -> Result<Waveform> {
    require_rate(w, 16_000, "alaw_codec")?;
    let narrow = resample(&w.samples, 16_000, 8_000)?;
    let pcm: Vec<i16> = narrow.iter().map(|&v| f64_to_i16(v)).collect();
    let decoded: Vec<f64> = alaw::decode_all(&alaw::encode_all(&pcm)).into_iter().map(i16_to_f64).collect();
    let wide = resample(&decoded, 8_000, 16_000)?;
    Waveform::new(fit_length(wide, w.len()), 16_000)
}

/// Wide-band channel stand-in: 50 Hz to 7 kHz band-pass, 14-bit amplitude grid.
pub fn bandlimit_wideband(w: &Waveform) -> Result<Waveform> {
    require_rate(w, 16_000, "bandlimit_wideband")?;
    let fs = 16_000.0;
    let mut x = w.samples.clone();
    Cascade::butter_highpass(4, fs, 50.0).run(&mut x);
    Cascade::butter_lowpass(4, fs, 7000.0).run(&mut x);
    let levels = 8192.0;
    for v in &mut x {
        *v = (*v * levels).round().clamp(-levels, levels - 1.0) / levels;
    }
    Waveform::new(x, w.sample_rate)
}

/// Periodic Hann window.
fn hann(len: usize) -> Vec<f64> {
    (0..len).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).collect()
}

/// WSOLA time-scale modification: output is about `alpha` times longer with
/// the local spectrum preserved. Frames of `frame` samples, 75% overlap.
pub fn time_stretch(x: &[f64], alpha: f64, frame: usize) -> Vec<f64> {
    let out_len = (x.len() as f64 * alpha).round() as usize;
    if x.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    let hs = (frame / 4).max(1);
    let tol = (hs / 2) as isize;
    let overlap = frame - hs;
    // lead-in silence so the first real sample already has full window support
    let lead = overlap;
    let mut xp = vec![0.0; lead];
    xp.extend_from_slice(x);
    xp.resize(lead + x.len() + 2 * frame + hs, 0.0);
    let max_pos = (xp.len() - frame) as isize;
    let win = hann(frame);
    let frames = (out_len + lead).div_ceil(hs) + 1;
    let mut y = vec![0.0; frames * hs + frame];
    let mut wsum = vec![0.0; y.len()];
    let mut pos = 0usize;
    for k in 0..frames {
        if k > 0 {
            let natural = (pos + hs).min(max_pos as usize);
            let target = (lead as f64 + (k * hs) as f64 / alpha - lead as f64 / alpha).round() as isize;
            let reference = &xp[natural..natural + overlap];
            let mut best = (f64::NEG_INFINITY, target.clamp(0, max_pos));
            // offsets visited in order 0, -1, 1, -2, 2, ... so ties favour small shifts
            for step in 0..=(2 * tol) {
                let delta = if step % 2 == 0 { -(step / 2) } else { step / 2 + 1 };
                let cand = target + delta;
                if cand < 0 || cand > max_pos {
                    continue;
                }
                let seg = &xp[cand as usize..cand as usize + overlap];
                let (mut dot, mut energy) = (0.0, 0.0);
                for (a, b) in reference.iter().zip(seg) {
                    dot += a * b;
                    energy += b * b;
                }
                let score = if energy > 0.0 { dot / energy.sqrt() } else { 0.0 };
                if best.0 == f64::NEG_INFINITY || score > best.0 + 1e-12 * best.0.abs() {
                    best = (score, cand);
                }
            }
            pos = best.1 as usize;
        }
        let base = k * hs;
        for n in 0..frame {
            y[base + n] += win[n] * xp[pos + n];
            wsum[base + n] += win[n];
        }
    }
    let norm_floor = 1e-3;
    y.iter()
        .zip(&wsum)
        .skip(lead)
        .take(out_len)
        .map(|(v, s)| if *s > norm_floor { v / s } else { 0.0 })
        .collect()
}

/// Shifts pitch by `cents` (1/100 semitone) keeping the duration.
pub fn pitch_shift(w: &Waveform, cents: i32) -> Result<Waveform> {
    if cents.abs() > 1200 {
        return Err(DspError::Config(format!("pitch shift of {cents} cents outside [-1200, 1200]")));
    }
    let alpha = 2f64.powf(cents as f64 / 1200.0);
    let frame = (WSOLA_FRAME_MS * w.sample_rate as f64 / 1000.0).round() as usize;
    let stretched = time_stretch(&w.samples, alpha, frame);
    let out = if cents == 0 {
        stretched
    } else {
        Resampler::with_ratio(w.len() as f64 / stretched.len().max(1) as f64)?.process(&stretched)
    };
    Waveform::new(fit_length(out, w.len()), w.sample_rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomImpulseResponse {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
    pub t60: f64,
}

/// Reverberation time in seconds for a room scale in `[0, 100]`.
pub fn t60_for(room_scale: f64) -> f64 {
    0.05 + 0.007 * room_scale
}

/// Unit direct path followed by Gaussian noise under an exponential envelope
/// reaching -60 dB at T60.
pub fn synth_rir(room_scale: f64, sample_rate: u32, seed: u64) -> Result<RoomImpulseResponse> {
    if !(0.0..=MAX_ROOM_SCALE).contains(&room_scale) {
        return Err(DspError::Config(format!("room_scale {room_scale} outside [0, 100]")));
    }
    let t60 = t60_for(room_scale);
    let fs = sample_rate as f64;
    let len = (t60 * fs).ceil() as usize;
    let tail_std = 0.002 + 0.25 * room_scale / MAX_ROOM_SCALE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taps = Vec::with_capacity(len.max(1));
    taps.push(1.0);
    for n in 1..len {
        let z: f64 = StandardNormal.sample(&mut rng);
        taps.push(tail_std * z * (-6.91 * n as f64 / (fs * t60)).exp());
    }
    Ok(RoomImpulseResponse { taps, sample_rate, t60 })
}

/// Linear convolution truncated to `x.len()`, via FFT.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |s: &[f64]| {
        let mut v: Vec<Complex<f64>> = s.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..x.len()].iter().map(|c| c.re / n as f64).collect()
}

/// Convolves with a synthetic room response and rescales to the input peak.
pub fn apply_reverb(w: &Waveform, room_scale: f64, seed: u64) -> Result<Waveform> {
    let rir = synth_rir(room_scale, w.sample_rate, seed)?;
    let mut y = convolve_truncated(&w.samples, &rir.taps);
    let (pin, pout) = (w.peak(), y.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    if pout > 0.0 {
        let g = pin / pout;
        y.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(y, w.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_sampling_stays_in_range() {
        for s in 0..200 {
            let p = AugmentSpec::sample(AugmentKind::Pitch, s);
            assert!(p.pitch_cents.unwrap().abs() <= MAX_POLICY_CENTS);
            let r = AugmentSpec::sample(AugmentKind::Reverb, s);
            assert!((0.0..=100.0).contains(&r.room_scale.unwrap()));
        }
    }

    #[test]
    fn seeds_differ_by_kind_and_utt() {
        let a = derive_seed(7, "u1", AugmentKind::Pitch);
        assert_eq!(a, derive_seed(7, "u1", AugmentKind::Pitch));
        assert_ne!(a, derive_seed(7, "u1", AugmentKind::Reverb));
        assert_ne!(a, derive_seed(7, "u2", AugmentKind::Pitch));
        assert_ne!(a, derive_seed(8, "u1", AugmentKind::Pitch));
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let x = [1.0, 2.0, -1.0, 0.5, 3.0];
        let h = [0.5, -0.25, 0.125];
        let y = convolve_truncated(&x, &h);
        for n in 0..x.len() {
            let direct: f64 = (0..h.len()).filter(|&k| k <= n).map(|k| h[k] * x[n - k]).sum();
            assert!((y[n] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_parameters_are_errors() {
        let w = Waveform::new(vec![0.0; 100], 16_000).unwrap();
        assert!(apply_reverb(&w, 101.0, 0).is_err());
        assert!(apply_reverb(&w, -0.1, 0).is_err());
        assert!(pitch_shift(&w, 1201).is_err());
    }
}
