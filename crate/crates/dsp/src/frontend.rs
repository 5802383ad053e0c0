//! Linear-frequency cepstral and filterbank front-ends.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DspError, Result};
use crate::wav::Waveform;

pub const FIXED_FRAMES: usize = 750;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Lfcc,
    Lfbe,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Lfcc => 0,
            FeatureKind::Lfbe => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Lfcc),
            1 => Some(FeatureKind::Lfbe),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub n_filters: usize,
    pub n_ceps: usize,
    pub max_freq_hz: f64,
    pub feature_kind: FeatureKind,
    /// Frames on each side used by the delta regression.
    pub delta_window: usize,
    /// 0 = statics only, 1 = +Δ, 2 = +Δ+Δ².
    pub delta_orders: usize,
    pub log_floor: f64,
    /// Zero-pad signals shorter than one frame instead of failing.
    pub pad_short: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_len_ms: 20.0,
            hop_ms: 10.0,
            fft_size: 512,
            n_filters: 20,
            n_ceps: 20,
            max_freq_hz: 8000.0,
            feature_kind: FeatureKind::Lfcc,
            delta_window: 2,
            delta_orders: 2,
            log_floor: 1e-10,
            pad_short: true,
        }
    }
}

impl FrontendConfig {
    pub fn frame_len(&self) -> usize {
        (self.frame_len_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Columns of the static block.
    pub fn static_dim(&self) -> usize {
        match self.feature_kind {
            FeatureKind::Lfcc => self.n_ceps,
            FeatureKind::Lfbe => self.n_filters,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.static_dim() * (1 + self.delta_orders)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DspError::Config(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        let (l, h) = (self.frame_len(), self.hop_len());
        if l == 0 || h == 0 {
            return bad("frame and hop must span at least one sample".into());
        }
        if l > self.fft_size {
            return bad(format!("frame of {l} samples exceeds fft_size {}", self.fft_size));
        }
        if !(self.max_freq_hz > 0.0 && self.max_freq_hz <= self.sample_rate as f64 / 2.0) {
            return bad(format!("max_freq_hz {} outside (0, sample_rate/2]", self.max_freq_hz));
        }
        if self.n_filters == 0 {
            return bad("n_filters must be positive".into());
        }
        if self.feature_kind == FeatureKind::Lfcc && (self.n_ceps == 0 || self.n_ceps > self.n_filters) {
            return bad(format!("n_ceps must be in 1..={}", self.n_filters));
        }
        if self.delta_orders > 2 {
            return bad("delta_orders must be 0, 1 or 2".into());
        }
        if self.delta_orders > 0 && self.delta_window == 0 {
            return bad("delta_window must be positive".into());
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    /// Stable 64-bit digest of every field, used to key cached features.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Row-major `T x D` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n_frames: usize,
    pub n_dims: usize,
    pub data: Vec<f64>,
    pub kind: FeatureKind,
    pub config_hash: u64,
}

impl FeatureMatrix {
    pub fn new(n_frames: usize, n_dims: usize, data: Vec<f64>, kind: FeatureKind, config_hash: u64) -> Result<Self> {
        if data.len() != n_frames * n_dims {
            return Err(DspError::Config(format!(
                "{n_frames}x{n_dims} matrix needs {} values, got {}",
                n_frames * n_dims,
                data.len()
            )));
        }
        Ok(Self { n_frames, n_dims, data, kind, config_hash })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_dims..(t + 1) * self.n_dims]
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        (0..self.n_frames).map(|t| self.data[t * self.n_dims + d]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn frame_count(n: usize, frame: usize, hop: usize) -> usize {
    if n < frame {
        0
    } else {
        (n - frame) / hop + 1
    }
}

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Splits a waveform into Hamming-windowed frames.
pub fn frame_signal(w: &Waveform, cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let (l, h) = (cfg.frame_len(), cfg.hop_len());
    let mut padded;
    let mut samples = &w.samples[..];
    if samples.len() < l {
        if !cfg.pad_short {
            return Err(DspError::TooShort { samples: samples.len(), needed: l });
        }
        padded = samples.to_vec();
        padded.resize(l, 0.0);
        samples = &padded[..];
    }
    let win = hamming(l);
    let n = frame_count(samples.len(), l, h);
    Ok((0..n)
        .map(|i| samples[i * h..i * h + l].iter().zip(&win).map(|(s, w)| s * w).collect())
        .collect())
}

/// Triangular filters with centres equally spaced on a linear scale between
/// 0 Hz and `max_freq_hz`; returns `n_filters` rows of `fft_size/2 + 1` weights.
pub fn linear_filterbank(cfg: &FrontendConfig) -> Vec<Vec<f64>> {
    let bins = cfg.fft_size / 2 + 1;
    let step = cfg.max_freq_hz / (cfg.n_filters + 1) as f64;
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    (0..cfg.n_filters)
        .map(|m| {
            let (lo, mid, hi) = (m as f64 * step, (m + 1) as f64 * step, (m + 2) as f64 * step);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Centre frequency of filter `m`.
pub fn filter_center_hz(cfg: &FrontendConfig, m: usize) -> f64 {
    (m + 1) as f64 * cfg.max_freq_hz / (cfg.n_filters + 1) as f64
}

/// Orthonormal DCT-II of `x`, keeping the first `keep` coefficients.
pub fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                .sum();
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * scale
        })
        .collect()
}

/// Per-configuration state: FFT plan, window-free filterbank and DCT.
pub struct Frontend {
    cfg: FrontendConfig,
    fft: Arc<dyn Fft<f64>>,
    bank: Vec<Vec<f64>>,
    hash: u64,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let bank = linear_filterbank(&cfg);
        let hash = cfg.hash();
        Ok(Self { cfg, fft, bank, hash })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &[Vec<f64>] {
        &self.bank
    }

    fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(self.cfg.fft_size, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf[..self.cfg.fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    /// Raw (pre-log) filterbank energies per frame.
    pub fn filterbank_energies(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        let frames = frame_signal(w, &self.cfg)?;
        Ok(frames
            .iter()
            .map(|f| {
                let p = self.power_spectrum(f);
                self.bank
                    .iter()
                    .map(|row| row.iter().zip(&p).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect())
    }

    /// Computes the configured feature kind, statics plus deltas.
    pub fn compute(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(DspError::Config(format!(
                "waveform at {} Hz, front-end expects {} Hz",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        let floor = self.cfg.log_floor;
        let statics: Vec<Vec<f64>> = self
            .filterbank_energies(w)?
            .into_iter()
            .map(|e| {
                let logs: Vec<f64> = e.iter().map(|v| v.max(floor).ln()).collect();
                match self.cfg.feature_kind {
                    FeatureKind::Lfcc => dct2(&logs, self.cfg.n_ceps),
                    FeatureKind::Lfbe => logs,
                }
            })
            .collect();
        let t = statics.len();
        let d0 = self.cfg.static_dim();
        let mut blocks = vec![flatten(&statics, d0)];
        for _ in 0..self.cfg.delta_orders {
            let prev = blocks.last().unwrap();
            blocks.push(deltas(prev, t, d0, self.cfg.delta_window));
        }
        let dim = d0 * blocks.len();
        let mut data = vec![0.0; t * dim];
        for (b, block) in blocks.iter().enumerate() {
            for r in 0..t {
                data[r * dim + b * d0..r * dim + (b + 1) * d0].copy_from_slice(&block[r * d0..(r + 1) * d0]);
            }
        }
        FeatureMatrix::new(t, dim, data, self.cfg.feature_kind, self.hash)
    }
}

fn flatten(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for r in rows {
        out.extend_from_slice(r);
    }
    out
}

/// LFCC features; `cfg.feature_kind` must be `Lfcc`.
pub fn lfcc(w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    if cfg.feature_kind != FeatureKind::Lfcc {
        return Err(DspError::Config("lfcc called with a non-LFCC config".into()));
    }
    Frontend::new(cfg.clone())?.compute(w)
}

/// Log filterbank energies; `cfg.feature_kind` must be `Lfbe`.
pub fn lfbe(w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    if cfg.feature_kind != FeatureKind::Lfbe {
        return Err(DspError::Config("lfbe called with a non-LFBE config".into()));
    }
    Frontend::new(cfg.clone())?.compute(w)
}

/// Regression deltas over a row-major `t x d` matrix with `w` frames of
/// context on each side; edge frames are replicated.
pub fn deltas(m: &[f64], t: usize, d: usize, w: usize) -> Vec<f64> {
    assert_eq!(m.len(), t * d);
    let denom: f64 = 2.0 * (1..=w).map(|k| (k * k) as f64).sum::<f64>();
    let at = |i: isize| i.clamp(0, t as isize - 1) as usize;
    let mut out = vec![0.0; t * d];
    for r in 0..t {
        for k in 1..=w {
            let fwd = at(r as isize + k as isize);
            let back = at(r as isize - k as isize);
            for c in 0..d {
                out[r * d + c] += k as f64 * (m[fwd * d + c] - m[back * d + c]);
            }
        }
        for c in 0..d {
            out[r * d + c] /= denom;
        }
    }
    out
}

/// Repeat-pads short matrices and crops long ones to `target` frames.
pub fn fix_length<R: Rng + ?Sized>(m: &FeatureMatrix, target: usize, rng: &mut R) -> Result<FeatureMatrix> {
    if m.n_frames == 0 || m.n_dims == 0 {
        return Err(DspError::EmptyFeatures);
    }
    let d = m.n_dims;
    let data = if m.n_frames == target {
        m.data.clone()
    } else if m.n_frames < target {
        (0..target).flat_map(|r| m.row(r % m.n_frames).iter().copied()).collect()
    } else {
        let o = rng.random_range(0..=m.n_frames - target);
        m.data[o * d..(o + target) * d].to_vec()
    };
    FeatureMatrix::new(target, d, data, m.kind, m.config_hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_counts() {
        let cfg = FrontendConfig::default();
        let w = |n| Waveform::new(vec![0.1; n], 16_000).unwrap();
        assert_eq!(frame_signal(&w(16_000), &cfg).unwrap().len(), 99);
        assert_eq!(frame_signal(&w(320), &cfg).unwrap().len(), 1);
        assert_eq!(frame_signal(&w(480), &cfg).unwrap().len(), 2);
    }

    #[test]
    fn short_signal_policy() {
        let mut cfg = FrontendConfig::default();
        let w = Waveform::new(vec![0.1; 100], 16_000).unwrap();
        assert_eq!(frame_signal(&w, &cfg).unwrap().len(), 1);
        cfg.pad_short = false;
        assert!(matches!(frame_signal(&w, &cfg), Err(DspError::TooShort { .. })));
    }

    #[test]
    fn validation_catches_bad_configs() {
        let base = FrontendConfig::default();
        let mut c = base.clone();
        c.fft_size = 256;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.max_freq_hz = 9000.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.n_ceps = 21;
        assert!(c.validate().is_err());
        assert!(base.validate().is_ok());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = FrontendConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.max_freq_hz = 4000.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn hamming_endpoints() {
        let w = hamming(320);
        assert!((w[0] - 0.08).abs() < 1e-12);
        assert!((w[319] - 0.08).abs() < 1e-12);
    }
}
