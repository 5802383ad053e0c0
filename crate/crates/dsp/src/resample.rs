//! Arbitrary-ratio band-limited resampling with a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

use crate::error::{DspError, Result};

const ZERO_CROSSINGS: usize = 64;
const TABLE_DENSITY: usize = 512;
const KAISER_BETA: f64 = 8.6;
/// Passband edge as a fraction of the lower Nyquist frequency.
const DEFAULT_CUTOFF: f64 = 0.95;

/// Zeroth-order modified Bessel function of the first kind.
pub fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

#[derive(Debug, Clone)]
pub struct Resampler {
    /// Output samples per input sample.
    ratio: f64,
    /// Kernel bandwidth in cycles per input sample, times two.
    fc: f64,
    table: Vec<f64>,
}

impl Resampler {
    pub fn new(from_hz: u32, to_hz: u32) -> Result<Self> {
        if from_hz == 0 || to_hz == 0 {
            return Err(DspError::Config("sample rates must be positive".into()));
        }
        Self::with_ratio(to_hz as f64 / from_hz as f64)
    }

    pub fn with_ratio(ratio: f64) -> Result<Self> {
        Self::with_ratio_and_cutoff(ratio, DEFAULT_CUTOFF)
    }

    pub fn with_ratio_and_cutoff(ratio: f64, cutoff: f64) -> Result<Self> {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(DspError::Config(format!("bad resampling ratio {ratio}")));
        }
        if !(cutoff > 0.0 && cutoff <= 1.0) {
            return Err(DspError::Config(format!("cutoff {cutoff} outside (0, 1]")));
        }
        let i0b = bessel_i0(KAISER_BETA);
        let n = ZERO_CROSSINGS * TABLE_DENSITY;
        let table = (0..=n + 1)
            .map(|i| {
                let u = i as f64 / TABLE_DENSITY as f64;
                let x = (u / ZERO_CROSSINGS as f64).min(1.0);
                sinc(u) * bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / i0b
            })
            .collect();
        Ok(Self { ratio, fc: cutoff * ratio.min(1.0), table })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    fn kernel(&self, u: f64) -> f64 {
        let pos = u.abs() * TABLE_DENSITY as f64;
        let i = pos as usize;
        if i >= ZERO_CROSSINGS * TABLE_DENSITY {
            return 0.0;
        }
        let frac = pos - i as f64;
        self.table[i] * (1.0 - frac) + self.table[i + 1] * frac
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len as f64 * self.ratio).round() as usize
    }

    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let out_len = self.output_len(x.len());
        let support = ZERO_CROSSINGS as f64 / self.fc;
        (0..out_len)
            .map(|n| {
                let t = n as f64 / self.ratio;
                let lo = ((t - support).ceil().max(0.0)) as usize;
                let hi = ((t + support).floor() as usize).min(x.len().saturating_sub(1));
                let mut acc = 0.0;
                for (k, &v) in x.iter().enumerate().take(hi + 1).skip(lo) {
                    acc += v * self.kernel(self.fc * (t - k as f64));
                }
                acc * self.fc
            })
            .collect()
    }
}

pub fn resample(x: &[f64], from_hz: u32, to_hz: u32) -> Result<Vec<f64>> {
    if from_hz == to_hz {
        return Ok(x.to_vec());
    }
    Ok(Resampler::new(from_hz, to_hz)?.process(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_matches_series_values() {
        assert_eq!(bessel_i0(0.0), 1.0);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
    }

    #[test]
    fn lengths_follow_ratio() {
        let r = Resampler::new(16_000, 8_000).unwrap();
        assert_eq!(r.process(&vec![0.0; 1601]).len(), 801);
        let r = Resampler::new(8_000, 16_000).unwrap();
        assert_eq!(r.process(&vec![0.0; 800]).len(), 1600);
    }

    #[test]
    fn low_tone_survives_round_trip() {
        let x: Vec<f64> = (0..16_000).map(|n| (2.0 * PI * 500.0 * n as f64 / 16_000.0).sin()).collect();
        let down = resample(&x, 16_000, 8_000).unwrap();
        let up = resample(&down, 8_000, 16_000).unwrap();
        let err: f64 = x[2000..14_000].iter().zip(&up[2000..14_000]).map(|(a, b)| (a - b).powi(2)).sum();
        let sig: f64 = x[2000..14_000].iter().map(|a| a * a).sum();
        assert!(10.0 * (sig / err).log10() > 60.0);
    }

    #[test]
    fn rejects_bad_ratio() {
        assert!(Resampler::with_ratio(0.0).is_err());
        assert!(Resampler::with_ratio(f64::NAN).is_err());
        assert!(Resampler::new(0, 8000).is_err());
    }
}
