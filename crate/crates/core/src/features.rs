//! Fixed-length feature matrices for every utterance of a manifest.

use protospoof_dsp::{fix_length, read_wav, FeatureCache, Frontend, FrontendConfig, FIXED_FRAMES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::{BONAFIDE, SPOOF};
use crate::manifest::{Label, Manifest};
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub utt: String,
    pub label: Label,
    pub attack: String,
    /// Row-major `frames x dims`.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub frames: usize,
    pub dims: usize,
    pub samples: Vec<Sample>,
}

impl FeatureSet {
    pub fn new(frames: usize, dims: usize, samples: Vec<Sample>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.data.len() != frames * dims) {
            return Err(Error::Data(format!("`{}` has {} values, expected {}", s.utt, s.data.len(), frames * dims)));
        }
        Ok(Self { frames, dims, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.index()).collect()
    }

    /// Sample indices per class, bonafide first.
    pub fn by_class(&self) -> [Vec<usize>; 2] {
        let mut out = [Vec::new(), Vec::new()];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label.index()].push(i);
        }
        out
    }

    pub fn require_both_classes(&self, what: &str) -> Result<()> {
        let c = self.by_class();
        for (k, name) in [(BONAFIDE, "bonafide"), (SPOOF, "spoof")] {
            if c[k].is_empty() {
                return Err(Error::Data(format!("{what} has no {name} utterances")));
            }
        }
        Ok(())
    }

    /// Digest over ids, labels and feature values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.frames as u64).to_le_bytes());
        h.update((self.dims as u64).to_le_bytes());
        for s in &self.samples {
            h.update(s.utt.as_bytes());
            h.update([0, s.label.index() as u8]);
            for v in &s.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Loads audio, computes front-end features (through the cache when given)
/// and fixes every matrix to the standard frame count. Long utterances are
/// cropped at an offset drawn from a per-utterance stream of `seed`.
pub fn extract_features(
    manifest: &Manifest,
    cfg: &FrontendConfig,
    seed: u64,
    cache: Option<&FeatureCache>,
) -> Result<FeatureSet> {
    let fe = Frontend::new(cfg.clone())?;
    let hash = cfg.hash();
    let samples = manifest
        .records
        .par_iter()
        .map(|r| -> Result<Sample> {
            let compute = || -> protospoof_dsp::Result<_> {
                let w = read_wav(manifest.audio_path(r), cfg.sample_rate)?;
                fe.compute(&w)
            };
            let raw = match cache {
                Some(c) => c.get_or_compute(&r.utt, hash, compute)?,
                None => compute()?,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &format!("crop/{}", r.utt)));
            let fixed = fix_length(&raw, FIXED_FRAMES, &mut rng)?;
            Ok(Sample { utt: r.utt.clone(), label: r.label, attack: r.attack.clone(), data: fixed.data })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(FIXED_FRAMES, cfg.feature_dim(), samples)
}
