//! Corpus-level stages shared by the command line and the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use protospoof_dsp::{read_wav, write_wav, AugmentKind, AugmentSpec, FeatureCache};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::features::{extract_features, FeatureSet};
use crate::manifest::{Manifest, ManifestRecord};
use crate::net::EmbeddingNet;
use crate::scoring::{build_prototype_bank, score_set, PrototypeBank};
use crate::seeds;
use crate::trainer::{TrainOutcome, Trainer};

/// Which augmented copies to add next to every original utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kinds: Vec<AugmentKind>,
}

impl AugmentPolicy {
    /// Codec (a-law and wideband), pitch and reverb copies: five-fold data.
    pub fn full() -> Self {
        Self { kinds: AugmentKind::ALL.to_vec() }
    }

    pub fn empty() -> Self {
        Self { kinds: Vec::new() }
    }

    pub fn growth(&self) -> usize {
        1 + self.kinds.len()
    }
}

impl FromStr for AugmentPolicy {
    type Err = Error;

    /// Comma-separated tokens among `codec`, `alaw`, `wideband`, `pitch`,
    /// `reverb`; `none` or an empty string gives the empty policy.
    fn from_str(s: &str) -> Result<Self> {
        let mut kinds = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty() && *t != "none") {
            let add: &[AugmentKind] = match tok {
                "codec" => &[AugmentKind::CodecAlaw, AugmentKind::BandlimitWideband],
                "alaw" => &[AugmentKind::CodecAlaw],
                "wideband" => &[AugmentKind::BandlimitWideband],
                "pitch" => &[AugmentKind::Pitch],
                "reverb" => &[AugmentKind::Reverb],
                other => return Err(Error::Config(format!("unknown augmentation `{other}`"))),
            };
            for k in add {
                if !kinds.contains(k) {
                    kinds.push(*k);
                }
            }
        }
        kinds.sort_by_key(|k| AugmentKind::ALL.iter().position(|a| a == k));
        Ok(Self { kinds })
    }
}

fn absolute(p: PathBuf) -> Result<PathBuf> {
    std::path::absolute(&p).map_err(io_err(format!("resolving {}", p.display())))
}

/// Writes augmented copies under `out_dir/wav` and returns (and saves as
/// `out_dir/manifest.tsv`) a manifest holding the originals followed by
/// their copies. Copy ids are `<utt>_<kind>`.
pub fn build_augmented_manifest(manifest: &Manifest, policy: &AugmentPolicy, out_dir: &Path, seed: u64) -> Result<Manifest> {
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(io_err(format!("creating {}", wav_dir.display())))?;
    let copies = manifest
        .records
        .par_iter()
        .map(|r| -> Result<Vec<ManifestRecord>> {
            let src = absolute(manifest.audio_path(r))?;
            let mut out = vec![ManifestRecord::new(&r.speaker, &r.utt, &r.attack, r.label, src.clone())?];
            if policy.kinds.is_empty() {
                return Ok(out);
            }
            let w = read_wav(&src, protospoof_dsp::CANONICAL_RATE)?;
            for &kind in &policy.kinds {
                let spec = AugmentSpec::sample(kind, protospoof_dsp::derive_seed(seed, &r.utt, kind));
                let utt = format!("{}_{}", r.utt, kind.suffix());
                let rel = Path::new("wav").join(format!("{utt}.wav"));
                write_wav(out_dir.join(&rel), &spec.apply(&w)?)?;
                out.push(ManifestRecord::new(&r.speaker, &utt, &r.attack, r.label, rel)?);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest::new(copies.into_iter().flatten().collect(), out_dir)?;
    m.save(out_dir.join("manifest.tsv"))?;
    Ok(m)
}

/// Features for `manifest` under the run's front-end, crop seed and cache.
pub fn features_for(cfg: &RunConfig, manifest: &Manifest) -> Result<FeatureSet> {
    let cache = cfg.paths.cache_dir.as_ref().map(FeatureCache::new).transpose()?;
    extract_features(manifest, &cfg.frontend, seeds::derive(cfg.seed, "crop"), cache.as_ref())
}

/// Trains a fresh network on `train`, selecting on `dev`.
pub fn train_run(cfg: &RunConfig, train: &FeatureSet, dev: &FeatureSet, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = cfg.resolved()?;
    if train.dims != cfg.frontend.feature_dim() {
        return Err(Error::Config(format!(
            "features have {} dims but the front-end produces {}",
            train.dims,
            cfg.frontend.feature_dim()
        )));
    }
    let net = EmbeddingNet::new(cfg.net.clone())?;
    Trainer::new(net, cfg.loss.clone(), cfg.train.clone())?.train(train, dev, out_dir)
}

/// Bank from `train` and scores for `eval`, in eval order.
pub fn bank_and_scores(cfg: &RunConfig, net: &EmbeddingNet, train: &FeatureSet, eval: &FeatureSet, id: &str) -> Result<(PrototypeBank, Vec<(String, f64)>)> {
    let bank = build_prototype_bank(net, train, id)?;
    let scores = score_set(net, &bank, eval, cfg.scoring.distance)?;
    Ok((bank, scores))
}
