//! Training objectives: prototypical, softmax, AM-softmax, OC-softmax and
//! pairwise contrastive losses, plus plain-number reference forms used for
//! scoring and monitoring.

use protospoof_tensor::{softplus, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub const BONAFIDE: usize = 0;
pub const SPOOF: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Prototypical,
    Softmax,
    AmSoftmax,
    OcSoftmax,
    Contrastive,
}

impl LossKind {
    pub fn is_episodic(self) -> bool {
        self == LossKind::Prototypical
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub am_scale: f64,
    pub am_margin: f64,
    pub oc_alpha: f64,
    /// Bonafide cosine margin.
    pub oc_m0: f64,
    /// Spoof cosine margin.
    pub oc_m1: f64,
    pub contrastive_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Prototypical,
            am_scale: 30.0,
            am_margin: 0.2,
            oc_alpha: 20.0,
            oc_m0: 0.9,
            oc_m1: 0.2,
            contrastive_margin: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.am_scale > 0.0 && self.oc_alpha > 0.0 && self.contrastive_margin > 0.0) {
            return config_err("loss scales and the contrastive margin must be positive");
        }
        for (name, m) in [("am_margin", self.am_margin), ("oc_m0", self.oc_m0), ("oc_m1", self.oc_m1)] {
            if !(0.0..=1.0).contains(&m) {
                return config_err(format!("{name} = {m} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Head parameters stored alongside the network under `loss.*`.
#[derive(Debug, Clone, Copy)]
pub enum LossHead {
    None,
    Affine { w: ParamId, b: ParamId },
    /// Class weight vectors as rows `[2, M]`.
    Cosine { w: ParamId },
    /// Single target direction `[1, M]`.
    OneClass { w: ParamId },
}

impl LossHead {
    /// Creates (or reuses, when already present) the head for `cfg.kind`.
    pub fn attach(cfg: &LossConfig, store: &mut ParamStore, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_7373);
        let mut get = |name: &str, shape: &[usize], std: f64| -> Result<ParamId> {
            match store.id(name) {
                Ok(id) => Ok(id),
                Err(_) => Ok(store.insert(name, Tensor::randn(shape, std, &mut rng), true)?),
            }
        };
        let std = (1.0 / dim as f64).sqrt();
        Ok(match cfg.kind {
            LossKind::Prototypical | LossKind::Contrastive => LossHead::None,
            LossKind::Softmax => {
                let w = get("loss.fc.w", &[dim, 2], std)?;
                let b = get("loss.fc.b", &[2], 0.0)?;
                LossHead::Affine { w, b }
            }
            LossKind::AmSoftmax => LossHead::Cosine { w: get("loss.am.w", &[2, dim], std)? },
            LossKind::OcSoftmax => LossHead::OneClass { w: get("loss.oc.w", &[1, dim], std)? },
        })
    }
}

/// Prototypes (class means of `support` rows per group), negative squared
/// distances as logits, and the summed negative log posterior of each
/// query's class.
pub fn prototypical_loss(
    g: &mut Graph,
    support: Var,
    support_groups: &[Vec<usize>],
    queries: Var,
    query_labels: &[usize],
) -> Result<Var> {
    let protos = g.group_mean(support, support_groups)?;
    let d = g.sq_dist(queries, protos)?;
    let logits = g.scale(d, -1.0)?;
    Ok(g.cross_entropy(logits, query_labels, false)?)
}

/// Mean cross-entropy of an affine 2-class head.
pub fn softmax_ce(g: &mut Graph, emb: Var, w: Var, b: Var, labels: &[usize]) -> Result<Var> {
    let logits = g.affine(emb, w, Some(b))?;
    Ok(g.cross_entropy(logits, labels, true)?)
}

/// `[R, M] -> [M, R]`
fn transpose2(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x3 = g.reshape(x, &[1, s[0], s[1]])?;
    let t = g.transpose_last2(x3)?;
    Ok(g.reshape(t, &[s[1], s[0]])?)
}

/// Cosine similarity of every embedding row with every weight row.
fn cosines(g: &mut Graph, emb: Var, w: Var) -> Result<Var> {
    let en = g.l2_normalize_rows(emb)?;
    let wn = g.l2_normalize_rows(w)?;
    let wt = transpose2(g, wn)?;
    Ok(g.matmul(en, wt)?)
}

/// Additive-margin softmax over `s·(cos θ − m·[true class])`, batch mean.
pub fn am_softmax(g: &mut Graph, emb: Var, w: Var, labels: &[usize], s: f64, m: f64) -> Result<Var> {
    let cos = cosines(g, emb, w)?;
    let k = g.shape(cos)[1];
    let mut margin = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        margin[i * k + l] = m;
    }
    let margin = g.input(Tensor::new(vec![labels.len(), k], margin)?)?;
    let shifted = g.sub(cos, margin)?;
    let logits = g.scale(shifted, s)?;
    Ok(g.cross_entropy(logits, labels, true)?)
}

/// One-class softmax: `softplus(α(m0 − cos θ))` for bonafide and
/// `softplus(α(cos θ − m1))` for spoof, batch mean.
pub fn oc_softmax(g: &mut Graph, emb: Var, w: Var, labels: &[usize], alpha: f64, m0: f64, m1: f64) -> Result<Var> {
    let cos = cosines(g, emb, w)?;
    let n = labels.len();
    let sign: Vec<f64> = labels.iter().map(|&l| if l == BONAFIDE { -1.0 } else { 1.0 }).collect();
    let offset: Vec<f64> = labels.iter().map(|&l| if l == BONAFIDE { m0 } else { -m1 }).collect();
    let sign = g.input(Tensor::new(vec![n, 1], sign)?)?;
    let offset = g.input(Tensor::new(vec![n, 1], offset)?)?;
    let signed = g.mul(cos, sign)?;
    let arg = g.add(signed, offset)?;
    let arg = g.scale(arg, alpha)?;
    let per = g.softplus(arg)?;
    Ok(g.mean(per)?)
}

/// Mean over all within-batch pairs of `d²` (same class) or
/// `max(0, margin − d)²` (different class).
pub fn contrastive_loss(g: &mut Graph, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
    Ok(g.contrastive(emb, labels, margin)?)
}

/// Non-episodic objective for `emb` under `cfg`.
pub fn batch_loss(g: &mut Graph, store: &ParamStore, cfg: &LossConfig, head: LossHead, emb: Var, labels: &[usize]) -> Result<Var> {
    match (cfg.kind, head) {
        (LossKind::Softmax, LossHead::Affine { w, b }) => {
            let (w, b) = (g.param(store, w)?, g.param(store, b)?);
            softmax_ce(g, emb, w, b, labels)
        }
        (LossKind::AmSoftmax, LossHead::Cosine { w }) => {
            let w = g.param(store, w)?;
            am_softmax(g, emb, w, labels, cfg.am_scale, cfg.am_margin)
        }
        (LossKind::OcSoftmax, LossHead::OneClass { w }) => {
            let w = g.param(store, w)?;
            oc_softmax(g, emb, w, labels, cfg.oc_alpha, cfg.oc_m0, cfg.oc_m1)
        }
        (LossKind::Contrastive, _) => contrastive_loss(g, emb, labels, cfg.contrastive_margin),
        (kind, _) => Err(Error::Config(format!("{kind:?} has no batch form or its head is missing"))),
    }
}

/// Class prototypes, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Vec<Vec<f64>>,
}

/// Mean of each class's support embeddings.
pub fn compute_prototypes(classes: &[Vec<Vec<f64>>]) -> Result<PrototypeSet> {
    let mut prototypes = Vec::with_capacity(classes.len());
    for (k, members) in classes.iter().enumerate() {
        let first = members
            .first()
            .ok_or_else(|| Error::Data(format!("class {k} has no support embeddings")))?;
        let mut p = vec![0.0; first.len()];
        for e in members {
            if e.len() != p.len() {
                return Err(Error::Data("support embeddings differ in dimension".into()));
            }
            p.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        }
        p.iter_mut().for_each(|a| *a /= members.len() as f64);
        prototypes.push(p);
    }
    Ok(PrototypeSet { prototypes })
}

pub fn sq_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Softmax over negative squared distances to each prototype.
pub fn protonet_posterior(query: &[f64], protos: &PrototypeSet) -> Vec<f64> {
    let neg: Vec<f64> = protos.prototypes.iter().map(|p| -sq_euclidean(query, p)).collect();
    let max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = neg.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `−log p(label | query)` computed in log-sum-exp form.
pub fn protonet_nll(query: &[f64], label: usize, protos: &PrototypeSet) -> f64 {
    let neg: Vec<f64> = protos.prototypes.iter().map(|p| -sq_euclidean(query, p)).collect();
    let max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + neg.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - neg[label]
}

/// Per-sample OC-softmax value for a known cosine.
pub fn oc_softmax_value(cos: f64, label: usize, alpha: f64, m0: f64, m1: f64) -> f64 {
    if label == BONAFIDE {
        softplus(alpha * (m0 - cos))
    } else {
        softplus(alpha * (cos - m1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_closed_form() {
        let protos = PrototypeSet { prototypes: vec![vec![0.0, 0.0], vec![3f64.ln().sqrt(), 0.0]] };
        let p = protonet_posterior(&[0.0, 0.0], &protos);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = LossConfig::default();
        assert!(c.validate().is_ok());
        c.am_margin = 1.5;
        assert!(c.validate().is_err());
        let c = LossConfig { oc_alpha: 0.0, ..LossConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_class_is_an_error() {
        assert!(compute_prototypes(&[vec![vec![1.0]], vec![]]).is_err());
    }
}
