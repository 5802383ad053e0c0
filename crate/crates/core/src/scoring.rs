//! Prototype-bank scoring, EER, min-tDCF and linear logistic score fusion.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use protospoof_tensor::{sigmoid, softplus};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, io_err, Error, Result};
use crate::features::FeatureSet;
use crate::loss::{sq_euclidean, BONAFIDE, SPOOF};
use crate::net::EmbeddingNet;
use crate::trainer::embed_all;

/// Distance used when scoring against the prototype bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Squared,
    Unsquared,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let d2 = sq_euclidean(a, b);
        match self {
            Distance::Squared => d2,
            Distance::Unsquared => d2.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub bonafide: Vec<f64>,
    pub spoof: Vec<f64>,
    pub checkpoint_id: String,
    pub train_hash: String,
}

impl PrototypeBank {
    /// Class means of `embs`; both classes must be present.
    pub fn from_embeddings(embs: &[Vec<f64>], labels: &[usize], checkpoint_id: &str, train_hash: &str) -> Result<Self> {
        let dim = embs.first().map(Vec::len).ok_or_else(|| Error::Data("no training embeddings".into()))?;
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (e, &l) in embs.iter().zip(labels) {
            if e.len() != dim {
                return Err(Error::Data("training embeddings differ in dimension".into()));
            }
            sums[l].iter_mut().zip(e).for_each(|(s, v)| *s += v);
            counts[l] += 1;
        }
        for (k, name) in [(BONAFIDE, "bonafide"), (SPOOF, "spoof")] {
            if counts[k] == 0 {
                return Err(Error::Data(format!("training set has no {name} utterances")));
            }
        }
        let [mut b, mut s] = sums;
        b.iter_mut().for_each(|v| *v /= counts[BONAFIDE] as f64);
        s.iter_mut().for_each(|v| *v /= counts[SPOOF] as f64);
        let bank = Self { bonafide: b, spoof: s, checkpoint_id: checkpoint_id.into(), train_hash: train_hash.into() };
        if !bank.bonafide.iter().chain(&bank.spoof).all(|v| v.is_finite()) {
            return Err(Error::Data("prototype bank is not finite".into()));
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(format!("writing {}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Embeds the whole training set in eval mode and averages per class.
pub fn build_prototype_bank(net: &EmbeddingNet, train: &FeatureSet, checkpoint_id: &str) -> Result<PrototypeBank> {
    train.require_both_classes("training set")?;
    let embs = embed_all(net, train)?;
    PrototypeBank::from_embeddings(&embs, &train.labels(), checkpoint_id, &train.fingerprint())
}

/// `d(e, p_spoof) − d(e, p_bonafide)`; positive leans bonafide.
pub fn cm_score(e: &[f64], bank: &PrototypeBank, dist: Distance) -> Result<f64> {
    if e.len() != bank.bonafide.len() {
        return Err(Error::Data(format!("embedding has {} dims, bank has {}", e.len(), bank.bonafide.len())));
    }
    Ok(dist.eval(e, &bank.spoof) - dist.eval(e, &bank.bonafide))
}

/// Scores every sample of `data`, keyed by utterance id in input order.
pub fn score_set(net: &EmbeddingNet, bank: &PrototypeBank, data: &FeatureSet, dist: Distance) -> Result<Vec<(String, f64)>> {
    let embs = embed_all(net, data)?;
    data.samples.iter().zip(&embs).map(|(s, e)| Ok((s.utt.clone(), cm_score(e, bank, dist)?))).collect()
}

/// One operating point: everything scoring `>= threshold` is accepted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at every distinct score and at `+inf`, in increasing
/// threshold order. Ties are grouped so every point is attainable.
pub fn roc_points(target: &[f64], nontarget: &[f64]) -> Result<Vec<RocPoint>> {
    if target.is_empty() || nontarget.is_empty() {
        return Err(Error::Data("both score classes must be non-empty".into()));
    }
    if !target.iter().chain(nontarget).all(|s| s.is_finite()) {
        return Err(Error::Data("scores must be finite".into()));
    }
    let mut all: Vec<(f64, bool)> = target.iter().map(|&s| (s, true)).chain(nontarget.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (target.len() as f64, nontarget.len() as f64);
    let mut points = Vec::with_capacity(all.len() + 1);
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        points.push(RocPoint { threshold: t, p_miss: below_t as f64 / nt, p_fa: (nontarget.len() - below_n) as f64 / nn });
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                below_t += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint { threshold: f64::INFINITY, p_miss: 1.0, p_fa: 0.0 });
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate by linear interpolation between the two adjacent
/// operating points where false alarms drop to (or below) misses.
pub fn eer(bonafide: &[f64], spoof: &[f64]) -> Result<EerResult> {
    let pts = roc_points(bonafide, spoof)?;
    let i = pts.iter().position(|p| p.p_fa <= p.p_miss).expect("last point has p_fa 0 and p_miss 1");
    let b = pts[i];
    let gap_b = b.p_fa - b.p_miss;
    if i == 0 || gap_b == 0.0 {
        return Ok(EerResult { eer: b.p_miss, threshold: b.threshold });
    }
    let a = pts[i - 1];
    let gap_a = a.p_fa - a.p_miss;
    let lambda = gap_a / (gap_a - gap_b);
    let eer = a.p_miss + lambda * (b.p_miss - a.p_miss);
    let threshold = if b.threshold.is_finite() { a.threshold + lambda * (b.threshold - a.threshold) } else { a.threshold };
    Ok(EerResult { eer, threshold })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdcfParams {
    pub p_target: f64,
    pub p_nontarget: f64,
    pub p_spoof: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    /// Fixed ASV error rates, used when no ASV score file is given.
    pub asv: Option<AsvErrors>,
}

impl Default for TdcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.9405,
            p_nontarget: 0.0095,
            p_spoof: 0.05,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
            c_miss_cm: 1.0,
            c_fa_cm: 10.0,
            asv: None,
        }
    }
}

impl TdcfParams {
    pub fn validate(&self) -> Result<()> {
        let priors = [self.p_target, self.p_nontarget, self.p_spoof];
        if priors.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return config_err("t-DCF priors must lie in [0, 1]");
        }
        let sum: f64 = priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return config_err(format!("t-DCF priors sum to {sum}, not 1"));
        }
        if [self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm].iter().any(|c| !(*c > 0.0)) {
            return config_err("t-DCF costs must be positive");
        }
        if self.p_spoof == 0.0 {
            return config_err("spoof prior is 0: the normalized t-DCF is undefined");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsvErrors {
    pub p_miss: f64,
    pub p_fa: f64,
    /// Fraction of spoof trials the ASV rejects.
    pub p_miss_spoof: f64,
}

impl AsvErrors {
    /// Error rates of an ASV system at its own EER threshold.
    pub fn from_scores(target: &[f64], nontarget: &[f64], spoof: &[f64]) -> Result<Self> {
        if spoof.is_empty() {
            return Err(Error::Data("ASV scores have no spoof trials".into()));
        }
        let t = eer(target, nontarget)?.threshold;
        let below = |xs: &[f64]| xs.iter().filter(|&&s| s < t).count() as f64 / xs.len() as f64;
        Ok(Self { p_miss: below(target), p_fa: 1.0 - below(nontarget), p_miss_spoof: below(spoof) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdcfResult {
    pub min_tdcf: f64,
    pub threshold: f64,
}

/// Minimum over CM thresholds of the normalized tandem detection cost
/// `(C1·P_miss_cm + C2·P_fa_cm) / min(C1, C2)`.
pub fn min_tdcf(bonafide: &[f64], spoof: &[f64], asv: &AsvErrors, p: &TdcfParams) -> Result<TdcfResult> {
    p.validate()?;
    let c1 = p.p_target * (p.c_miss_cm - p.c_miss_asv * asv.p_miss) - p.p_nontarget * p.c_fa_asv * asv.p_fa;
    let c2 = p.c_fa_cm * p.p_spoof * (1.0 - asv.p_miss_spoof);
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(Error::Config(format!("t-DCF coefficients C1 = {c1}, C2 = {c2} must both be positive")));
    }
    let norm = c1.min(c2);
    let mut best = TdcfResult { min_tdcf: f64::INFINITY, threshold: f64::NAN };
    for pt in roc_points(bonafide, spoof)? {
        let v = (c1 * pt.p_miss + c2 * pt.p_fa) / norm;
        if v < best.min_tdcf {
            best = TdcfResult { min_tdcf: v, threshold: pt.threshold };
        }
    }
    Ok(best)
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[(String, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (utt, s) in scores {
        writeln!(out, "{utt}\t{s}").expect("writing to a String");
    }
    fs::write(path, out).map_err(io_err(format!("writing {}", path.display())))
}

pub fn parse_scores(text: &str, source: &Path) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| Error::Manifest { path: source.to_path_buf(), line: i + 1, msg };
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [utt, score] = cols[..] else {
            return Err(at(format!("expected `utt score`, found {} columns", cols.len())));
        };
        let s: f64 = score.parse().map_err(|_| at(format!("bad score `{score}`")))?;
        if !s.is_finite() {
            return Err(at(format!("score for `{utt}` is not finite")));
        }
        if !seen.insert(utt.to_string()) {
            return Err(at(format!("duplicate utterance id `{utt}`")));
        }
        out.push((utt.to_string(), s));
    }
    Ok(out)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    parse_scores(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsvKey {
    Target,
    Nontarget,
    Spoof,
}

/// ASV score file: `utt key score` with key in target / nontarget / spoof.
pub fn read_asv_scores(path: impl AsRef<Path>) -> Result<Vec<(AsvKey, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| Error::Manifest { path: path.to_path_buf(), line: i + 1, msg };
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [_, key, score] = cols[..] else {
            return Err(at(format!("expected `utt key score`, found {} columns", cols.len())));
        };
        let key = match key {
            "target" => AsvKey::Target,
            "nontarget" => AsvKey::Nontarget,
            "spoof" => AsvKey::Spoof,
            other => return Err(at(format!("bad ASV key `{other}`"))),
        };
        let s: f64 = score.parse().map_err(|_| at(format!("bad score `{score}`")))?;
        out.push((key, s));
    }
    Ok(out)
}

pub fn asv_errors_from_file(path: impl AsRef<Path>) -> Result<AsvErrors> {
    let rows = read_asv_scores(path)?;
    let pick = |k: AsvKey| rows.iter().filter(|r| r.0 == k).map(|r| r.1).collect::<Vec<_>>();
    AsvErrors::from_scores(&pick(AsvKey::Target), &pick(AsvKey::Nontarget), &pick(AsvKey::Spoof))
}

/// Splits scored utterances into (bonafide, spoof) by `labels`; every scored
/// id must have a key.
pub fn split_by_label(scores: &[(String, f64)], labels: &HashMap<String, usize>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut out = (Vec::new(), Vec::new());
    let missing: Vec<&str> = scores.iter().filter(|(u, _)| !labels.contains_key(u)).map(|(u, _)| u.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("no key for {} scored utterances: {}", missing.len(), preview(&missing))));
    }
    for (u, s) in scores {
        if labels[u] == BONAFIDE {
            out.0.push(*s);
        } else {
            out.1.push(*s);
        }
    }
    if out.0.is_empty() || out.1.is_empty() {
        return Err(Error::Data("scores cover only one class".into()));
    }
    Ok(out)
}

fn preview(ids: &[&str]) -> String {
    let shown: Vec<&str> = ids.iter().take(10).copied().collect();
    let more = if ids.len() > 10 { format!(" (+{} more)", ids.len() - 10) } else { String::new() };
    format!("{}{more}", shown.join(", "))
}

/// Aligns several score lists on the ids of the first one.
pub fn align(systems: &[Vec<(String, f64)>]) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let first = systems.first().ok_or_else(|| Error::Data("no score lists to align".into()))?;
    let ids: Vec<String> = first.iter().map(|(u, _)| u.clone()).collect();
    let mut cols = Vec::with_capacity(systems.len());
    for (k, sys) in systems.iter().enumerate() {
        let map: HashMap<&str, f64> = sys.iter().map(|(u, s)| (u.as_str(), *s)).collect();
        let missing: Vec<&str> = ids.iter().filter(|u| !map.contains_key(u.as_str())).map(String::as_str).collect();
        let id_set: HashSet<&str> = ids.iter().map(String::as_str).collect();
        let extra: Vec<&str> = sys.iter().map(|(u, _)| u.as_str()).filter(|u| !id_set.contains(u)).collect();
        if !missing.is_empty() || !extra.is_empty() {
            let mut msg = format!("score list {k} does not match list 0:");
            if !missing.is_empty() {
                msg += &format!(" missing {}", preview(&missing));
            }
            if !extra.is_empty() {
                msg += &format!(" unexpected {}", preview(&extra));
            }
            return Err(Error::Data(msg));
        }
        cols.push(ids.iter().map(|u| map[u.as_str()]).collect());
    }
    Ok((ids, cols))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionOptions {
    /// Effective bonafide prior for class weighting; `None` weights every
    /// trial equally.
    pub prior: Option<f64>,
    pub l2: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self { prior: Some(0.5), l2: 0.0, max_iter: 200, grad_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub weights: Vec<f64>,
    pub offset: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl Fusion {
    pub fn apply(&self, systems: &[Vec<f64>]) -> Result<Vec<f64>> {
        if systems.len() != self.weights.len() {
            return Err(Error::Data(format!("fusion expects {} systems, got {}", self.weights.len(), systems.len())));
        }
        let n = systems[0].len();
        if systems.iter().any(|s| s.len() != n) {
            return Err(Error::Data("systems differ in trial count".into()));
        }
        Ok((0..n).map(|i| self.offset + systems.iter().zip(&self.weights).map(|(s, w)| w * s[i]).sum::<f64>()).collect())
    }
}

/// Solves `a·x = b` for a small dense system by Gaussian elimination with
/// partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

struct FusionObjective<'a> {
    systems: &'a [Vec<f64>],
    /// +1 bonafide, −1 spoof
    sign: Vec<f64>,
    weight: Vec<f64>,
    shift: f64,
    l2: f64,
}

impl FusionObjective<'_> {
    fn feature(&self, i: usize, k: usize) -> f64 {
        if k < self.systems.len() {
            self.systems[k][i]
        } else {
            1.0
        }
    }

    fn margin(&self, theta: &[f64], i: usize) -> f64 {
        let k = self.systems.len();
        let s: f64 = (0..k).map(|j| theta[j] * self.systems[j][i]).sum::<f64>() + theta[k];
        self.sign[i] * (s + self.shift)
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let k = self.systems.len();
        let data: f64 = (0..self.sign.len()).map(|i| self.weight[i] * softplus(-self.margin(theta, i))).sum();
        data + 0.5 * self.l2 * theta[..k].iter().map(|w| w * w).sum::<f64>()
    }

    fn grad_hess(&self, theta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = theta.len();
        let k = self.systems.len();
        let mut g = vec![0.0; d];
        let mut h = vec![vec![0.0; d]; d];
        for i in 0..self.sign.len() {
            let m = self.margin(theta, i);
            let p = sigmoid(-m);
            let gi = -self.weight[i] * self.sign[i] * p;
            let hi = self.weight[i] * p * (1.0 - p);
            for a in 0..d {
                let fa = self.feature(i, a);
                g[a] += gi * fa;
                for b in 0..=a {
                    h[a][b] += hi * fa * self.feature(i, b);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[b][a] = h[a][b];
            }
        }
        for j in 0..k {
            g[j] += self.l2 * theta[j];
            h[j][j] += self.l2;
        }
        (g, h)
    }
}

/// Linear logistic fusion `offset + Σ w_k·s_k` fitted by damped Newton
/// iterations until the gradient norm drops below `opts.grad_tol`.
pub fn train_fusion(systems: &[Vec<f64>], labels: &[usize], opts: &FusionOptions) -> Result<Fusion> {
    if systems.is_empty() {
        return Err(Error::Data("fusion needs at least one system".into()));
    }
    let n = labels.len();
    if systems.iter().any(|s| s.len() != n) {
        return Err(Error::Data("every system needs one score per labeled trial".into()));
    }
    let n_bona = labels.iter().filter(|&&l| l == BONAFIDE).count();
    let n_spoof = n - n_bona;
    if n_bona == 0 || n_spoof == 0 {
        return Err(Error::Data("fusion needs both classes".into()));
    }
    let (weight, shift) = match opts.prior {
        Some(p) => {
            if !(p > 0.0 && p < 1.0) {
                return config_err(format!("fusion prior {p} outside (0, 1)"));
            }
            let w = labels.iter().map(|&l| if l == BONAFIDE { p / n_bona as f64 } else { (1.0 - p) / n_spoof as f64 }).collect();
            (w, (p / (1.0 - p)).ln())
        }
        None => (vec![1.0 / n as f64; n], 0.0),
    };
    let sign = labels.iter().map(|&l| if l == BONAFIDE { 1.0 } else { -1.0 }).collect();
    let obj = FusionObjective { systems, sign, weight, shift, l2: opts.l2 };
    let d = systems.len() + 1;
    let mut theta = vec![0.0; d];
    let mut f = obj.value(&theta);
    let mut iterations = 0;
    let mut gnorm = f64::INFINITY;
    while iterations < opts.max_iter {
        let (g, mut h) = obj.grad_hess(&theta);
        gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < opts.grad_tol {
            break;
        }
        iterations += 1;
        let ridge = 1e-12 * (0..d).map(|i| h[i][i]).fold(0.0, f64::max).max(1e-300);
        (0..d).for_each(|i| h[i][i] += ridge);
        let step = solve(h, g.iter().map(|v| -v).collect()).unwrap_or_else(|| g.iter().map(|v| -v).collect());
        let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            let fc = obj.value(&cand);
            if fc <= f + 1e-4 * t * slope || t < 1e-12 {
                if fc <= f {
                    theta = cand;
                    f = fc;
                }
                break;
            }
            t *= 0.5;
        }
        if t < 1e-12 {
            break;
        }
    }
    let k = systems.len();
    Ok(Fusion { weights: theta[..k].to_vec(), offset: theta[k], iterations, grad_norm: gnorm })
}

/// Writes `utt label attack e_1 .. e_M` rows for every sample.
pub fn export_embeddings(net: &EmbeddingNet, data: &FeatureSet, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let embs = embed_all(net, data)?;
    let mut out = String::new();
    for (s, e) in data.samples.iter().zip(&embs) {
        write!(out, "{}\t{}\t{}", s.utt, s.label, s.attack).expect("writing to a String");
        for v in e {
            write!(out, "\t{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(format!("writing {}", path.display())))?;
    Ok(embs.len())
}
