//! Episodic training with a prototypical objective, or conventional
//! mini-batch training for the other losses, with dev-set model selection.

use std::fs;
use std::io::Write;
use std::path::Path;

use protospoof_tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, io_err, Error, Result};
use crate::features::FeatureSet;
use crate::loss::{self, sq_euclidean, LossConfig, LossHead, PrototypeSet, BONAFIDE, SPOOF};
use crate::net::{EmbeddingNet, Mode};
use crate::seeds;

const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPreset {
    Asvspoof2019,
    Asvspoof2021,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Supports per class.
    pub n_support: usize,
    /// Queries per class.
    pub n_query: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between decays.
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Mini-batch size for the non-episodic losses.
    pub batch_size: usize,
    /// Take one optimizer step per query instead of one per episode.
    pub per_query_steps: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(TrainPreset::Asvspoof2019)
    }
}

impl TrainConfig {
    pub fn preset(p: TrainPreset) -> Self {
        let base = Self {
            n_support: 20,
            n_query: 20,
            episodes_per_epoch: 500,
            epochs: 20,
            lr: 0.0003,
            lr_decay: 0.5,
            lr_decay_every: 10,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 64,
            per_query_steps: false,
            seed: 0,
        };
        match p {
            TrainPreset::Asvspoof2019 => base,
            TrainPreset::Asvspoof2021 => Self {
                episodes_per_epoch: 1000,
                epochs: 100,
                lr: 0.0005,
                lr_decay_every: 15,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_support == 0 || self.n_query == 0 {
            return config_err("n_support and n_query must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return config_err("lr must be a finite non-negative number");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return config_err("lr_decay must be in (0, 1] and lr_decay_every positive");
        }
        if self.batch_size < 2 {
            return config_err("batch_size must be at least 2");
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let k = epoch.saturating_sub(1) / self.lr_decay_every;
        self.lr * self.lr_decay.powi(k as i32)
    }

    pub fn episode_size(&self) -> usize {
        2 * (self.n_support + self.n_query)
    }
}

/// Sample indices of one episode, per class (bonafide first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub support: [Vec<usize>; 2],
    pub query: [Vec<usize>; 2],
}

impl Episode {
    pub fn len(&self) -> usize {
        self.support.iter().chain(&self.query).map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `n_s + n_q` distinct items per class uniformly without
/// replacement; the first `n_s` become supports, the rest queries.
pub fn sample_episode<R: rand::Rng + ?Sized>(by_class: &[Vec<usize>; 2], n_s: usize, n_q: usize, rng: &mut R) -> Result<Episode> {
    let mut support = [Vec::new(), Vec::new()];
    let mut query = [Vec::new(), Vec::new()];
    for (k, members) in by_class.iter().enumerate() {
        let need = n_s + n_q;
        if members.len() < need {
            let name = if k == BONAFIDE { "bonafide" } else { "spoof" };
            return Err(Error::Data(format!(
                "class {name} has {} utterances, an episode needs {need}",
                members.len()
            )));
        }
        let picks: Vec<usize> = index::sample(rng, members.len(), need).into_iter().map(|i| members[i]).collect();
        support[k] = picks[..n_s].to_vec();
        query[k] = picks[n_s..].to_vec();
    }
    Ok(Episode { support, query })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    /// Optimized quantity (sum over queries for the prototypical loss).
    pub loss: f64,
    /// Loss per query or per batch item, for monitoring.
    pub loss_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HistoryRecord {
    Episode { epoch: usize, episode: usize, loss: f64, loss_mean: f64, lr: f64 },
    Epoch { epoch: usize, mean_loss: f64, dev_accuracy: f64, best_dev_accuracy: f64, lr: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: EmbeddingNet,
    /// 0 when no epoch ran and `best` is the initial network.
    pub best_epoch: usize,
    pub best_dev_accuracy: Option<f64>,
    pub history: Vec<HistoryRecord>,
}

pub struct Trainer {
    net: EmbeddingNet,
    loss_cfg: LossConfig,
    head: LossHead,
    cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
}

fn stack_inputs(g: &mut Graph, data: &FeatureSet, idx: &[usize]) -> Result<Var> {
    let mut buf = Vec::with_capacity(idx.len() * data.frames * data.dims);
    for &i in idx {
        buf.extend_from_slice(&data.samples[i].data);
    }
    Ok(g.input(Tensor::new(vec![idx.len(), 1, data.frames, data.dims], buf)?)?)
}

impl Trainer {
    pub fn new(mut net: EmbeddingNet, loss_cfg: LossConfig, cfg: TrainConfig) -> Result<Self> {
        loss_cfg.validate()?;
        cfg.validate()?;
        let dim = net.config().embedding_dim;
        let head = LossHead::attach(&loss_cfg, net.store_mut(), dim, seeds::derive(cfg.seed, "loss-head"))?;
        let adam = Adam::new(
            AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::default() },
            net.store(),
        );
        let rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "episodes"));
        Ok(Self { net, loss_cfg, head, cfg, adam, rng })
    }

    pub fn net(&self) -> &EmbeddingNet {
        &self.net
    }

    pub fn into_net(self) -> EmbeddingNet {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.adam.set_lr(lr);
    }

    /// Records the prototypical episode loss on `g`, reading parameters from
    /// `store`. Supports and queries share one training-mode batch.
    pub fn episode_graph(
        net: &EmbeddingNet,
        store: &ParamStore,
        g: &mut Graph,
        data: &FeatureSet,
        ep: &Episode,
    ) -> Result<(Var, Vec<crate::net::BnUpdate>)> {
        let order: Vec<usize> = ep.support[0].iter().chain(&ep.support[1]).chain(&ep.query[0]).chain(&ep.query[1]).copied().collect();
        let x = stack_inputs(g, data, &order)?;
        let out = net.forward_with(store, g, x, Mode::Train)?;
        let (s0, s1) = (ep.support[0].len(), ep.support[1].len());
        let ns = s0 + s1;
        let support = g.select_rows(out.embedding, &(0..ns).collect::<Vec<_>>())?;
        let queries = g.select_rows(out.embedding, &(ns..order.len()).collect::<Vec<_>>())?;
        let groups = vec![(0..s0).collect(), (s0..ns).collect()];
        let labels: Vec<usize> = std::iter::repeat_n(BONAFIDE, ep.query[0].len())
            .chain(std::iter::repeat_n(SPOOF, ep.query[1].len()))
            .collect();
        let l = loss::prototypical_loss(g, support, &groups, queries, &labels)?;
        Ok((l, out.bn_updates))
    }

    fn step(&mut self, g: &Graph, l: Var, bn: &[crate::net::BnUpdate]) -> Result<f64> {
        let value = g.value(l).item();
        if !value.is_finite() {
            return Err(Error::Data("non-finite loss".into()));
        }
        let grads = g.backward(l)?;
        let store = self.net.store_mut();
        store.zero_grad();
        g.accumulate_param_grads(&grads, store)?;
        self.adam.step(store)?;
        self.net.apply_bn_updates(bn);
        Ok(value)
    }

    /// One optimizer step on the summed query loss of `ep` (or one step per
    /// query when configured).
    pub fn run_episode(&mut self, data: &FeatureSet, ep: &Episode) -> Result<StepResult> {
        let dump = |e: Error| {
            Error::Data(format!(
                "episode failed ({e}); supports {:?} / {:?}, queries {:?} / {:?}",
                ids(data, &ep.support[0]),
                ids(data, &ep.support[1]),
                ids(data, &ep.query[0]),
                ids(data, &ep.query[1])
            ))
        };
        let nq = ep.query[0].len() + ep.query[1].len();
        if !self.cfg.per_query_steps {
            let mut g = Graph::new();
            let (l, bn) = Self::episode_graph(&self.net, self.net.store(), &mut g, data, ep).map_err(dump)?;
            let loss = self.step(&g, l, &bn).map_err(dump)?;
            return Ok(StepResult { loss, loss_mean: loss / nq as f64 });
        }
        let mut total = 0.0;
        for k in 0..2 {
            for &q in &ep.query[k] {
                let mut single = Episode { support: ep.support.clone(), query: [Vec::new(), Vec::new()] };
                single.query[k].push(q);
                let mut g = Graph::new();
                let (l, bn) = Self::episode_graph(&self.net, self.net.store(), &mut g, data, &single).map_err(dump)?;
                total += self.step(&g, l, &bn).map_err(dump)?;
            }
        }
        Ok(StepResult { loss: total, loss_mean: total / nq as f64 })
    }

    /// Loss of `ep` under the current parameters without updating anything.
    pub fn episode_loss(&self, data: &FeatureSet, ep: &Episode) -> Result<f64> {
        let mut g = Graph::new();
        let (l, _) = Self::episode_graph(&self.net, self.net.store(), &mut g, data, ep)?;
        Ok(g.value(l).item())
    }

    /// One optimizer step of a non-episodic loss on the given samples.
    pub fn run_batch(&mut self, data: &FeatureSet, idx: &[usize]) -> Result<StepResult> {
        let mut g = Graph::new();
        let x = stack_inputs(&mut g, data, idx)?;
        let out = self.net.forward(&mut g, x, Mode::Train)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.samples[i].label.index()).collect();
        let l = loss::batch_loss(&mut g, self.net.store(), &self.loss_cfg, self.head, out.embedding, &labels)?;
        let loss = self
            .step(&g, l, &out.bn_updates)
            .map_err(|e| Error::Data(format!("batch failed ({e}); items {:?}", ids(data, idx))))?;
        Ok(StepResult { loss, loss_mean: loss })
    }

    /// Full training loop. Writes `init.ckpt`, `best.ckpt` and
    /// `history.jsonl` into `out_dir` when given.
    pub fn train(mut self, train: &FeatureSet, dev: &FeatureSet, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        train.require_both_classes("training set")?;
        dev.require_both_classes("dev set")?;
        let kind = self.loss_cfg.kind;
        let meta = |epoch: usize, acc: Option<f64>| serde_json::json!({ "epoch": epoch, "dev_accuracy": acc, "loss": kind });
        if let Some(d) = out_dir {
            fs::create_dir_all(d).map_err(io_err(format!("creating {}", d.display())))?;
            self.net.save(d.join("init.ckpt"), meta(0, None))?;
        }
        let mut best = self.net.clone();
        let mut best_epoch = 0;
        let mut best_acc: Option<f64> = None;
        let mut history = Vec::new();
        let by_class = train.by_class();
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        for epoch in 1..=self.cfg.epochs {
            let lr = self.cfg.lr_at_epoch(epoch);
            self.adam.set_lr(lr);
            let mut loss_sum = 0.0;
            for episode in 1..=self.cfg.episodes_per_epoch {
                let r = if self.loss_cfg.kind.is_episodic() {
                    let ep = sample_episode(&by_class, self.cfg.n_support, self.cfg.n_query, &mut self.rng)?;
                    self.run_episode(train, &ep)?
                } else {
                    let bs = self.cfg.batch_size.min(train.len());
                    if cursor + bs > order.len() {
                        order = (0..train.len()).collect();
                        order.shuffle(&mut self.rng);
                        cursor = 0;
                    }
                    let idx = order[cursor..cursor + bs].to_vec();
                    cursor += bs;
                    self.run_batch(train, &idx)?
                };
                loss_sum += r.loss_mean;
                history.push(HistoryRecord::Episode { epoch, episode, loss: r.loss, loss_mean: r.loss_mean, lr });
            }
            let acc = classify_dev(&self.net, train, dev)?;
            if best_acc.is_none_or(|b| acc > b) {
                best_acc = Some(acc);
                best_epoch = epoch;
                best = self.net.clone();
                if let Some(d) = out_dir {
                    best.save(d.join("best.ckpt"), meta(epoch, Some(acc)))?;
                }
            }
            history.push(HistoryRecord::Epoch {
                epoch,
                mean_loss: loss_sum / self.cfg.episodes_per_epoch.max(1) as f64,
                dev_accuracy: acc,
                best_dev_accuracy: best_acc.unwrap_or(acc),
                lr,
            });
        }
        if let Some(d) = out_dir {
            if best_epoch == 0 {
                best.save(d.join("best.ckpt"), meta(0, None))?;
            }
            write_history(&d.join("history.jsonl"), &history)?;
        }
        Ok(TrainOutcome { best, best_epoch, best_dev_accuracy: best_acc, history })
    }
}

fn ids(data: &FeatureSet, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| data.samples[i].utt.clone()).collect()
}

pub fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    for r in history {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(io_err("writing history"))?;
    }
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Eval-mode embeddings of every sample, in order.
pub fn embed_all(net: &EmbeddingNet, data: &FeatureSet) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let items: Vec<&[f64]> = chunk.iter().map(|s| s.data.as_slice()).collect();
        out.extend(net.embed_batch(data.frames, data.dims, &items)?);
    }
    Ok(out)
}

/// Class prototypes from embeddings and labels.
pub fn class_prototypes(embs: &[Vec<f64>], labels: &[usize]) -> Result<PrototypeSet> {
    let mut classes = vec![Vec::new(), Vec::new()];
    for (e, &l) in embs.iter().zip(labels) {
        classes[l].push(e.clone());
    }
    loss::compute_prototypes(&classes)
}

/// Nearest-prototype label; exact ties go to bonafide.
pub fn nearest_prototype(e: &[f64], protos: &PrototypeSet) -> usize {
    let db = sq_euclidean(e, &protos.prototypes[BONAFIDE]);
    let ds = sq_euclidean(e, &protos.prototypes[SPOOF]);
    if ds < db {
        SPOOF
    } else {
        BONAFIDE
    }
}

pub fn nearest_prototype_accuracy(protos: &PrototypeSet, embs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if embs.is_empty() {
        return 0.0;
    }
    let hits = embs.iter().zip(labels).filter(|(e, &l)| nearest_prototype(e, protos) == l).count();
    hits as f64 / embs.len() as f64
}

/// Dev accuracy against prototypes built from the whole training set.
pub fn classify_dev(net: &EmbeddingNet, train: &FeatureSet, dev: &FeatureSet) -> Result<f64> {
    let protos = class_prototypes(&embed_all(net, train)?, &train.labels())?;
    Ok(nearest_prototype_accuracy(&protos, &embed_all(net, dev)?, &dev.labels()))
}
