//! Residual embedding extractor mapping `(B, 1, T, D)` feature maps to
//! fixed-size utterance embeddings.

use std::path::Path;

use protospoof_tensor::{
    load_checkpoint, save_checkpoint, BatchStats, Graph, ParamId, ParamStore, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};

pub const EMBEDDING_DIM: usize = 128;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const CHECKPOINT_KIND: &str = "protospoof-embedding";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockType {
    Basic,
    Bottleneck,
    SeBasic,
}

impl BlockType {
    pub fn expansion(self) -> usize {
        match self {
            BlockType::Bottleneck => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Attentive,
    GlobalAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Resnet18,
    Resnet34,
    Resnet50,
    SeResnet34,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub block_type: BlockType,
    pub blocks_per_stage: [usize; 4],
    pub stage_widths: [usize; 4],
    pub pooling: Pooling,
    pub se_reduction: usize,
    pub embedding_dim: usize,
    /// Hidden size of the attention scorer.
    pub attention_hidden: usize,
    /// Stride of the 3x3 stem along (time, feature).
    pub stem_stride: [usize; 2],
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::preset(Preset::Tiny)
    }
}

impl NetConfig {
    pub fn preset(p: Preset) -> Self {
        let full = [64, 128, 256, 512];
        let (block_type, blocks, widths, pooling) = match p {
            Preset::Resnet18 => (BlockType::Basic, [2, 2, 2, 2], full, Pooling::Attentive),
            Preset::Resnet34 => (BlockType::Basic, [3, 4, 6, 3], full, Pooling::Attentive),
            Preset::Resnet50 => (BlockType::Bottleneck, [3, 4, 6, 3], full, Pooling::Attentive),
            Preset::SeResnet34 => (BlockType::SeBasic, [3, 4, 6, 3], full, Pooling::Attentive),
            Preset::Tiny => (BlockType::SeBasic, [1, 1, 1, 1], [4, 8, 16, 32], Pooling::Attentive),
        };
        let (se_reduction, attention_hidden) = if p == Preset::Tiny { (4, 16) } else { (8, 128) };
        Self {
            block_type,
            blocks_per_stage: blocks,
            stage_widths: widths,
            pooling,
            se_reduction,
            embedding_dim: EMBEDDING_DIM,
            attention_hidden,
            stem_stride: [1, 1],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage.contains(&0) {
            return config_err("every stage needs at least one block");
        }
        if self.stage_widths.contains(&0) {
            return config_err("stage widths must be positive");
        }
        if self.se_reduction == 0 || self.stage_widths.iter().any(|w| w % self.se_reduction != 0) {
            return config_err(format!(
                "se_reduction {} must divide every stage width {:?}",
                self.se_reduction, self.stage_widths
            ));
        }
        if self.embedding_dim == 0 || self.attention_hidden == 0 {
            return config_err("embedding_dim and attention_hidden must be positive");
        }
        if self.stem_stride.contains(&0) {
            return config_err("stem stride must be positive");
        }
        Ok(())
    }

    /// Channels entering the pooling layer.
    pub fn final_channels(&self) -> usize {
        self.stage_widths[3] * self.block_type.expansion()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution followed by batch normalization.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

/// Running-statistics update collected during a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Builder<'_> {
    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, &mut self.rng_for(name));
        Ok(self.store.insert(name, t, true)?)
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64, trainable: bool) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::full(shape, v), trainable)?)
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: (usize, usize)) -> Result<ConvBn> {
        let fan_in = (cin * k * k) as f64;
        Ok(ConvBn {
            weight: self.normal(&format!("{name}.w"), &[cout, cin, k, k], (2.0 / fan_in).sqrt())?,
            gamma: self.constant(&format!("{name}.bn.gamma"), &[cout], 1.0, true)?,
            beta: self.constant(&format!("{name}.bn.beta"), &[cout], 0.0, true)?,
            running_mean: self.constant(&format!("{name}.bn.running_mean"), &[cout], 0.0, false)?,
            running_var: self.constant(&format!("{name}.bn.running_var"), &[cout], 1.0, false)?,
            stride,
            pad: (k / 2, k / 2),
        })
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, gain: f64) -> Result<(ParamId, ParamId)> {
        Ok((
            self.normal(&format!("{name}.w"), &[din, dout], (gain / din as f64).sqrt())?,
            self.constant(&format!("{name}.b"), &[dout], 0.0, true)?,
        ))
    }
}

impl ConvBn {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode, upd: &mut Vec<BnUpdate>) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        Ok(match mode {
            Mode::Train => {
                let (out, stats) = g.batchnorm_train(y, gamma, beta, BN_EPS)?;
                upd.push(BnUpdate { running_mean: self.running_mean, running_var: self.running_var, stats });
                out
            }
            Mode::Eval => g.batchnorm_eval(
                y,
                gamma,
                beta,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
                BN_EPS,
            )?,
        })
    }
}

/// Squeeze-and-excitation gate: channel means through a C -> C/r -> C
/// bottleneck, ReLU then sigmoid.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

impl SeBlock {
    /// Returns the gated feature map. `force_gate` replaces the learned
    /// excitation with a constant.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, force_gate: Option<f64>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, c) = (s[0], s[1]);
        let gate = match force_gate {
            Some(v) => g.input(Tensor::full(&[b, c], v))?,
            None => {
                let inner: usize = s[2..].iter().product();
                let flat = g.reshape(x, &[b, c, inner])?;
                let squeeze = g.mean_last(flat)?;
                let (w1, b1) = (g.param(store, self.fc1.0)?, g.param(store, self.fc1.1)?);
                let h = g.affine(squeeze, w1, Some(b1))?;
                let h = g.relu(h)?;
                let (w2, b2) = (g.param(store, self.fc2.0)?, g.param(store, self.fc2.1)?);
                let e = g.affine(h, w2, Some(b2))?;
                g.sigmoid(e)?
            }
        };
        Ok(g.channel_scale(x, gate)?)
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub name: String,
    pub kind: BlockType,
    /// conv-bn layers of the main path, in order.
    pub convs: Vec<ConvBn>,
    pub se: Option<SeBlock>,
    pub shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        force_se_gate: Option<f64>,
        upd: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        g.set_scope(self.name.clone());
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, cb) in self.convs.iter().enumerate() {
            h = cb.forward(g, store, h, mode, upd)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        if let Some(se) = &self.se {
            h = se.forward(g, store, h, force_se_gate)?;
        }
        let skip = match &self.shortcut {
            Some(cb) => cb.forward(g, store, x, mode, upd)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum)?)
    }

    /// The conv-bn whose output feeds the residual sum.
    pub fn final_conv(&self) -> &ConvBn {
        self.convs.last().expect("block has convolutions")
    }
}

/// Self-attentive statistics pooling over time.
#[derive(Debug, Clone)]
pub struct AttentivePool {
    pub hidden: (ParamId, ParamId),
    pub score: (ParamId, ParamId),
}

impl AttentivePool {
    /// Attention weights `[B, T]`, softmax-normalized over time.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Var> {
        let s = g.shape(frames).to_vec();
        let (b, c, t) = (s[0], s[1], s[2]);
        let tc = g.transpose_last2(frames)?;
        let rows = g.reshape(tc, &[b * t, c])?;
        let (w1, b1) = (g.param(store, self.hidden.0)?, g.param(store, self.hidden.1)?);
        let h = g.affine(rows, w1, Some(b1))?;
        let h = g.tanh(h)?;
        let (w2, b2) = (g.param(store, self.score.0)?, g.param(store, self.score.1)?);
        let e = g.affine(h, w2, Some(b2))?;
        let e = g.reshape(e, &[b, t])?;
        Ok(g.softmax_last(e)?)
    }

    /// `[B, C, T] -> [B, 2C]`: weighted mean and weighted standard deviation.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<(Var, Var)> {
        let w = self.weights(g, store, frames)?;
        Ok((g.attentive_stats(frames, w)?, w))
    }
}

/// Mean over time: `[B, C, T] -> [B, C]`.
pub fn global_average_pool(g: &mut Graph, frames: Var) -> Result<Var> {
    Ok(g.mean_last(frames)?)
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub embedding: Var,
    /// Attention weights when attentive pooling is used.
    pub attention: Option<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    config: NetConfig,
    store: ParamStore,
    stem: ConvBn,
    blocks: Vec<ResidualBlock>,
    attention: Option<AttentivePool>,
    embed: (ParamId, ParamId),
    force_se_gate: Option<f64>,
}

impl EmbeddingNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, seed: config.seed };
        let w = config.stage_widths;
        let stride = (config.stem_stride[0], config.stem_stride[1]);
        let stem = b.conv_bn("stem", 1, w[0], 3, stride)?;
        let exp = config.block_type.expansion();
        let mut cin = w[0];
        let mut blocks = Vec::new();
        for (si, (&width, &count)) in w.iter().zip(&config.blocks_per_stage).enumerate() {
            for bi in 0..count {
                let name = format!("s{}.b{}", si + 1, bi + 1);
                let st = if si > 0 && bi == 0 { (2, 2) } else { (1, 1) };
                let cout = width * exp;
                let convs = match config.block_type {
                    BlockType::Basic | BlockType::SeBasic => vec![
                        b.conv_bn(&format!("{name}.conv1"), cin, width, 3, st)?,
                        b.conv_bn(&format!("{name}.conv2"), width, width, 3, (1, 1))?,
                    ],
                    BlockType::Bottleneck => vec![
                        b.conv_bn(&format!("{name}.conv1"), cin, width, 1, (1, 1))?,
                        b.conv_bn(&format!("{name}.conv2"), width, width, 3, st)?,
                        b.conv_bn(&format!("{name}.conv3"), width, cout, 1, (1, 1))?,
                    ],
                };
                let se = if config.block_type == BlockType::SeBasic {
                    let r = width / config.se_reduction;
                    Some(SeBlock {
                        fc1: b.linear(&format!("{name}.se.fc1"), width, r, 2.0)?,
                        fc2: b.linear(&format!("{name}.se.fc2"), r, width, 1.0)?,
                    })
                } else {
                    None
                };
                let shortcut = if st != (1, 1) || cin != cout {
                    Some(b.conv_bn(&format!("{name}.shortcut"), cin, cout, 1, st)?)
                } else {
                    None
                };
                blocks.push(ResidualBlock { name, kind: config.block_type, convs, se, shortcut });
                cin = cout;
            }
        }
        let (attention, pooled) = match config.pooling {
            Pooling::Attentive => (
                Some(AttentivePool {
                    hidden: b.linear("pool.hidden", cin, config.attention_hidden, 1.0)?,
                    score: b.linear("pool.score", config.attention_hidden, 1, 1.0)?,
                }),
                2 * cin,
            ),
            Pooling::GlobalAverage => (None, cin),
        };
        let embed = b.linear("embed", pooled, config.embedding_dim, 1.0)?;
        Ok(Self { config, store, stem, blocks, attention, embed, force_se_gate: None })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn attention_pool(&self) -> Option<&AttentivePool> {
        self.attention.as_ref()
    }

    /// Replaces every SE excitation with a constant gate (`None` restores it).
    pub fn force_se_gate(&mut self, gate: Option<f64>) {
        self.force_se_gate = gate;
    }

    /// Trainable scalars belonging to the network itself.
    pub fn parameter_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable && !p.name.starts_with("loss."))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Records the forward pass for `x: [B, 1, T, D]`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<ForwardOutput> {
        self.forward_with(&self.store, g, x, mode)
    }

    /// Forward pass reading parameter values from `store`, which must share
    /// this network's layout (e.g. a perturbed copy).
    pub fn forward_with(&self, store: &ParamStore, g: &mut Graph, x: Var, mode: Mode) -> Result<ForwardOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Config(format!("network input must be [B, 1, T, D], got {s:?}")));
        }
        let mut upd = Vec::new();
        g.set_scope("stem");
        let h = self.stem.forward(g, store, x, mode, &mut upd)?;
        let mut h = g.relu(h)?;
        for blk in &self.blocks {
            h = blk.forward(g, store, h, mode, self.force_se_gate, &mut upd)?;
        }
        g.set_scope("pool");
        // collapse the feature axis: [B, C, T, F] -> [B, C, T]
        let frames = g.mean_last(h)?;
        let (pooled, attention) = match &self.attention {
            Some(att) => {
                let (p, w) = att.forward(g, store, frames)?;
                (p, Some(w))
            }
            None => (global_average_pool(g, frames)?, None),
        };
        g.set_scope("embed");
        let (w, b) = (g.param(store, self.embed.0)?, g.param(store, self.embed.1)?);
        let embedding = g.affine(pooled, w, Some(b))?;
        g.set_scope("");
        Ok(ForwardOutput { embedding, attention, bn_updates: upd })
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let n = u.stats.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm = self.store.get_mut(u.running_mean);
            for (r, m) in rm.value.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.store.get_mut(u.running_var);
            for (r, v) in rv.value.data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    /// Eval-mode embeddings for a batch of `T x D` matrices (row-major).
    pub fn embed_batch(&self, frames: usize, dims: usize, items: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(items.len() * frames * dims);
        for it in items {
            if it.len() != frames * dims {
                return Err(Error::Data(format!("feature matrix has {} values, expected {}", it.len(), frames * dims)));
            }
            data.extend_from_slice(it);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![items.len(), 1, frames, dims], data)?)?;
        let out = self.forward(&mut g, x, Mode::Eval)?;
        let e = g.value(out.embedding);
        Ok((0..items.len()).map(|i| e.row(i).to_vec()).collect())
    }

    pub fn header(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "net": self.config,
            "extra": extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        Ok(save_checkpoint(path, &self.header(extra), &self.store)?)
    }

    /// Rebuilds the network described in the checkpoint header and loads
    /// every stored tensor, including loss-head parameters.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let (header, stored) = load_checkpoint(path)?;
        if header.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Config("checkpoint does not hold an embedding network".into()));
        }
        let config: NetConfig = serde_json::from_value(header["net"].clone())?;
        let mut net = Self::new(config)?;
        net.load_params(&stored)?;
        Ok((net, header.get("extra").cloned().unwrap_or(serde_json::Value::Null)))
    }

    /// Copies values from `other` by name; names missing here are inserted.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        for (_, p) in other.iter() {
            match self.store.id(&p.name) {
                Ok(id) => self.store.set_value(id, p.value.clone())?,
                Err(_) => {
                    self.store.insert(p.name.clone(), p.value.clone(), p.trainable)?;
                }
            }
        }
        Ok(())
    }
}
