//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during a forward pass together with
//! whatever the op needs for its vector-Jacobian product. Calling
//! [`Graph::backward`] walks the tape in reverse. Values are immutable once
//! recorded; parameters are copied in from a [`ParamStore`] and their
//! gradients are written back with [`Graph::accumulate_param_grads`].

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, col2im, gemm, im2col, ConvGeom, Layout};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics produced by a training-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, stride: (usize, usize), pad: (usize, usize) },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Softplus { x: Var },
    ChannelScale { x: Var, s: Var },
    MeanLast { x: Var },
    Reshape { x: Var },
    TransposeLast2 { x: Var },
    SoftmaxLast { x: Var },
    AttentiveStats { frames: Var, weights: Var },
    SqDist { a: Var, b: Var },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64>, mean: bool },
    GroupMean { x: Var, groups: Vec<Vec<usize>> },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    Contrastive { x: Var, labels: Vec<usize>, margin: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Softplus { .. } => "softplus",
            Op::ChannelScale { .. } => "channel_scale",
            Op::MeanLast { .. } => "mean_last",
            Op::Reshape { .. } => "reshape",
            Op::TransposeLast2 { .. } => "transpose_last2",
            Op::SoftmaxLast { .. } => "softmax_last",
            Op::AttentiveStats { .. } => "attentive_stats",
            Op::SqDist { .. } => "sq_dist",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GroupMean { .. } => "group_mean",
            Op::SelectRows { .. } => "select_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Contrastive { .. } => "contrastive",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Standard deviations below this are treated as exactly zero in
/// attentive statistics pooling.
const STD_FLOOR: f64 = 1e-6;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    scope: String,
}

fn acc(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Label attached to non-finite errors raised by subsequent ops.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            let op = if self.scope.is_empty() {
                op.name().to_string()
            } else {
                format!("{}/{}", self.scope, op.name())
            };
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::SqDist { a, b } => {
                vec![*a, *b]
            }
            Op::ChannelScale { x, s } => vec![*x, *s],
            Op::AttentiveStats { frames, weights } => vec![*frames, *weights],
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Tanh { x }
            | Op::Softplus { x }
            | Op::MeanLast { x }
            | Op::Reshape { x }
            | Op::TransposeLast2 { x }
            | Op::SoftmaxLast { x }
            | Op::L2NormalizeRows { x, .. }
            | Op::GroupMean { x, .. }
            | Op::SelectRows { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Contrastive { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Records a constant (no gradient flows into it).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    /// Records a differentiable leaf, e.g. an input probed by a gradient check.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        let v = self.push(t, Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Records a snapshot of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// 2-D cross-correlation of `[B,C,H,W]` input with `[O,C,kh,kw]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geom = conv_geom(&xs, &ws, stride, pad)?;
        let (batch, out_c) = (xs[0], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; batch * out_c * cols_n];
        let mut cols = vec![0.0; rows * cols_n];
        let in_sz = geom.channels * geom.height * geom.width;
        for b in 0..batch {
            im2col(&xv[b * in_sz..(b + 1) * in_sz], &geom, &mut cols);
            gemm(
                out_c,
                rows,
                cols_n,
                wv,
                Layout::row_major(rows),
                &cols,
                Layout::row_major(cols_n),
                0.0,
                &mut out[b * out_c * cols_n..(b + 1) * out_c * cols_n],
            );
        }
        let t = Tensor::new(vec![batch, out_c, geom.out_h, geom.out_w], out)?;
        self.push(t, Op::Conv2d { x, w, stride, pad })
    }

    /// Batch normalization over `[B,C,...]` using batch statistics.
    /// Returns the normalized output and the statistics used.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (b, c, inner) = bn_dims(self.shape(x), self.shape(gamma), self.shape(beta))?;
        let count = b * inner;
        if count == 0 {
            return Err(shape_err("batchnorm2d", "empty batch"));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let off = (bi * c + ch) * inner;
                s += xv[off..off + inner].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for bi in 0..b {
                let off = (bi * c + ch) * inner;
                v += xv[off..off + inner].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = bn_dims(self.shape(x), self.shape(gamma), self.shape(beta))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batchnorm2d", "running statistics do not match channels"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, &inv_std, false)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), batch_stats },
        )
    }

    /// `x·w + b` for `x: [B,D]`, `w: [D,M]`, `b: [M]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("affine", format!("{xs:?} x {ws:?}")));
        }
        let (rows, d, m) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(shape_err("affine", format!("bias {:?} for width {m}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; rows * m];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * m..(r + 1) * m].copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            d,
            m,
            self.value(x).data(),
            Layout::row_major(d),
            self.value(w).data(),
            Layout::row_major(m),
            1.0,
            &mut out,
        );
        self.push(Tensor::new(vec![rows, m], out)?, Op::Affine { x, w, b })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(shape_err("matmul", format!("{as_:?} x {bs:?}")));
        }
        let (n, k, m) = (as_[0], as_[1], bs[1]);
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            Layout::row_major(k),
            self.value(b).data(),
            Layout::row_major(m),
            0.0,
            &mut out,
        );
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMul { a, b })
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?;
        self.push(t, op)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.map(x, |a| a * factor, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, |a| a + c, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |a| if a > 0.0 { a } else { 0.0 }, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, kernels::sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::tanh, Op::Tanh { x })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map(x, kernels::softplus, Op::Softplus { x })
    }

    /// Multiplies each `[H,W]` plane of `x: [B,C,H,W]` by `s[b,c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(s) != &xs[..2] {
            return Err(shape_err("channel_scale", format!("{:?} by {:?}", xs, self.shape(s))));
        }
        let inner: usize = xs[2..].iter().product();
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(inner.max(1)).enumerate() {
            let f = sv[i];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        self.push(Tensor::new(xs, out)?, Op::ChannelScale { x, s })
    }

    /// Mean over the last axis: `[..., n] -> [...]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| shape_err("mean_last", "rank-0 input"))?;
        if n == 0 {
            return Err(shape_err("mean_last", "empty last axis"));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        let t = Tensor::new(xs[..xs.len() - 1].to_vec(), out)?;
        self.push(t, Op::MeanLast { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x })
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("transpose_last2", format!("expected rank 3, got {xs:?}")));
        }
        let (b, r, c) = (xs[0], xs[1], xs[2]);
        let t = transpose3(self.value(x).data(), b, r, c);
        self.push(Tensor::new(vec![b, c, r], t)?, Op::TransposeLast2 { x })
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| shape_err("softmax_last", "rank-0 input"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            kernels::softmax_in_place(row);
        }
        self.push(Tensor::new(xs, out)?, Op::SoftmaxLast { x })
    }

    /// Attention-weighted statistics: for `frames: [B,C,T]` and
    /// `weights: [B,T]` returns `[B, 2C]` = weighted mean ‖ weighted std.
    pub fn attentive_stats(&mut self, frames: Var, weights: Var) -> Result<Var> {
        let fs = self.shape(frames).to_vec();
        if fs.len() != 3 || self.shape(weights) != [fs[0], fs[2]] {
            return Err(shape_err(
                "attentive_stats",
                format!("{:?} with weights {:?}", fs, self.shape(weights)),
            ));
        }
        let (b, c, t) = (fs[0], fs[1], fs[2]);
        let fv = self.value(frames).data();
        let wv = self.value(weights).data();
        let mut out = vec![0.0; b * 2 * c];
        for bi in 0..b {
            let w = &wv[bi * t..(bi + 1) * t];
            for ch in 0..c {
                let row = &fv[(bi * c + ch) * t..(bi * c + ch + 1) * t];
                let mean: f64 = row.iter().zip(w).map(|(x, a)| a * x).sum();
                let m2: f64 = row.iter().zip(w).map(|(x, a)| a * x * x).sum();
                let var = (m2 - mean * mean).max(0.0);
                let std = var.sqrt();
                out[bi * 2 * c + ch] = mean;
                out[bi * 2 * c + c + ch] = if std > STD_FLOOR { std } else { 0.0 };
            }
        }
        self.push(Tensor::new(vec![b, 2 * c], out)?, Op::AttentiveStats { frames, weights })
    }

    /// Pairwise squared Euclidean distances between rows: `[n,M] x [k,M] -> [n,k]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(shape_err("sq_dist", format!("{as_:?} vs {bs:?}")));
        }
        let (n, k) = (as_[0], bs[0]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                out[i * k + j] = av.row(i).iter().zip(bv.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        self.push(Tensor::new(vec![n, k], out)?, Op::SqDist { a, b })
    }

    /// Scales each row of a rank-2 tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("l2_normalize_rows", format!("expected rank 2, got {xs:?}")));
        }
        let m = xs[1];
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(xs[0]);
        for row in out.chunks_mut(m.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::Config("cannot normalize a zero-norm row".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(Tensor::new(xs, out)?, Op::L2NormalizeRows { x, norms })
    }

    /// Softmax cross-entropy of `[n,k]` logits against integer labels,
    /// summed (`mean = false`) or averaged over rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mean: bool) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(shape_err("cross_entropy", format!("{:?} with {} labels", ls, labels.len())));
        }
        let k = ls[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = 0.0;
        for (i, row) in lv.chunks(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
            kernels::softmax_in_place(&mut probs[i * k..(i + 1) * k]);
        }
        if mean {
            total /= labels.len() as f64;
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs, mean },
        )
    }

    /// Row means over index groups: returns `[groups.len(), M]`.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("group_mean", format!("expected rank 2, got {xs:?}")));
        }
        let m = xs[1];
        let xv = self.value(x);
        let mut out = vec![0.0; groups.len() * m];
        for (gi, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(TensorError::Config(format!("group {gi} is empty")));
            }
            let dst = &mut out[gi * m..(gi + 1) * m];
            for &r in g {
                if r >= xs[0] {
                    return Err(shape_err("group_mean", format!("row {r} out of range")));
                }
                for (d, v) in dst.iter_mut().zip(xv.row(r)) {
                    *d += v;
                }
            }
            let inv = 1.0 / g.len() as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        self.push(Tensor::new(vec![groups.len(), m], out)?, Op::GroupMean { x, groups: groups.to_vec() })
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || rows.iter().any(|&r| r >= xs[0]) {
            return Err(shape_err("select_rows", format!("{xs:?} rows {rows:?}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * xs[1]);
        for &r in rows {
            out.extend_from_slice(xv.row(r));
        }
        self.push(Tensor::new(vec![rows.len(), xs[1]], out)?, Op::SelectRows { x, rows: rows.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// Pairwise contrastive loss over all row pairs `i < j` of `x: [n,M]`:
    /// `d²` for same-label pairs, `max(0, margin - d)²` otherwise, averaged
    /// over pairs.
    pub fn contrastive(&mut self, x: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != labels.len() || xs[0] < 2 {
            return Err(shape_err("contrastive", format!("{:?} with {} labels", xs, labels.len())));
        }
        let n = xs[0];
        let xv = self.value(x);
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d2: f64 = xv.row(i).iter().zip(xv.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if labels[i] == labels[j] {
                    total += d2;
                } else {
                    let h = (margin - d2.sqrt()).max(0.0);
                    total += h * h;
                }
            }
        }
        let pairs = n * (n - 1) / 2;
        self.push(
            Tensor::scalar(total / pairs as f64),
            Op::Contrastive { x, labels: labels.to_vec(), margin },
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(shape_err("backward", format!("output has shape {:?}", self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), 1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(gy) = hi[0].as_ref() else { continue };
            self.backward_node(node, gy, lo)?;
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, g: &mut [Option<Tensor>]) -> Result<()> {
        let gyv = gy.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let geom = conv_geom(xs, ws, *stride, *pad)?;
                let (batch, out_c) = (xs[0], ws[0]);
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let in_sz = geom.channels * geom.height * geom.width;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut cols = vec![0.0; rows * p];
                let mut dw = vec![0.0; out_c * rows];
                let mut dx = if self.needs(*x) { vec![0.0; xv.len()] } else { Vec::new() };
                for b in 0..batch {
                    let gyb = &gyv[b * out_c * p..(b + 1) * out_c * p];
                    if self.needs(*w) {
                        im2col(&xv[b * in_sz..(b + 1) * in_sz], &geom, &mut cols);
                        gemm(out_c, p, rows, gyb, Layout::row_major(p), &cols, Layout::transposed(p), 1.0, &mut dw);
                    }
                    if self.needs(*x) {
                        gemm(rows, out_c, p, wv, Layout::transposed(rows), gyb, Layout::row_major(p), 0.0, &mut cols);
                        col2im(&cols, &geom, &mut dx[b * in_sz..(b + 1) * in_sz]);
                    }
                }
                if self.needs(*w) {
                    acc(&mut g[w.0], Tensor::new(ws.to_vec(), dw)?);
                }
                if self.needs(*x) {
                    acc(&mut g[x.0], Tensor::new(xs.to_vec(), dx)?);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = self.shape(*x);
                let (b, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let n = (b * inner) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * inner;
                        for i in off..off + inner {
                            dgamma[ch] += gyv[i] * xhat[i];
                            dbeta[ch] += gyv[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; gyv.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * inner;
                            let k = gv[ch] * inv_std[ch];
                            for i in off..off + inner {
                                dx[i] = if *batch_stats {
                                    k * (gyv[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                                } else {
                                    k * gyv[i]
                                };
                            }
                        }
                    }
                    acc(&mut g[x.0], Tensor::new(shape.to_vec(), dx)?);
                }
                if self.needs(*gamma) {
                    acc(&mut g[gamma.0], Tensor::new(vec![c], dgamma)?);
                }
                if self.needs(*beta) {
                    acc(&mut g[beta.0], Tensor::new(vec![c], dbeta)?);
                }
            }
            Op::Affine { x, w, b } => {
                let xs = self.shape(*x);
                let (rows, d) = (xs[0], xs[1]);
                let m = self.shape(*w)[1];
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * d];
                    gemm(rows, m, d, gyv, Layout::row_major(m), self.value(*w).data(), Layout::transposed(m), 0.0, &mut dx);
                    acc(&mut g[x.0], Tensor::new(vec![rows, d], dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; d * m];
                    gemm(d, rows, m, self.value(*x).data(), Layout::transposed(d), gyv, Layout::row_major(m), 0.0, &mut dw);
                    acc(&mut g[w.0], Tensor::new(vec![d, m], dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; m];
                        for row in gyv.chunks(m) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        acc(&mut g[b.0], Tensor::new(vec![m], db)?);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, gyv, Layout::row_major(m), self.value(*b).data(), Layout::transposed(m), 0.0, &mut da);
                    acc(&mut g[a.0], Tensor::new(vec![n, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, self.value(*a).data(), Layout::transposed(k), gyv, Layout::row_major(m), 0.0, &mut db);
                    acc(&mut g[b.0], Tensor::new(vec![k, m], db)?);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(&mut g[a.0], gy.clone());
                }
                if self.needs(*b) {
                    acc(&mut g[b.0], gy.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    acc(&mut g[a.0], gy.clone());
                }
                if self.needs(*b) {
                    acc(&mut g[b.0], scaled(gy, -1.0));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    acc(&mut g[a.0], hadamard(gy, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(&mut g[b.0], hadamard(gy, self.value(*a)));
                }
            }
            Op::Scale { x, factor } => acc(&mut g[x.0], scaled(gy, *factor)),
            Op::AddScalar { x } | Op::Reshape { x } => {
                let t = Tensor::new(self.shape(*x).to_vec(), gyv.to_vec())?;
                acc(&mut g[x.0], t);
            }
            Op::Relu { x } => {
                let d = self.value(*x).data().iter().zip(gyv).map(|(a, gv)| if *a > 0.0 { *gv } else { 0.0 });
                acc(&mut g[x.0], Tensor::new(gy.shape().to_vec(), d.collect())?);
            }
            Op::Sigmoid { x } => {
                let d = node.value.data().iter().zip(gyv).map(|(s, gv)| gv * s * (1.0 - s));
                acc(&mut g[x.0], Tensor::new(gy.shape().to_vec(), d.collect())?);
            }
            Op::Tanh { x } => {
                let d = node.value.data().iter().zip(gyv).map(|(t, gv)| gv * (1.0 - t * t));
                acc(&mut g[x.0], Tensor::new(gy.shape().to_vec(), d.collect())?);
            }
            Op::Softplus { x } => {
                let d = self.value(*x).data().iter().zip(gyv).map(|(a, gv)| gv * kernels::sigmoid(*a));
                acc(&mut g[x.0], Tensor::new(gy.shape().to_vec(), d.collect())?);
            }
            Op::ChannelScale { x, s } => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product::<usize>().max(1);
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                if self.needs(*x) {
                    let mut dx = gyv.to_vec();
                    for (i, chunk) in dx.chunks_mut(inner).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= sv[i]);
                    }
                    acc(&mut g[x.0], Tensor::new(xs.to_vec(), dx)?);
                }
                if self.needs(*s) {
                    let ds: Vec<f64> = gyv
                        .chunks(inner)
                        .zip(xv.chunks(inner))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect();
                    acc(&mut g[s.0], Tensor::new(self.shape(*s).to_vec(), ds)?);
                }
            }
            Op::MeanLast { x } => {
                let xs = self.shape(*x);
                let n = *xs.last().unwrap();
                let inv = 1.0 / n as f64;
                let mut dx = Vec::with_capacity(n * gyv.len());
                for &v in gyv {
                    dx.extend(std::iter::repeat_n(v * inv, n));
                }
                acc(&mut g[x.0], Tensor::new(xs.to_vec(), dx)?);
            }
            Op::TransposeLast2 { x } => {
                let xs = self.shape(*x);
                let (b, r, c) = (xs[0], xs[1], xs[2]);
                // gy is [b, c, r]
                let dx = transpose3(gyv, b, c, r);
                acc(&mut g[x.0], Tensor::new(xs.to_vec(), dx)?);
            }
            Op::SoftmaxLast { x } => {
                let n = *gy.shape().last().unwrap();
                let mut dx = vec![0.0; gyv.len()];
                for ((d, y), gr) in dx.chunks_mut(n).zip(node.value.data().chunks(n)).zip(gyv.chunks(n)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        d[i] = y[i] * (gr[i] - dot);
                    }
                }
                acc(&mut g[x.0], Tensor::new(gy.shape().to_vec(), dx)?);
            }
            Op::AttentiveStats { frames, weights } => {
                let fs = self.shape(*frames);
                let (b, c, t) = (fs[0], fs[1], fs[2]);
                let fv = self.value(*frames).data();
                let wv = self.value(*weights).data();
                let out = node.value.data();
                let mut df = vec![0.0; fv.len()];
                let mut dwt = vec![0.0; wv.len()];
                for bi in 0..b {
                    let w = &wv[bi * t..(bi + 1) * t];
                    for ch in 0..c {
                        let mean = out[bi * 2 * c + ch];
                        let std = out[bi * 2 * c + c + ch];
                        let g_std = gyv[bi * 2 * c + c + ch];
                        let (g_mean, g_m2) = if std > 0.0 {
                            (gyv[bi * 2 * c + ch] - g_std * mean / std, g_std / (2.0 * std))
                        } else {
                            (gyv[bi * 2 * c + ch], 0.0)
                        };
                        let off = (bi * c + ch) * t;
                        for ti in 0..t {
                            let xv = fv[off + ti];
                            df[off + ti] += g_mean * w[ti] + g_m2 * 2.0 * w[ti] * xv;
                            dwt[bi * t + ti] += g_mean * xv + g_m2 * xv * xv;
                        }
                    }
                }
                if self.needs(*frames) {
                    acc(&mut g[frames.0], Tensor::new(fs.to_vec(), df)?);
                }
                if self.needs(*weights) {
                    acc(&mut g[weights.0], Tensor::new(vec![b, t], dwt)?);
                }
            }
            Op::SqDist { a, b } => {
                let (n, m) = (self.shape(*a)[0], self.shape(*a)[1]);
                let k = self.shape(*b)[0];
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = vec![0.0; n * m];
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    for j in 0..k {
                        let gij = gyv[i * k + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for d in 0..m {
                            let diff = 2.0 * gij * (av.row(i)[d] - bv.row(j)[d]);
                            da[i * m + d] += diff;
                            db[j * m + d] -= diff;
                        }
                    }
                }
                if self.needs(*a) {
                    acc(&mut g[a.0], Tensor::new(vec![n, m], da)?);
                }
                if self.needs(*b) {
                    acc(&mut g[b.0], Tensor::new(vec![k, m], db)?);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let m = gy.shape()[1];
                let y = node.value.data();
                let mut dx = vec![0.0; gyv.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * m..(r + 1) * m];
                    let gr = &gyv[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for d in 0..m {
                        dx[r * m + d] = (gr[d] - yr[d] * dot) / norm;
                    }
                }
                acc(&mut g[x.0], Tensor::new(gy.shape().to_vec(), dx)?);
            }
            Op::CrossEntropy { logits, labels, probs, mean } => {
                let k = self.shape(*logits)[1];
                let scale = gyv[0] / if *mean { labels.len() as f64 } else { 1.0 };
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * k + l] -= scale;
                }
                acc(&mut g[logits.0], Tensor::new(self.shape(*logits).to_vec(), dl)?);
            }
            Op::GroupMean { x, groups } => {
                let xs = self.shape(*x);
                let m = xs[1];
                let mut dx = vec![0.0; xs[0] * m];
                for (gi, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    for &r in grp {
                        for d in 0..m {
                            dx[r * m + d] += gyv[gi * m + d] * inv;
                        }
                    }
                }
                acc(&mut g[x.0], Tensor::new(xs.to_vec(), dx)?);
            }
            Op::SelectRows { x, rows } => {
                let xs = self.shape(*x);
                let m = xs[1];
                let mut dx = vec![0.0; xs[0] * m];
                for (i, &r) in rows.iter().enumerate() {
                    for d in 0..m {
                        dx[r * m + d] += gyv[i * m + d];
                    }
                }
                acc(&mut g[x.0], Tensor::new(xs.to_vec(), dx)?);
            }
            Op::Sum { x } => {
                acc(&mut g[x.0], Tensor::full(self.shape(*x), gyv[0]));
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel() as f64;
                acc(&mut g[x.0], Tensor::full(self.shape(*x), gyv[0] / n));
            }
            Op::Contrastive { x, labels, margin } => {
                let xs = self.shape(*x);
                let (n, m) = (xs[0], xs[1]);
                let xv = self.value(*x);
                let scale = gyv[0] / (n * (n - 1) / 2) as f64;
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in i + 1..n {
                        let d2: f64 = xv.row(i).iter().zip(xv.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                        // coefficient c such that d(loss)/dx_i = c * (x_i - x_j)
                        let coef = if labels[i] == labels[j] {
                            2.0
                        } else {
                            let d = d2.sqrt();
                            if d >= *margin || d == 0.0 {
                                0.0
                            } else {
                                -2.0 * (margin - d) / d
                            }
                        };
                        if coef == 0.0 {
                            continue;
                        }
                        for k in 0..m {
                            let diff = scale * coef * (xv.row(i)[k] - xv.row(j)[k]);
                            dx[i * m + k] += diff;
                            dx[j * m + k] -= diff;
                        }
                    }
                }
                acc(&mut g[x.0], Tensor::new(xs.to_vec(), dx)?);
            }
        }
        Ok(())
    }

    /// Adds the gradient of every parameter node into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(gr) = &grads.grads[i] {
                    gr.ensure_finite(&store.get(id).name)?;
                    store.accumulate_grad(id, gr);
                }
            }
        }
        Ok(())
    }
}

fn scaled(t: &Tensor, f: f64) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= f);
    out
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x *= y);
    out
}

/// `[b, r, c] -> [b, c, r]`
fn transpose3(src: &[f64], b: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        let s = &src[bi * r * c..(bi + 1) * r * c];
        let d = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
    out
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: (usize, usize), pad: (usize, usize)) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(shape_err("conv2d", format!("input {xs:?}, kernel {ws:?}")));
    }
    if xs[1] != ws[1] {
        return Err(shape_err("conv2d", format!("input has {} channels, kernel expects {}", xs[1], ws[1])));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(TensorError::Config("conv2d stride must be positive".into()));
    }
    let (ph, pw) = (xs[2] + 2 * pad.0, xs[3] + 2 * pad.1);
    if ws[2] > ph || ws[3] > pw {
        return Err(shape_err(
            "conv2d",
            format!("kernel {}x{} exceeds padded input {}x{}", ws[2], ws[3], ph, pw),
        ));
    }
    Ok(ConvGeom {
        channels: xs[1],
        height: xs[2],
        width: xs[3],
        kh: ws[2],
        kw: ws[3],
        stride,
        pad,
        out_h: (ph - ws[2]) / stride.0 + 1,
        out_w: (pw - ws[3]) / stride.1 + 1,
    })
}

fn bn_dims(xs: &[usize], gs: &[usize], bs: &[usize]) -> Result<(usize, usize, usize)> {
    if xs.len() < 2 {
        return Err(shape_err("batchnorm2d", format!("input {xs:?}")));
    }
    let c = xs[1];
    if gs != [c] || bs != [c] {
        return Err(shape_err(
            "batchnorm2d",
            format!("{c} channels but gamma {gs:?}, beta {bs:?}"),
        ));
    }
    Ok((xs[0], c, xs[2..].iter().product()))
}
