//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Absolute slack added to the denominator of the relative error so that
/// coordinates whose true gradient is ~0 do not dominate the report.
const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Probe at most this many evenly spaced coordinates per tensor.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, max_coords: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    /// `(tensor index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    fn new() -> Self {
        Self { max_rel_error: 0.0, max_abs_error: 0.0, coords_checked: 0, worst: None }
    }

    fn record(&mut self, tensor: usize, coord: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / (analytic.abs().max(numeric.abs()) + REL_FLOOR);
        self.coords_checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((tensor, coord));
        }
    }
}

fn probe_coords(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Checks `f` w.r.t. each of `inputs`. `f` must reduce to a scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ts.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.variable(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::new();
    let mut probe = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[ti].shape());
        let analytic = grads.wrt(*var).unwrap_or(&zeros);
        for c in probe_coords(inputs[ti].numel(), opts.max_coords) {
            let x0 = inputs[ti].data()[c];
            probe[ti].data_mut()[c] = x0 + opts.h;
            let fp = eval(&probe)?;
            probe[ti].data_mut()[c] = x0 - opts.h;
            let fm = eval(&probe)?;
            probe[ti].data_mut()[c] = x0;
            report.record(ti, c, analytic.data()[c], (fp - fm) / (2.0 * opts.h));
        }
    }
    Ok(report)
}

/// Checks `f` w.r.t. every trainable parameter of `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &analytic_store)?;
    let grads = g.backward(out)?;
    g.accumulate_param_grads(&grads, &mut analytic_store)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport::new();
    let mut probe = store.clone();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).numel();
        for c in probe_coords(n, opts.max_coords) {
            let x0 = store.value(id).data()[c];
            probe.get_mut(id).value.data_mut()[c] = x0 + opts.h;
            let fp = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[c] = x0 - opts.h;
            let fm = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[c] = x0;
            let analytic = analytic_store.get(id).grad.data()[c];
            report.record(id.index(), c, analytic, (fp - fm) / (2.0 * opts.h));
        }
    }
    Ok(report)
}
