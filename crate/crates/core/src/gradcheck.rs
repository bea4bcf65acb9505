//! Central finite-difference verification of tape gradients.
//!
//! The numerical side only ever runs forward passes, so it shares no code
//! with the reverse sweep it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is numerically zero compare by absolute difference.
    pub denom_floor: f64,
    /// Cap on checked coordinates per tensor; `None` checks all of them.
    pub max_coords_per_tensor: Option<usize>,
    pub mode: Mode,
    /// Seeds coordinate sampling and the graph (dropout) RNG.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            denom_floor: 1e-6,
            max_coords_per_tensor: None,
            mode: Mode::Eval,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Where the worst mismatch occurred, e.g. `param enc.rgb.conv0.w[17]`.
    pub worst: String,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences, for every parameter in `store` and every tensor in `inputs`.
///
/// `f` receives one differentiable leaf per input and must return a scalar.
pub fn check_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_seed(store, opts.mode, opts.seed);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Shape(format!("gradient check needs a scalar, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::with_seed(store, opts.mode, opts.seed);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        coords_checked: 0,
    };
    let note = |rel: f64, label: String, report: &mut GradCheckReport| {
        report.coords_checked += 1;
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = label;
        }
    };

    let coords = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        match opts.max_coords_per_tensor {
            Some(k) if k < len => {
                let mut v = sample(rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };

    for (name, value) in store.params() {
        let zeros = Tensor::zeros(value.shape());
        let analytic = grads.param(name).unwrap_or(&zeros);
        for i in coords(value.len(), &mut rng) {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += opts.eps;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= opts.eps;
            let numeric = (eval(&plus, inputs)? - eval(&minus, inputs)?) / (2.0 * opts.eps);
            let rel = relative_error(analytic.data()[i], numeric, opts.denom_floor);
            note(rel, format!("param {name}[{i}]"), &mut report);
        }
    }

    for (k, (input, id)) in inputs.iter().zip(&ids).enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.node(*id).unwrap_or(&zeros);
        for i in coords(input.len(), &mut rng) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += opts.eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= opts.eps;
            let numeric = (eval(store, &plus)? - eval(store, &minus)?) / (2.0 * opts.eps);
            let rel = relative_error(analytic.data()[i], numeric, opts.denom_floor);
            note(rel, format!("input {k}[{i}]"), &mut report);
        }
    }

    Ok(report)
}
