//! Central-difference verification of the tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::model::{loss_and_grads, loss_only, GraphInput, ModelConfig, ModelParams};
use crate::nn::tensor::Tensor;

/// Gradients smaller than this in both routes are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub loss: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tensors: Vec<TensorCheck>,
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares every parameter's tape gradient with `(L(p + eps) - L(p - eps)) / 2eps`.
pub fn check_gradients(params: &ModelParams, input: &GraphInput, eps: f64) -> Result<GradCheckReport> {
    let (loss, grads) = loss_and_grads(params, input, None)?;
    let mut work = params.clone();
    let names: Vec<(String, usize)> = params.named_tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut tensors = Vec::with_capacity(names.len());
    let mut checked = 0;
    for (slot, (name, len)) in names.into_iter().enumerate() {
        let zeros = vec![0.0; len];
        let analytic = grads.get(slot).unwrap_or(&zeros).to_vec();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..len {
            let orig = work.tensors_mut()[slot].values[k];
            work.tensors_mut()[slot].values[k] = orig + eps;
            let up = loss_only(&work, input)?;
            work.tensors_mut()[slot].values[k] = orig - eps;
            let down = loss_only(&work, input)?;
            work.tensors_mut()[slot].values[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::Numerical(format!("finite difference of {name}[{k}] is {numeric}")));
            }
            max_rel = max_rel.max(relative_error(analytic[k], numeric));
            max_abs = max_abs.max((analytic[k] - numeric).abs());
        }
        checked += len;
        tensors.push(TensorCheck { name, entries: len, max_rel_err: max_rel, max_abs_err: max_abs });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { eps, loss, checked, max_rel_err, tensors })
}

/// Fixed 5-node graph with random features: a ring plus one chord.
pub fn seeded_graph(features: usize, label: usize, seed: u64) -> GraphInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = (0..5 * features).map(|_| rng.random_range(-1.5..1.5)).collect();
    let adj = vec![vec![1, 4, 2], vec![0, 2], vec![1, 3, 0], vec![2, 4], vec![3, 0]];
    GraphInput::new(Tensor::from_vec(5, features, vals).expect("shape"), &adj, label).expect("valid graph")
}

/// Default model dimensions on the seeded 5-node graph.
pub fn default_check(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let features = 8;
    let config = ModelConfig::new(features, 10);
    let params = ModelParams::init(config, seed)?;
    check_gradients(&params, &seeded_graph(features, 3, seed), eps)
}
