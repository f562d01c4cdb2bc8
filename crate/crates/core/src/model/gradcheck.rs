//! Central finite-difference checks of the analytic gradients.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{backprop, Denoiser, DenoiserParams};
use crate::error::Result;
use crate::losses::{cross_entropy, WeightedCe};

/// Objective value at `params`, without gradients.
pub fn objective_value(model: &Denoiser<f64>, params: &DenoiserParams<f64>, tokens: &[u32], obj: &WeightedCe) -> Result<f64> {
    let v = model.config.vocab_size;
    let logits = backprop::forward(params, &model.config, tokens).logits;
    let mut total = 0.0;
    for t in &obj.terms {
        total += t.coef * cross_entropy(&logits[t.pos * v..(t.pos + 1) * v], t.label)?;
    }
    Ok(total)
}

/// Gaussian direction over every tensor, or over the tensor at `only`.
pub fn random_direction<R: Rng + ?Sized>(params: &DenoiserParams<f64>, only: Option<usize>, rng: &mut R) -> DenoiserParams<f64> {
    let mut d = params.zeros_like();
    for (i, t) in d.tensors_mut().into_iter().enumerate() {
        if only.is_none_or(|k| k == i) {
            t.data.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares `⟨∇L, dir⟩` against `(L(θ+εd) − L(θ−εd)) / 2ε`.
pub fn directional_check(
    model: &Denoiser<f64>,
    tokens: &[u32],
    obj: &WeightedCe,
    dir: &DenoiserParams<f64>,
    eps: f64,
) -> Result<DirectionalCheck> {
    let (_, grads) = model.backward(tokens, obj)?;
    let analytic: f64 = grads
        .tensors()
        .iter()
        .zip(dir.tensors())
        .flat_map(|(g, d)| g.data.iter().zip(&d.data))
        .map(|(a, b)| a * b)
        .sum();
    let mut plus = model.params.clone();
    plus.add_scaled(dir, eps);
    let mut minus = model.params.clone();
    minus.add_scaled(dir, -eps);
    let numeric = (objective_value(model, &plus, tokens, obj)? - objective_value(model, &minus, tokens, obj)?) / (2.0 * eps);
    let scale = analytic.abs().max(numeric.abs()).max(1e-10);
    Ok(DirectionalCheck { analytic, numeric, rel_err: (analytic - numeric).abs() / scale })
}
