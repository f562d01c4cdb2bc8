//! AdamW with global-norm clipping.

use serde::{Deserialize, Serialize};

use super::{DenoiserParams, Scalar};
use crate::error::{Result, WeftError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, weight_decay: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(WeftError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moments, step counter and hyperparameters. `hp.lr` is the current
/// learning rate; schedules overwrite it before each step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub hp: AdamWConfig,
    pub m: DenoiserParams<F>,
    pub v: DenoiserParams<F>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &DenoiserParams<F>, hp: AdamWConfig) -> Self {
        OptimizerState { step: 0, hp, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// Outcome of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradient (1 when no clipping happened).
    pub clip_scale: f64,
}

/// Clips `grads` to global norm `clip_norm`, then applies one decoupled
/// weight-decay Adam update. Decay is applied to matrices only; norm gains
/// are left undecayed.
pub fn opt_step<F: Scalar>(
    params: &mut DenoiserParams<F>,
    grads: &DenoiserParams<F>,
    state: &mut OptimizerState<F>,
    clip_norm: f64,
) -> Result<StepStats> {
    if !(clip_norm > 0.0) {
        return Err(WeftError::Config("clip norm must be positive".into()));
    }
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(WeftError::NonFinite("gradient norm".into()));
    }
    let clip_scale = if grad_norm > clip_norm { clip_norm / grad_norm } else { 1.0 };
    state.step += 1;
    let hp = state.hp;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    let (b1, b2) = (F::from_f64(hp.beta1), F::from_f64(hp.beta2));
    let (one_b1, one_b2) = (F::from_f64(1.0 - hp.beta1), F::from_f64(1.0 - hp.beta2));
    let (bc1, bc2) = (F::from_f64(bc1), F::from_f64(bc2));
    let lr = F::from_f64(hp.lr);
    let eps = F::from_f64(hp.eps);
    let scale = F::from_f64(clip_scale);
    let decay = F::from_f64(1.0 - hp.lr * hp.weight_decay);

    let ps = params.tensors_mut();
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        let decayed = p.shape.len() == 2;
        for (((x, &gr), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            let gr = gr * scale;
            *mi = b1 * *mi + one_b1 * gr;
            *vi = b2 * *vi + one_b2 * gr * gr;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            if decayed {
                *x = *x * decay;
            }
            *x = *x - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(StepStats { grad_norm, clip_scale })
}

/// Linear decay from `base` at step 0 to 0 at `total`.
pub fn linear_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step.min(total) as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Denoiser, DenoiserConfig};

    fn params() -> DenoiserParams<f64> {
        let c = DenoiserConfig { d_model: 8, n_heads: 2, ffn_hidden: 8, max_seq_len: 8, ..DenoiserConfig::desk(5, 4, 3) };
        Denoiser::<f64>::new(c).unwrap().params
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = params();
        let before = p.clone();
        let g = p.zeros_like();
        let hp = AdamWConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() };
        let mut st = OptimizerState::new(&p, hp);
        let s = opt_step(&mut p, &g, &mut st, 1.0).unwrap();
        assert_eq!(s.grad_norm, 0.0);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                let want = if a.shape.len() == 2 { y * (1.0 - 0.001) } else { *y };
                assert!((x - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn clipping_caps_applied_norm() {
        let mut p = params();
        let mut g = p.zeros_like();
        g.tok_emb.data[0] = 6.0;
        g.lm_head.data[3] = 8.0;
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        let s = opt_step(&mut p, &g, &mut st, 1.0).unwrap();
        assert!((s.grad_norm - 10.0).abs() < 1e-12);
        assert!((s.clip_scale - 0.1).abs() < 1e-15);
        // first moment after one step is (1-β1)·applied gradient
        let applied = st.m.global_norm() / (1.0 - 0.9);
        assert!((applied - 1.0).abs() < 1e-12);
        let s2 = opt_step(&mut p, &g.zeros_like(), &mut st, 1.0).unwrap();
        assert_eq!(s2.clip_scale, 1.0);
    }

    #[test]
    fn two_steps_bit_identical() {
        let run = || {
            let mut p = params();
            let mut g = p.zeros_like();
            g.layers[0].wq.data.iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64).sin());
            let mut st = OptimizerState::new(&p, AdamWConfig::default());
            opt_step(&mut p, &g, &mut st, 1.0).unwrap();
            opt_step(&mut p, &g, &mut st, 1.0).unwrap();
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_clip_and_lr_decays_linearly() {
        let mut p = params();
        let g = p.zeros_like();
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        assert!(opt_step(&mut p, &g, &mut st, 0.0).is_err());
        assert_eq!(linear_lr(1.0, 0, 4), 1.0);
        assert_eq!(linear_lr(1.0, 3, 4), 0.25);
        assert_eq!(linear_lr(1.0, 9, 4), 0.0);
    }
}
