//! Per-token masking probabilities and mask sampling.
//!
//! With a shared time `t` drawn for the reference rate, token `i` is masked
//! with probability `t_i = 1 - (1-t)^(β_i/β_ref)` and its loss weight is
//! `1/t_i`. Uniform rates recover `t_i = t` exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{RateSpec, T_MAX};
use crate::error::{Result, WeftError};

/// Lower end of the time sampling interval.
pub const T_LO: f64 = 1e-3;
/// Smallest per-token masking probability; bounds every weight by `1/T_MIN`.
pub const T_MIN: f64 = 1e-3;
/// Redraws attempted before forcing a mask when a plan comes out empty.
pub const MAX_REDRAWS: usize = 8;

/// Bounds applied when turning times into masking probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingBounds {
    pub t_lo: f64,
    pub t_min: f64,
}

impl Default for MaskingBounds {
    fn default() -> Self {
        MaskingBounds { t_lo: T_LO, t_min: T_MIN }
    }
}

impl MaskingBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_lo > 0.0 && self.t_lo < 1.0) {
            return Err(WeftError::Config(format!("t_lo = {} must lie in (0, 1)", self.t_lo)));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(WeftError::Config(format!("t_min = {} must lie in (0, 1)", self.t_min)));
        }
        Ok(())
    }

    /// Draws the global time from `Uniform(t_lo, 1)`.
    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let t = self.t_lo + (1.0 - self.t_lo) * rng.random::<f64>();
        t.min(T_MAX)
    }

    pub fn t_i(&self, t: f64, beta_i: f64, beta_ref: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(WeftError::TimeOutOfRange(t));
        }
        if !(beta_i >= 0.0 && beta_i.is_finite()) {
            return Err(WeftError::InvalidRate(beta_i));
        }
        if !(beta_ref > 0.0 && beta_ref.is_finite()) {
            return Err(WeftError::InvalidRate(beta_ref));
        }
        let ratio = beta_i / beta_ref;
        let raw = if ratio == 1.0 { t } else { -(ratio * (-t).ln_1p()).exp_m1() };
        Ok(raw.clamp(self.t_min, T_MAX))
    }
}

/// `t_i = 1 - (1-t)^(β_i/β_ref)` clamped to `[T_MIN, T_MAX]`.
pub fn t_i_from_t(t: f64, beta_i: f64, beta_ref: f64) -> Result<f64> {
    MaskingBounds::default().t_i(t, beta_i, beta_ref)
}

/// Probability that token `i` is masked when `t ~ Uniform(0,1)`.
pub fn expected_mask_prob(beta_i: f64, beta_ref: f64) -> f64 {
    beta_i / (beta_i + beta_ref)
}

/// One sampled corruption of a prompt/answer sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub t: f64,
    pub prompt_len: usize,
    /// Masking probability of each answer token.
    pub t_i: Vec<f64>,
    /// Mask indicator for every position of the sequence.
    pub mask: Vec<bool>,
    /// `1/t_i` on masked positions, zero elsewhere.
    pub weights: Vec<f64>,
    /// Whether the forced-mask fallback produced this plan.
    pub forced: bool,
}

impl MaskPlan {
    pub fn seq_len(&self) -> usize {
        self.mask.len()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Copy of `tokens` with masked positions replaced by `mask_id`.
    pub fn apply(&self, tokens: &[u32], mask_id: u32) -> Vec<u32> {
        tokens.iter().zip(&self.mask).map(|(&tok, &m)| if m { mask_id } else { tok }).collect()
    }
}

pub fn sample_mask_plan<R: Rng + ?Sized>(
    t: f64,
    rates: &RateSpec,
    prompt_len: usize,
    seq_len: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    sample_mask_plan_with(&MaskingBounds::default(), t, rates, prompt_len, seq_len, rng)
}

pub fn sample_mask_plan_with<R: Rng + ?Sized>(
    bounds: &MaskingBounds,
    t: f64,
    rates: &RateSpec,
    prompt_len: usize,
    seq_len: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    if prompt_len >= seq_len {
        return Err(WeftError::InvalidArgument(format!("prompt length {prompt_len} leaves no answer in {seq_len}")));
    }
    let answer_len = seq_len - prompt_len;
    if rates.len() != answer_len {
        return Err(WeftError::Shape(format!("{} rates for {answer_len} answer tokens", rates.len())));
    }
    let t_i = rates
        .betas()
        .iter()
        .map(|&b| bounds.t_i(t, b, rates.beta_ref()))
        .collect::<Result<Vec<f64>>>()?;

    let mut answer_mask = vec![false; answer_len];
    let mut forced = true;
    for _ in 0..=MAX_REDRAWS {
        for (m, &p) in answer_mask.iter_mut().zip(&t_i) {
            *m = rng.random::<f64>() < p;
        }
        if answer_mask.iter().any(|&m| m) {
            forced = false;
            break;
        }
    }
    if forced {
        let top = t_i.iter().enumerate().fold(0, |best, (i, &p)| if p > t_i[best] { i } else { best });
        answer_mask[top] = true;
    }

    let mut mask = vec![false; seq_len];
    let mut weights = vec![0.0; seq_len];
    for (k, &m) in answer_mask.iter().enumerate() {
        if m {
            mask[prompt_len + k] = true;
            weights[prompt_len + k] = 1.0 / t_i[k];
        }
    }
    Ok(MaskPlan { t, prompt_len, t_i, mask, weights, forced })
}
