//! Masked-token cross-entropy losses: diffusion SFT, entropy-weighted WeFT,
//! the two reweighting ablations, and an exhaustive expected-loss oracle.
//!
//! Every loss is `Σ_masked weight_i · CE_i / normalizer`, where the weight
//! depends on the kind:
//!
//! | kind            | weight        | masking     |
//! |-----------------|---------------|-------------|
//! | `sft`           | `1/t`         | uniform `t` |
//! | `weft`          | `1/t_i`       | per-token   |
//! | `simple_weight` | `w_i/t`       | uniform `t` |
//! | `dream`         | `geo_i/t`     | uniform `t` |

use serde::{Deserialize, Serialize};

use crate::diffusion::RateSpec;
use crate::error::{Result, WeftError};
use crate::rates::{dream_weights, nll, WeightScheme};
use crate::schedule::{MaskPlan, MaskingBounds, MAX_REDRAWS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Sft,
    Weft,
    SimpleWeight { scheme: WeightScheme },
    Dream { p: f64 },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Sft => "sft",
            LossKind::Weft => "weft",
            LossKind::SimpleWeight { .. } => "sw",
            LossKind::Dream { .. } => "dream",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    MaskedCount,
    AnswerLength,
}

/// One weighted cross-entropy term for the denoiser's backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeTerm {
    pub pos: usize,
    pub label: u32,
    pub coef: f64,
}

/// Scalar objective `Σ coef · CE(logits[pos], label)` over a sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedCe {
    pub terms: Vec<CeTerm>,
}

impl WeightedCe {
    pub fn scaled(&self, s: f64) -> Self {
        WeightedCe { terms: self.terms.iter().map(|t| CeTerm { coef: t.coef * s, ..*t }).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    /// Cross-entropy at each position (zero where not masked).
    pub ce: Vec<f64>,
    /// Weight applied at each position before normalization.
    pub weights: Vec<f64>,
    pub masked_count: usize,
    pub normalizer: f64,
}

impl LossBreakdown {
    /// The same loss as a weighted cross-entropy objective.
    pub fn objective(&self, labels: &[u32]) -> WeightedCe {
        let terms = self
            .weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(pos, &w)| CeTerm { pos, label: labels[pos], coef: w / self.normalizer })
            .collect();
        WeightedCe { terms }
    }
}

/// Logits for a whole sequence, row-major `[seq_len, vocab]`.
#[derive(Debug, Clone, Copy)]
pub struct LogitsView<'a> {
    pub data: &'a [f64],
    pub vocab: usize,
}

impl<'a> LogitsView<'a> {
    pub fn new(data: &'a [f64], vocab: usize) -> Result<Self> {
        if vocab == 0 || data.len() % vocab != 0 {
            return Err(WeftError::Shape(format!("{} logits not divisible by vocab {vocab}", data.len())));
        }
        Ok(LogitsView { data, vocab })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.vocab
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

pub fn cross_entropy(row: &[f64], label: u32) -> Result<f64> {
    nll(row, label as usize)
}

fn normalizer(plan: &MaskPlan, norm: Normalization) -> f64 {
    match norm {
        Normalization::MaskedCount => plan.masked_count() as f64,
        Normalization::AnswerLength => (plan.seq_len() - plan.prompt_len) as f64,
    }
}

/// Shared core: `Σ_masked plan.weights[i]·extra[i]·CE_i / normalizer`.
fn weighted_loss(
    logits: LogitsView<'_>,
    labels: &[u32],
    plan: &MaskPlan,
    extra: Option<&[f64]>,
    norm: Normalization,
) -> Result<LossBreakdown> {
    let n = plan.seq_len();
    if logits.rows() != n || labels.len() != n {
        return Err(WeftError::Shape(format!("logits rows {}, labels {}, plan {n}", logits.rows(), labels.len())));
    }
    if let Some(w) = extra {
        if w.len() != n {
            return Err(WeftError::Shape(format!("{} token weights for {n} positions", w.len())));
        }
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(WeftError::InvalidArgument("token weights must be finite and nonnegative".into()));
        }
    }
    let masked_count = plan.masked_count();
    if masked_count == 0 {
        return Err(WeftError::InvalidArgument("plan has no masked tokens".into()));
    }
    let normalizer = normalizer(plan, norm);
    let mut ce = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        if !plan.mask[i] {
            continue;
        }
        ce[i] = cross_entropy(logits.row(i), labels[i])?;
        weights[i] = match extra {
            Some(w) => plan.weights[i] * w[i],
            None => plan.weights[i],
        };
        total += weights[i] * ce[i];
    }
    Ok(LossBreakdown { loss: total / normalizer, ce, weights, masked_count, normalizer })
}

fn require_uniform(plan: &MaskPlan) -> Result<()> {
    if plan.t_i.iter().all(|&ti| ti == plan.t) {
        Ok(())
    } else {
        Err(WeftError::InvalidArgument("loss expects a uniform-rate mask plan".into()))
    }
}

pub fn sft_loss(logits: LogitsView<'_>, labels: &[u32], plan: &MaskPlan, norm: Normalization) -> Result<LossBreakdown> {
    require_uniform(plan)?;
    weighted_loss(logits, labels, plan, None, norm)
}

pub fn weft_loss(logits: LogitsView<'_>, labels: &[u32], plan: &MaskPlan, norm: Normalization) -> Result<LossBreakdown> {
    weighted_loss(logits, labels, plan, None, norm)
}

/// Uniform masking with an extra per-position weight `w_i`.
pub fn simple_weighted_loss(
    logits: LogitsView<'_>,
    labels: &[u32],
    plan: &MaskPlan,
    w: &[f64],
    norm: Normalization,
) -> Result<LossBreakdown> {
    require_uniform(plan)?;
    weighted_loss(logits, labels, plan, Some(w), norm)
}

/// Uniform masking with geometric proximity weights from the mask pattern.
pub fn dream_loss(
    logits: LogitsView<'_>,
    labels: &[u32],
    plan: &MaskPlan,
    p: f64,
    norm: Normalization,
) -> Result<LossBreakdown> {
    let w = dream_weights(&plan.mask, p)?;
    simple_weighted_loss(logits, labels, plan, &w, norm)
}

/// How the oracle treats the all-visible answer pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyPattern {
    /// Condition on at least one mask (infinitely many redraws).
    Renormalize,
    /// The sampler's exact law: `n` redraws, then the highest-`t_i` token is
    /// forced.
    Redraw(usize),
}

impl Default for EmptyPattern {
    fn default() -> Self {
        EmptyPattern::Redraw(MAX_REDRAWS)
    }
}

/// Exact expectation of the WeFT loss over the mask patterns of the answer
/// at fixed `t` and fixed logits.
pub fn bruteforce_expected_loss(
    logits: LogitsView<'_>,
    labels: &[u32],
    rates: &RateSpec,
    t: f64,
    prompt_len: usize,
    bounds: &MaskingBounds,
    empty: EmptyPattern,
) -> Result<f64> {
    let n = logits.rows();
    if labels.len() != n || prompt_len >= n {
        return Err(WeftError::Shape(format!("labels {}, rows {n}, prompt {prompt_len}", labels.len())));
    }
    let len = n - prompt_len;
    if len > 12 {
        return Err(WeftError::TooLarge(format!("answer length {len} > 12")));
    }
    if rates.len() != len {
        return Err(WeftError::Shape(format!("{} rates for {len} answer tokens", rates.len())));
    }
    let t_i = rates
        .betas()
        .iter()
        .map(|&b| bounds.t_i(t, b, rates.beta_ref()))
        .collect::<Result<Vec<f64>>>()?;
    let ce = (0..len)
        .map(|k| cross_entropy(logits.row(prompt_len + k), labels[prompt_len + k]))
        .collect::<Result<Vec<f64>>>()?;

    let pattern_loss = |bits: usize| -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for k in 0..len {
            if bits >> k & 1 == 1 {
                total += ce[k] / t_i[k];
                count += 1;
            }
        }
        total / count as f64
    };
    let pattern_prob = |bits: usize| -> f64 {
        (0..len).map(|k| if bits >> k & 1 == 1 { t_i[k] } else { 1.0 - t_i[k] }).product()
    };

    let p_none = pattern_prob(0);
    let mut expectation = 0.0;
    for bits in 1..(1usize << len) {
        expectation += pattern_prob(bits) * pattern_loss(bits);
    }
    Ok(match empty {
        EmptyPattern::Renormalize => expectation / (1.0 - p_none),
        EmptyPattern::Redraw(r) => {
            let tries = (r + 1) as i32;
            let kept = if p_none < 1.0 { (1.0 - p_none.powi(tries)) / (1.0 - p_none) } else { tries as f64 };
            let top = t_i.iter().enumerate().fold(0, |best, (i, &p)| if p > t_i[best] { i } else { best });
            expectation * kept + p_none.powi(tries) * pattern_loss(1 << top)
        }
    })
}
