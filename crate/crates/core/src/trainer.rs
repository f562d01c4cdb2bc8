//! Training loop for every loss arm.
//!
//! A WeFT example takes two forward passes: the first sees the prompt with
//! the whole answer masked and yields per-token rates; the second sees the
//! partially masked sequence and carries the gradient. Arms whose weights do
//! not depend on logits skip the first pass.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::{RateSpec, BETA_FLOOR};
use crate::error::{Result, WeftError};
use crate::losses::{
    dream_loss, sft_loss, simple_weighted_loss, weft_loss, LogitsView, LossBreakdown, LossKind, Normalization,
};
use crate::model::optim::{linear_lr, opt_step, AdamWConfig, OptimizerState};
use crate::model::{Denoiser, DenoiserParams, DType, Scalar};
use crate::rates::{raw_betas, WeightScheme};
use crate::rng::{self, Stream};
use crate::schedule::{sample_mask_plan_with, MaskPlan, MaskingBounds, T_LO, T_MIN};
use crate::tasks::{TaskInstance, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossArm {
    Sft,
    Weft,
    Sw,
    Dream,
}

impl LossArm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(LossArm::Sft),
            "weft" => Ok(LossArm::Weft),
            "sw" => Ok(LossArm::Sw),
            "dream" => Ok(LossArm::Dream),
            other => Err(WeftError::Config(format!("unknown loss {other:?} (sft, weft, sw, dream)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    SqrtEntropy,
    RawEntropy,
    Nll,
    Uniform,
}

impl SchemeName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sqrt_entropy" => Ok(SchemeName::SqrtEntropy),
            "raw_entropy" => Ok(SchemeName::RawEntropy),
            "nll" => Ok(SchemeName::Nll),
            "uniform" => Ok(SchemeName::Uniform),
            other => Err(WeftError::Config(format!("unknown scheme {other:?} (sqrt_entropy, raw_entropy, nll, uniform)"))),
        }
    }

    pub fn scheme(self) -> WeightScheme {
        match self {
            SchemeName::SqrtEntropy => WeightScheme::SqrtEntropy,
            SchemeName::RawEntropy => WeightScheme::RawEntropy,
            SchemeName::Nll => WeightScheme::Nll,
            SchemeName::Uniform => WeightScheme::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossArm,
    pub scheme: SchemeName,
    pub dream_p: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Caps the number of optimizer steps; 0 means no cap.
    pub max_steps: u64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub t_lo: f64,
    pub t_min: f64,
    pub beta_floor: f64,
    pub normalization: Normalization,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossArm::Weft,
            scheme: SchemeName::SqrtEntropy,
            dream_p: 0.3,
            lr: 3e-4,
            weight_decay: 0.1,
            epochs: 20,
            max_steps: 0,
            batch_size: 8,
            grad_accum: 4,
            clip_norm: 1.0,
            seed: 0,
            t_lo: T_LO,
            t_min: T_MIN,
            beta_floor: BETA_FLOOR,
            normalization: Normalization::MaskedCount,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(WeftError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return fail("epochs, batch_size and grad_accum must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive".into());
        }
        if !(self.beta_floor > 0.0) {
            return fail("beta_floor must be positive".into());
        }
        if !(self.dream_p > 0.0 && self.dream_p < 1.0) {
            return fail(format!("dream_p {} must lie in (0, 1)", self.dream_p));
        }
        self.bounds().validate()?;
        self.adamw().validate()
    }

    pub fn bounds(&self) -> MaskingBounds {
        MaskingBounds { t_lo: self.t_lo, t_min: self.t_min }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    pub fn examples_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    /// Optimizer steps for a training set of `n` examples.
    pub fn total_steps(&self, n: usize) -> u64 {
        let per = self.examples_per_step() as u64;
        let steps = (self.epochs as u64 * n as u64).div_ceil(per);
        if self.max_steps > 0 {
            steps.min(self.max_steps)
        } else {
            steps
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.loss {
            LossArm::Sft => LossKind::Sft,
            LossArm::Weft => LossKind::Weft,
            LossArm::Sw => LossKind::SimpleWeight { scheme: self.scheme.scheme() },
            LossArm::Dream => LossKind::Dream { p: self.dream_p },
        }
    }

    /// Whether an example needs the fully-masked rate-estimation pass.
    pub fn two_pass(&self) -> bool {
        matches!(self.loss, LossArm::Weft | LossArm::Sw) && self.scheme.scheme().needs_logits()
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub lr: f64,
    pub examples: usize,
    pub forward_passes: u64,
    pub forward_passes_per_example: f64,
    pub masked_tokens: usize,
    pub beta_mean: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_floored_frac: f64,
    pub skipped: bool,
}

/// Wall-clock cost of a step, kept out of the metrics stream so that the
/// latter is reproducible bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: u64,
    pub wall_ms: f64,
}

/// Everything one example contributes to a step.
#[derive(Debug, Clone)]
pub struct ExampleOutcome<F> {
    pub breakdown: LossBreakdown,
    pub grads: DenoiserParams<F>,
    pub forwards: u64,
    /// Rates (WeFT) or extra weights (simple-weight) per answer token.
    pub betas: Vec<f64>,
    pub floored: usize,
    pub plan: MaskPlan,
}

/// Input to pass 1: the prompt with every answer token masked.
pub fn rate_pass_input(inst: &TaskInstance) -> Vec<u32> {
    let mut t = inst.prompt_ids.clone();
    t.extend(std::iter::repeat_n(MASK, inst.answer_ids.len()));
    t
}

/// Rates from pass-1 logits at the answer positions.
pub fn estimate_rates<F: Scalar>(model: &Denoiser<F>, inst: &TaskInstance, scheme: WeightScheme) -> Result<Vec<f64>> {
    let v = model.config.vocab_size;
    let logits_pass1: Vec<f64> = model.forward(&rate_pass_input(inst))?.into_iter().map(Scalar::to_f64).collect();
    let p = inst.prompt_ids.len();
    let rows = (0..inst.answer_ids.len()).map(|k| &logits_pass1[(p + k) * v..(p + k + 1) * v]);
    let targets: Vec<usize> = inst.answer_ids.iter().map(|&t| t as usize).collect();
    raw_betas(rows, scheme, Some(&targets))
}

/// Loss and gradient of a single example. `index` selects the example's
/// masking sub-stream, so the outcome does not depend on batch layout.
/// `scale` multiplies the objective (the step's averaging factor).
pub fn example_step<F: Scalar>(
    model: &Denoiser<F>,
    inst: &TaskInstance,
    cfg: &TrainConfig,
    index: u64,
    scale: f64,
) -> Result<ExampleOutcome<F>> {
    let before = model.forward_calls();
    let answer_len = inst.answer_ids.len();
    let raw = if cfg.two_pass() { Some(estimate_rates(model, inst, cfg.scheme.scheme())?) } else { None };

    let (rates, extra_w) = match (cfg.loss, raw) {
        (LossArm::Weft, Some(raw)) => (RateSpec::from_mean(raw, cfg.beta_floor)?, None),
        (LossArm::Sw, Some(raw)) => (RateSpec::uniform(answer_len), Some(raw)),
        _ => (RateSpec::uniform(answer_len), None),
    };

    let mut rng = rng::indexed(cfg.seed, Stream::Masking, index);
    let bounds = cfg.bounds();
    let t = bounds.sample_t(&mut rng);
    let plan = sample_mask_plan_with(&bounds, t, &rates, inst.prompt_ids.len(), inst.seq_len(), &mut rng)?;
    let labels = inst.tokens();
    let noisy = plan.apply(&labels, MASK);

    let mut full_w = vec![0.0; inst.seq_len()];
    if let Some(w) = &extra_w {
        full_w[inst.prompt_ids.len()..].copy_from_slice(w);
    }
    let kind = cfg.loss_kind();
    let norm = cfg.normalization;
    let (breakdown, _, grads) = model.backward_with(&noisy, |logits_pass2| {
        let view = LogitsView::new(logits_pass2, model.config.vocab_size)?;
        let b = match kind {
            LossKind::Sft => sft_loss(view, &labels, &plan, norm)?,
            LossKind::Weft => weft_loss(view, &labels, &plan, norm)?,
            LossKind::SimpleWeight { .. } => {
                if extra_w.is_some() {
                    simple_weighted_loss(view, &labels, &plan, &full_w, norm)?
                } else {
                    sft_loss(view, &labels, &plan, norm)?
                }
            }
            LossKind::Dream { p } => dream_loss(view, &labels, &plan, p, norm)?,
        };
        Ok((b.objective(&labels).scaled(scale), b))
    })?;
    let betas = extra_w.unwrap_or_else(|| rates.betas().to_vec());
    Ok(ExampleOutcome {
        breakdown,
        grads,
        forwards: model.forward_calls() - before,
        floored: rates.floored(),
        betas,
        plan,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BetaStats {
    sum: f64,
    min: f64,
    max: f64,
    count: usize,
    floored: usize,
}

impl BetaStats {
    fn new() -> Self {
        BetaStats { sum: 0.0, min: f64::INFINITY, max: f64::NEG_INFINITY, count: 0, floored: 0 }
    }

    fn add(&mut self, betas: &[f64], floored: usize) {
        for &b in betas {
            self.sum += b;
            self.min = self.min.min(b);
            self.max = self.max.max(b);
        }
        self.count += betas.len();
        self.floored += floored;
    }
}

pub struct Trainer<F: Scalar> {
    pub cfg: TrainConfig,
    pub model: Denoiser<F>,
    pub opt: OptimizerState<F>,
    data: Vec<TaskInstance>,
    total_steps: u64,
    order: Vec<usize>,
    order_epoch: u64,
    last_grads: Option<DenoiserParams<F>>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(cfg: TrainConfig, model: Denoiser<F>, data: Vec<TaskInstance>) -> Result<Self> {
        let opt = OptimizerState::new(&model.params, cfg.adamw());
        Self::resume(cfg, model, opt, data)
    }

    /// Continues from a saved model and optimizer state; the data cursor is
    /// recovered from the optimizer's step counter.
    pub fn resume(cfg: TrainConfig, model: Denoiser<F>, opt: OptimizerState<F>, data: Vec<TaskInstance>) -> Result<Self> {
        cfg.validate()?;
        if F::DTYPE != cfg.dtype {
            return Err(WeftError::Config(format!("trainer built for {:?} but config asks for {:?}", F::DTYPE, cfg.dtype)));
        }
        if data.is_empty() {
            return Err(WeftError::InvalidArgument("empty training set".into()));
        }
        if let Some(bad) = data.iter().find(|d| d.seq_len() > model.config.max_seq_len || d.answer_ids.is_empty()) {
            return Err(WeftError::Config(format!("instance of length {} does not fit max_seq_len", bad.seq_len())));
        }
        opt.m.check_layout(&model.config)?;
        let total_steps = cfg.total_steps(data.len());
        let mut t = Trainer { cfg, model, opt, data, total_steps, order: Vec::new(), order_epoch: u64::MAX, last_grads: None };
        t.opt.hp.weight_decay = cfg.weight_decay;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.opt.step >= self.total_steps
    }

    /// Accumulated (pre-clip) gradient of the most recent step.
    pub fn last_grads(&self) -> Option<&DenoiserParams<F>> {
        self.last_grads.as_ref()
    }

    /// Training-set index of the `k`-th example ever drawn.
    fn example_at(&mut self, k: u64) -> usize {
        let n = self.data.len() as u64;
        let epoch = k / n;
        if epoch != self.order_epoch {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut rng::indexed(self.cfg.seed, Stream::Order, epoch));
            self.order_epoch = epoch;
        }
        self.order[(k % n) as usize]
    }

    pub fn step(&mut self) -> Result<TrainRecord> {
        let per_step = self.cfg.examples_per_step();
        let first = self.opt.step * per_step as u64;
        let scale = 1.0 / per_step as f64;
        let mut grads = self.model.params.zeros_like();
        let mut loss = 0.0;
        let mut forwards = 0;
        let mut masked = 0;
        let mut stats = BetaStats::new();
        let mut skipped = false;

        for k in first..first + per_step as u64 {
            let idx = self.example_at(k);
            match example_step(&self.model, &self.data[idx], &self.cfg, k, scale) {
                Ok(out) => {
                    grads.add_scaled(&out.grads, F::one());
                    loss += out.breakdown.loss * scale;
                    forwards += out.forwards;
                    masked += out.breakdown.masked_count;
                    stats.add(&out.betas, out.floored);
                }
                Err(WeftError::NonFinite(_)) => skipped = true,
                Err(e) => return Err(e),
            }
        }

        let lr = linear_lr(self.cfg.lr, self.opt.step, self.total_steps);
        self.opt.hp.lr = lr;
        let grad_norm = grads.global_norm();
        let (clip_scale, skipped) = if skipped || !grad_norm.is_finite() {
            self.opt.step += 1;
            (0.0, true)
        } else {
            (opt_step(&mut self.model.params, &grads, &mut self.opt, self.cfg.clip_norm)?.clip_scale, false)
        };
        self.last_grads = Some(grads);
        Ok(TrainRecord {
            step: self.opt.step,
            loss,
            grad_norm,
            clip_scale,
            lr,
            examples: per_step,
            forward_passes: forwards,
            forward_passes_per_example: forwards as f64 / per_step as f64,
            masked_tokens: masked,
            beta_mean: stats.sum / stats.count.max(1) as f64,
            beta_min: stats.min,
            beta_max: stats.max,
            beta_floored_frac: stats.floored as f64 / stats.count.max(1) as f64,
            skipped,
        })
    }

    /// Runs up to `n` steps (bounded by the schedule), streaming records.
    pub fn run<W: Write>(&mut self, n: u64, mut metrics: Option<&mut W>, mut timings: Option<&mut W>) -> Result<Vec<TrainRecord>> {
        let mut out = Vec::new();
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            let start = std::time::Instant::now();
            let rec = self.step()?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            if let Some(w) = metrics.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            if let Some(w) = timings.as_deref_mut() {
                serde_json::to_writer(&mut *w, &TimingRecord { step: rec.step, wall_ms })?;
                w.write_all(b"\n")?;
            }
            out.push(rec);
        }
        Ok(out)
    }

    pub fn run_to_end(&mut self) -> Result<Vec<TrainRecord>> {
        self.run::<Vec<u8>>(u64::MAX, None, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormSummary {
    pub scheme: SchemeName,
    pub steps: usize,
    pub max: f64,
    pub median: f64,
    pub mean: f64,
}

pub fn summarize_norms(scheme: SchemeName, norms: &[f64]) -> GradNormSummary {
    let mut sorted = norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    GradNormSummary {
        scheme,
        steps: n,
        max: sorted.last().copied().unwrap_or(f64::NAN),
        median,
        mean: sorted.iter().sum::<f64>() / n.max(1) as f64,
    }
}

/// Pre-clip gradient norms of WeFT runs that differ only in the rate scheme.
pub fn gradnorm_study<F: Scalar>(
    base: &TrainConfig,
    model: &Denoiser<F>,
    data: &[TaskInstance],
    schemes: &[SchemeName],
    steps: u64,
) -> Result<Vec<GradNormSummary>> {
    schemes
        .iter()
        .map(|&scheme| {
            let cfg = TrainConfig { loss: LossArm::Weft, scheme, max_steps: steps, ..*base };
            let fresh = Denoiser::from_parts(model.config, model.params.clone());
            let mut tr = Trainer::new(cfg, fresh, data.to_vec())?;
            let norms: Vec<f64> = tr.run_to_end()?.iter().map(|r| r.grad_norm).collect();
            Ok(summarize_norms(scheme, &norms))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::tasks::{generate_split, Split, TaskSpec};

    fn setup(cfg: TrainConfig) -> Trainer<f32> {
        let data = generate_split(&TaskSpec::Modadd { modulus: 10 }, 1, Split::Train, 40).unwrap();
        let mc = DenoiserConfig { d_model: 16, n_heads: 2, ffn_hidden: 32, max_seq_len: 16, ..DenoiserConfig::desk(20, 19, 18) };
        Trainer::new(cfg, Denoiser::new(mc).unwrap(), data).unwrap()
    }

    fn small(loss: LossArm, scheme: SchemeName) -> TrainConfig {
        TrainConfig { loss, scheme, batch_size: 2, grad_accum: 2, max_steps: 6, ..TrainConfig::default() }
    }

    #[test]
    fn forward_counts_per_arm() {
        for (loss, scheme, per) in [
            (LossArm::Sft, SchemeName::Uniform, 1.0),
            (LossArm::Weft, SchemeName::SqrtEntropy, 2.0),
            (LossArm::Weft, SchemeName::Uniform, 1.0),
            (LossArm::Sw, SchemeName::SqrtEntropy, 2.0),
            (LossArm::Dream, SchemeName::Uniform, 1.0),
        ] {
            let mut t = setup(small(loss, scheme));
            for r in t.run_to_end().unwrap() {
                assert_eq!(r.forward_passes_per_example, per, "{loss:?} {scheme:?}");
                assert_eq!(r.forward_passes, (per as u64) * 4);
            }
        }
    }

    #[test]
    fn uniform_weft_matches_sft_bitwise() {
        let mut a = setup(small(LossArm::Sft, SchemeName::Uniform));
        let mut b = setup(small(LossArm::Weft, SchemeName::Uniform));
        for _ in 0..6 {
            let (ra, rb) = (a.step().unwrap(), b.step().unwrap());
            assert_eq!(ra, rb);
            assert_eq!(a.last_grads(), b.last_grads());
        }
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn reruns_are_identical() {
        let run = || setup(small(LossArm::Weft, SchemeName::SqrtEntropy)).run_to_end().unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { clip_norm: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { t_lo: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(LossArm::parse("ppo").is_err());
        assert!(SchemeName::parse("entropy").is_err());
        assert_eq!(TrainConfig { epochs: 2, batch_size: 3, grad_accum: 2, ..TrainConfig::default() }.total_steps(13), 5);
    }

    #[test]
    fn rate_pass_masks_whole_answer() {
        let inst = crate::tasks::modadd_instance(3, 4, 10).unwrap();
        let x = rate_pass_input(&inst);
        assert_eq!(&x[..inst.prompt_ids.len()], &inst.prompt_ids[..]);
        assert!(x[inst.prompt_ids.len()..].iter().all(|&t| t == MASK));
    }

    #[test]
    fn median_of_norms() {
        let s = summarize_norms(SchemeName::Uniform, &[3.0, 1.0, 2.0, 10.0]);
        assert_eq!((s.max, s.median, s.mean), (10.0, 2.5, 4.0));
    }
}
