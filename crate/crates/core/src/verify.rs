//! Property checks of the forward process, the rate-weighted schedule, the
//! rate estimators, the losses and the denoiser gradients, each compared
//! against an independent oracle.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    absorbing_generator, ctmc_mask_fraction, matrix_exp_oracle, noised_sequences, pt_marginal_exact, pt_product_formula,
    score_ratio_closed, score_ratio_enumerated, transition_closed, NoiseSchedule, RateSpec, TinyDistribution, BETA_FLOOR,
};
use crate::error::{Result, WeftError};
use crate::losses::{
    bruteforce_expected_loss, dream_loss, sft_loss, simple_weighted_loss, weft_loss, EmptyPattern, LogitsView,
    Normalization,
};
use crate::model::gradcheck::{directional_check, random_direction};
use crate::model::{Denoiser, DenoiserConfig};
use crate::rates::{dream_weights, entropy, make_rate_spec, WeightScheme};
use crate::rng::{self, Stream};
use crate::schedule::{expected_mask_prob, sample_mask_plan, t_i_from_t, MaskingBounds, T_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Fast,
    Full,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Profile::Fast),
            "full" => Ok(Profile::Full),
            other => Err(WeftError::Config(format!("unknown profile {other:?} (fast, full)"))),
        }
    }
}

/// Deliberate faults, used to show that a check can fail.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Faults {
    /// Evaluate the closed-form score ratio with `-β`.
    pub flip_beta_sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckResult {
    pub name: String,
    /// What `observed` is compared against, and how.
    pub criterion: String,
    pub tolerance: f64,
    pub observed: f64,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyReport {
    pub profile: Profile,
    pub seed: u64,
    pub faults: Faults,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

/// Problem sizes per profile.
#[derive(Debug, Clone, Copy)]
pub struct Sizes {
    pub ctmc_trials: usize,
    pub ctmc_steps: usize,
    pub tiny_distributions: usize,
    pub marginal_draws: usize,
    pub estimator_fixtures: usize,
    pub estimator_draws: usize,
    pub grad_batches: usize,
}

impl Sizes {
    pub fn of(profile: Profile) -> Self {
        match profile {
            Profile::Fast => Sizes {
                ctmc_trials: 100_000,
                ctmc_steps: 100,
                tiny_distributions: 50,
                marginal_draws: 200_000,
                estimator_fixtures: 4,
                estimator_draws: 20_000,
                grad_batches: 2,
            },
            Profile::Full => Sizes {
                ctmc_trials: 1_000_000,
                ctmc_steps: 100,
                tiny_distributions: 50,
                marginal_draws: 1_000_000,
                estimator_fixtures: 10,
                estimator_draws: 100_000,
                grad_batches: 10,
            },
        }
    }
}

/// The (β, t) grid used by the forward-process checks.
pub const BETA_GRID: [f64; 3] = [0.25, 1.0, 4.0];
pub const T_GRID: [f64; 3] = [0.1, 0.5, 0.9];

fn result(name: &str, criterion: &str, tolerance: f64, observed: f64, passed: bool, start: Instant) -> CheckResult {
    CheckResult {
        name: name.into(),
        criterion: criterion.into(),
        tolerance,
        observed,
        passed,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Largest |z| of simulated mask frequencies against the closed-form
/// kernel over the grid.
pub fn check_ctmc(sizes: &Sizes, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let sched = NoiseSchedule::default();
    let mut worst: f64 = 0.0;
    for (gi, &beta) in BETA_GRID.iter().enumerate() {
        for (gj, &t) in T_GRID.iter().enumerate() {
            let p = transition_closed(beta, &sched, t)?.mask;
            let sub = seed ^ ((gi * 3 + gj) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let f = ctmc_mask_fraction(beta, &sched, t, sizes.ctmc_steps, sizes.ctmc_trials, sub)?;
            let se = (p * (1.0 - p) / sizes.ctmc_trials as f64).sqrt();
            worst = worst.max((f - p).abs() / se);
        }
    }
    Ok(result("ctmc_vs_closed_kernel", "max |z| of simulated mask frequency", 4.0, worst, worst <= 4.0, start))
}

/// Largest entrywise gap between `exp(Q f̄)` and the closed-form kernel,
/// and the largest row-sum error, over the grid and 20 random `(β, t)`.
pub fn check_expm(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let sched = NoiseSchedule::default();
    let mut rng = rng::indexed(seed, Stream::Verify, 7);
    let mut cases: Vec<(Vec<f64>, f64)> = T_GRID.iter().map(|&t| (BETA_GRID.to_vec(), t)).collect();
    for _ in 0..20 {
        cases.push((vec![rng.random_range(0.05..5.0)], rng.random_range(0.01..0.99)));
    }
    let mut worst: f64 = 0.0;
    for (betas, t) in cases {
        let q = absorbing_generator(&betas)?;
        let p = matrix_exp_oracle(&q, sched.integral(t)?)?;
        let m = betas.len();
        for (i, &beta) in betas.iter().enumerate() {
            let k = transition_closed(beta, &sched, t)?;
            worst = worst.max((p.get(i, i) - k.survive).abs()).max((p.get(i, m) - k.mask).abs());
            for j in (0..m).filter(|&j| j != i) {
                worst = worst.max(p.get(i, j).abs());
            }
        }
        worst = worst.max((p.get(m, m) - 1.0).abs()).max(p.max_row_sum_error(1.0));
    }
    Ok(result("expm_vs_closed_kernel", "max abs entry or row-sum error", 1e-9, worst, worst <= 1e-9, start))
}

fn random_tiny<R: Rng + ?Sized>(rng: &mut R) -> Result<(TinyDistribution, RateSpec, f64)> {
    let d = rng.random_range(1..=3);
    let v = rng.random_range(2..=3);
    let p0 = TinyDistribution::random(d, v, rng)?;
    let raw: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..3.0)).collect();
    let rates = RateSpec::from_mean(raw, BETA_FLOOR)?;
    let t = rng.random_range(0.05..0.95);
    Ok((p0, rates, t))
}

/// Closed-form score ratio against enumeration of the noised marginal.
pub fn check_score_ratio(sizes: &Sizes, seed: u64, faults: Faults) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = rng::indexed(seed, Stream::Verify, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..sizes.tiny_distributions {
        let (p0, rates, t) = random_tiny(&mut rng)?;
        let sched = NoiseSchedule::log_linear(rates.beta_ref())?;
        let pt = pt_marginal_exact(&p0, &rates, &sched, t)?;
        let mask = p0.mask_symbol();
        for xt in noised_sequences(&p0) {
            for i in (0..xt.len()).filter(|&i| xt[i] == mask) {
                for v in 0..p0.vocab() {
                    let mut closed = score_ratio_closed(&p0, &rates, &sched, t, &xt, i, v)?;
                    if faults.flip_beta_sign {
                        let f = rates.betas()[i] * sched.integral(t)?;
                        let right = (-f).exp() / -(-f).exp_m1();
                        let wrong = f.exp() / -f.exp_m1();
                        closed = closed / right * wrong;
                    }
                    let enumerated = score_ratio_enumerated(&p0, &pt, &xt, i, v)?;
                    worst = worst.max((closed - enumerated).abs());
                }
            }
        }
    }
    Ok(result("score_ratio_closed_form", "max abs error, closed form vs enumeration", 1e-10, worst, worst <= 1e-10, start))
}

/// Product formula for the noised marginal against full enumeration.
pub fn check_product_formula(sizes: &Sizes, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = rng::indexed(seed, Stream::Verify, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..sizes.tiny_distributions {
        let (p0, rates, t) = random_tiny(&mut rng)?;
        let sched = NoiseSchedule::log_linear(rates.beta_ref())?;
        let pt = pt_marginal_exact(&p0, &rates, &sched, t)?;
        for (k, xt) in noised_sequences(&p0).iter().enumerate() {
            worst = worst.max((pt_product_formula(&p0, &rates, &sched, t, xt)? - pt[k]).abs());
        }
    }
    Ok(result("noised_marginal_product_formula", "max abs error vs enumeration", 1e-12, worst, worst <= 1e-12, start))
}

/// Per-token time against the forward kernel at rate `β_i` under the
/// reference schedule.
pub fn check_schedule() -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for &beta_ref in &[0.5, 1.0, 2.0] {
        let sched = NoiseSchedule::log_linear(beta_ref)?;
        for &beta in &BETA_GRID {
            for &t in &T_GRID {
                let k = transition_closed(beta, &sched, t)?;
                if k.mask > T_MIN {
                    worst = worst.max((t_i_from_t(t, beta, beta_ref)? - k.mask).abs());
                }
            }
        }
    }
    Ok(result("t_i_vs_forward_kernel", "max abs error", 1e-12, worst, worst <= 1e-12, start))
}

/// Mask frequency under `t ~ U(0, 1)` against `β_i/(β_i+β_ref)`.
pub fn check_marginal_frequency(sizes: &Sizes, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let betas = [0.25, 0.5, 1.0, 2.0, 4.0];
    let beta_ref = 1.0;
    let mut rng = rng::indexed(seed, Stream::Verify, 3);
    let n = sizes.marginal_draws;
    let mut worst: f64 = 0.0;
    for &b in &betas {
        let mut hits = 0usize;
        for _ in 0..n {
            let t = 1.0 - rng.random::<f64>();
            let p = if t >= 1.0 { 1.0 } else { t_i_from_t(t, b, beta_ref)? };
            hits += (rng.random::<f64>() < p) as usize;
        }
        let p = expected_mask_prob(b, beta_ref);
        let f = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        worst = worst.max((f - p).abs() / se);
    }
    Ok(result("uniform_t_marginal_mask_rate", "max |z| vs β/(β+β_ref)", 4.0, worst, worst <= 4.0, start))
}

/// Monte Carlo mean of the WeFT loss against exhaustive expectation.
pub fn check_estimator(sizes: &Sizes, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = rng::indexed(seed, Stream::Verify, 4);
    let bounds = MaskingBounds::default();
    let vocab = 6;
    let mut worst: f64 = 0.0;
    for f in 0..sizes.estimator_fixtures {
        let len = 1 + f % 4;
        let prompt = 1;
        let n = prompt + len;
        let logits: Vec<f64> = (0..n * vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..vocab as u32)).collect();
        let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.1..3.0)).collect();
        let rates = RateSpec::from_mean(raw, BETA_FLOOR)?;
        let t = rng.random_range(0.05..0.95);
        let view = LogitsView::new(&logits, vocab)?;
        let exact = bruteforce_expected_loss(view, &labels, &rates, t, prompt, &bounds, EmptyPattern::default())?;
        let mut mrng = rng::indexed(seed, Stream::Masking, f as u64);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..sizes.estimator_draws {
            let plan = sample_mask_plan(t, &rates, prompt, n, &mut mrng)?;
            let l = weft_loss(view, &labels, &plan, Normalization::MaskedCount)?.loss;
            sum += l;
            sq += l * l;
        }
        let m = sizes.estimator_draws as f64;
        let mean = sum / m;
        let se = ((sq / m - mean * mean).max(0.0) / (m - 1.0)).sqrt();
        // deterministic fixtures (one answer token) leave only rounding
        worst = worst.max((mean - exact).abs() / se.max(1e-12 * exact.abs().max(1.0)));
    }
    Ok(result("weft_estimator_unbiased", "max |z| of MC mean vs exhaustive expectation", 3.0, worst, worst <= 3.0, start))
}

/// WeFT with uniform rates equals SFT bit for bit, and the rate
/// estimators match closed-form values.
pub fn check_reduction_and_rates(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = rng::indexed(seed, Stream::Verify, 5);
    let vocab = 5;
    let mut mismatches = 0.0;
    for k in 0..200 {
        let n = 2 + k % 7;
        let prompt = k % 2;
        let logits: Vec<f64> = (0..n * vocab).map(|_| rng.random_range(-4.0..4.0)).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..vocab as u32)).collect();
        let view = LogitsView::new(&logits, vocab)?;
        let t = rng.random_range(0.01..1.0);
        let uni = RateSpec::uniform(n - prompt);
        let a = sample_mask_plan(t, &uni, prompt, n, &mut rng::indexed(seed, Stream::Masking, k as u64))?;
        let b = sample_mask_plan(t, &uni, prompt, n, &mut rng::indexed(seed, Stream::Masking, k as u64))?;
        let s = sft_loss(view, &labels, &a, Normalization::MaskedCount)?;
        let w = weft_loss(view, &labels, &b, Normalization::MaskedCount)?;
        let ones = vec![1.0; n];
        let sw = simple_weighted_loss(view, &labels, &a, &ones, Normalization::MaskedCount)?;
        mismatches += (s.loss.to_bits() != w.loss.to_bits() || s.loss.to_bits() != sw.loss.to_bits()) as u8 as f64;
    }
    // rate-estimator anchors
    let uniform = [0.0; 4];
    mismatches += ((entropy(&uniform)? - 4f64.ln()).abs() > 1e-12) as u8 as f64;
    let rows = [[0.0, 0.0, 0.0], [2.0, 0.0, -1.0]];
    let spec = make_rate_spec(rows.iter().map(|r| &r[..]), WeightScheme::SqrtEntropy, None, BETA_FLOOR)?;
    let mean = (entropy(&rows[0])?.sqrt() + entropy(&rows[1])?.sqrt()) / 2.0;
    mismatches += ((spec.beta_ref() - mean).abs() > 1e-15) as u8 as f64;
    let dw = dream_weights(&[false, true, true, true, true], 0.3)?;
    mismatches += ((dw[2] - 0.105).abs() > 1e-15) as u8 as f64;
    Ok(result("reduction_and_rate_anchors", "count of mismatches", 0.0, mismatches, mismatches == 0.0, start))
}

/// Small f64 model used by the gradient checks.
pub fn gradcheck_model(seed: u64) -> Result<Denoiser<f64>> {
    let cfg = DenoiserConfig { d_model: 32, n_heads: 4, ffn_hidden: 64, max_seq_len: 16, seed, ..DenoiserConfig::desk(12, 11, 10) };
    Denoiser::new(cfg)
}

pub const GRAD_LOSS_KINDS: [&str; 4] = ["sft", "weft", "sw", "dream"];

/// Per-loss-kind worst relative error of analytic directional derivatives
/// against central differences.
pub fn gradient_errors(batches: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let model = gradcheck_model(seed)?;
    let vocab = model.config.vocab_size;
    let mask = model.config.mask_token_id;
    let norm = Normalization::MaskedCount;
    let mut rng = rng::indexed(seed, Stream::Verify, 6);
    let n_tensors = model.params.names().len();
    let mut worst = [0.0f64; 4];
    for b in 0..batches {
        let n = rng.random_range(6..=12);
        let prompt = rng.random_range(1..n - 2);
        let clean: Vec<u32> = (0..n).map(|_| rng.random_range(0..10u32)).collect();
        let t = rng.random_range(0.3..0.9);
        let uniform = sample_mask_plan(t, &RateSpec::uniform(n - prompt), prompt, n, &mut rng)?;
        let raw: Vec<f64> = (0..n - prompt).map(|_| rng.random_range(0.2..2.5)).collect();
        let weighted = sample_mask_plan(t, &RateSpec::from_mean(raw, BETA_FLOOR)?, prompt, n, &mut rng)?;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        for (kind, slot) in worst.iter_mut().enumerate() {
            let plan = if kind == 1 { &weighted } else { &uniform };
            let tokens = plan.apply(&clean, mask);
            let logits = model.forward(&tokens)?;
            let view = LogitsView::new(&logits, vocab)?;
            let bd = match kind {
                0 => sft_loss(view, &clean, plan, norm)?,
                1 => weft_loss(view, &clean, plan, norm)?,
                2 => simple_weighted_loss(view, &clean, plan, &w, norm)?,
                _ => dream_loss(view, &clean, plan, 0.3, norm)?,
            };
            let obj = bd.objective(&clean);
            for only in [None, Some((b * 4 + kind) % n_tensors)] {
                let dir = random_direction(&model.params, only, &mut rng);
                let c = directional_check(&model, &tokens, &obj, &dir, 1e-5)?;
                *slot = slot.max(c.rel_err);
            }
        }
    }
    Ok(GRAD_LOSS_KINDS.iter().zip(worst).map(|(n, e)| (n.to_string(), e)).collect())
}

pub fn check_gradients(sizes: &Sizes, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let errs = gradient_errors(sizes.grad_batches, seed)?;
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(result("denoiser_gradients", "max relative error of directional derivatives, all loss kinds", 1e-4, worst, worst <= 1e-4, start))
}

pub fn run_suite(profile: Profile, seed: u64, faults: Faults) -> Result<VerifyReport> {
    let sizes = Sizes::of(profile);
    let checks = vec![
        check_ctmc(&sizes, seed)?,
        check_expm(seed)?,
        check_score_ratio(&sizes, seed, faults)?,
        check_product_formula(&sizes, seed)?,
        check_schedule()?,
        check_marginal_frequency(&sizes, seed)?,
        check_estimator(&sizes, seed)?,
        check_reduction_and_rates(seed)?,
        check_gradients(&sizes, seed)?,
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { profile, seed, faults, passed, checks })
}
