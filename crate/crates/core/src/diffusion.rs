//! Absorbing continuous-time discrete diffusion with per-token rates.
//!
//! A token at rate `β` keeps its identity up to time `t` with probability
//! `exp(-β·f̄(t))` and is otherwise absorbed into the mask state. Besides the
//! closed forms this module carries the brute-force machinery (matrix
//! exponential, CTMC simulation, exhaustive marginals over tiny joint
//! distributions) used to check them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WeftError};
use crate::rng;

/// Largest admissible diffusion time. `t = 1` is the fully absorbed limit,
/// where the default schedule's accumulated noise diverges.
pub const T_MAX: f64 = 1.0 - 1e-9;

/// Minimum masking rate kept by [`RateSpec`].
pub const BETA_FLOOR: f64 = 1e-6;

/// Speed of the forward process, stored through its integral `f̄`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `f̄(t) = -ln(1-t)/β_ref`: the reference-rate token is masked with
    /// probability exactly `t`.
    LogLinear { beta_ref: f64 },
    /// `f̄(t) = scale·t`.
    Linear { scale: f64 },
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::LogLinear { beta_ref: 1.0 }
    }
}

impl NoiseSchedule {
    pub fn log_linear(beta_ref: f64) -> Result<Self> {
        if !(beta_ref > 0.0 && beta_ref.is_finite()) {
            return Err(WeftError::InvalidRate(beta_ref));
        }
        Ok(NoiseSchedule::LogLinear { beta_ref })
    }

    fn check_time(t: f64) -> Result<()> {
        if (0.0..=T_MAX).contains(&t) {
            Ok(())
        } else {
            Err(WeftError::TimeOutOfRange(t))
        }
    }

    /// Accumulated noise `f̄(t) = ∫₀ᵗ f(u) du`.
    pub fn integral(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        Ok(match *self {
            NoiseSchedule::LogLinear { beta_ref } => -(-t).ln_1p() / beta_ref,
            NoiseSchedule::Linear { scale } => scale * t,
        })
    }

    /// Instantaneous speed `f(t)`.
    pub fn speed(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        Ok(match *self {
            NoiseSchedule::LogLinear { beta_ref } => 1.0 / (beta_ref * (1.0 - t)),
            NoiseSchedule::Linear { scale } => scale,
        })
    }
}

/// Per-position masking rates and the reference rate anchoring `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSpec {
    betas: Vec<f64>,
    beta_ref: f64,
    floored: usize,
}

impl RateSpec {
    /// Builds a spec with an explicit reference rate, flooring each rate at
    /// [`BETA_FLOOR`].
    pub fn new(raw: Vec<f64>, beta_ref: f64) -> Result<Self> {
        Self::with_floor(raw, beta_ref, BETA_FLOOR)
    }

    pub fn with_floor(raw: Vec<f64>, beta_ref: f64, floor: f64) -> Result<Self> {
        if !(beta_ref > 0.0 && beta_ref.is_finite()) {
            return Err(WeftError::InvalidRate(beta_ref));
        }
        if !(floor >= 0.0 && floor.is_finite()) {
            return Err(WeftError::InvalidRate(floor));
        }
        let mut floored = 0;
        let mut betas = raw;
        for b in betas.iter_mut() {
            if !(*b >= 0.0 && b.is_finite()) {
                return Err(WeftError::InvalidRate(*b));
            }
            if *b < floor {
                *b = floor;
                floored += 1;
            }
        }
        Ok(RateSpec { betas, beta_ref, floored })
    }

    /// Reference rate set to the arithmetic mean of the raw (pre-floor) rates.
    /// An all-zero input falls back to the floor so the reference stays positive.
    pub fn from_mean(raw: Vec<f64>, floor: f64) -> Result<Self> {
        if raw.is_empty() {
            return Err(WeftError::InvalidArgument("empty rate vector".into()));
        }
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let beta_ref = if mean > 0.0 { mean } else { floor.max(f64::MIN_POSITIVE) };
        Self::with_floor(raw, beta_ref, floor)
    }

    /// All rates equal to the reference: plain diffusion SFT masking.
    pub fn uniform(len: usize) -> Self {
        RateSpec { betas: vec![1.0; len], beta_ref: 1.0, floored: 0 }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta_ref(&self) -> f64 {
        self.beta_ref
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Number of rates raised to the floor.
    pub fn floored(&self) -> usize {
        self.floored
    }
}

/// Single-token forward kernel from time 0 to `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionKernel {
    pub survive: f64,
    pub mask: f64,
}

/// Closed form `p_{t|0}` for one token at rate `beta`.
pub fn transition_closed(beta: f64, sched: &NoiseSchedule, t: f64) -> Result<TransitionKernel> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(WeftError::InvalidRate(beta));
    }
    let exponent = -beta * sched.integral(t)?;
    Ok(TransitionKernel { survive: exponent.exp(), mask: -exponent.exp_m1() })
}

/// Dense square matrix, row-major. Only used at oracle sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(WeftError::Shape("matrix must be square".into()));
        }
        Ok(SquareMatrix { n, data: rows.concat() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    fn scaled(&self, s: f64) -> Self {
        SquareMatrix { n: self.n, data: self.data.iter().map(|v| v * s).collect() }
    }

    fn mul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    fn norm_inf(&self) -> f64 {
        (0..self.n).map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Largest deviation of a row sum from `target`.
    pub fn max_row_sum_error(&self, target: f64) -> f64 {
        (0..self.n).map(|i| (self.row(i).iter().sum::<f64>() - target).abs()).fold(0.0, f64::max)
    }
}

/// Generator of the absorbing chain where state `i < n` moves to the mask
/// state (index `n`) at rate `betas[i]`.
pub fn absorbing_generator(betas: &[f64]) -> Result<SquareMatrix> {
    let n = betas.len();
    let mut q = SquareMatrix::zeros(n + 1);
    for (i, &b) in betas.iter().enumerate() {
        if !(b >= 0.0 && b.is_finite()) {
            return Err(WeftError::InvalidRate(b));
        }
        q.set(i, i, -b);
        q.set(i, n, b);
    }
    Ok(q)
}

/// `exp(Q·s)` by scaling and squaring around a truncated Taylor series.
pub fn matrix_exp_oracle(q: &SquareMatrix, s: f64) -> Result<SquareMatrix> {
    let n = q.dim();
    if n == 0 || n > 8 {
        return Err(WeftError::TooLarge(format!("matrix dimension {n} outside 1..=8")));
    }
    if !(s >= 0.0 && s.is_finite()) {
        return Err(WeftError::InvalidArgument(format!("exponent scale {s} must be finite and >= 0")));
    }
    for i in 0..n {
        for j in 0..n {
            let v = q.get(i, j);
            if !v.is_finite() {
                return Err(WeftError::NonFinite(format!("Q[{i},{j}]")));
            }
            if i != j && v < 0.0 {
                return Err(WeftError::NonConservative(format!("negative off-diagonal Q[{i},{j}] = {v}")));
            }
        }
    }
    let drift = q.max_row_sum_error(0.0);
    if drift > 1e-12 {
        return Err(WeftError::NonConservative(format!("row sum deviates from 0 by {drift:e}")));
    }

    let a = q.scaled(s);
    let norm = a.norm_inf();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = a.scaled(0.5f64.powi(squarings));

    let mut result = SquareMatrix::identity(n);
    let mut term = SquareMatrix::identity(n);
    for k in 1..=40 {
        term = term.mul(&a).scaled(1.0 / k as f64);
        for (r, t) in result.data.iter_mut().zip(&term.data) {
            *r += t;
        }
        if term.norm_inf() < 1e-20 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.mul(&result);
    }
    Ok(result)
}

/// Per-step absorption probabilities of a token simulated on a uniform
/// grid over `[0, t]`.
#[derive(Debug, Clone)]
pub struct CtmcGrid {
    absorb: Vec<f64>,
}

impl CtmcGrid {
    pub fn new(beta: f64, sched: &NoiseSchedule, t: f64, n_steps: usize) -> Result<Self> {
        if n_steps < 100 {
            return Err(WeftError::InvalidArgument(format!("n_steps = {n_steps} < 100")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(WeftError::InvalidRate(beta));
        }
        sched.integral(t)?;
        let mut absorb = Vec::with_capacity(n_steps);
        let mut prev = 0.0;
        for k in 1..=n_steps {
            let next = sched.integral(t * k as f64 / n_steps as f64)?;
            // hazard beta·Δf̄ over the sub-interval
            absorb.push(-(-beta * (next - prev)).exp_m1());
            prev = next;
        }
        Ok(CtmcGrid { absorb })
    }

    /// Runs one chain from the clean state; true when it ends absorbed.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        self.absorb.iter().any(|&p| rng.random::<f64>() < p)
    }
}

/// One simulated trajectory of the absorbing chain up to time `t`.
pub fn ctmc_simulate<R: Rng + ?Sized>(
    beta: f64,
    sched: &NoiseSchedule,
    t: f64,
    n_steps: usize,
    rng: &mut R,
) -> Result<bool> {
    Ok(CtmcGrid::new(beta, sched, t, n_steps)?.sample(rng))
}

/// Empirical mask fraction over `trials` independent chains. Trials are
/// split into fixed-size chunks, each drawing from its own sub-stream.
pub fn ctmc_mask_fraction(
    beta: f64,
    sched: &NoiseSchedule,
    t: f64,
    n_steps: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    const CHUNK: usize = 1 << 16;
    if trials == 0 {
        return Err(WeftError::InvalidArgument("zero trials".into()));
    }
    let grid = CtmcGrid::new(beta, sched, t, n_steps)?;
    let mut masked = 0usize;
    let mut done = 0usize;
    let mut chunk = 0u64;
    while done < trials {
        let n = CHUNK.min(trials - done);
        let mut r = rng::substream(seed, chunk);
        masked += (0..n).filter(|_| grid.sample(&mut r)).count();
        done += n;
        chunk += 1;
    }
    Ok(masked as f64 / trials as f64)
}

/// Explicit joint distribution over length-`d` sequences with `V` symbols.
/// The mask symbol of the corresponding noised sequences is `V` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyDistribution {
    d: usize,
    v: usize,
    probs: Vec<f64>,
}

impl TinyDistribution {
    pub const MAX_LEN: usize = 4;
    pub const MAX_VOCAB: usize = 4;

    pub fn new(d: usize, v: usize, probs: Vec<f64>) -> Result<Self> {
        Self::guard(d, v)?;
        if probs.len() != v.pow(d as u32) {
            return Err(WeftError::Shape(format!("expected {} probabilities, got {}", v.pow(d as u32), probs.len())));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(WeftError::InvalidArgument("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(WeftError::InvalidArgument(format!("probabilities sum to {total}")));
        }
        Ok(TinyDistribution { d, v, probs })
    }

    /// Dirichlet(1) draw: normalized exponential variates.
    pub fn random<R: Rng + ?Sized>(d: usize, v: usize, rng: &mut R) -> Result<Self> {
        Self::guard(d, v)?;
        let raw: Vec<f64> = (0..v.pow(d as u32)).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total: f64 = raw.iter().sum();
        let mut probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        // absorb the rounding residue into the largest entry
        let residue = 1.0 - probs.iter().sum::<f64>();
        let (imax, _) = probs.iter().enumerate().fold((0, f64::MIN), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
        probs[imax] += residue;
        Self::new(d, v, probs)
    }

    fn guard(d: usize, v: usize) -> Result<()> {
        if d == 0 || v < 2 || d > Self::MAX_LEN || v > Self::MAX_VOCAB {
            return Err(WeftError::TooLarge(format!("tiny distribution needs 1 <= d <= 4 and 2 <= V <= 4, got d={d}, V={v}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.d == 0
    }

    pub fn vocab(&self) -> usize {
        self.v
    }

    pub fn mask_symbol(&self) -> usize {
        self.v
    }

    pub fn prob(&self, seq: &[usize]) -> f64 {
        self.probs[encode(seq, self.v)]
    }

    /// Probability that the positions fixed in `partial` take those values.
    pub fn marginal(&self, partial: &[Option<usize>]) -> f64 {
        (0..self.probs.len())
            .filter(|&idx| {
                let seq = decode(idx, self.v, self.d);
                partial.iter().zip(&seq).all(|(want, have)| want.is_none_or(|w| w == *have))
            })
            .map(|idx| self.probs[idx])
            .sum()
    }
}

fn encode(seq: &[usize], base: usize) -> usize {
    seq.iter().rev().fold(0, |acc, &s| acc * base + s)
}

fn decode(mut idx: usize, base: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let s = idx % base;
            idx /= base;
            s
        })
        .collect()
}

/// All noised sequences over `V+1` symbols (mask = `V`) in enumeration order.
pub fn noised_sequences(p0: &TinyDistribution) -> Vec<Vec<usize>> {
    let base = p0.v + 1;
    (0..base.pow(p0.d as u32)).map(|i| decode(i, base, p0.d)).collect()
}

fn position_kernels(p0: &TinyDistribution, rates: &RateSpec, sched: &NoiseSchedule, t: f64) -> Result<Vec<TransitionKernel>> {
    if rates.len() != p0.d {
        return Err(WeftError::Shape(format!("{} rates for {} positions", rates.len(), p0.d)));
    }
    rates.betas().iter().map(|&b| transition_closed(b, sched, t)).collect()
}

/// `p_t` by exhaustive summation of `p_{t|0}(x_t|x_0)·p_0(x_0)` over every
/// clean sequence, indexed like [`noised_sequences`].
pub fn pt_marginal_exact(p0: &TinyDistribution, rates: &RateSpec, sched: &NoiseSchedule, t: f64) -> Result<Vec<f64>> {
    let kernels = position_kernels(p0, rates, sched, t)?;
    let mask = p0.mask_symbol();
    let noised = noised_sequences(p0);
    let clean: Vec<Vec<usize>> = (0..p0.probs.len()).map(|i| decode(i, p0.v, p0.d)).collect();
    Ok(noised
        .iter()
        .map(|xt| {
            clean
                .iter()
                .zip(&p0.probs)
                .map(|(x0, &p)| {
                    let cond: f64 = xt
                        .iter()
                        .zip(x0)
                        .zip(&kernels)
                        .map(|((&a, &b), k)| if a == mask { k.mask } else if a == b { k.survive } else { 0.0 })
                        .product();
                    cond * p
                })
                .sum()
        })
        .collect())
}

/// Product form of `p_t(x_t)`: masked factors, surviving factors, and the
/// clean marginal of the visible tokens.
pub fn pt_product_formula(
    p0: &TinyDistribution,
    rates: &RateSpec,
    sched: &NoiseSchedule,
    t: f64,
    xt: &[usize],
) -> Result<f64> {
    let kernels = position_kernels(p0, rates, sched, t)?;
    check_noised(p0, xt)?;
    let mask = p0.mask_symbol();
    let factor: f64 = xt.iter().zip(&kernels).map(|(&a, k)| if a == mask { k.mask } else { k.survive }).product();
    let visible: Vec<Option<usize>> = xt.iter().map(|&a| (a != mask).then_some(a)).collect();
    Ok(factor * p0.marginal(&visible))
}

fn check_noised(p0: &TinyDistribution, xt: &[usize]) -> Result<()> {
    if xt.len() != p0.d {
        return Err(WeftError::Shape(format!("sequence length {} != {}", xt.len(), p0.d)));
    }
    if let Some(&bad) = xt.iter().find(|&&a| a > p0.v) {
        return Err(WeftError::TokenOutOfRange { id: bad, vocab: p0.v + 1 });
    }
    Ok(())
}

/// Closed-form concrete score `p_t(x_t with i←v) / p_t(x_t)` for a masked
/// position `i`; zero when position `i` is not masked.
pub fn score_ratio_closed(
    p0: &TinyDistribution,
    rates: &RateSpec,
    sched: &NoiseSchedule,
    t: f64,
    xt: &[usize],
    i: usize,
    v: usize,
) -> Result<f64> {
    check_noised(p0, xt)?;
    if i >= p0.d {
        return Err(WeftError::InvalidArgument(format!("position {i} out of range")));
    }
    if v >= p0.v {
        return Err(WeftError::InvalidArgument(format!("replacement {v} must be a clean symbol")));
    }
    let mask = p0.mask_symbol();
    if xt[i] != mask {
        return Ok(0.0);
    }
    let k = transition_closed(rates.betas()[i], sched, t)?;
    let visible: Vec<Option<usize>> = xt.iter().map(|&a| (a != mask).then_some(a)).collect();
    let denom = p0.marginal(&visible);
    if denom <= 0.0 {
        return Err(WeftError::InvalidArgument("visible tokens have zero probability".into()));
    }
    let mut with_v = visible;
    with_v[i] = Some(v);
    Ok(k.survive / k.mask * (p0.marginal(&with_v) / denom))
}

/// Same ratio read off an exhaustive `p_t` table.
pub fn score_ratio_enumerated(p0: &TinyDistribution, pt: &[f64], xt: &[usize], i: usize, v: usize) -> Result<f64> {
    check_noised(p0, xt)?;
    let base = p0.v + 1;
    let mut replaced = xt.to_vec();
    replaced[i] = v;
    let denom = pt[encode(xt, base)];
    if denom <= 0.0 {
        return Err(WeftError::InvalidArgument("noised sequence has zero probability".into()));
    }
    Ok(pt[encode(&replaced, base)] / denom)
}

/// Index of a noised sequence in the tables returned by [`pt_marginal_exact`].
pub fn noised_index(p0: &TinyDistribution, xt: &[usize]) -> usize {
    encode(xt, p0.v + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn default_sched() -> NoiseSchedule {
        NoiseSchedule::log_linear(1.0).unwrap()
    }

    #[test]
    fn closed_kernel_examples() {
        let s = default_sched();
        let k = transition_closed(1.0, &s, 0.5).unwrap();
        assert!((k.survive - 0.5).abs() < 1e-15 && (k.mask - 0.5).abs() < 1e-15);
        let k = transition_closed(2.0, &s, 0.5).unwrap();
        assert!((k.survive - 0.25).abs() < 1e-15 && (k.mask - 0.75).abs() < 1e-15);
        for t in [0.0, 0.3, 0.99] {
            let k = transition_closed(0.0, &s, t).unwrap();
            assert_eq!((k.survive, k.mask), (1.0, 0.0));
        }
    }

    #[test]
    fn closed_kernel_rejects_bad_inputs() {
        let s = default_sched();
        assert!(matches!(transition_closed(1.0, &s, 1.0), Err(WeftError::TimeOutOfRange(_))));
        assert!(matches!(transition_closed(1.0, &s, -0.1), Err(WeftError::TimeOutOfRange(_))));
        assert!(matches!(transition_closed(-1.0, &s, 0.5), Err(WeftError::InvalidRate(_))));
    }

    #[test]
    fn default_schedule_masks_reference_token_with_probability_t() {
        let s = NoiseSchedule::log_linear(1.7).unwrap();
        assert_eq!(s.integral(0.0).unwrap(), 0.0);
        let mut prev = 0.0;
        for k in 1..100 {
            let t = k as f64 / 100.0;
            let f = s.integral(t).unwrap();
            assert!(f >= prev);
            prev = f;
            let mask = transition_closed(1.7, &s, t).unwrap().mask;
            assert!((mask - t).abs() < 1e-14, "t={t} mask={mask}");
        }
    }

    #[test]
    fn two_state_exponential() {
        let beta = 1.3;
        let q = SquareMatrix::from_rows(&[vec![-beta, beta], vec![0.0, 0.0]]).unwrap();
        for s in [0.0, 0.1, 1.0, 5.0] {
            let p = matrix_exp_oracle(&q, s).unwrap();
            let e = (-beta * s).exp();
            assert!((p.get(0, 0) - e).abs() < 1e-13);
            assert!((p.get(0, 1) - (1.0 - e)).abs() < 1e-13);
            assert_eq!(p.get(1, 0), 0.0);
            assert!((p.get(1, 1) - 1.0).abs() < 1e-15);
        }
        assert_eq!(matrix_exp_oracle(&q, 0.0).unwrap(), SquareMatrix::identity(2));
    }

    #[test]
    fn generator_shape_matches_closed_kernels() {
        let q = absorbing_generator(&[1.0, 2.0]).unwrap();
        let p = matrix_exp_oracle(&q, 2f64.ln()).unwrap();
        assert!((p.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((p.get(1, 1) - 0.25).abs() < 1e-12);
        assert!((p.get(1, 2) - 0.75).abs() < 1e-12);
        assert!(p.max_row_sum_error(1.0) < 1e-12);
    }

    #[test]
    fn rejects_non_conservative_generator() {
        let q = SquareMatrix::from_rows(&[vec![-1.0, 0.5], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(matrix_exp_oracle(&q, 1.0), Err(WeftError::NonConservative(_))));
        let q = SquareMatrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(matrix_exp_oracle(&q, 1.0), Err(WeftError::NonConservative(_))));
        assert!(matches!(matrix_exp_oracle(&SquareMatrix::zeros(9), 1.0), Err(WeftError::TooLarge(_))));
    }

    #[test]
    fn zero_rate_chain_never_absorbs() {
        let s = default_sched();
        let mut r = stream(1, Stream::Verify);
        assert!((0..1000).all(|_| !ctmc_simulate(0.0, &s, 0.9, 100, &mut r).unwrap()));
        assert!(ctmc_simulate(1.0, &s, 0.5, 99, &mut r).is_err());
    }

    #[test]
    fn simulated_mask_fraction_small_sample() {
        let s = default_sched();
        let frac = ctmc_mask_fraction(1.0, &s, 0.5, 100, 100_000, 3).unwrap();
        let sigma = (0.25f64 / 100_000.0).sqrt();
        assert!((frac - 0.5).abs() < 4.0 * sigma, "frac {frac}");
    }

    #[test]
    fn marginal_at_time_zero_is_p0() {
        let mut r = stream(11, Stream::Verify);
        let p0 = TinyDistribution::random(2, 3, &mut r).unwrap();
        let rates = RateSpec::new(vec![0.7, 1.9], 1.0).unwrap();
        let pt = pt_marginal_exact(&p0, &rates, &default_sched(), 0.0).unwrap();
        for xt in noised_sequences(&p0) {
            let got = pt[noised_index(&p0, &xt)];
            if xt.contains(&p0.mask_symbol()) {
                assert_eq!(got, 0.0);
            } else {
                assert!((got - p0.prob(&xt)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fully_masked_probability_is_product() {
        let mut r = stream(12, Stream::Verify);
        let p0 = TinyDistribution::random(3, 2, &mut r).unwrap();
        let betas = vec![0.3, 1.0, 2.5];
        let rates = RateSpec::new(betas.clone(), 1.0).unwrap();
        let s = default_sched();
        let t = 0.4;
        let pt = pt_marginal_exact(&p0, &rates, &s, t).unwrap();
        let all_masked = vec![2; 3];
        let expect: f64 = betas.iter().map(|b| 1.0 - (-b * s.integral(t).unwrap()).exp()).product();
        assert!((pt[noised_index(&p0, &all_masked)] - expect).abs() < 1e-15);
        assert!((pt.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_zero_when_not_masked_and_prefactor_one_at_ln2() {
        let mut r = stream(13, Stream::Verify);
        let p0 = TinyDistribution::random(2, 2, &mut r).unwrap();
        let rates = RateSpec::new(vec![1.0, 1.0], 1.0).unwrap();
        let s = default_sched();
        assert_eq!(score_ratio_closed(&p0, &rates, &s, 0.5, &[0, 2], 0, 1).unwrap(), 0.0);
        // β f̄(t) = ln 2 at t = 0.5 for β = β_ref = 1
        let got = score_ratio_closed(&p0, &rates, &s, 0.5, &[1, 2], 1, 0).unwrap();
        let cond = p0.prob(&[1, 0]) / (p0.prob(&[1, 0]) + p0.prob(&[1, 1]));
        assert!((got - cond).abs() < 1e-14);
        assert!(score_ratio_closed(&p0, &rates, &s, 0.5, &[1, 2], 1, 2).is_err());
    }

    #[test]
    fn tiny_distribution_guards() {
        assert!(matches!(TinyDistribution::new(5, 2, vec![]), Err(WeftError::TooLarge(_))));
        assert!(TinyDistribution::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(TinyDistribution::new(1, 2, vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn rate_spec_floor_and_mean() {
        let r = RateSpec::from_mean(vec![0.0, 3.0], BETA_FLOOR).unwrap();
        assert_eq!(r.beta_ref(), 1.5);
        assert_eq!(r.betas(), &[BETA_FLOOR, 3.0]);
        assert_eq!(r.floored(), 1);
        let r = RateSpec::from_mean(vec![0.0, 0.0], BETA_FLOOR).unwrap();
        assert!(r.beta_ref() > 0.0);
        assert!(RateSpec::from_mean(vec![], BETA_FLOOR).is_err());
        assert!(RateSpec::new(vec![1.0], 0.0).is_err());
    }
}
