//! Masking rates and ablation weights estimated from first-pass logits.

use serde::{Deserialize, Serialize};

use crate::diffusion::RateSpec;
use crate::error::{Result, WeftError};

/// How per-token rates (or weights) are derived from the fully-masked pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    SqrtEntropy,
    RawEntropy,
    Nll,
    /// Geometric proximity to visible tokens. Depends on the mask pattern,
    /// not on logits.
    DreamGeo { p: f64 },
    Uniform,
}

impl WeightScheme {
    /// Whether the scheme reads first-pass logits.
    pub fn needs_logits(&self) -> bool {
        matches!(self, WeightScheme::SqrtEntropy | WeightScheme::RawEntropy | WeightScheme::Nll)
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::SqrtEntropy => "sqrt_entropy",
            WeightScheme::RawEntropy => "raw_entropy",
            WeightScheme::Nll => "nll",
            WeightScheme::DreamGeo { .. } => "dream_geo",
            WeightScheme::Uniform => "uniform",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightScheme::DreamGeo { p } if !(p > 0.0 && p < 1.0) => {
                Err(WeftError::Config(format!("dream_geo sharpness {p} must lie in (0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

fn check_row(row: &[f64]) -> Result<()> {
    if row.len() < 2 {
        return Err(WeftError::InvalidArgument("vocabulary must have at least 2 entries".into()));
    }
    if row.iter().any(|z| !z.is_finite()) {
        return Err(WeftError::NonFinite("logits row".into()));
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Shannon entropy (nats) of `softmax(row)`, as `logsumexp(z) - Σ p_j z_j`.
pub fn entropy(row: &[f64]) -> Result<f64> {
    check_row(row)?;
    let lse = log_sum_exp(row);
    let expected: f64 = row.iter().map(|z| (z - lse).exp() * z).sum();
    // rounding can leave a tiny negative residue for near one-hot rows
    Ok((lse - expected).max(0.0))
}

/// `-ln softmax(row)[target]`.
pub fn nll(row: &[f64], target: usize) -> Result<f64> {
    check_row(row)?;
    if target >= row.len() {
        return Err(WeftError::TokenOutOfRange { id: target, vocab: row.len() });
    }
    Ok(log_sum_exp(row) - row[target])
}

pub fn beta_from_logits(row: &[f64], scheme: WeightScheme, target: Option<usize>) -> Result<f64> {
    match scheme {
        WeightScheme::SqrtEntropy => Ok(entropy(row)?.sqrt()),
        WeightScheme::RawEntropy => entropy(row),
        WeightScheme::Nll => {
            let target = target.ok_or_else(|| WeftError::InvalidArgument("nll scheme requires a target".into()))?;
            nll(row, target)
        }
        WeightScheme::Uniform => Ok(1.0),
        WeightScheme::DreamGeo { .. } => {
            Err(WeftError::InvalidArgument("dream_geo weights depend on the mask pattern, not on logits".into()))
        }
    }
}

/// Raw rates for each answer position; `rows` holds one logits row per
/// position and `targets` the clean tokens (needed only for `nll`).
pub fn raw_betas<'a, I>(rows: I, scheme: WeightScheme, targets: Option<&[usize]>) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    rows.into_iter()
        .enumerate()
        .map(|(k, row)| {
            let target = match targets {
                Some(t) => Some(*t.get(k).ok_or_else(|| WeftError::Shape("fewer targets than rows".into()))?),
                None => None,
            };
            beta_from_logits(row, scheme, target)
        })
        .collect()
}

/// Rates for an answer with `β_ref` set to the mean of the pre-floor rates.
pub fn make_rate_spec<'a, I>(rows: I, scheme: WeightScheme, targets: Option<&[usize]>, floor: f64) -> Result<RateSpec>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let raw = raw_betas(rows, scheme, targets)?;
    if raw.is_empty() {
        return Err(WeftError::InvalidArgument("empty answer".into()));
    }
    RateSpec::from_mean(raw, floor)
}

/// Zero-indexed geometric pmf `p(1-p)^k`.
pub fn geo_pmf(p: f64, k: usize) -> f64 {
    p * (1.0 - p).powi(k as i32)
}

/// Proximity weights: for each masked position, half the geometric mass of
/// its distances to every visible position. Visible positions get zero.
pub fn dream_weights(mask: &[bool], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p < 1.0) {
        return Err(WeftError::InvalidArgument(format!("sharpness {p} must lie in (0, 1)")));
    }
    let visible: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| !m).map(|(j, _)| j).collect();
    Ok(mask
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if !m {
                return 0.0;
            }
            0.5 * visible.iter().map(|&j| geo_pmf(p, i.abs_diff(j) - 1)).sum::<f64>()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::BETA_FLOOR;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(entropy(&[1000.0, 0.0, 0.0, 0.0]).unwrap() <= 1e-6);
        let row = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        // direct summation with the probabilities themselves
        let direct = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((entropy(&row).unwrap() - direct).abs() < 1e-12);
        assert!((direct - 1.5 * 2f64.ln()).abs() < 1e-15);
        assert!(entropy(&[0.0, f64::NAN]).is_err());
        assert!(entropy(&[0.0]).is_err());
    }

    #[test]
    fn beta_examples() {
        let u = [0.0; 4];
        assert!((beta_from_logits(&u, WeightScheme::SqrtEntropy, None).unwrap() - 1.177410).abs() < 1e-6);
        let row = [0.8f64.ln(), 0.1f64.ln(), 0.1f64.ln()];
        assert!((beta_from_logits(&row, WeightScheme::Nll, Some(0)).unwrap() - 0.223144).abs() < 1e-6);
        assert_eq!(beta_from_logits(&row, WeightScheme::Uniform, None).unwrap(), 1.0);
        assert!(beta_from_logits(&row, WeightScheme::Nll, Some(3)).is_err());
        assert!(beta_from_logits(&row, WeightScheme::Nll, None).is_err());
        assert!(beta_from_logits(&row, WeightScheme::DreamGeo { p: 0.3 }, None).is_err());
    }

    #[test]
    fn rate_spec_mean_reference() {
        // entropies 1 and 3 via raw scheme is awkward to hit exactly; use nll
        let a = [0.0, -1.0];
        let b = [0.0, -3.0];
        let targets = [1, 1];
        let spec = make_rate_spec([&a[..], &b[..]], WeightScheme::Nll, Some(&targets), BETA_FLOOR).unwrap();
        let expect = (nll(&a, 1).unwrap() + nll(&b, 1).unwrap()) / 2.0;
        assert!((spec.beta_ref() - expect).abs() < 1e-15);

        let same = [0.3, 0.1, -0.2];
        let spec = make_rate_spec([&same[..], &same[..]], WeightScheme::SqrtEntropy, None, BETA_FLOOR).unwrap();
        assert_eq!(spec.betas()[0], spec.betas()[1]);
        assert_eq!(spec.betas()[0], spec.beta_ref());

        let empty: [&[f64]; 0] = [];
        assert!(make_rate_spec(empty, WeightScheme::SqrtEntropy, None, BETA_FLOOR).is_err());
    }

    #[test]
    fn rate_spec_reference_is_mean_on_random_rows() {
        let mut r = stream(21, Stream::Verify);
        let rows: Vec<Vec<f64>> = (0..16).map(|_| (0..6).map(|_| r.random::<f64>() * 8.0 - 4.0).collect()).collect();
        let spec = make_rate_spec(rows.iter().map(|v| v.as_slice()), WeightScheme::SqrtEntropy, None, BETA_FLOOR).unwrap();
        // independent summation: probabilities first, then entropy, then mean
        let mut total = 0.0;
        for row in &rows {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let h: f64 = e.iter().map(|x| x / s).map(|p| -p * p.ln()).sum();
            total += h.sqrt();
        }
        assert!((spec.beta_ref() - total / 16.0).abs() < 1e-12);
    }

    #[test]
    fn dream_examples() {
        let w = dream_weights(&[false, true, false], 0.3).unwrap();
        assert!((w[1] - 0.3).abs() < 1e-15);
        assert_eq!(dream_weights(&[true; 4], 0.3).unwrap(), vec![0.0; 4]);
        let mask = [false, true, true, true, true];
        let w = dream_weights(&mask, 0.3).unwrap();
        // enumeration over j: only j = 0 is visible, distance 2
        let oracle: f64 = (0..5).filter(|&j| !mask[j]).map(|j: usize| 0.5 * 0.3 * 0.7f64.powi((2usize.abs_diff(j) - 1) as i32)).sum();
        assert!((w[2] - 0.105).abs() < 1e-15);
        assert!((w[2] - oracle).abs() < 1e-15);
        assert_eq!(w[0], 0.0);
        assert!(dream_weights(&mask, 1.0).is_err());
    }

    #[test]
    fn geometric_pmf_normalizes() {
        let s: f64 = (0..=200).map(|k| geo_pmf(0.3, k)).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn entropy_bounded_and_shift_invariant(row in proptest::collection::vec(-20.0f64..20.0, 2..12), c in -50.0f64..50.0) {
            let h = entropy(&row).unwrap();
            prop_assert!(h >= 0.0 && h <= (row.len() as f64).ln() + 1e-12);
            let shifted: Vec<f64> = row.iter().map(|z| z + c).collect();
            prop_assert!((entropy(&shifted).unwrap() - h).abs() < 1e-10);
        }

        #[test]
        fn sqrt_preserves_rate_ordering(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let (ha, hb) = (entropy(&a).unwrap(), entropy(&b).unwrap());
            let (sa, sb) = (beta_from_logits(&a, WeightScheme::SqrtEntropy, None).unwrap(), beta_from_logits(&b, WeightScheme::SqrtEntropy, None).unwrap());
            prop_assert_eq!(ha >= hb, sa >= sb);
        }
    }
}
