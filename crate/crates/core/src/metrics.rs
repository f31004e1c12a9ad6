//! Test-set scores for a list of predictive mixtures.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::inference::PredictiveMixture;

const QUANTILE_TOL: f64 = 1e-6;

fn check_lengths(mixtures: &[PredictiveMixture], targets: &[f64]) -> Result<()> {
    if mixtures.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} targets",
            mixtures.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Maps mixtures from standardized to original target units.
pub fn to_original_units(
    mixtures: &[PredictiveMixture],
    scaler: &Scaler,
) -> Result<Vec<PredictiveMixture>> {
    mixtures
        .iter()
        .map(|m| m.rescaled(scaler.target_mean, scaler.target_std))
        .collect()
}

pub fn rmse(mixtures: &[PredictiveMixture], targets: &[f64]) -> Result<f64> {
    check_lengths(mixtures, targets)?;
    let sse: f64 = mixtures
        .iter()
        .zip(targets)
        .map(|(m, y)| (m.mean - y).powi(2))
        .sum();
    Ok((sse / targets.len() as f64).sqrt())
}

/// `log[(1/J) Σ_j N(y; μ_j, v_j)]` via log-sum-exp.
pub fn mixture_log_density(m: &PredictiveMixture, y: f64) -> Result<f64> {
    let logs = m
        .components
        .iter()
        .map(|&(mu, v)| {
            if !(v > 0.0) {
                return Err(Error::NumericDomain(format!(
                    "component variance must be > 0, got {v}"
                )));
            }
            Ok(-0.5 * (2.0 * PI * v).ln() - (y - mu).powi(2) / (2.0 * v))
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let s: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    Ok(max + (s / logs.len() as f64).ln())
}

pub fn avg_log_likelihood(mixtures: &[PredictiveMixture], targets: &[f64]) -> Result<f64> {
    check_lengths(mixtures, targets)?;
    let total = mixtures
        .par_iter()
        .zip(targets)
        .map(|(m, &y)| mixture_log_density(m, y))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum::<f64>();
    Ok(total / targets.len() as f64)
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn mixture_cdf(m: &PredictiveMixture, x: f64) -> f64 {
    let total: f64 = m
        .components
        .iter()
        .map(|&(mu, v)| {
            if v == 0.0 {
                if x >= mu {
                    1.0
                } else {
                    0.0
                }
            } else {
                std_normal_cdf((x - mu) / v.sqrt())
            }
        })
        .sum();
    total / m.components.len() as f64
}

/// Smallest `x` with `F(x) ≥ p`, to within the quantile tolerance.
/// Returns `±∞` when the mass never reaches `p` at finite `x`.
pub fn mixture_quantile(m: &PredictiveMixture, p: f64) -> Result<f64> {
    let spread = m
        .components
        .iter()
        .map(|c| c.1.sqrt())
        .filter(|s| s.is_finite())
        .fold(0.0, f64::max)
        .max(1.0);
    let (mut lo, mut hi) = (m.mean - 10.0 * spread, m.mean + 10.0 * spread);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Numeric(
            "mixture quantile bracket is not finite".into(),
        ));
    }
    let mut width = 10.0 * spread;
    while mixture_cdf(m, lo) >= p {
        width *= 2.0;
        lo = m.mean - width;
        if !lo.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
    }
    width = 10.0 * spread;
    while mixture_cdf(m, hi) < p {
        width *= 2.0;
        hi = m.mean + width;
        if !hi.is_finite() {
            return Ok(f64::INFINITY);
        }
    }
    for _ in 0..400 {
        if hi - lo <= QUANTILE_TOL {
            return Ok(0.5 * (lo + hi));
        }
        let mid = 0.5 * (lo + hi);
        let f = mixture_cdf(m, mid);
        if f.is_nan() {
            return Err(Error::Numeric("mixture CDF is NaN".into()));
        }
        if f >= p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::Numeric("quantile bisection did not converge".into()))
}

/// Central 95% interval of the mixture.
pub fn central_interval95(m: &PredictiveMixture) -> Result<(f64, f64)> {
    Ok((mixture_quantile(m, 0.025)?, mixture_quantile(m, 0.975)?))
}

pub fn coverage95(mixtures: &[PredictiveMixture], targets: &[f64]) -> Result<f64> {
    check_lengths(mixtures, targets)?;
    let hits = mixtures
        .par_iter()
        .zip(targets)
        .map(|(m, &y)| {
            let (lo, hi) = central_interval95(m)?;
            Ok(usize::from(lo <= y && y <= hi))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / targets.len() as f64)
}

/// Scores of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScores {
    pub seed: u64,
    #[serde(serialize_with = "crate::json::f64_17")]
    pub rmse: f64,
    #[serde(serialize_with = "crate::json::f64_17")]
    pub avg_log_lik: f64,
    #[serde(serialize_with = "crate::json::f64_17")]
    pub coverage95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(serialize_with = "crate::json::f64_17")]
    pub rmse: f64,
    #[serde(serialize_with = "crate::json::f64_17")]
    pub avg_log_lik: f64,
    #[serde(serialize_with = "crate::json::f64_17")]
    pub coverage95: f64,
    pub trials: Vec<TrialScores>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    /// Scores mixtures that are already in original target units.
    pub fn evaluate(mixtures: &[PredictiveMixture], targets: &[f64], seed: u64) -> Result<Self> {
        let scores = TrialScores {
            seed,
            rmse: rmse(mixtures, targets)?,
            avg_log_lik: avg_log_likelihood(mixtures, targets)?,
            coverage95: coverage95(mixtures, targets)?,
        };
        let mut metadata = BTreeMap::new();
        metadata.insert("units".into(), "original target units".into());
        metadata.insert(
            "log_likelihood".into(),
            "mean log predictive density of de-standardized targets".into(),
        );
        metadata.insert("test_points".into(), targets.len().into());
        metadata.insert("components".into(), mixtures[0].components.len().into());
        Ok(Self {
            rmse: scores.rmse,
            avg_log_lik: scores.avg_log_lik,
            coverage95: scores.coverage95,
            trials: vec![scores],
            metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(mu: f64, v: f64) -> PredictiveMixture {
        PredictiveMixture::from_components(vec![(mu, v)]).unwrap()
    }

    #[test]
    fn rmse_cases() {
        let m = vec![single(1.0, 1.0), single(2.0, 1.0)];
        assert_eq!(rmse(&m, &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&m, &[0.0, 0.0]).unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(rmse(&m, &[0.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn log_likelihood_cases() {
        let v = avg_log_likelihood(&[single(0.3, 1.0)], &[0.3]).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);

        let base =
            PredictiveMixture::from_components(vec![(0.0, 1.0), (2.0, 0.5), (-1.0, 3.0)]).unwrap();
        let mut doubled = base.components.clone();
        doubled.extend(base.components.iter().rev());
        let dup = PredictiveMixture::from_components(doubled).unwrap();
        for y in [-3.0, 0.1, 2.0, 40.0] {
            let a = mixture_log_density(&base, y).unwrap();
            let b = mixture_log_density(&dup, y).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        let bad = PredictiveMixture::from_components(vec![(0.0, 0.0)]).unwrap();
        assert!(matches!(
            avg_log_likelihood(&[bad], &[0.0]),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn far_tail_stays_finite() {
        let m = PredictiveMixture::from_components(vec![(0.0, 1e-4), (1.0, 1e-4)]).unwrap();
        let l = mixture_log_density(&m, 500.0).unwrap();
        assert!(l.is_finite() && l < -1e8);
    }

    #[test]
    fn single_gaussian_interval() {
        let m = single(3.0, 4.0);
        let (lo, hi) = central_interval95(&m).unwrap();
        let half = 1.959_963_984_540_054 * 2.0;
        assert!((lo - (3.0 - half)).abs() <= 2e-6, "{lo}");
        assert!((hi - (3.0 + half)).abs() <= 2e-6, "{hi}");
        let inside = 3.0 + half - 1e-4;
        let outside = 3.0 + half + 1e-4;
        assert_eq!(
            coverage95(&[m.clone(), m.clone()], &[inside, outside]).unwrap(),
            0.5
        );
    }

    #[test]
    fn infinite_width_covers_everything() {
        let m = single(0.0, f64::INFINITY);
        assert_eq!(coverage95(&[m.clone(), m], &[1e300, -7.0]).unwrap(), 1.0);
    }

    #[test]
    fn coverage_is_monotone_in_variance() {
        let targets = [0.0, 1.5, -2.2, 3.9, 0.7];
        let make = |f: f64| -> Vec<PredictiveMixture> {
            targets
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    PredictiveMixture::from_components(vec![
                        (i as f64 * 0.3, 0.5 * f),
                        (-0.2, 1.0 * f),
                    ])
                    .unwrap()
                })
                .collect()
        };
        let mut last = 0.0;
        for f in [0.1, 0.5, 1.0, 2.0, 10.0] {
            let c = coverage95(&make(f), &targets).unwrap();
            assert!(c >= last);
            last = c;
        }
    }

    #[test]
    fn report_json_fields() {
        let r = EvalReport::evaluate(&[single(0.0, 1.0)], &[0.5], 3).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        for key in ["rmse", "avg_log_lik", "coverage95", "trials", "metadata"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
