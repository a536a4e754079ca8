//! Covariate balance diagnostics: standardized mean differences between
//! treatment arms, per cluster and for the whole population, under an
//! arbitrary weight set.

use serde::Serialize;

use crate::data::{ClusteredSample, WeightSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct CovariateBalance {
    pub name: String,
    /// One standardized difference per cluster, in sample cluster order.
    pub per_cluster: Vec<f64>,
    pub whole_population: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub weight_label: String,
    pub cluster_keys: Vec<String>,
    pub covariates: Vec<CovariateBalance>,
}

/// Weighted treated-minus-control mean difference over the units selected by
/// `keep`, divided by the caller-supplied scale.
fn weighted_difference<F>(
    sample: &ClusteredSample,
    weights: &[f64],
    keep: F,
    covariate: usize,
    scale: f64,
) -> f64
where
    F: Fn(usize) -> bool,
{
    let mut sums = [0.0f64; 4]; // [w1, w1*x, w0, w0*x]
    for (index, (cluster, unit)) in sample.units().enumerate() {
        if !keep(cluster) {
            continue;
        }
        let w = weights[index];
        let x = unit.covariates[covariate];
        if unit.treated {
            sums[0] += w;
            sums[1] += w * x;
        } else {
            sums[2] += w;
            sums[3] += w * x;
        }
    }
    (sums[1] / sums[0] - sums[3] / sums[2]) / scale
}

/// Standardized mean differences per covariate: weighted arm means within
/// each cluster and over the whole population, standardized by the unweighted
/// whole-population standard deviation of the covariate.
pub fn standardized_differences(
    sample: &ClusteredSample,
    weights: Option<&WeightSet>,
    weight_label: &str,
) -> Result<BalanceReport> {
    let n = sample.n();
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: w.len(),
            });
        }
    }
    let unit_weights: Vec<f64> = match weights {
        Some(w) => w.values.clone(),
        None => vec![1.0; n],
    };

    let mut covariates = Vec::with_capacity(sample.p());
    for k in 0..sample.p() {
        let name = format!("x{}", k + 1);
        let values: Vec<f64> = sample.units().map(|(_, u)| u.covariates[k]).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if sd == 0.0 {
            return Err(Error::ZeroVariance(name));
        }
        let per_cluster = (0..sample.m())
            .map(|c| weighted_difference(sample, &unit_weights, |i| i == c, k, sd))
            .collect();
        let whole_population = weighted_difference(sample, &unit_weights, |_| true, k, sd);
        covariates.push(CovariateBalance {
            name,
            per_cluster,
            whole_population,
        });
    }

    Ok(BalanceReport {
        weight_label: weight_label.to_string(),
        cluster_keys: sample
            .clusters()
            .iter()
            .map(|c| c.info.key.clone())
            .collect(),
        covariates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::solve_calibration;
    use crate::calibration::{initial_weights, SolverOptions};
    use crate::data::{validate_sample, UnitRecord, WeightKind};
    use approx::assert_abs_diff_eq;

    fn record(cluster: &str, a: f64, y: f64, x: &[f64]) -> UnitRecord {
        UnitRecord {
            cluster: cluster.into(),
            treatment: a,
            outcome: y,
            covariates: x.to_vec(),
            design_weight: None,
            first_stage_prob: None,
            second_stage_prob: None,
            population_size: None,
        }
    }

    #[test]
    fn symmetric_arms_balance_to_zero() {
        let rows = vec![
            record("c1", 1.0, 1.0, &[0.3, -1.0]),
            record("c1", 1.0, 0.0, &[0.9, 2.0]),
            record("c1", 0.0, 1.0, &[0.3, -1.0]),
            record("c1", 0.0, 0.0, &[0.9, 2.0]),
        ];
        let sample = validate_sample(&rows).unwrap();
        let report = standardized_differences(&sample, None, "none").unwrap();
        for cov in &report.covariates {
            assert!(cov.whole_population.abs() < 1e-12);
            for d in &cov.per_cluster {
                assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_built_difference_of_two() {
        let rows = vec![
            record("c1", 1.0, 0.0, &[1.0]),
            record("c1", 1.0, 0.0, &[1.0]),
            record("c1", 0.0, 0.0, &[0.0]),
            record("c1", 0.0, 0.0, &[0.0]),
        ];
        let sample = validate_sample(&rows).unwrap();
        let report = standardized_differences(&sample, None, "none").unwrap();
        // Population sd of {1,1,0,0} is 0.5; arm difference is 1.
        assert_abs_diff_eq!(report.covariates[0].whole_population, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.covariates[0].per_cluster[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_covariate_rejected() {
        let rows = vec![
            record("c1", 1.0, 0.0, &[1.0]),
            record("c1", 0.0, 0.0, &[1.0]),
        ];
        let sample = validate_sample(&rows).unwrap();
        assert!(matches!(
            standardized_differences(&sample, None, "none"),
            Err(Error::ZeroVariance(name)) if name == "x1"
        ));
    }

    #[test]
    fn calibrated_weights_zero_whole_population_rows() {
        // Every cluster-arm covariate hull surrounds the overall mean, so the
        // balance constraints are feasible.
        let rows = vec![
            record("c1", 1.0, 2.1, &[1.0, 1.0]),
            record("c1", 1.0, 1.2, &[-1.0, -1.0]),
            record("c1", 1.0, 0.7, &[1.0, -1.0]),
            record("c1", 0.0, 0.4, &[-1.0, 1.0]),
            record("c1", 0.0, 1.5, &[0.8, 0.2]),
            record("c1", 0.0, 0.9, &[-0.5, -0.7]),
            record("c2", 1.0, 0.3, &[0.9, -0.8]),
            record("c2", 1.0, 2.2, &[-1.1, 0.6]),
            record("c2", 1.0, 1.1, &[0.3, 1.2]),
            record("c2", 0.0, 2.0, &[1.2, 0.4]),
            record("c2", 0.0, 1.0, &[-0.7, -1.0]),
            record("c2", 0.0, 0.5, &[-0.2, 0.5]),
        ];
        let sample = validate_sample(&rows).unwrap();
        let e0 = vec![
            0.4, 0.55, 0.5, 0.45, 0.6, 0.35, 0.5, 0.65, 0.45, 0.55, 0.4, 0.6,
        ];
        let (d, _) = initial_weights(&e0, &sample).unwrap();
        let cal = solve_calibration(&sample, &d, &SolverOptions::default(), false).unwrap();
        let report =
            standardized_differences(&sample, Some(&cal.alpha), "calibration").unwrap();
        for cov in &report.covariates {
            assert!(
                cov.whole_population.abs() <= 1e-8,
                "{} whole-pop {}",
                cov.name,
                cov.whole_population
            );
        }
    }

    #[test]
    fn affine_rescaling_invariance() {
        let rows = vec![
            record("c1", 1.0, 1.0, &[0.3]),
            record("c1", 1.0, 0.0, &[1.7]),
            record("c1", 0.0, 1.0, &[-0.4]),
            record("c1", 0.0, 0.0, &[0.8]),
            record("c2", 1.0, 1.0, &[1.1]),
            record("c2", 0.0, 0.0, &[0.2]),
        ];
        let sample = validate_sample(&rows).unwrap();
        let weights =
            WeightSet::new(vec![1.3, 0.7, 1.1, 0.9, 1.0, 1.2], WeightKind::Initial).unwrap();
        let base = standardized_differences(&sample, Some(&weights), "w").unwrap();

        let rescaled_rows: Vec<UnitRecord> = rows
            .iter()
            .map(|r| UnitRecord {
                covariates: vec![5.0 * r.covariates[0] - 2.0],
                ..r.clone()
            })
            .collect();
        let rescaled = validate_sample(&rescaled_rows).unwrap();
        let report = standardized_differences(&rescaled, Some(&weights), "w").unwrap();
        for (a, b) in base.covariates.iter().zip(&report.covariates) {
            assert_abs_diff_eq!(a.whole_population, b.whole_population, epsilon = 1e-12);
            for (x, y) in a.per_cluster.iter().zip(&b.per_cluster) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }
}
