//! Weight calibration: transforms initial inverse-propensity weights into
//! calibrated weights satisfying global covariate balance and per-cluster
//! normalization, by the closed-form exponential tilt and damped Newton
//! root-finding on the balance residual.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{ClusteredSample, DesignCapability, WeightKind, WeightSet};
use crate::error::{Error, Result};

/// Initial weights whose implied propensity is this extreme get flagged.
const EXTREME_WEIGHT: f64 = 100.0;

#[derive(Debug, Clone, Serialize)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Halving line search on the dual objective.
    pub damping: bool,
    /// Replace the analytic Jacobian with central differences.
    pub finite_difference_jacobian: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-10,
            max_iterations: 100,
            damping: true,
            finite_difference_jacobian: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationResult {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    #[serde(skip)]
    pub alpha: WeightSet,
    #[serde(skip)]
    pub implied_propensity: Vec<f64>,
    pub iterations: usize,
    /// Max-abs entry of the balance residual at the solution.
    pub residual_norm: f64,
    pub converged: bool,
    pub survey: bool,
    /// Units whose calibrated weight fell below 1, making the implied
    /// propensity fall outside (0,1). Reporting-only.
    pub weights_below_one: usize,
}

/// Initial inverse-propensity weights: 1/e for treated, 1/(1-e) for controls.
/// The second return value counts weights beyond the positivity flag bound.
pub fn initial_weights(e0: &[f64], sample: &ClusteredSample) -> Result<(WeightSet, usize)> {
    if e0.len() != sample.n() {
        return Err(Error::DimensionMismatch {
            expected: sample.n(),
            got: e0.len(),
        });
    }
    let mut values = Vec::with_capacity(e0.len());
    let mut extreme = 0usize;
    for ((_, unit), &e) in sample.units().zip(e0) {
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::ProbabilityOutOfRange(e));
        }
        let d = if unit.treated { 1.0 / e } else { 1.0 / (1.0 - e) };
        if d > EXTREME_WEIGHT {
            extreme += 1;
        }
        values.push(d);
    }
    Ok((WeightSet::new(values, WeightKind::Initial)?, extreme))
}

/// Per-unit exponent of the tilt, in flat sample order.
fn tilt_exponents(
    lambda1: &DVector<f64>,
    lambda2: &DVector<f64>,
    sample: &ClusteredSample,
    d: &WeightSet,
) -> Vec<f64> {
    sample
        .units()
        .zip(&d.values)
        .map(|((_, unit), &dv)| {
            let lambda = if unit.treated { lambda1 } else { lambda2 };
            let dot: f64 = unit
                .covariates
                .iter()
                .zip(lambda.iter())
                .map(|(x, l)| x * l)
                .sum();
            dv.ln() + dot
        })
        .collect()
}

/// The closed-form calibrated weights at a given multiplier pair. Per-cluster
/// arm normalization holds structurally for any lambda. Denominators are
/// stabilized by per-cluster-arm max subtraction.
pub fn alpha_weights(
    lambda1: &[f64],
    lambda2: &[f64],
    sample: &ClusteredSample,
    d: &WeightSet,
    survey: bool,
) -> Result<WeightSet> {
    let p = sample.p();
    if lambda1.len() != p || lambda2.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: lambda1.len(),
        });
    }
    if d.len() != sample.n() {
        return Err(Error::DimensionMismatch {
            expected: sample.n(),
            got: d.len(),
        });
    }
    let l1 = DVector::from_column_slice(lambda1);
    let l2 = DVector::from_column_slice(lambda2);
    let exponents = tilt_exponents(&l1, &l2, sample, d);

    let mut values = vec![0.0; sample.n()];
    let mut offset = 0usize;
    for cluster in sample.clusters() {
        let n_i = cluster.n();
        let target = cluster.size_target(survey);
        for arm in [true, false] {
            let idx: Vec<usize> = (0..n_i)
                .filter(|&j| cluster.units[j].treated == arm)
                .collect();
            if idx.is_empty() {
                return Err(Error::OneArmCluster(cluster.info.key.clone()));
            }
            let max = idx
                .iter()
                .map(|&j| exponents[offset + j])
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = idx
                .iter()
                .map(|&j| {
                    let w = if survey {
                        cluster.units[j].within_cluster_weight()
                    } else {
                        1.0
                    };
                    w * (exponents[offset + j] - max).exp()
                })
                .sum();
            if !denom.is_finite() || denom <= 0.0 {
                return Err(Error::NotConverged {
                    what: "tilt denominator".into(),
                    iterations: 0,
                    residual: denom,
                });
            }
            for &j in &idx {
                values[offset + j] = target * (exponents[offset + j] - max).exp() / denom;
            }
        }
        offset += n_i;
    }
    WeightSet::new(values, WeightKind::Calibrated)
}

/// The stacked balance residual (Q1, Q2): treated and control weighted
/// covariate totals against the full-sample (design-weighted) totals,
/// normalized by n (or the population size in survey mode). Summation runs in
/// fixed cluster order.
pub fn q_residual(
    lambda1: &[f64],
    lambda2: &[f64],
    sample: &ClusteredSample,
    d: &WeightSet,
    survey: bool,
) -> Result<DVector<f64>> {
    let alpha = alpha_weights(lambda1, lambda2, sample, d, survey)?;
    let p = sample.p();
    let scale = if survey {
        sample.population_total()
    } else {
        sample.n() as f64
    };
    let mut q = DVector::<f64>::zeros(2 * p);
    for ((_, unit), &a) in sample.units().zip(&alpha.values) {
        let w = if survey { unit.design_weight } else { 1.0 };
        let block = if unit.treated { 0 } else { p };
        for (k, &x) in unit.covariates.iter().enumerate() {
            // A α X (resp. (1-A) α X) in the unit's own block, minus X in both.
            q[block + k] += w * a * x;
            q[k] -= w * x;
            q[p + k] -= w * x;
        }
    }
    Ok(q / scale)
}

/// Convex dual objective whose gradient is the balance residual.
fn dual_objective(
    lambda1: &DVector<f64>,
    lambda2: &DVector<f64>,
    sample: &ClusteredSample,
    d: &WeightSet,
    survey: bool,
) -> f64 {
    let exponents = tilt_exponents(lambda1, lambda2, sample, d);
    let scale = if survey {
        sample.population_total()
    } else {
        sample.n() as f64
    };
    let mut total = 0.0;
    let mut offset = 0usize;
    for cluster in sample.clusters() {
        let n_i = cluster.n();
        let target = cluster.size_target(survey);
        let outer = if survey {
            target / cluster.info.first_stage_prob.unwrap_or(1.0)
        } else {
            target
        };
        for arm in [true, false] {
            let idx: Vec<usize> = (0..n_i)
                .filter(|&j| cluster.units[j].treated == arm)
                .collect();
            let max = idx
                .iter()
                .map(|&j| exponents[offset + j])
                .fold(f64::NEG_INFINITY, f64::max);
            let log_denom: f64 = max
                + idx
                    .iter()
                    .map(|&j| {
                        let w = if survey {
                            cluster.units[j].within_cluster_weight()
                        } else {
                            1.0
                        };
                        w * (exponents[offset + j] - max).exp()
                    })
                    .sum::<f64>()
                    .ln();
            total += outer * log_denom;
        }
        offset += n_i;
    }
    // Linear part: -(lambda1 + lambda2)' sum of (design-weighted) covariates.
    for (_, unit) in sample.units() {
        let w = if survey { unit.design_weight } else { 1.0 };
        for (k, &x) in unit.covariates.iter().enumerate() {
            total -= w * x * (lambda1[k] + lambda2[k]);
        }
    }
    total / scale
}

/// Analytic block-diagonal Jacobian of the residual: each block is a
/// weighted within-cluster-arm covariance of the covariates.
fn analytic_jacobian(
    alpha: &WeightSet,
    sample: &ClusteredSample,
    survey: bool,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = sample.p();
    let scale = if survey {
        sample.population_total()
    } else {
        sample.n() as f64
    };
    let mut j1 = DMatrix::<f64>::zeros(p, p);
    let mut j2 = DMatrix::<f64>::zeros(p, p);
    let mut offset = 0usize;
    for cluster in sample.clusters() {
        let n_i = cluster.n();
        for arm in [true, false] {
            let idx: Vec<usize> = (0..n_i)
                .filter(|&j| cluster.units[j].treated == arm)
                .collect();
            // Tilted mean under the per-cluster-arm normalization weights.
            let mut wsum = 0.0;
            let mut mean = vec![0.0; p];
            for &j in &idx {
                let unit = &cluster.units[j];
                let w = if survey {
                    unit.within_cluster_weight() * alpha.values[offset + j]
                } else {
                    alpha.values[offset + j]
                };
                wsum += w;
                for k in 0..p {
                    mean[k] += w * unit.covariates[k];
                }
            }
            for k in 0..p {
                mean[k] /= wsum;
            }
            let block = if arm { &mut j1 } else { &mut j2 };
            for &j in &idx {
                let unit = &cluster.units[j];
                let c = if survey {
                    unit.design_weight * alpha.values[offset + j]
                } else {
                    alpha.values[offset + j]
                };
                for r in 0..p {
                    for s in 0..p {
                        block[(r, s)] +=
                            c * unit.covariates[r] * (unit.covariates[s] - mean[s]);
                    }
                }
            }
        }
        offset += n_i;
    }
    (j1 / scale, j2 / scale)
}

fn finite_difference_jacobian(
    lambda1: &[f64],
    lambda2: &[f64],
    sample: &ClusteredSample,
    d: &WeightSet,
    survey: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = sample.p();
    let h = 1e-6;
    let mut j1 = DMatrix::<f64>::zeros(p, p);
    let mut j2 = DMatrix::<f64>::zeros(p, p);
    for k in 0..p {
        let mut up1 = lambda1.to_vec();
        let mut dn1 = lambda1.to_vec();
        up1[k] += h;
        dn1[k] -= h;
        let qu = q_residual(&up1, lambda2, sample, d, survey)?;
        let qd = q_residual(&dn1, lambda2, sample, d, survey)?;
        for r in 0..p {
            j1[(r, k)] = (qu[r] - qd[r]) / (2.0 * h);
        }
        let mut up2 = lambda2.to_vec();
        let mut dn2 = lambda2.to_vec();
        up2[k] += h;
        dn2[k] -= h;
        let qu = q_residual(lambda1, &up2, sample, d, survey)?;
        let qd = q_residual(lambda1, &dn2, sample, d, survey)?;
        for r in 0..p {
            j2[(r, k)] = (qu[p + r] - qd[p + r]) / (2.0 * h);
        }
    }
    Ok((j1, j2))
}

fn solve_block(jac: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    // Symmetrize before factoring; the analytic block is symmetric up to
    // roundoff and the finite-difference one nearly so.
    let sym = (jac + jac.transpose()) * 0.5;
    match sym.clone().cholesky() {
        Some(chol) => Ok(chol.solve(rhs)),
        None => {
            let eig = sym.symmetric_eigen();
            let max_eig = eig.eigenvalues.amax();
            let (worst, _) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            if eig.eigenvalues[worst] <= 1e-12 * max_eig.max(1e-300) {
                let direction: Vec<String> = eig
                    .eigenvectors
                    .column(worst)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() > 1e-3)
                    .map(|(k, v)| format!("x{}({:+.3})", k + 1, v))
                    .collect();
                return Err(Error::CollinearCovariates {
                    direction: direction.join(" "),
                });
            }
            jac.clone()
                .lu()
                .solve(rhs)
                .ok_or(Error::CollinearCovariates {
                    direction: "unknown".into(),
                })
        }
    }
}

/// Finds the multiplier pair zeroing the balance residual by damped Newton,
/// then returns the calibrated weights, implied propensities, and solver
/// diagnostics. The lambda1/lambda2 subproblems decouple and are solved as
/// independent blocks. Deterministic given inputs.
pub fn solve_calibration(
    sample: &ClusteredSample,
    d: &WeightSet,
    options: &SolverOptions,
    survey: bool,
) -> Result<CalibrationResult> {
    if survey && sample.capability() == DesignCapability::None {
        return Err(Error::MissingDesignInfo(
            "survey calibration requires design weights".into(),
        ));
    }
    let p = sample.p();
    let mut l1 = vec![0.0; p];
    let mut l2 = vec![0.0; p];
    let mut q = q_residual(&l1, &l2, sample, d, survey)?;
    let mut phi = dual_objective(
        &DVector::from_column_slice(&l1),
        &DVector::from_column_slice(&l2),
        sample,
        d,
        survey,
    );
    let mut iterations = 0usize;
    let mut residual = q.amax();

    // An iterate far enough out to underflow the tilt weights means the
    // constraints are infeasible for this sample; report non-convergence
    // rather than the raw underflow.
    let diverged = |err: Error, iterations: usize, residual: f64| match err {
        Error::NonPositiveWeight { .. } => Error::NotConverged {
            what: "calibration".into(),
            iterations,
            residual,
        },
        other => other,
    };

    while residual > options.tolerance && iterations < options.max_iterations {
        let alpha = alpha_weights(&l1, &l2, sample, d, survey)
            .map_err(|e| diverged(e, iterations, residual))?;
        let (j1, j2) = if options.finite_difference_jacobian {
            finite_difference_jacobian(&l1, &l2, sample, d, survey)?
        } else {
            analytic_jacobian(&alpha, sample, survey)
        };
        let q1 = DVector::from_iterator(p, q.iter().take(p).copied());
        let q2 = DVector::from_iterator(p, q.iter().skip(p).copied());
        let step1 = solve_block(&j1, &q1)?;
        let step2 = solve_block(&j2, &q2)?;

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let c1: Vec<f64> = l1
                .iter()
                .zip(step1.iter())
                .map(|(l, s)| l - scale * s)
                .collect();
            let c2: Vec<f64> = l2
                .iter()
                .zip(step2.iter())
                .map(|(l, s)| l - scale * s)
                .collect();
            let candidate_phi = dual_objective(
                &DVector::from_column_slice(&c1),
                &DVector::from_column_slice(&c2),
                sample,
                d,
                survey,
            );
            if candidate_phi <= phi + 1e-14 || !options.damping {
                l1 = c1;
                l2 = c2;
                phi = candidate_phi;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        q = q_residual(&l1, &l2, sample, d, survey)
            .map_err(|e| diverged(e, iterations, residual))?;
        residual = q.amax();
        iterations += 1;
    }

    let converged = residual <= options.tolerance;
    if !converged {
        return Err(Error::NotConverged {
            what: "calibration".into(),
            iterations,
            residual,
        });
    }

    let alpha = alpha_weights(&l1, &l2, sample, d, survey)?;
    let (implied_propensity, weights_below_one) = propensity_from_alpha(&alpha, sample)?;
    Ok(CalibrationResult {
        lambda1: l1,
        lambda2: l2,
        alpha,
        implied_propensity,
        iterations,
        residual_norm: residual,
        converged,
        survey,
        weights_below_one,
    })
}

/// Implied propensities from calibrated weights: 1/alpha for treated,
/// 1 - 1/alpha for controls. Values are reporting-only; the estimators
/// consume alpha directly. The count of weights below 1 (implied propensity
/// outside (0,1)) is returned as a diagnostic.
pub fn propensity_from_alpha(
    alpha: &WeightSet,
    sample: &ClusteredSample,
) -> Result<(Vec<f64>, usize)> {
    if alpha.len() != sample.n() {
        return Err(Error::DimensionMismatch {
            expected: sample.n(),
            got: alpha.len(),
        });
    }
    let mut below_one = 0usize;
    let eps = 1e-12;
    let values = sample
        .units()
        .zip(&alpha.values)
        .map(|((_, unit), &a)| {
            if a < 1.0 {
                below_one += 1;
            }
            let e = if unit.treated { 1.0 / a } else { 1.0 - 1.0 / a };
            e.clamp(eps, 1.0 - eps)
        })
        .collect();
    Ok((values, below_one))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{validate_sample, UnitRecord};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

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

    fn toy_sample() -> ClusteredSample {
        let rows = vec![
            record("c1", 1.0, 2.0, &[0.5]),
            record("c1", 1.0, 1.0, &[-0.3]),
            record("c1", 0.0, 0.5, &[0.8]),
            record("c1", 0.0, 1.5, &[-0.1]),
            record("c2", 1.0, 0.0, &[1.2]),
            record("c2", 1.0, 1.0, &[-0.6]),
            record("c2", 0.0, 2.0, &[0.4]),
            record("c2", 0.0, 1.0, &[-0.9]),
        ];
        validate_sample(&rows).unwrap()
    }

    #[test]
    fn initial_weight_arithmetic() {
        let rows = vec![
            record("c1", 1.0, 0.0, &[0.0]),
            record("c1", 0.0, 0.0, &[0.0]),
            record("c1", 0.0, 0.0, &[0.0]),
        ];
        let sample = validate_sample(&rows).unwrap();
        let (d, extreme) = initial_weights(&[0.5, 0.25, 0.999], &sample).unwrap();
        assert_abs_diff_eq!(d.values[0], 2.0);
        assert_abs_diff_eq!(d.values[1], 4.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.values[2], 1000.0, epsilon = 1e-9);
        assert_eq!(extreme, 1);
    }

    #[test]
    fn initial_weight_rejects_bad_probability() {
        let rows = vec![
            record("c1", 1.0, 0.0, &[0.0]),
            record("c1", 0.0, 0.0, &[0.0]),
        ];
        let sample = validate_sample(&rows).unwrap();
        assert!(matches!(
            initial_weights(&[1.0, 0.5], &sample),
            Err(Error::ProbabilityOutOfRange(_))
        ));
    }

    #[test]
    fn tilt_free_alpha_is_cluster_normalized() {
        let rows = vec![
            record("c1", 1.0, 0.0, &[0.1]),
            record("c1", 1.0, 0.0, &[0.2]),
            record("c1", 0.0, 0.0, &[0.3]),
            record("c1", 0.0, 0.0, &[0.4]),
        ];
        let sample = validate_sample(&rows).unwrap();
        let d = WeightSet::new(vec![2.0; 4], WeightKind::Initial).unwrap();
        let alpha = alpha_weights(&[0.0], &[0.0], &sample, &d, false).unwrap();
        for &v in &alpha.values {
            assert_abs_diff_eq!(v, 2.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn hand_evaluated_tilt() {
        // Direct evaluation of the closed form, with explicit arithmetic
        // independent of the library's stabilized path.
        let sample = toy_sample();
        let d_values = vec![1.5, 2.0, 1.2, 1.8, 2.5, 1.3, 1.1, 1.6];
        let d = WeightSet::new(d_values.clone(), WeightKind::Initial).unwrap();
        let (l1, l2) = (0.3, -0.2);
        let alpha = alpha_weights(&[l1], &[l2], &sample, &d, false).unwrap();

        let mut expected = Vec::new();
        let clusters: Vec<(usize, usize)> = vec![(0, 4), (4, 4)];
        for &(start, n_i) in &clusters {
            let units: Vec<_> = sample.units().skip(start).take(n_i).collect();
            for (j, (_, unit)) in units.iter().enumerate() {
                let lam = if unit.treated { l1 } else { l2 };
                let num = d_values[start + j] * (lam * unit.covariates[0]).exp();
                let denom: f64 = units
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, u))| u.treated == unit.treated)
                    .map(|(k, (_, u))| d_values[start + k] * (lam * u.covariates[0]).exp())
                    .sum();
                expected.push(n_i as f64 * num / denom);
            }
        }
        for (a, e) in alpha.values.iter().zip(&expected) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn precalibrated_input_has_zero_residual_and_zero_lambda() {
        // Symmetric construction: both arms in each cluster see the same
        // covariate values, d constant per arm.
        let rows = vec![
            record("c1", 1.0, 1.0, &[0.5]),
            record("c1", 1.0, 0.0, &[-0.5]),
            record("c1", 0.0, 1.0, &[0.5]),
            record("c1", 0.0, 0.0, &[-0.5]),
            record("c2", 1.0, 1.0, &[1.5]),
            record("c2", 1.0, 0.0, &[0.7]),
            record("c2", 0.0, 1.0, &[1.5]),
            record("c2", 0.0, 0.0, &[0.7]),
        ];
        let sample = validate_sample(&rows).unwrap();
        let d = WeightSet::new(vec![2.0; 8], WeightKind::Initial).unwrap();
        let q = q_residual(&[0.0], &[0.0], &sample, &d, false).unwrap();
        assert!(q.amax() < 1e-12);
        let result = solve_calibration(&sample, &d, &SolverOptions::default(), false).unwrap();
        assert!(result.lambda1[0].abs() < 1e-10);
        assert!(result.lambda2[0].abs() < 1e-10);
        for (a, d) in result.alpha.values.iter().zip([2.0; 8]) {
            assert_abs_diff_eq!(*a, d, epsilon = 1e-9);
        }
    }

    #[test]
    fn residual_matches_dual_gradient() {
        let sample = toy_sample();
        let d = WeightSet::new(vec![1.5, 2.0, 1.2, 1.8, 2.5, 1.3, 1.1, 1.6], WeightKind::Initial)
            .unwrap();
        let (l1, l2) = (vec![0.25], vec![-0.4]);
        let q = q_residual(&l1, &l2, &sample, &d, false).unwrap();
        let h = 1e-6;
        let phi = |a: f64, b: f64| {
            dual_objective(
                &DVector::from_vec(vec![a]),
                &DVector::from_vec(vec![b]),
                &sample,
                &d,
                false,
            )
        };
        let g1 = (phi(l1[0] + h, l2[0]) - phi(l1[0] - h, l2[0])) / (2.0 * h);
        let g2 = (phi(l1[0], l2[0] + h) - phi(l1[0], l2[0] - h)) / (2.0 * h);
        assert_abs_diff_eq!(q[0], g1, epsilon = 1e-6);
        assert_abs_diff_eq!(q[1], g2, epsilon = 1e-6);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let sample = toy_sample();
        let d = WeightSet::new(vec![1.5, 2.0, 1.2, 1.8, 2.5, 1.3, 1.1, 1.6], WeightKind::Initial)
            .unwrap();
        let (l1, l2) = (vec![0.25], vec![-0.4]);
        let alpha = alpha_weights(&l1, &l2, &sample, &d, false).unwrap();
        let (a1, a2) = analytic_jacobian(&alpha, &sample, false);
        let (f1, f2) = finite_difference_jacobian(&l1, &l2, &sample, &d, false).unwrap();
        assert_abs_diff_eq!(a1[(0, 0)], f1[(0, 0)], epsilon = 1e-6);
        assert_abs_diff_eq!(a2[(0, 0)], f2[(0, 0)], epsilon = 1e-6);
    }

    #[test]
    fn solver_balances_covariates() {
        let sample = toy_sample();
        let d = WeightSet::new(vec![1.5, 2.0, 1.2, 1.8, 2.5, 1.3, 1.1, 1.6], WeightKind::Initial)
            .unwrap();
        let result = solve_calibration(&sample, &d, &SolverOptions::default(), false).unwrap();
        assert!(result.converged);
        // (c1): weighted treated/control totals equal the unweighted total.
        let total: f64 = sample.units().map(|(_, u)| u.covariates[0]).sum();
        let treated: f64 = sample
            .units()
            .zip(&result.alpha.values)
            .filter(|((_, u), _)| u.treated)
            .map(|((_, u), &a)| a * u.covariates[0])
            .sum();
        let control: f64 = sample
            .units()
            .zip(&result.alpha.values)
            .filter(|((_, u), _)| !u.treated)
            .map(|((_, u), &a)| a * u.covariates[0])
            .sum();
        assert_abs_diff_eq!(treated, total, epsilon = 1e-8);
        assert_abs_diff_eq!(control, total, epsilon = 1e-8);
    }

    #[test]
    fn collinear_covariates_detected() {
        // Second covariate is an exact copy of the first.
        let rows = vec![
            record("c1", 1.0, 1.0, &[0.5, 0.5]),
            record("c1", 1.0, 0.0, &[-0.3, -0.3]),
            record("c1", 0.0, 1.0, &[0.8, 0.8]),
            record("c1", 0.0, 0.0, &[-0.1, -0.1]),
        ];
        let sample = validate_sample(&rows).unwrap();
        let d = WeightSet::new(vec![2.0, 1.5, 1.3, 1.9], WeightKind::Initial).unwrap();
        match solve_calibration(&sample, &d, &SolverOptions::default(), false) {
            Err(Error::CollinearCovariates { .. }) => {}
            other => panic!("expected CollinearCovariates, got {other:?}"),
        }
    }

    #[test]
    fn propensity_inverts_initial_weights() {
        let rows = vec![
            record("c1", 1.0, 0.0, &[0.0]),
            record("c1", 0.0, 0.0, &[0.0]),
            record("c1", 0.0, 0.0, &[0.0]),
        ];
        let sample = validate_sample(&rows).unwrap();
        let alpha =
            WeightSet::new(vec![2.0, 2.0, 4.0 / 3.0], WeightKind::Calibrated).unwrap();
        let (e, below_one) = propensity_from_alpha(&alpha, &sample).unwrap();
        assert_abs_diff_eq!(e[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(e[1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(e[2], 0.25, epsilon = 1e-12);
        assert_eq!(below_one, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Constraint (c2) holds structurally for arbitrary multipliers.
        #[test]
        fn arm_sums_equal_cluster_size_for_any_lambda(
            l1 in -2.0f64..2.0,
            l2 in -2.0f64..2.0,
            seed in 0u64..1000,
        ) {
            let mut rows = Vec::new();
            let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 1000) as f64 / 1000.0
            };
            for c in 0..3 {
                let n_i = 3 + (c * 2);
                for j in 0..n_i {
                    let a = if j < n_i / 2 + 1 { 1.0 } else { 0.0 };
                    rows.push(record(&format!("c{c}"), a, next(), &[next() * 4.0 - 2.0]));
                }
            }
            let sample = validate_sample(&rows).unwrap();
            let d_values: Vec<f64> = (0..sample.n()).map(|_| 1.0 + 3.0 * next()).collect();
            let d = WeightSet::new(d_values, WeightKind::Initial).unwrap();
            let alpha = alpha_weights(&[l1], &[l2], &sample, &d, false).unwrap();
            let mut offset = 0;
            for cluster in sample.clusters() {
                let n_i = cluster.n();
                for arm in [true, false] {
                    let sum: f64 = cluster.units.iter().enumerate()
                        .filter(|(_, u)| u.treated == arm)
                        .map(|(j, _)| alpha.values[offset + j])
                        .sum();
                    prop_assert!((sum - n_i as f64).abs() <= 1e-10 * n_i as f64);
                }
                offset += n_i;
            }
        }

        /// Scaling d within one cluster-arm leaves alpha unchanged.
        #[test]
        fn scale_equivariance(factor in 0.1f64..10.0) {
            let sample = toy_sample();
            let base = vec![1.5, 2.0, 1.2, 1.8, 2.5, 1.3, 1.1, 1.6];
            let mut scaled = base.clone();
            // Scale the treated arm of the first cluster (units 0 and 1).
            scaled[0] *= factor;
            scaled[1] *= factor;
            let d1 = WeightSet::new(base, WeightKind::Initial).unwrap();
            let d2 = WeightSet::new(scaled, WeightKind::Initial).unwrap();
            let a1 = alpha_weights(&[0.3], &[-0.2], &sample, &d1, false).unwrap();
            let a2 = alpha_weights(&[0.3], &[-0.2], &sample, &d2, false).unwrap();
            for (x, y) in a1.values.iter().zip(&a2.values) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
