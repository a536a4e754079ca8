//! Step-1 working propensity models: weighted logistic regression by
//! iteratively reweighted least squares, optionally with cluster dummies.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::ClusteredSample;
use crate::error::{Error, Result};
use crate::link::{inverse_link, LinkKind};

/// Hard cap on coefficient magnitude; beyond this the fitted probabilities
/// are numerically 0/1 and the inverse weights explode.
pub const SEPARATION_CAP: f64 = 30.0;

const MAX_ITERATIONS: usize = 50;

/// A fitted (weighted) logistic regression.
///
/// Coefficient layout: intercept, then the p covariate slopes, then, when
/// cluster dummies were requested, one coefficient per non-reference cluster
/// (clusters 1..m-1 in sample order; cluster 0 is the reference).
#[derive(Debug, Clone, Serialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_score: f64,
    pub cluster_dummies: bool,
}

fn design_row(fit_p: usize, dummies: bool, m: usize, cluster: usize, x: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(1 + fit_p + if dummies { m - 1 } else { 0 });
    row.push(1.0);
    row.extend_from_slice(x);
    if dummies {
        for k in 1..m {
            row.push(if cluster == k { 1.0 } else { 0.0 });
        }
    }
    row
}

/// Maximizes the weighted Bernoulli log-likelihood of treatment on
/// [1, X] (plus cluster dummies when requested). Deterministic given inputs.
pub fn fit_logistic(
    sample: &ClusteredSample,
    use_cluster_dummies: bool,
    weights: Option<&[f64]>,
) -> Result<LogisticFit> {
    let n = sample.n();
    let p = sample.p();
    let m = sample.m();
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: w.len(),
            });
        }
        if let Some((index, &value)) = w.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(Error::NonPositiveWeight { index, value });
        }
    }
    let q = 1 + p + if use_cluster_dummies { m - 1 } else { 0 };

    let mut design = DMatrix::<f64>::zeros(n, q);
    let mut response = DVector::<f64>::zeros(n);
    let mut weight = DVector::<f64>::from_element(n, 1.0);
    for (row, (cluster, unit)) in sample.units().enumerate() {
        let z = design_row(p, use_cluster_dummies, m, cluster, &unit.covariates);
        for (col, v) in z.into_iter().enumerate() {
            design[(row, col)] = v;
        }
        response[row] = unit.treated as u8 as f64;
        if let Some(w) = weights {
            weight[row] = w[row];
        }
    }

    let weight_total: f64 = weight.iter().sum();
    let tolerance = 1e-10 * weight_total.max(1.0);

    let loglik = |beta: &DVector<f64>| -> f64 {
        let eta = &design * beta;
        (0..n)
            .map(|i| {
                let e: f64 = eta[i];
                // a*eta - log(1 + exp(eta)), overflow-safe
                let softplus = if e > 30.0 { e } else { e.exp().ln_1p() };
                weight[i] * (response[i] * e - softplus)
            })
            .sum()
    };

    let mut beta = DVector::<f64>::zeros(q);
    let mut ll = loglik(&beta);
    let mut max_abs_score;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        let eta = &design * &beta;
        let mu: DVector<f64> = eta.map(|e| inverse_link(LinkKind::Logit, e));
        let residual_weighted =
            DVector::from_iterator(n, (0..n).map(|i| weight[i] * (response[i] - mu[i])));
        let score = design.transpose() * &residual_weighted;
        max_abs_score = score.amax();
        if max_abs_score <= tolerance {
            return Ok(LogisticFit {
                coefficients: beta.iter().copied().collect(),
                converged: true,
                iterations,
                max_abs_score,
                cluster_dummies: use_cluster_dummies,
            });
        }

        let mut info = DMatrix::<f64>::zeros(q, q);
        for i in 0..n {
            let w = weight[i] * mu[i] * (1.0 - mu[i]);
            let zi = design.row(i);
            for a in 0..q {
                let za = zi[a];
                if za == 0.0 {
                    continue;
                }
                for b in a..q {
                    info[(a, b)] += w * za * zi[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        let chol = info.cholesky().ok_or(Error::SingularInformation)?;
        let delta = chol.solve(&score);

        // Step-halving on likelihood decrease.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &beta + step * &delta;
            let candidate_ll = loglik(&candidate);
            if candidate_ll >= ll - 1e-12 {
                beta = candidate;
                ll = candidate_ll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        iterations += 1;

        if beta.amax() > SEPARATION_CAP && max_abs_score > tolerance {
            return Err(Error::SeparationDetected {
                cap: SEPARATION_CAP,
            });
        }
    }

    // Final score check after the last accepted step.
    let eta = &design * &beta;
    let mu: DVector<f64> = eta.map(|e| inverse_link(LinkKind::Logit, e));
    let score = design.transpose()
        * DVector::from_iterator(n, (0..n).map(|i| weight[i] * (response[i] - mu[i])));
    max_abs_score = score.amax();
    if max_abs_score <= tolerance {
        return Ok(LogisticFit {
            coefficients: beta.iter().copied().collect(),
            converged: true,
            iterations,
            max_abs_score,
            cluster_dummies: use_cluster_dummies,
        });
    }
    Err(Error::NotConverged {
        what: "logistic regression".into(),
        iterations,
        residual: max_abs_score,
    })
}

impl LogisticFit {
    /// Per-unit fitted propensities on the sample the model was built for.
    pub fn predict(&self, sample: &ClusteredSample) -> Result<Vec<f64>> {
        let p = sample.p();
        let m = sample.m();
        let expected = 1 + p + if self.cluster_dummies { m - 1 } else { 0 };
        if self.coefficients.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.coefficients.len(),
            });
        }
        Ok(sample
            .units()
            .map(|(cluster, unit)| {
                let z = design_row(p, self.cluster_dummies, m, cluster, &unit.covariates);
                let eta: f64 = z
                    .iter()
                    .zip(&self.coefficients)
                    .map(|(a, b)| a * b)
                    .sum();
                inverse_link(LinkKind::Logit, eta)
            })
            .collect())
    }
}
