//! Random-intercept logistic mixed model fitted by maximum marginal
//! likelihood with adaptive Gauss-Hermite quadrature, one dimension per
//! cluster. Supplies option-(i) propensity predictions via posterior modes.

use nalgebra::DVector;
use serde::Serialize;

use crate::data::ClusteredSample;
use crate::error::{Error, Result};
use crate::link::{inverse_link, LinkKind};
use crate::logistic::fit_logistic;
use crate::numeric::{gauss_hermite, nelder_mead};

/// Below this the variance component is treated as on the zero boundary.
const BOUNDARY_SD: f64 = 1e-2;

#[derive(Debug, Clone, Serialize)]
pub struct GlmmFit {
    /// Intercept followed by the p covariate slopes.
    pub fixed_coefficients: Vec<f64>,
    pub random_sd: f64,
    /// Posterior-mode random effects, one per cluster in sample order.
    pub predicted_effects: Vec<f64>,
    pub marginal_loglik: f64,
    pub quadrature_nodes: usize,
    pub converged: bool,
    /// Set when the variance estimate hit zero; the fit is still valid.
    pub boundary: bool,
    pub evaluations: usize,
}

struct ClusterBlock {
    /// Rows of [1, x] per unit.
    design: Vec<Vec<f64>>,
    response: Vec<f64>,
    unit_weights: Vec<f64>,
    cluster_weight: f64,
}

fn blocks(
    sample: &ClusteredSample,
    unit_weights: Option<&[f64]>,
    cluster_weights: Option<&[f64]>,
) -> Vec<ClusterBlock> {
    let mut out = Vec::with_capacity(sample.m());
    let mut flat = 0usize;
    for (ci, cluster) in sample.clusters().iter().enumerate() {
        let mut design = Vec::with_capacity(cluster.n());
        let mut response = Vec::with_capacity(cluster.n());
        let mut weights = Vec::with_capacity(cluster.n());
        for unit in &cluster.units {
            let mut row = Vec::with_capacity(1 + unit.covariates.len());
            row.push(1.0);
            row.extend_from_slice(&unit.covariates);
            design.push(row);
            response.push(unit.treated as u8 as f64);
            weights.push(unit_weights.map(|w| w[flat]).unwrap_or(1.0));
            flat += 1;
        }
        out.push(ClusterBlock {
            design,
            response,
            unit_weights: weights,
            cluster_weight: cluster_weights.map(|w| w[ci]).unwrap_or(1.0),
        });
    }
    out
}

/// Weighted Bernoulli log-likelihood of one cluster at random effect `b`.
fn cluster_loglik(block: &ClusterBlock, gamma: &[f64], b: f64) -> f64 {
    let mut total = 0.0;
    for ((row, &a), &w) in block
        .design
        .iter()
        .zip(&block.response)
        .zip(&block.unit_weights)
    {
        let eta: f64 = row.iter().zip(gamma).map(|(x, g)| x * g).sum::<f64>() + b;
        let softplus = if eta > 30.0 { eta } else { eta.exp().ln_1p() };
        total += w * (a * eta - softplus);
    }
    total
}

/// Posterior mode of the random effect and the curvature of the posterior
/// log-density at the mode, by safeguarded Newton.
fn posterior_mode(block: &ClusterBlock, gamma: &[f64], sigma: f64) -> (f64, f64) {
    let var = sigma * sigma;
    let mut b = 0.0;
    for _ in 0..50 {
        let mut grad = -b / var;
        let mut curv = -1.0 / var;
        for ((row, &a), &w) in block
            .design
            .iter()
            .zip(&block.response)
            .zip(&block.unit_weights)
        {
            let eta: f64 = row.iter().zip(gamma).map(|(x, g)| x * g).sum::<f64>() + b;
            let mu = inverse_link(LinkKind::Logit, eta);
            grad += w * (a - mu);
            curv -= w * mu * (1.0 - mu);
        }
        let mut step = -grad / curv;
        if step.abs() > 5.0 {
            step = 5.0 * step.signum();
        }
        b += step;
        if step.abs() < 1e-11 {
            break;
        }
    }
    let mut curv = -1.0 / var;
    for (row, &w) in block.design.iter().zip(&block.unit_weights) {
        let eta: f64 = row.iter().zip(gamma).map(|(x, g)| x * g).sum::<f64>() + b;
        let mu = inverse_link(LinkKind::Logit, eta);
        curv -= w * mu * (1.0 - mu);
    }
    (b, -curv)
}

/// Adaptive Gauss-Hermite approximation of one cluster's marginal
/// log-likelihood contribution.
fn cluster_marginal_loglik(
    block: &ClusterBlock,
    gamma: &[f64],
    sigma: f64,
    nodes: &[f64],
    weights: &[f64],
) -> f64 {
    if sigma < 1e-8 {
        return cluster_loglik(block, gamma, 0.0);
    }
    let (mode, precision) = posterior_mode(block, gamma, sigma);
    let scale = (2.0 / precision).sqrt();
    let var = sigma * sigma;
    let mut terms = Vec::with_capacity(nodes.len());
    for (&t, &w) in nodes.iter().zip(weights) {
        let b = mode + scale * t;
        let log_term = cluster_loglik(block, gamma, b) - b * b / (2.0 * var) + t * t + w.ln();
        terms.push(log_term);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln() + scale.ln() - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Fits the random-intercept logistic model. Equivalent to
/// `fit_random_intercept_logistic_weighted` with unit weights.
pub fn fit_random_intercept_logistic(
    sample: &ClusteredSample,
    quadrature_nodes: usize,
) -> Result<GlmmFit> {
    fit_random_intercept_logistic_weighted(sample, quadrature_nodes, None, None)
}

/// Fits the random-intercept logistic model with optional per-unit and
/// per-cluster weights (the design-weighted pseudo-likelihood used with
/// survey samples).
pub fn fit_random_intercept_logistic_weighted(
    sample: &ClusteredSample,
    quadrature_nodes: usize,
    unit_weights: Option<&[f64]>,
    cluster_weights: Option<&[f64]>,
) -> Result<GlmmFit> {
    if quadrature_nodes < 5 {
        return Err(Error::Config(
            "quadrature_nodes must be at least 5".into(),
        ));
    }
    let p = sample.p();
    let blocks = blocks(sample, unit_weights, cluster_weights);
    let (nodes, gh_weights) = gauss_hermite(quadrature_nodes);

    let start_fit = fit_logistic(sample, false, unit_weights)?;
    let single_cluster = sample.m() == 1;

    let objective = |theta: &DVector<f64>| -> f64 {
        let gamma: Vec<f64> = theta.iter().take(1 + p).copied().collect();
        let sigma = theta[1 + p].exp();
        if !sigma.is_finite() || sigma > 50.0 {
            return f64::INFINITY;
        }
        let total: f64 = blocks
            .iter()
            .map(|b| {
                b.cluster_weight * cluster_marginal_loglik(b, &gamma, sigma, &nodes, &gh_weights)
            })
            .sum();
        -total
    };

    let mut theta0 = DVector::<f64>::zeros(2 + p);
    for k in 0..=p {
        theta0[k] = start_fit.coefficients[k];
    }
    theta0[1 + p] = if single_cluster { -8.0 } else { (0.7f64).ln() };

    let result = nelder_mead(objective, &theta0, 0.25, 1e-9, 4000);
    let mut gamma: Vec<f64> = result.x.iter().take(1 + p).copied().collect();
    let mut sigma = result.x[1 + p].exp();

    let boundary = single_cluster || sigma < BOUNDARY_SD;
    if boundary {
        // On the boundary the model collapses to plain logistic regression.
        sigma = 0.0;
        gamma = start_fit.coefficients[..1 + p].to_vec();
    }
    if !result.converged && !boundary {
        return Err(Error::NotConverged {
            what: "random-intercept logistic model".into(),
            iterations: result.evaluations,
            residual: f64::NAN,
        });
    }

    let predicted_effects: Vec<f64> = if sigma == 0.0 {
        vec![0.0; sample.m()]
    } else {
        blocks
            .iter()
            .map(|b| posterior_mode(b, &gamma, sigma).0)
            .collect()
    };
    let marginal_loglik: f64 = blocks
        .iter()
        .map(|b| b.cluster_weight * cluster_marginal_loglik(b, &gamma, sigma, &nodes, &gh_weights))
        .sum();

    Ok(GlmmFit {
        fixed_coefficients: gamma,
        random_sd: sigma,
        predicted_effects,
        marginal_loglik,
        quadrature_nodes,
        converged: result.converged || boundary,
        boundary,
        evaluations: result.evaluations,
    })
}

impl GlmmFit {
    /// Per-unit propensities using the cluster's posterior-mode effect.
    pub fn predict(&self, sample: &ClusteredSample) -> Result<Vec<f64>> {
        if self.fixed_coefficients.len() != 1 + sample.p() {
            return Err(Error::DimensionMismatch {
                expected: 1 + sample.p(),
                got: self.fixed_coefficients.len(),
            });
        }
        Ok(sample
            .units()
            .map(|(cluster, unit)| {
                let eta: f64 = self.fixed_coefficients[0]
                    + unit
                        .covariates
                        .iter()
                        .zip(&self.fixed_coefficients[1..])
                        .map(|(x, g)| x * g)
                        .sum::<f64>()
                    + self.predicted_effects[cluster];
                inverse_link(LinkKind::Logit, eta)
            })
            .collect())
    }
}
