//! Point estimators of the average treatment effect, plug-in and bootstrap
//! variance estimation, and Wald confidence intervals.
//!
//! Estimators share one shape: each produces a point estimate together with
//! per-unit linearization scores whose (design-weighted) mean recovers the
//! estimate. A common aggregator then turns the scores into a variance, either
//! by the between/within cluster decomposition or, for survey samples, the
//! Horvitz-Thompson double-sum with joint inclusion probabilities.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::calibration::{
    initial_weights, solve_calibration, CalibrationResult, SolverOptions,
};
use crate::data::{from_clusters, ClusteredSample, DesignCapability};
use crate::error::{Error, Result};
use crate::glmm::fit_random_intercept_logistic_weighted;
use crate::logistic::fit_logistic;
use crate::numeric::normal_quantile;
use crate::rng::substream;

/// Namespace tag for bootstrap substreams.
const BOOTSTRAP_STREAM: u64 = 0xB007;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    Plugin,
    Bootstrap,
    None,
}

impl VarianceMethod {
    pub fn label(&self) -> &'static str {
        match self {
            VarianceMethod::Plugin => "plugin",
            VarianceMethod::Bootstrap => "bootstrap",
            VarianceMethod::None => "none",
        }
    }
}

impl std::str::FromStr for VarianceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plugin" => Ok(VarianceMethod::Plugin),
            "bootstrap" => Ok(VarianceMethod::Bootstrap),
            "none" => Ok(VarianceMethod::None),
            other => Err(Error::Config(format!("unknown variance method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimationOptions {
    pub survey: bool,
    pub variance: VarianceMethod,
    pub bootstrap_reps: usize,
    pub seed: u64,
    pub level: f64,
    pub quadrature_nodes: usize,
    pub solver: SolverOptions,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        EstimationOptions {
            survey: false,
            variance: VarianceMethod::Plugin,
            bootstrap_reps: 500,
            seed: 0,
            level: 0.95,
            quadrature_nodes: 15,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub method: String,
    pub tau_hat: f64,
    pub variance: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub level: f64,
    pub variance_method: String,
    pub n: usize,
    pub m: usize,
    pub diagnostics: BTreeMap<String, f64>,
}

/// Intermediate quantities of the plug-in variance, exposed for inspection.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceComponents {
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub tau_ij: Vec<f64>,
    pub tau_i: Vec<f64>,
    pub v_i: Vec<f64>,
}

/// A point estimate with its per-unit linearization scores. The scores
/// satisfy mean(tau_ij) = tau_hat (design-weighted in survey mode), so the
/// shared variance aggregators apply to every estimator.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub tau_hat: f64,
    pub tau_ij: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub diagnostics: BTreeMap<String, f64>,
}

/// One ATE estimation strategy, selectable by name.
pub trait AteEstimator: Send + Sync {
    fn name(&self) -> &'static str;
    fn scores(&self, sample: &ClusteredSample, options: &EstimationOptions) -> Result<ScoreSet>;
}

/// All registered strategies, in presentation order.
pub fn registry() -> Vec<Box<dyn AteEstimator>> {
    vec![
        Box::new(SimpleEstimator),
        Box::new(FixedEffectsEstimator),
        Box::new(RandomEffectsEstimator),
        Box::new(CalibrationEstimator),
    ]
}

pub fn lookup(name: &str) -> Result<Box<dyn AteEstimator>> {
    registry()
        .into_iter()
        .find(|e| e.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown method {name:?}")))
}

/// Runs one strategy end to end: point estimate, variance per the requested
/// method, and Wald interval.
pub fn estimate(
    estimator: &dyn AteEstimator,
    sample: &ClusteredSample,
    options: &EstimationOptions,
) -> Result<EstimateReport> {
    let scores = estimator.scores(sample, options)?;
    let mut diagnostics = scores.diagnostics.clone();
    let variance = match options.variance {
        VarianceMethod::Plugin => Some(aggregate_variance(
            sample,
            scores.tau_hat,
            &scores.tau_ij,
            options.survey,
        )?),
        VarianceMethod::Bootstrap => {
            let outcome = cluster_bootstrap_variance(
                sample,
                estimator,
                options.bootstrap_reps,
                options.seed,
                options,
            )?;
            diagnostics.insert("bootstrap_failures".into(), outcome.failures as f64);
            diagnostics.insert("bootstrap_replicates".into(), outcome.replicates as f64);
            Some(outcome.variance)
        }
        VarianceMethod::None => None,
    };
    let (ci_low, ci_high) = match variance {
        Some(v) => {
            let (lo, hi) = confidence_interval(scores.tau_hat, v, options.level);
            (Some(lo), Some(hi))
        }
        None => (None, None),
    };
    Ok(EstimateReport {
        method: estimator.name().to_string(),
        tau_hat: scores.tau_hat,
        variance,
        ci_low,
        ci_high,
        level: options.level,
        variance_method: options.variance.label().to_string(),
        n: sample.n(),
        m: sample.m(),
        diagnostics,
    })
}

// ---------------------------------------------------------------------------
// Point estimators
// ---------------------------------------------------------------------------

/// Design-weighted treated-minus-control outcome total over the (estimated)
/// population size, with no propensity adjustment.
pub fn tau_simple(sample: &ClusteredSample, survey: bool) -> f64 {
    let scale = if survey {
        sample.population_total()
    } else {
        sample.n() as f64
    };
    let total: f64 = sample
        .units()
        .map(|(_, unit)| {
            let w = if survey { unit.design_weight } else { 1.0 };
            if unit.treated {
                w * unit.outcome
            } else {
                -w * unit.outcome
            }
        })
        .sum();
    total / scale
}

/// Inverse-probability weighting with externally supplied propensities.
pub fn tau_iptw(sample: &ClusteredSample, e: &[f64], survey: bool) -> Result<f64> {
    if e.len() != sample.n() {
        return Err(Error::DimensionMismatch {
            expected: sample.n(),
            got: e.len(),
        });
    }
    for &v in e {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::ProbabilityOutOfRange(v));
        }
    }
    let scale = if survey {
        sample.population_total()
    } else {
        sample.n() as f64
    };
    let total: f64 = sample
        .units()
        .zip(e)
        .map(|((_, unit), &ev)| {
            let w = if survey { unit.design_weight } else { 1.0 };
            if unit.treated {
                w * unit.outcome / ev
            } else {
                -w * unit.outcome / (1.0 - ev)
            }
        })
        .sum();
    Ok(total / scale)
}

/// The calibrated estimator: weighted treated-minus-control outcome total
/// under the calibrated weights.
pub fn tau_calibrated(sample: &ClusteredSample, cal: &CalibrationResult, survey: bool) -> f64 {
    let scale = if survey {
        sample.population_total()
    } else {
        sample.n() as f64
    };
    let total: f64 = sample
        .units()
        .zip(&cal.alpha.values)
        .map(|((_, unit), &a)| {
            let w = if survey { unit.design_weight } else { 1.0 };
            let signed = if unit.treated {
                unit.outcome
            } else {
                -unit.outcome
            };
            w * a * signed
        })
        .sum();
    total / scale
}

// ---------------------------------------------------------------------------
// Plug-in variance
// ---------------------------------------------------------------------------

/// Arm-specific regression coefficient of the linearization: the weighted
/// cross-product of outcomes on covariates times the inverse weighted Gram
/// matrix, with per-unit factor alpha(1 - alpha/n_i) and the design weight in
/// survey mode.
fn b_coefficients(
    sample: &ClusteredSample,
    alpha: &[f64],
    survey: bool,
    arm: bool,
) -> Result<Vec<f64>> {
    let p = sample.p();
    let mut num = DVector::<f64>::zeros(p);
    let mut den = DMatrix::<f64>::zeros(p, p);
    let mut offset = 0usize;
    for cluster in sample.clusters() {
        let n_i = cluster.n() as f64;
        for (j, unit) in cluster.units.iter().enumerate() {
            if unit.treated != arm {
                continue;
            }
            let a = alpha[offset + j];
            let mut c = a * (1.0 - a / n_i);
            if survey {
                c *= unit.design_weight;
            }
            for r in 0..p {
                num[r] += c * unit.outcome * unit.covariates[r];
                for s in 0..p {
                    den[(r, s)] += c * unit.covariates[r] * unit.covariates[s];
                }
            }
        }
        offset += cluster.n();
    }
    den.lu()
        .solve(&num)
        .map(|v| v.iter().copied().collect())
        .ok_or(Error::SingularMoment)
}

/// Per-unit linearization scores of the calibrated estimator.
fn calibrated_scores(
    sample: &ClusteredSample,
    cal: &CalibrationResult,
    survey: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let b1 = b_coefficients(sample, &cal.alpha.values, survey, true)?;
    let b2 = b_coefficients(sample, &cal.alpha.values, survey, false)?;
    let tau_ij = sample
        .units()
        .zip(&cal.alpha.values)
        .map(|((_, unit), &a)| {
            let b1x: f64 = b1.iter().zip(&unit.covariates).map(|(b, x)| b * x).sum();
            let b2x: f64 = b2.iter().zip(&unit.covariates).map(|(b, x)| b * x).sum();
            let core = if unit.treated {
                a * (unit.outcome - b1x)
            } else {
                -a * (unit.outcome - b2x)
            };
            core + (b1x - b2x)
        })
        .collect();
    Ok((tau_ij, b1, b2))
}

/// Plug-in variance of the calibrated estimator, with its intermediate
/// components.
pub fn plugin_variance(
    sample: &ClusteredSample,
    cal: &CalibrationResult,
    survey: bool,
) -> Result<(VarianceComponents, f64)> {
    let tau_hat = tau_calibrated(sample, cal, survey);
    let (tau_ij, b1, b2) = calibrated_scores(sample, cal, survey)?;
    let (tau_i, v_i, variance) = if use_survey_path(sample, survey) {
        aggregate_survey(sample, &tau_ij)?
    } else {
        aggregate_iid(sample, tau_hat, &tau_ij)
    };
    Ok((
        VarianceComponents {
            b1,
            b2,
            tau_ij,
            tau_i,
            v_i,
        },
        variance,
    ))
}

/// Shared entry point used by every estimator's plug-in variance.
fn aggregate_variance(
    sample: &ClusteredSample,
    tau_hat: f64,
    tau_ij: &[f64],
    survey: bool,
) -> Result<f64> {
    if use_survey_path(sample, survey) {
        aggregate_survey(sample, tau_ij).map(|(_, _, v)| v)
    } else {
        Ok(aggregate_iid(sample, tau_hat, tau_ij).2)
    }
}

/// Survey aggregation applies when requested and the design is informative.
/// A census (all inclusion probabilities 1) carries no sampling variability,
/// so it routes to the between/within decomposition for self-consistency with
/// the non-survey path.
fn use_survey_path(sample: &ClusteredSample, survey: bool) -> bool {
    if !survey {
        return false;
    }
    let census = sample.clusters().iter().all(|c| {
        c.info.first_stage_prob == Some(1.0)
            && c.units.iter().all(|u| u.second_stage_prob == Some(1.0))
    });
    !census
}

/// Between-cluster plus within-cluster variance decomposition.
fn aggregate_iid(
    sample: &ClusteredSample,
    tau_hat: f64,
    tau_ij: &[f64],
) -> (Vec<f64>, Vec<f64>, f64) {
    let m = sample.m();
    let n = sample.n() as f64;
    let mut tau_i = Vec::with_capacity(m);
    let mut v_i = Vec::with_capacity(m);
    let mut offset = 0usize;
    for cluster in sample.clusters() {
        let n_i = cluster.n();
        let slice = &tau_ij[offset..offset + n_i];
        let mean = slice.iter().sum::<f64>() / n_i as f64;
        let within = if n_i > 1 {
            slice.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n_i - 1) as f64
        } else {
            0.0
        };
        tau_i.push(mean);
        v_i.push(within);
        offset += n_i;
    }
    let between = if m > 1 {
        tau_i.iter().map(|t| (t - tau_hat).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    let within = v_i.iter().sum::<f64>() / m as f64;
    (tau_i, v_i, (between + within) / n)
}

/// Horvitz-Thompson variance for two-stage designs, requiring first- and
/// second-order inclusion probabilities at both stages.
fn aggregate_survey(
    sample: &ClusteredSample,
    tau_ij: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if sample.capability() != DesignCapability::FullDesign {
        return Err(Error::MissingDesignInfo(
            "survey plug-in variance requires first- and second-stage inclusion probabilities"
                .into(),
        ));
    }
    let joint_first = sample.joint_cluster_probs.as_ref().ok_or_else(|| {
        Error::MissingDesignInfo("joint first-stage inclusion probabilities not supplied".into())
    })?;
    let m = sample.m();
    if joint_first.nrows() != m || joint_first.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: joint_first.nrows(),
        });
    }

    let mut tau_i = Vec::with_capacity(m);
    let mut v_i = Vec::with_capacity(m);
    let mut offset = 0usize;
    for cluster in sample.clusters() {
        let n_i = cluster.n();
        let slice = &tau_ij[offset..offset + n_i];
        let joint = cluster.info.joint_second_stage_probs.as_ref().ok_or_else(|| {
            Error::MissingDesignInfo(format!(
                "joint second-stage probabilities missing for cluster {:?}",
                cluster.info.key
            ))
        })?;
        let probs: Vec<f64> = cluster
            .units
            .iter()
            .map(|u| u.second_stage_prob.unwrap())
            .collect();
        let total: f64 = slice
            .iter()
            .zip(&probs)
            .map(|(t, pi)| t / pi)
            .sum();
        let mut within = 0.0;
        for k in 0..n_i {
            for l in 0..n_i {
                let pkl = joint[(k, l)];
                if pkl <= 0.0 {
                    return Err(Error::InvalidProbability {
                        what: format!(
                            "joint second-stage probability (cluster {:?})",
                            cluster.info.key
                        ),
                        value: pkl,
                    });
                }
                within += (pkl - probs[k] * probs[l]) / pkl * (slice[k] / probs[k])
                    * (slice[l] / probs[l]);
            }
        }
        tau_i.push(total);
        v_i.push(within);
        offset += n_i;
    }

    let n_total = sample.population_total();
    let pi: Vec<f64> = sample
        .clusters()
        .iter()
        .map(|c| c.info.first_stage_prob.unwrap())
        .collect();
    let mut first_stage = 0.0;
    for i in 0..m {
        for j in 0..m {
            let pij = joint_first[(i, j)];
            if pij <= 0.0 {
                return Err(Error::InvalidProbability {
                    what: "joint first-stage inclusion probability".into(),
                    value: pij,
                });
            }
            first_stage +=
                (pij - pi[i] * pi[j]) / pij * (tau_i[i] / pi[i]) * (tau_i[j] / pi[j]);
        }
    }
    let second_stage: f64 = v_i.iter().zip(&pi).map(|(v, p)| v / p).sum();
    let variance = ((first_stage + second_stage) / (n_total * n_total)).max(0.0);
    Ok((tau_i, v_i, variance))
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapOutcome {
    pub variance: f64,
    /// Successful replicates entering the variance.
    pub replicates: usize,
    /// Replicates abandoned after the retry cap.
    pub failures: usize,
}

/// Resamples m clusters with replacement and re-runs the full estimation
/// pipeline per replicate. Deterministic given the seed, at any thread count:
/// replicate r (retry t) draws from the substream keyed by (seed, r, t).
pub fn cluster_bootstrap_variance(
    sample: &ClusteredSample,
    estimator: &dyn AteEstimator,
    reps: usize,
    seed: u64,
    options: &EstimationOptions,
) -> Result<BootstrapOutcome> {
    if reps < 2 {
        return Err(Error::Config(format!(
            "bootstrap needs at least 2 replicates, got {reps}"
        )));
    }
    let point_options = EstimationOptions {
        variance: VarianceMethod::None,
        ..options.clone()
    };
    let m = sample.m();
    let estimates: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            for retry in 0..=10u64 {
                let mut rng = substream(seed, &[BOOTSTRAP_STREAM, r as u64, retry]);
                let clusters: Vec<_> = (0..m)
                    .map(|_| sample.clusters()[rng.gen_range(0..m)].clone())
                    .collect();
                let resampled = match from_clusters(
                    clusters,
                    sample.total_population,
                    None,
                    sample.p(),
                ) {
                    Ok(s) => s,
                    Err(_) => continue,
                };
                if let Ok(scores) = estimator.scores(&resampled, &point_options) {
                    return Some(scores.tau_hat);
                }
            }
            None
        })
        .collect();

    let values: Vec<f64> = estimates.iter().filter_map(|v| *v).collect();
    let failures = reps - values.len();
    if values.len() < 2 {
        return Err(Error::ResampleDegenerate { retries: 10 });
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let variance =
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Ok(BootstrapOutcome {
        variance,
        replicates: values.len(),
        failures,
    })
}

/// Wald interval tau_hat +- z * sqrt(variance). Negative variance inputs are
/// treated as zero.
pub fn confidence_interval(tau_hat: f64, variance: f64, level: f64) -> (f64, f64) {
    let z = normal_quantile((1.0 + level) / 2.0);
    let half = z * variance.max(0.0).sqrt();
    (tau_hat - half, tau_hat + half)
}

// ---------------------------------------------------------------------------
// Strategy implementations
// ---------------------------------------------------------------------------

pub struct SimpleEstimator;

impl AteEstimator for SimpleEstimator {
    fn name(&self) -> &'static str {
        "simple"
    }

    fn scores(&self, sample: &ClusteredSample, options: &EstimationOptions) -> Result<ScoreSet> {
        let tau_hat = tau_simple(sample, options.survey);
        // Without propensity adjustment the per-unit score is just the signed
        // outcome; its (design-weighted) mean is tau_hat by construction.
        let tau_ij = sample
            .units()
            .map(|(_, unit)| {
                if unit.treated {
                    unit.outcome
                } else {
                    -unit.outcome
                }
            })
            .collect();
        Ok(ScoreSet {
            tau_hat,
            tau_ij,
            b1: vec![0.0; sample.p()],
            b2: vec![0.0; sample.p()],
            diagnostics: BTreeMap::new(),
        })
    }
}

/// Scores for plain inverse-probability weighting with propensities e:
/// per-unit weight 1/e (treated) or 1/(1-e) (control), no regression
/// adjustment.
fn iptw_scores(sample: &ClusteredSample, e: &[f64]) -> Vec<f64> {
    sample
        .units()
        .zip(e)
        .map(|((_, unit), &ev)| {
            if unit.treated {
                unit.outcome / ev
            } else {
                -unit.outcome / (1.0 - ev)
            }
        })
        .collect()
}

pub struct FixedEffectsEstimator;

impl AteEstimator for FixedEffectsEstimator {
    fn name(&self) -> &'static str {
        "fixed"
    }

    fn scores(&self, sample: &ClusteredSample, options: &EstimationOptions) -> Result<ScoreSet> {
        // The working propensity model is fit unweighted; design weights
        // enter only through the weighting estimator itself.
        let fit = fit_logistic(sample, true, None)?;
        let e = fit.predict(sample)?;
        let tau_hat = tau_iptw(sample, &e, options.survey)?;
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert("logistic_iterations".into(), fit.iterations as f64);
        Ok(ScoreSet {
            tau_hat,
            tau_ij: iptw_scores(sample, &e),
            b1: vec![0.0; sample.p()],
            b2: vec![0.0; sample.p()],
            diagnostics,
        })
    }
}

pub struct RandomEffectsEstimator;

impl AteEstimator for RandomEffectsEstimator {
    fn name(&self) -> &'static str {
        "random"
    }

    fn scores(&self, sample: &ClusteredSample, options: &EstimationOptions) -> Result<ScoreSet> {
        // The working mixed model is fit unweighted; design weights enter
        // only through the weighting estimator itself.
        let fit =
            fit_random_intercept_logistic_weighted(sample, options.quadrature_nodes, None, None)?;
        let e = fit.predict(sample)?;
        let tau_hat = tau_iptw(sample, &e, options.survey)?;
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert("glmm_random_sd".into(), fit.random_sd);
        diagnostics.insert("glmm_boundary".into(), fit.boundary as u8 as f64);
        Ok(ScoreSet {
            tau_hat,
            tau_ij: iptw_scores(sample, &e),
            b1: vec![0.0; sample.p()],
            b2: vec![0.0; sample.p()],
            diagnostics,
        })
    }
}

pub struct CalibrationEstimator;

impl CalibrationEstimator {
    /// The full calibration pipeline: working logistic fit, initial weights,
    /// calibration solve. Exposed so callers can inspect the calibration
    /// result itself.
    pub fn calibrate(
        sample: &ClusteredSample,
        options: &EstimationOptions,
    ) -> Result<(CalibrationResult, usize)> {
        let fit = fit_logistic(sample, false, None)?;
        let e0 = fit.predict(sample)?;
        let (d, extreme) = initial_weights(&e0, sample)?;
        let cal = solve_calibration(sample, &d, &options.solver, options.survey)?;
        Ok((cal, extreme))
    }
}

impl AteEstimator for CalibrationEstimator {
    fn name(&self) -> &'static str {
        "calibration"
    }

    fn scores(&self, sample: &ClusteredSample, options: &EstimationOptions) -> Result<ScoreSet> {
        let (cal, extreme) = Self::calibrate(sample, options)?;
        let tau_hat = tau_calibrated(sample, &cal, options.survey);
        let (tau_ij, b1, b2) = calibrated_scores(sample, &cal, options.survey)?;
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert("extreme_initial_weights".into(), extreme as f64);
        diagnostics.insert("calibration_iterations".into(), cal.iterations as f64);
        diagnostics.insert("calibration_residual".into(), cal.residual_norm);
        diagnostics.insert("weights_below_one".into(), cal.weights_below_one as f64);
        Ok(ScoreSet {
            tau_hat,
            tau_ij,
            b1,
            b2,
            diagnostics,
        })
    }
}
