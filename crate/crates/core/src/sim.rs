//! Monte Carlo evaluation harness: finite-population generation under
//! mixed-effects truth models, two-stage PPS + Poisson sampling, and
//! bias/variance/coverage aggregation across replicates.
//!
//! Every random draw comes from a substream keyed by (seed, replicate, stage),
//! so results are identical at any thread count.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{from_clusters, Cluster, ClusterInfo, ClusteredSample, Unit};
use crate::error::{Error, Result};
use crate::estimators::{estimate, registry, EstimationOptions, VarianceMethod};
use crate::link::{inverse_link, LinkKind};
use crate::rng::substream;

// Substream tags.
const STREAM_POPULATION: u64 = 1;
const STREAM_FIRST_STAGE: u64 = 2;
const STREAM_SECOND_STAGE: u64 = 3;
const STREAM_REPLICATE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Linear,
    Logistic,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioConfig {
    pub outcome_kind: OutcomeKind,
    pub ps_link: LinkKind,
    pub gamma0: f64,
    pub gamma1: f64,
    pub tau_true: f64,
    /// Population cluster count M.
    pub population_clusters: usize,
    /// Sampled cluster count.
    pub m: usize,
    /// Expected units sampled per cluster.
    pub n_e: usize,
    pub reps: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.population_clusters {
            return Err(Error::Config(format!(
                "sampled cluster count {} must lie in 1..={}",
                self.m, self.population_clusters
            )));
        }
        if self.n_e == 0 {
            return Err(Error::Config("n_e must be positive".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be positive".into()));
        }
        Ok(())
    }
}

/// The six preset scenarios: linear or logistic-outcome truth crossed with
/// the logit/probit/cloglog treatment-assignment links.
pub fn scenario_preset(id: &str) -> Result<ScenarioConfig> {
    let key = id.trim().trim_start_matches("scenario");
    let (outcome_kind, ps_link, gamma0, gamma1) = match key {
        "1" => (OutcomeKind::Linear, LinkKind::Logit, -0.5, 1.0),
        "2" => (OutcomeKind::Linear, LinkKind::Probit, -0.25, 0.5),
        "3" => (OutcomeKind::Linear, LinkKind::Cloglog, -0.5, 0.1),
        "4" => (OutcomeKind::Logistic, LinkKind::Logit, -0.5, 1.0),
        "5" => (OutcomeKind::Logistic, LinkKind::Probit, -0.25, 0.5),
        "6" => (OutcomeKind::Logistic, LinkKind::Cloglog, -0.5, 0.1),
        _ => return Err(Error::UnknownScenario(id.to_string())),
    };
    Ok(ScenarioConfig {
        outcome_kind,
        ps_link,
        gamma0,
        gamma1,
        tau_true: 2.0,
        population_clusters: 10_000,
        m: 50,
        n_e: 50,
        reps: 200,
        seed: 0,
    })
}

#[derive(Debug, Clone)]
pub struct PopulationCluster {
    pub u: f64,
    pub size: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub treated: Vec<bool>,
    pub propensity: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FinitePopulation {
    pub clusters: Vec<PopulationCluster>,
    /// Realized finite-population average treatment effect.
    pub tau: f64,
    pub total_units: usize,
}

/// Cluster size rule: integer part of 500 * expit(2 + u).
pub fn cluster_size(u: f64) -> usize {
    (500.0 * inverse_link(LinkKind::Logit, 2.0 + u)).floor() as usize
}

/// Potential outcomes of the linear truth model.
pub fn linear_outcomes(x: f64, u: f64, e: f64, tau: f64) -> (f64, f64) {
    (x + u + e, x + tau + tau * u + e)
}

pub fn generate_population(cfg: &ScenarioConfig, seed: u64) -> FinitePopulation {
    let m_pop = cfg.population_clusters;
    let mut clusters = Vec::with_capacity(m_pop);
    let mut tau_sum = 0.0;
    let mut total_units = 0usize;
    for i in 0..m_pop {
        let mut rng = substream(seed, &[STREAM_POPULATION, i as u64]);
        let u: f64 = StandardNormal.sample(&mut rng);
        let size = cluster_size(u);
        let mut cluster = PopulationCluster {
            u,
            size,
            x: Vec::with_capacity(size),
            z: Vec::with_capacity(size),
            treated: Vec::with_capacity(size),
            propensity: Vec::with_capacity(size),
            y0: Vec::with_capacity(size),
            y1: Vec::with_capacity(size),
            y: Vec::with_capacity(size),
        };
        for _ in 0..size {
            let x: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let propensity = inverse_link(cfg.ps_link, cfg.gamma0 + cfg.gamma1 * u + x);
            let treated = rng.gen::<f64>() < propensity;
            let (y0, y1) = match cfg.outcome_kind {
                OutcomeKind::Linear => linear_outcomes(x, u, e, cfg.tau_true),
                OutcomeKind::Logistic => {
                    let p0 = inverse_link(LinkKind::Logit, x + u);
                    let p1 = inverse_link(LinkKind::Logit, x + cfg.tau_true + cfg.tau_true * u);
                    (
                        (rng.gen::<f64>() < p0) as u8 as f64,
                        (rng.gen::<f64>() < p1) as u8 as f64,
                    )
                }
            };
            let y = if treated { y1 } else { y0 };
            // Size variable behind informative second-stage sampling.
            let z = match cfg.outcome_kind {
                OutcomeKind::Linear => {
                    if e < 0.0 {
                        0.5
                    } else {
                        1.0
                    }
                }
                OutcomeKind::Logistic => {
                    if y == 0.0 {
                        0.5
                    } else {
                        1.0
                    }
                }
            };
            tau_sum += y1 - y0;
            cluster.x.push(x);
            cluster.z.push(z);
            cluster.treated.push(treated);
            cluster.propensity.push(propensity);
            cluster.y0.push(y0);
            cluster.y1.push(y1);
            cluster.y.push(y);
        }
        total_units += size;
        clusters.push(cluster);
    }
    FinitePopulation {
        clusters,
        tau: tau_sum / total_units as f64,
        total_units,
    }
}

/// First-stage inclusion probabilities for every population cluster under
/// PPS with certainty peeling: peeled clusters get 1, the rest
/// draws * size / remaining-total. Mirrors the selection logic in
/// `pps_systematic`.
fn pps_probabilities(sizes: &[f64], m: usize) -> Vec<f64> {
    let mut certain = vec![false; sizes.len()];
    let mut remaining: Vec<usize> = (0..sizes.len()).collect();
    let mut draws = m;
    loop {
        let rem_total: f64 = remaining.iter().map(|&i| sizes[i]).sum();
        let overflow: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| draws as f64 * sizes[i] >= rem_total)
            .collect();
        if overflow.is_empty() || draws == 0 {
            break;
        }
        for i in overflow {
            certain[i] = true;
            remaining.retain(|&j| j != i);
            draws = draws.saturating_sub(1);
        }
    }
    let rem_total: f64 = remaining.iter().map(|&i| sizes[i]).sum();
    sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if certain[i] {
                1.0
            } else {
                (draws as f64 * s / rem_total).min(1.0)
            }
        })
        .collect()
}

/// First stage: probability-proportional-to-size systematic sampling on a
/// randomly permuted cluster list, with certainty clusters (pi >= 1) taken
/// directly. Returns selected indices with their inclusion probabilities.
fn pps_systematic(
    sizes: &[f64],
    m: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, f64)> {
    let total: f64 = sizes.iter().sum();
    let mut certain: Vec<usize> = Vec::new();
    let mut remaining: Vec<usize> = (0..sizes.len()).collect();
    let mut draws = m;
    // Peel off certainty clusters until all remaining probabilities are < 1.
    loop {
        let rem_total: f64 = remaining.iter().map(|&i| sizes[i]).sum();
        let overflow: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| draws as f64 * sizes[i] >= rem_total)
            .collect();
        if overflow.is_empty() || draws == 0 {
            break;
        }
        for i in overflow {
            certain.push(i);
            remaining.retain(|&j| j != i);
            draws = draws.saturating_sub(1);
        }
    }
    let mut selected: Vec<(usize, f64)> = certain.into_iter().map(|i| (i, 1.0)).collect();
    if draws > 0 && !remaining.is_empty() {
        // Random permutation, then a single systematic pass.
        for k in (1..remaining.len()).rev() {
            let j = rng.gen_range(0..=k);
            remaining.swap(k, j);
        }
        let rem_total: f64 = remaining.iter().map(|&i| sizes[i]).sum();
        let step = rem_total / draws as f64;
        let start: f64 = rng.gen::<f64>() * step;
        let mut cursor = 0.0;
        let mut next = start;
        for &i in &remaining {
            let upper = cursor + sizes[i];
            while next < upper {
                selected.push((i, (draws as f64 * sizes[i] / rem_total).min(1.0)));
                next += step;
            }
            cursor = upper;
        }
    }
    selected.sort_by_key(|&(i, _)| i);
    selected.dedup_by_key(|&mut (i, _)| i);
    let _ = total;
    selected
}

/// Draws a two-stage sample: PPS clusters, then Poisson sampling of units
/// with probability proportional to the size variable z. Attaches first- and
/// second-order inclusion probabilities at both stages. The second return
/// value counts second-stage probabilities clamped at 1.
pub fn draw_two_stage_sample(
    pop: &FinitePopulation,
    m: usize,
    n_e: usize,
    seed: u64,
) -> Result<(ClusteredSample, usize)> {
    if m == 0 || m > pop.clusters.len() {
        return Err(Error::Config(format!(
            "cannot sample {m} of {} clusters",
            pop.clusters.len()
        )));
    }
    let sizes: Vec<f64> = pop.clusters.iter().map(|c| c.size as f64).collect();
    let mut rng1 = substream(seed, &[STREAM_FIRST_STAGE]);
    let selected = pps_systematic(&sizes, m, &mut rng1);

    let mut clusters = Vec::with_capacity(selected.len());
    let mut clamped = 0usize;
    for &(idx, pi_i) in &selected {
        let source = &pop.clusters[idx];
        let z_total: f64 = source.z.iter().sum();
        let probs: Vec<f64> = source
            .z
            .iter()
            .map(|z| {
                let p = n_e as f64 * z / z_total;
                if p > 1.0 {
                    clamped += 1;
                    1.0
                } else {
                    p
                }
            })
            .collect();
        // Poisson sampling; redraw (bounded) until both arms are present.
        let mut chosen: Vec<usize> = Vec::new();
        for attempt in 0..100u64 {
            let mut rng2 =
                substream(seed, &[STREAM_SECOND_STAGE, idx as u64, attempt]);
            chosen = (0..source.size)
                .filter(|&j| rng2.gen::<f64>() < probs[j])
                .collect();
            let treated = chosen.iter().filter(|&&j| source.treated[j]).count();
            if treated > 0 && treated < chosen.len() {
                break;
            }
            chosen.clear();
        }
        if chosen.is_empty() {
            return Err(Error::ResampleDegenerate { retries: 100 });
        }

        let n_i = chosen.len();
        let mut joint = DMatrix::<f64>::zeros(n_i, n_i);
        for (a, &j) in chosen.iter().enumerate() {
            for (b, &l) in chosen.iter().enumerate() {
                joint[(a, b)] = if a == b {
                    probs[j]
                } else {
                    probs[j] * probs[l]
                };
            }
        }
        let units = chosen
            .iter()
            .map(|&j| Unit {
                covariates: vec![source.x[j]],
                treated: source.treated[j],
                outcome: source.y[j],
                design_weight: 1.0 / (pi_i * probs[j]),
                second_stage_prob: Some(probs[j]),
            })
            .collect();
        clusters.push(Cluster {
            info: ClusterInfo {
                key: format!("pop{idx}"),
                first_stage_prob: Some(pi_i),
                population_size: Some(source.size as f64),
                population_size_estimated: false,
                joint_second_stage_probs: Some(joint),
            },
            units,
        });
    }

    // Hartley-Rao approximation to the joint first-stage probabilities of
    // randomized systematic PPS. The higher-order terms need the sums of
    // squared and cubed inclusion probabilities over the whole population;
    // the first-order truncation is far too coarse here because the
    // variance estimator applies these joints to uncentered cluster totals.
    let all_pi = pps_probabilities(&sizes, m);
    let sum_sq: f64 = all_pi.iter().map(|p| p * p).sum();
    let sum_cube: f64 = all_pi.iter().map(|p| p * p * p).sum();
    let mf = m as f64;
    let k = clusters.len();
    let mut joint_first = DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let pa = clusters[a].info.first_stage_prob.unwrap();
            let pb = clusters[b].info.first_stage_prob.unwrap();
            joint_first[(a, b)] = if a == b {
                pa
            } else {
                let c = (mf - 1.0) / mf;
                let pij = c * pa * pb
                    + c / mf * (pa * pa * pb + pa * pb * pb)
                    - c / (mf * mf) * pa * pb * sum_sq
                    + 2.0 * c / (mf * mf)
                        * (pa.powi(3) * pb + pa * pb.powi(3) + pa * pa * pb * pb)
                    - 3.0 * c / mf.powi(3) * (pa * pa * pb + pa * pb * pb) * sum_sq
                    + 3.0 * c / mf.powi(4) * pa * pb * sum_sq * sum_sq
                    - 2.0 * c / mf.powi(3) * pa * pb * sum_cube;
                pij.min(pa.min(pb))
            };
        }
    }

    let sample = from_clusters(
        clusters,
        Some(pop.total_units as f64),
        Some(joint_first),
        1,
    )?;
    Ok((sample, clamped))
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub bias: f64,
    /// Monte Carlo variance of the point estimates.
    pub variance: f64,
    pub mean_plugin_variance: f64,
    pub coverage_percent: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    pub scenario: ScenarioConfig,
    pub methods: Vec<MethodSummary>,
    pub replicates: usize,
    /// Second-stage inclusion probabilities clamped at 1, total across reps.
    pub clamped_inclusion: usize,
}

struct ReplicateResult {
    tau_true: f64,
    clamped: usize,
    // Per method: (estimate, ci_low, ci_high, plugin_variance).
    estimates: Vec<Option<(f64, f64, f64, f64)>>,
}

fn run_replicate(cfg: &ScenarioConfig, r: usize) -> ReplicateResult {
    let mut rep_rng = substream(cfg.seed, &[STREAM_REPLICATE, r as u64]);
    let pop_seed: u64 = rep_rng.gen();
    let draw_seed: u64 = rep_rng.gen();
    let estimators = registry();
    let population = generate_population(cfg, pop_seed);
    let (sample, clamped) = match draw_two_stage_sample(&population, cfg.m, cfg.n_e, draw_seed) {
        Ok(v) => v,
        Err(_) => {
            return ReplicateResult {
                tau_true: population.tau,
                clamped: 0,
                estimates: vec![None; estimators.len()],
            }
        }
    };
    let options = EstimationOptions {
        survey: true,
        variance: VarianceMethod::Plugin,
        seed: draw_seed,
        ..EstimationOptions::default()
    };
    let estimates = estimators
        .iter()
        .map(|est| {
            estimate(est.as_ref(), &sample, &options).ok().map(|rep| {
                (
                    rep.tau_hat,
                    rep.ci_low.unwrap_or(f64::NAN),
                    rep.ci_high.unwrap_or(f64::NAN),
                    rep.variance.unwrap_or(f64::NAN),
                )
            })
        })
        .collect();
    ReplicateResult {
        tau_true: population.tau,
        clamped,
        estimates,
    }
}

pub fn run_monte_carlo(cfg: &ScenarioConfig) -> Result<SimSummary> {
    cfg.validate()?;
    let results: Vec<ReplicateResult> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r))
        .collect();

    let names: Vec<String> = registry().iter().map(|e| e.name().to_string()).collect();
    let mut methods = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let mut taus = Vec::new();
        let mut plugin_vars = Vec::new();
        let mut covered = 0usize;
        let mut errors = Vec::new();
        for result in &results {
            match result.estimates[k] {
                Some((tau, lo, hi, v)) => {
                    taus.push(tau);
                    plugin_vars.push(v);
                    errors.push(tau - result.tau_true);
                    if lo <= result.tau_true && result.tau_true <= hi {
                        covered += 1;
                    }
                }
                None => {}
            }
        }
        let count = taus.len();
        let bias = errors.iter().sum::<f64>() / count.max(1) as f64;
        let mean_tau = taus.iter().sum::<f64>() / count.max(1) as f64;
        let variance = if count > 1 {
            taus.iter().map(|t| (t - mean_tau).powi(2)).sum::<f64>() / (count - 1) as f64
        } else {
            0.0
        };
        let mean_plugin_variance = plugin_vars.iter().sum::<f64>() / count.max(1) as f64;
        methods.push(MethodSummary {
            method: name.clone(),
            bias,
            variance,
            mean_plugin_variance,
            coverage_percent: 100.0 * covered as f64 / count.max(1) as f64,
            replicates: count,
            failures: cfg.reps - count,
        });
    }

    Ok(SimSummary {
        scenario: cfg.clone(),
        methods,
        replicates: cfg.reps,
        clamped_inclusion: results.iter().map(|r| r.clamped).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_config() -> ScenarioConfig {
        ScenarioConfig {
            population_clusters: 300,
            m: 20,
            n_e: 20,
            reps: 1,
            seed: 7,
            ..scenario_preset("1").unwrap()
        }
    }

    #[test]
    fn cluster_size_rule() {
        assert_eq!(cluster_size(0.0), 440);
    }

    #[test]
    fn linear_outcome_arithmetic() {
        let (y0, y1) = linear_outcomes(1.0, 0.5, 0.0, 2.0);
        assert_abs_diff_eq!(y0, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(y1, 4.0, epsilon = 1e-15);
    }

    #[test]
    fn population_sizes_within_bounds() {
        let cfg = ScenarioConfig {
            population_clusters: 2000,
            ..small_config()
        };
        let pop = generate_population(&cfg, 3);
        let mut typical = 0usize;
        for cluster in &pop.clusters {
            assert!(cluster.size >= 50, "size {}", cluster.size);
            assert!(cluster.size <= 500, "size {}", cluster.size);
            if cluster.size >= 100 {
                typical += 1;
            }
        }
        // The nominal range 100..=500 holds for all but extreme normal tails.
        assert!(typical as f64 >= 0.95 * pop.clusters.len() as f64);
        // Linear truth: the realized population ATE sits near tau = 2.
        assert!((pop.tau - 2.0).abs() < 0.2, "pop tau {}", pop.tau);
    }

    #[test]
    fn preset_table_matches_design() {
        let s2 = scenario_preset("2").unwrap();
        assert_eq!(s2.ps_link, LinkKind::Probit);
        assert_abs_diff_eq!(s2.gamma0, -0.25);
        assert_abs_diff_eq!(s2.gamma1, 0.5);
        let s6 = scenario_preset("scenario6").unwrap();
        assert_eq!(s6.outcome_kind, OutcomeKind::Logistic);
        assert_eq!(s6.ps_link, LinkKind::Cloglog);
        assert!(matches!(
            scenario_preset("99"),
            Err(Error::UnknownScenario(_))
        ));
    }

    #[test]
    fn uniform_z_gives_uniform_second_stage() {
        let cfg = small_config();
        let mut pop = generate_population(&cfg, 11);
        for cluster in &mut pop.clusters {
            for z in &mut cluster.z {
                *z = 1.0;
            }
        }
        let (sample, clamped) = draw_two_stage_sample(&pop, 10, 15, 5).unwrap();
        assert_eq!(clamped, 0);
        for cluster in sample.clusters() {
            let n_pop = cluster.info.population_size.unwrap();
            for unit in &cluster.units {
                assert_abs_diff_eq!(
                    unit.second_stage_prob.unwrap(),
                    15.0 / n_pop,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn poisson_sample_size_is_calibrated() {
        // Expected realized size per cluster equals n_e; check the empirical
        // mean over many draws within 3 standard errors.
        let cfg = small_config();
        let pop = generate_population(&cfg, 19);
        let n_e = 20usize;
        let draws = 500;
        let mut total = 0usize;
        let mut count = 0usize;
        for s in 0..draws {
            let (sample, _) = draw_two_stage_sample(&pop, 10, n_e, 1000 + s).unwrap();
            for cluster in sample.clusters() {
                total += cluster.n();
                count += 1;
            }
        }
        let mean = total as f64 / count as f64;
        // Var of a Poisson-sampled size is sum pi(1-pi) <= n_e; SE of the mean
        // over ~5000 cluster draws is below 0.07.
        assert!(
            (mean - n_e as f64).abs() < 3.0 * (n_e as f64 / count as f64).sqrt(),
            "mean realized size {mean}"
        );
    }

    #[test]
    fn informative_sampling_rate_ratio() {
        // Units with z = 1 are sampled at twice the rate of z = 0.5.
        let cfg = small_config();
        let pop = generate_population(&cfg, 23);
        let mut high = 0usize;
        let mut low = 0usize;
        let mut high_pop = 0usize;
        let mut low_pop = 0usize;
        for cluster in &pop.clusters {
            for &z in &cluster.z {
                if z > 0.75 {
                    high_pop += 1;
                } else {
                    low_pop += 1;
                }
            }
        }
        for s in 0..500 {
            let (sample, _) = draw_two_stage_sample(&pop, 10, 20, 5000 + s).unwrap();
            for cluster in sample.clusters() {
                for unit in &cluster.units {
                    // Recover z from the attached probability ordering: within
                    // a cluster high-z units have the larger inclusion prob.
                    if unit.second_stage_prob.unwrap()
                        > 1.5 * 20.0 / (2.0 * cluster.info.population_size.unwrap())
                    {
                        high += 1;
                    } else {
                        low += 1;
                    }
                }
            }
        }
        let ratio = (high as f64 / high_pop as f64) / (low as f64 / low_pop as f64);
        assert!(
            (1.8..=2.2).contains(&ratio),
            "sampling rate ratio {ratio} (high {high}/{high_pop}, low {low}/{low_pop})"
        );
    }

    #[test]
    fn design_weighted_mean_is_unbiased() {
        // Horvitz-Thompson sanity: the design-weighted estimate of the
        // population mean of X is unbiased over repeated two-stage draws.
        let cfg = small_config();
        let pop = generate_population(&cfg, 29);
        let pop_mean = {
            let mut sum = 0.0;
            for cluster in &pop.clusters {
                sum += cluster.x.iter().sum::<f64>();
            }
            sum / pop.total_units as f64
        };
        let draws = 300;
        let mut estimates = Vec::with_capacity(draws);
        for s in 0..draws {
            let (sample, _) = draw_two_stage_sample(&pop, 15, 20, 9000 + s as u64).unwrap();
            let ht: f64 = sample
                .units()
                .map(|(_, u)| u.design_weight * u.covariates[0])
                .sum::<f64>()
                / pop.total_units as f64;
            estimates.push(ht);
        }
        let mean = estimates.iter().sum::<f64>() / draws as f64;
        let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
            / (draws - 1) as f64)
            .sqrt();
        let se = sd / (draws as f64).sqrt();
        assert!(
            (mean - pop_mean).abs() < 3.0 * se + 1e-3,
            "HT mean {mean} vs population {pop_mean} (se {se})"
        );
    }

    #[test]
    fn monte_carlo_deterministic() {
        let cfg = ScenarioConfig {
            reps: 2,
            ..small_config()
        };
        let a = run_monte_carlo(&cfg).unwrap();
        let b = run_monte_carlo(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
