//! Typed representation of clustered (and optionally survey-weighted) samples,
//! with validation and CSV ingestion.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation: covariate vector, binary treatment, outcome, and optional
/// design information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub covariates: Vec<f64>,
    pub treated: bool,
    pub outcome: f64,
    /// Design weight; 1 in non-survey mode.
    pub design_weight: f64,
    /// Second-stage inclusion probability, when the design is known.
    pub second_stage_prob: Option<f64>,
}

impl Unit {
    /// Within-cluster weight used by per-cluster calibration constraints:
    /// the inverse second-stage probability when known, otherwise the design
    /// weight (which is 1 in non-survey mode).
    pub fn within_cluster_weight(&self) -> f64 {
        match self.second_stage_prob {
            Some(p) => 1.0 / p,
            None => self.design_weight,
        }
    }
}

/// Cluster-level metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterInfo {
    pub key: String,
    pub first_stage_prob: Option<f64>,
    /// Population cluster size N_i. May be supplied or estimated.
    pub population_size: Option<f64>,
    /// True when `population_size` was filled by the inverse-probability
    /// estimate rather than supplied.
    pub population_size_estimated: bool,
    /// Joint second-stage inclusion probabilities for sampled unit pairs,
    /// diagonal equal to the units' own probabilities.
    pub joint_second_stage_probs: Option<DMatrix<f64>>,
}

/// A cluster together with its sampled units.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub info: ClusterInfo,
    pub units: Vec<Unit>,
}

impl Cluster {
    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn n_treated(&self) -> usize {
        self.units.iter().filter(|u| u.treated).count()
    }

    /// Cluster size used as the per-cluster calibration target: the population
    /// size when available, the sample size otherwise.
    pub fn size_target(&self, survey: bool) -> f64 {
        if survey {
            self.info.population_size.unwrap_or(self.n() as f64)
        } else {
            self.n() as f64
        }
    }
}

/// What the available design information supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DesignCapability {
    /// No design information: non-survey analysis only.
    None,
    /// Design weights present, inclusion probabilities absent: survey point
    /// estimation and bootstrap variance, but no plug-in survey variance.
    WeightsOnly,
    /// First- and second-stage inclusion probabilities present.
    FullDesign,
}

/// A validated clustered sample. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredSample {
    clusters: Vec<Cluster>,
    p: usize,
    pub total_population: Option<f64>,
    /// Joint first-stage inclusion probabilities over the sampled clusters,
    /// diagonal equal to the clusters' own probabilities.
    pub joint_cluster_probs: Option<DMatrix<f64>>,
    capability: DesignCapability,
}

/// Raw per-unit input to validation.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub cluster: String,
    pub treatment: f64,
    pub outcome: f64,
    pub covariates: Vec<f64>,
    pub design_weight: Option<f64>,
    pub first_stage_prob: Option<f64>,
    pub second_stage_prob: Option<f64>,
    pub population_size: Option<f64>,
}

/// Builds a validated sample from raw records.
///
/// Clusters are ordered deterministically by key; row order within a cluster
/// is preserved. Every accepted sample has both treatment arms present in
/// every cluster, so downstream modules need not re-check.
pub fn validate_sample(rows: &[UnitRecord]) -> Result<ClusteredSample> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let p = rows[0].covariates.len();

    let mut grouped: BTreeMap<String, Vec<&UnitRecord>> = BTreeMap::new();
    for row in rows {
        grouped.entry(row.cluster.clone()).or_default().push(row);
    }

    let mut clusters = Vec::with_capacity(grouped.len());
    let mut index = 0usize;
    for (key, records) in grouped {
        let mut units = Vec::with_capacity(records.len());
        let mut first_stage: Option<f64> = None;
        let mut population_size: Option<f64> = None;
        for rec in &records {
            if rec.covariates.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: rec.covariates.len(),
                });
            }
            let treated = if rec.treatment == 0.0 {
                false
            } else if rec.treatment == 1.0 {
                true
            } else {
                return Err(Error::InvalidProbability {
                    what: format!("treatment indicator (unit {index})"),
                    value: rec.treatment,
                });
            };
            if let Some(pr) = rec.second_stage_prob {
                if !(pr > 0.0 && pr <= 1.0) {
                    return Err(Error::InvalidProbability {
                        what: format!("second-stage probability (unit {index})"),
                        value: pr,
                    });
                }
            }
            if let Some(pr) = rec.first_stage_prob {
                if !(pr > 0.0 && pr <= 1.0) {
                    return Err(Error::InvalidProbability {
                        what: format!("first-stage probability (cluster {key:?})"),
                        value: pr,
                    });
                }
                match first_stage {
                    None => first_stage = Some(pr),
                    Some(existing) if (existing - pr).abs() > 1e-12 => {
                        return Err(Error::InvalidProbability {
                            what: format!("inconsistent first-stage probability (cluster {key:?})"),
                            value: pr,
                        });
                    }
                    Some(_) => {}
                }
            }
            if let Some(n_pop) = rec.population_size {
                match population_size {
                    None => population_size = Some(n_pop),
                    Some(existing) if (existing - n_pop).abs() > 1e-9 => {
                        return Err(Error::InvalidProbability {
                            what: format!("inconsistent population size (cluster {key:?})"),
                            value: n_pop,
                        });
                    }
                    Some(_) => {}
                }
            }
            let weight = match rec.design_weight {
                Some(w) => w,
                None => match (rec.first_stage_prob, rec.second_stage_prob) {
                    (Some(pi_i), Some(pi_ji)) => 1.0 / (pi_i * pi_ji),
                    _ => 1.0,
                },
            };
            if !(weight > 0.0) || !weight.is_finite() {
                return Err(Error::NonPositiveWeight {
                    index,
                    value: weight,
                });
            }
            units.push(Unit {
                covariates: rec.covariates.clone(),
                treated,
                outcome: rec.outcome,
                design_weight: weight,
                second_stage_prob: rec.second_stage_prob,
            });
            index += 1;
        }
        let mut info = ClusterInfo {
            key,
            first_stage_prob: first_stage,
            population_size,
            population_size_estimated: false,
            joint_second_stage_probs: None,
        };
        // Fill a missing N_i by the inverse-probability estimate when the
        // second-stage design is known, flagged as estimated.
        if info.population_size.is_none() && units.iter().all(|u| u.second_stage_prob.is_some()) {
            info.population_size = Some(
                units
                    .iter()
                    .map(|u| 1.0 / u.second_stage_prob.unwrap())
                    .sum(),
            );
            info.population_size_estimated = true;
        }
        clusters.push(Cluster { info, units });
    }

    from_clusters(clusters, None, None, p)
}

/// Assembles a validated sample from pre-built clusters, as the simulation
/// harness does. Enforces the same invariants as `validate_sample`.
pub fn from_clusters(
    clusters: Vec<Cluster>,
    total_population: Option<f64>,
    joint_cluster_probs: Option<DMatrix<f64>>,
    p: usize,
) -> Result<ClusteredSample> {
    if clusters.is_empty() || clusters.iter().all(|c| c.units.is_empty()) {
        return Err(Error::EmptyInput);
    }
    for cluster in &clusters {
        for unit in &cluster.units {
            if unit.covariates.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: unit.covariates.len(),
                });
            }
        }
        let treated = cluster.n_treated();
        if treated == 0 || treated == cluster.n() {
            return Err(Error::OneArmCluster(cluster.info.key.clone()));
        }
        if let (Some(n_pop), n_i) = (cluster.info.population_size, cluster.n()) {
            if !cluster.info.population_size_estimated && n_pop + 1e-9 < n_i as f64 {
                return Err(Error::InvalidProbability {
                    what: format!(
                        "population size below sample size (cluster {:?})",
                        cluster.info.key
                    ),
                    value: n_pop,
                });
            }
        }
        if let Some(joint) = &cluster.info.joint_second_stage_probs {
            if joint.nrows() != cluster.n() || joint.ncols() != cluster.n() {
                return Err(Error::DimensionMismatch {
                    expected: cluster.n(),
                    got: joint.nrows(),
                });
            }
            for (j, unit) in cluster.units.iter().enumerate() {
                let diag = joint[(j, j)];
                let own = unit.second_stage_prob.unwrap_or(1.0);
                if (diag - own).abs() > 1e-9 {
                    return Err(Error::InvalidProbability {
                        what: format!(
                            "joint probability diagonal mismatch (cluster {:?})",
                            cluster.info.key
                        ),
                        value: diag,
                    });
                }
            }
        }
    }

    let full_design = clusters.iter().all(|c| {
        c.info.first_stage_prob.is_some() && c.units.iter().all(|u| u.second_stage_prob.is_some())
    });
    let any_weights = clusters
        .iter()
        .any(|c| c.units.iter().any(|u| u.design_weight != 1.0));
    let capability = if full_design {
        DesignCapability::FullDesign
    } else if any_weights {
        DesignCapability::WeightsOnly
    } else {
        DesignCapability::None
    };

    Ok(ClusteredSample {
        clusters,
        p,
        total_population,
        joint_cluster_probs,
        capability,
    })
}

impl ClusteredSample {
    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    pub fn n(&self) -> usize {
        self.clusters.iter().map(|c| c.n()).sum()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn capability(&self) -> DesignCapability {
        self.capability
    }

    /// Flat iteration over all units in cluster order, with cluster index.
    pub fn units(&self) -> impl Iterator<Item = (usize, &Unit)> + '_ {
        self.clusters
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.units.iter().map(move |u| (i, u)))
    }

    /// Sum of design weights, the fallback population-size estimate.
    pub fn design_weight_total(&self) -> f64 {
        self.units().map(|(_, u)| u.design_weight).sum()
    }

    /// Population size for survey normalization: supplied total, else the
    /// design-weight total.
    pub fn population_total(&self) -> f64 {
        self.total_population
            .unwrap_or_else(|| self.design_weight_total())
    }

    /// Writes the sample in the canonical CSV column layout.
    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["cluster".to_string(), "a".to_string(), "y".to_string()];
        for k in 1..=self.p {
            header.push(format!("x{k}"));
        }
        header.push("w".to_string());
        let full = self.capability == DesignCapability::FullDesign;
        if full {
            header.push("pi_i".to_string());
            header.push("pi_ji".to_string());
        }
        wtr.write_record(&header)
            .map_err(|e| Error::Config(e.to_string()))?;
        for cluster in &self.clusters {
            for unit in &cluster.units {
                let mut row = vec![
                    cluster.info.key.clone(),
                    format!("{}", unit.treated as u8),
                    format!("{}", unit.outcome),
                ];
                for x in &unit.covariates {
                    row.push(format!("{x}"));
                }
                row.push(format!("{}", unit.design_weight));
                if full {
                    row.push(format!("{}", cluster.info.first_stage_prob.unwrap()));
                    row.push(format!("{}", unit.second_stage_prob.unwrap()));
                }
                wtr.write_record(&row)
                    .map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Column names for CSV ingestion. Optional columns are used when present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub cluster: String,
    pub treatment: String,
    pub outcome: String,
    /// Explicit covariate columns; when empty, all columns named `x<k>` are
    /// used in numeric order.
    pub covariates: Vec<String>,
    pub design_weight: String,
    pub first_stage_prob: String,
    pub second_stage_prob: String,
    pub population_size: String,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig {
            cluster: "cluster".into(),
            treatment: "a".into(),
            outcome: "y".into(),
            covariates: Vec::new(),
            design_weight: "w".into(),
            first_stage_prob: "pi_i".into(),
            second_stage_prob: "pi_ji".into(),
            population_size: "n_pop".into(),
        }
    }
}

/// Parses CSV input and delegates to `validate_sample`.
///
/// Row numbers in errors are file line numbers (header is line 1).
pub fn load_csv<R: Read>(reader: R, schema: &SchemaConfig) -> Result<ClusteredSample> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::ParseError {
            row: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let col = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| col(name).ok_or_else(|| Error::MissingColumn(name.to_string()));

    let cluster_col = require(&schema.cluster)?;
    let treatment_col = require(&schema.treatment)?;
    let outcome_col = require(&schema.outcome)?;
    let covariate_cols: Vec<usize> = if schema.covariates.is_empty() {
        let mut indexed: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| {
                h.strip_prefix('x')
                    .and_then(|rest| rest.parse::<usize>().ok())
                    .map(|k| (k, i))
            })
            .collect();
        indexed.sort();
        indexed.into_iter().map(|(_, i)| i).collect()
    } else {
        schema
            .covariates
            .iter()
            .map(|name| require(name))
            .collect::<Result<Vec<_>>>()?
    };
    if covariate_cols.is_empty() {
        return Err(Error::MissingColumn("x1".into()));
    }
    let weight_col = col(&schema.design_weight);
    let pi_i_col = col(&schema.first_stage_prob);
    let pi_ji_col = col(&schema.second_stage_prob);
    let n_pop_col = col(&schema.population_size);

    let mut rows = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::ParseError {
            row: line,
            message: e.to_string(),
        })?;
        let field = |i: usize| -> Result<f64> {
            record
                .get(i)
                .ok_or_else(|| Error::ParseError {
                    row: line,
                    message: format!("missing field {i}"),
                })?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::ParseError {
                    row: line,
                    message: format!("{} ({e})", headers[i]),
                })
        };
        let optional = |i: Option<usize>| -> Result<Option<f64>> {
            match i {
                Some(i) if record.get(i).map(|s| !s.trim().is_empty()).unwrap_or(false) => {
                    field(i).map(Some)
                }
                _ => Ok(None),
            }
        };

        let treatment = field(treatment_col)?;
        if treatment != 0.0 && treatment != 1.0 {
            return Err(Error::ParseError {
                row: line,
                message: format!("treatment must be 0 or 1, got {treatment}"),
            });
        }
        let covariates = covariate_cols
            .iter()
            .map(|&i| field(i))
            .collect::<Result<Vec<_>>>()?;
        rows.push(UnitRecord {
            cluster: record
                .get(cluster_col)
                .unwrap_or_default()
                .trim()
                .to_string(),
            treatment,
            outcome: field(outcome_col)?,
            covariates,
            design_weight: optional(weight_col)?,
            first_stage_prob: optional(pi_i_col)?,
            second_stage_prob: optional(pi_ji_col)?,
            population_size: optional(n_pop_col)?,
        });
    }

    validate_sample(&rows)
}

/// Per-unit weights, either the initial inverse-propensity weights or the
/// calibrated weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub values: Vec<f64>,
    pub kind: WeightKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Initial,
    Calibrated,
}

impl WeightSet {
    pub fn new(values: Vec<f64>, kind: WeightKind) -> Result<Self> {
        for (index, &value) in values.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositiveWeight { index, value });
            }
        }
        Ok(WeightSet { values, kind })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn minimal_two_cluster_sample() {
        let rows = vec![
            record("c1", 1.0, 1.0, &[0.1]),
            record("c1", 0.0, 0.0, &[0.2]),
            record("c2", 1.0, 2.0, &[0.3]),
            record("c2", 0.0, 1.0, &[0.4]),
        ];
        let sample = validate_sample(&rows).unwrap();
        assert_eq!(sample.m(), 2);
        assert_eq!(sample.n(), 4);
        assert_eq!(sample.p(), 1);
        assert_eq!(sample.capability(), DesignCapability::None);
    }

    #[test]
    fn one_arm_cluster_named() {
        let rows = vec![
            record("c1", 1.0, 1.0, &[0.1]),
            record("c1", 0.0, 0.0, &[0.2]),
            record("c3", 1.0, 2.0, &[0.3]),
            record("c3", 1.0, 1.0, &[0.4]),
        ];
        match validate_sample(&rows) {
            Err(Error::OneArmCluster(key)) => assert_eq!(key, "c3"),
            other => panic!("expected OneArmCluster, got {other:?}"),
        }
    }

    #[test]
    fn application_shaped_sample_defaults_to_unit_weights() {
        let mut rows = Vec::new();
        for c in 0..5 {
            for j in 0..99 {
                rows.push(record(
                    &format!("cluster{c}"),
                    (j % 2) as f64,
                    j as f64 * 0.01,
                    &[j as f64 * 0.1, c as f64],
                ));
            }
        }
        // 495 rows is the same shape class as the 493-district application.
        rows.truncate(493);
        let sample = validate_sample(&rows).unwrap();
        assert_eq!(sample.m(), 5);
        assert_eq!(sample.n(), 493);
        assert_eq!(sample.p(), 2);
        assert!(sample.units().all(|(_, u)| u.design_weight == 1.0));
    }

    #[test]
    fn ragged_covariates_rejected() {
        let rows = vec![
            record("c1", 1.0, 1.0, &[0.1, 0.2]),
            record("c1", 0.0, 0.0, &[0.2]),
        ];
        assert!(matches!(
            validate_sample(&rows),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(validate_sample(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn csv_smoke() {
        let data = "cluster,a,y,x1\nc1,1,2.0,0.5\nc1,0,1.0,-0.5\nc2,1,3.0,1.0\nc2,0,0.0,0.0\n";
        let sample = load_csv(data.as_bytes(), &SchemaConfig::default()).unwrap();
        assert_eq!(sample.p(), 1);
        assert_eq!(sample.n(), 4);
    }

    #[test]
    fn csv_bad_treatment_reports_row() {
        let data = "cluster,a,y,x1\nc1,1,2.0,0.5\nc1,0,1.0,-0.5\nc2,1,3.0,1.0\nc2,0,0.0,0.0\nc2,0,0.0,0.0\nc2,0,0.0,0.0\nc2,2,0.0,0.0\n";
        match load_csv(data.as_bytes(), &SchemaConfig::default()) {
            Err(Error::ParseError { row, .. }) => assert_eq!(row, 8),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn csv_missing_column() {
        let data = "cluster,a,x1\nc1,1,0.5\n";
        assert!(matches!(
            load_csv(data.as_bytes(), &SchemaConfig::default()),
            Err(Error::MissingColumn(col)) if col == "y"
        ));
    }

    #[test]
    fn survey_csv_round_trip() {
        let data = "cluster,a,y,x1,x2,w,pi_i,pi_ji\n\
                    c1,1,2.0,0.5,1.0,8,0.5,0.25\n\
                    c1,0,1.0,-0.5,0.0,4,0.5,0.5\n\
                    c2,1,3.0,1.0,1.0,10,0.2,0.5\n\
                    c2,0,0.0,0.0,2.0,20,0.2,0.25\n";
        let sample = load_csv(data.as_bytes(), &SchemaConfig::default()).unwrap();
        assert_eq!(sample.capability(), DesignCapability::FullDesign);
        assert_eq!(sample.p(), 2);
        let weights: Vec<f64> = sample.units().map(|(_, u)| u.design_weight).collect();
        assert_eq!(weights, vec![8.0, 4.0, 10.0, 20.0]);
        // Missing N_i is estimated from the second-stage probabilities.
        let c1 = &sample.clusters()[0];
        assert!(c1.info.population_size_estimated);
        assert!((c1.info.population_size.unwrap() - 6.0).abs() < 1e-12);

        let mut buf = Vec::new();
        sample.to_csv(&mut buf).unwrap();
        let reloaded = load_csv(buf.as_slice(), &SchemaConfig::default()).unwrap();
        assert_eq!(sample, reloaded);
    }

    #[test]
    fn row_permutation_gives_same_sample() {
        let rows = vec![
            record("c2", 1.0, 2.0, &[0.3]),
            record("c1", 1.0, 1.0, &[0.1]),
            record("c2", 0.0, 1.0, &[0.4]),
            record("c1", 0.0, 0.0, &[0.2]),
        ];
        let mut permuted = rows.clone();
        permuted.swap(0, 1);
        permuted.swap(2, 3);
        let a = validate_sample(&rows).unwrap();
        let b = validate_sample(&permuted).unwrap();
        assert_eq!(a.m(), b.m());
        for (ca, cb) in a.clusters().iter().zip(b.clusters()) {
            assert_eq!(ca.info.key, cb.info.key);
            assert_eq!(ca.n(), cb.n());
        }
    }
}
