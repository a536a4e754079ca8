//! Command-line front end: `estimate`, `balance`, and `simulate` subcommands
//! over the library pipeline.
//!
//! Every flag can also be supplied through an optional `--config` file in
//! flat `key=value` format; explicit command-line flags win on conflict.
//! Errors are printed as a single JSON object on standard error, with exit
//! status 2 (configuration), 3 (data), or 4 (numerical).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use clustercal::balance::{standardized_differences, BalanceReport};
use clustercal::calibration::{initial_weights, CalibrationResult};
use clustercal::data::{load_csv, ClusteredSample, SchemaConfig};
use clustercal::estimators::{
    estimate, lookup, registry, CalibrationEstimator, EstimateReport, EstimationOptions,
    VarianceMethod,
};
use clustercal::logistic::fit_logistic;
use clustercal::sim::{run_monte_carlo, scenario_preset, ScenarioConfig, SimSummary};
use clustercal::{Error, Result};

#[derive(Parser)]
#[command(
    name = "clustercal",
    version,
    about = "Calibrated propensity score weighting for clustered and survey data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the average treatment effect from a CSV sample.
    Estimate(EstimateArgs),
    /// Covariate balance diagnostics under unweighted, initial, and
    /// calibrated weights.
    Balance(BalanceArgs),
    /// Monte Carlo evaluation of the estimators on a built-in scenario.
    Simulate(SimulateArgs),
}

#[derive(Args, Default)]
struct CommonArgs {
    /// Flat key=value configuration file mirroring the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Output format: json (full precision) or table (6 significant digits).
    #[arg(long)]
    format: Option<String>,
    /// RNG seed (bootstrap resampling, simulation streams).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the simulation and bootstrap layers.
    #[arg(long)]
    threads: Option<usize>,
    /// Confidence level for intervals.
    #[arg(long)]
    level: Option<f64>,
}

#[derive(Args, Default)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input CSV file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Estimator: simple | fixed | random | calibration | all.
    #[arg(long)]
    method: Option<String>,
    /// Variance method: plugin | bootstrap | none.
    #[arg(long)]
    variance: Option<String>,
    /// Bootstrap replicate count.
    #[arg(long)]
    bootstrap_reps: Option<usize>,
    /// Design-weighted (survey) estimation path.
    #[arg(long)]
    survey: bool,
    /// Write the fitted calibration (multipliers, weights, implied
    /// propensities) to this path as JSON.
    #[arg(long)]
    dump_fit: Option<PathBuf>,
}

#[derive(Args, Default)]
struct BalanceArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input CSV file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Weight sets to report: unweighted | initial | calibration | all.
    #[arg(long)]
    method: Option<String>,
    /// Design-weighted (survey) calibration path.
    #[arg(long)]
    survey: bool,
}

#[derive(Args, Default)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Scenario id: 1..6 (or scenario1..scenario6).
    #[arg(long)]
    scenario: Option<String>,
    /// Monte Carlo replicates.
    #[arg(long)]
    reps: Option<usize>,
    /// Sampled cluster count.
    #[arg(long)]
    m: Option<usize>,
    /// Expected units sampled per cluster.
    #[arg(long)]
    ne: Option<usize>,
    /// Population cluster count.
    #[arg(long)]
    population_clusters: Option<usize>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{err}");
                std::process::exit(0);
            }
            emit_error(&Error::Config(err.to_string()));
        }
    };
    if let Err(err) = run(cli) {
        emit_error(&err);
    }
}

fn emit_error(err: &Error) -> ! {
    let obj = json!({ "code": err.code(), "message": err.to_string() });
    eprintln!("{obj}");
    std::process::exit(err.exit_code());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Balance(args) => cmd_balance(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

// ---------------------------------------------------------------------------
// Configuration file merging
// ---------------------------------------------------------------------------

/// Parses a flat `key=value` file (one pair per line, `#` comments allowed).
fn read_config(path: &PathBuf) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "config line {} is not key=value: {line:?}",
                lineno + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!(
            "config key {key}: expected boolean, got {other:?}"
        ))),
    }
}

/// Fills unset `Option` fields from the config map; flags given on the
/// command line stay untouched.
macro_rules! merge {
    ($map:expr, $field:expr, $key:literal) => {
        if $field.is_none() {
            if let Some(v) = $map.get($key) {
                $field = Some(parse_value($key, v)?);
            }
        }
    };
}

fn merge_common(common: &mut CommonArgs) -> Result<HashMap<String, String>> {
    let map = match &common.config {
        Some(path) => read_config(path)?,
        None => HashMap::new(),
    };
    merge!(map, common.output, "output");
    merge!(map, common.format, "format");
    merge!(map, common.seed, "seed");
    merge!(map, common.threads, "threads");
    merge!(map, common.level, "level");
    Ok(map)
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

enum Format {
    Json,
    Table,
}

fn resolve_format(format: &Option<String>) -> Result<Format> {
    match format.as_deref() {
        None | Some("json") => Ok(Format::Json),
        Some("table") => Ok(Format::Table),
        Some(other) => Err(Error::Config(format!("unknown format {other:?}"))),
    }
}

fn resolve_level(level: Option<f64>) -> Result<f64> {
    let level = level.unwrap_or(0.95);
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    Ok(level)
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let threads = threads.unwrap_or(1);
    if threads == 0 {
        return Err(Error::Config("threads must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

fn load_input(input: &Option<PathBuf>) -> Result<ClusteredSample> {
    let path = input
        .as_ref()
        .ok_or_else(|| Error::Config("--input is required".into()))?;
    let file = fs::File::open(path)?;
    load_csv(file, &SchemaConfig::default())
}

fn write_output(output: &Option<PathBuf>, text: &str) -> Result<()> {
    match output {
        Some(path) => fs::write(path, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

/// Formats a number with 6 significant digits for table output.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn sig6_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), sig6)
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

fn cmd_estimate(mut args: EstimateArgs) -> Result<()> {
    let map = merge_common(&mut args.common)?;
    merge!(map, args.input, "input");
    merge!(map, args.method, "method");
    merge!(map, args.variance, "variance");
    merge!(map, args.bootstrap_reps, "bootstrap-reps");
    merge!(map, args.dump_fit, "dump-fit");
    if !args.survey {
        if let Some(v) = map.get("survey") {
            args.survey = parse_bool("survey", v)?;
        }
    }

    init_threads(args.common.threads)?;
    let format = resolve_format(&args.common.format)?;
    let sample = load_input(&args.input)?;

    let variance = match args.variance.as_deref() {
        Some(name) => name.parse::<VarianceMethod>()?,
        None => VarianceMethod::Plugin,
    };
    let options = EstimationOptions {
        survey: args.survey,
        variance,
        bootstrap_reps: args.bootstrap_reps.unwrap_or(500),
        seed: args.common.seed.unwrap_or(0),
        level: resolve_level(args.common.level)?,
        ..EstimationOptions::default()
    };

    let method = args.method.as_deref().unwrap_or("calibration");
    let estimators = if method == "all" {
        registry()
    } else {
        vec![lookup(method)?]
    };
    let mut reports = Vec::new();
    for est in &estimators {
        reports.push(estimate(est.as_ref(), &sample, &options)?);
    }

    if let Some(path) = &args.dump_fit {
        let (cal, extreme) = CalibrationEstimator::calibrate(&sample, &options)?;
        let dump = dump_fit_document(&cal, extreme);
        fs::write(path, serde_json::to_string_pretty(&dump).unwrap() + "\n")?;
    }

    let text = match format {
        Format::Json => {
            serde_json::to_string_pretty(&json!({ "reports": reports })).unwrap() + "\n"
        }
        Format::Table => estimate_table(&reports),
    };
    write_output(&args.common.output, &text)
}

fn dump_fit_document(cal: &CalibrationResult, extreme_initial: usize) -> serde_json::Value {
    json!({
        "calibration": cal,
        "alpha": cal.alpha.values,
        "implied_propensity": cal.implied_propensity,
        "extreme_initial_weights": extreme_initial,
    })
}

fn estimate_table(reports: &[EstimateReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>12} {:>12} {:>12} {:>12} {:>10}\n",
        "method", "tau_hat", "variance", "ci_low", "ci_high", "var_method"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<12} {:>12} {:>12} {:>12} {:>12} {:>10}\n",
            r.method,
            sig6(r.tau_hat),
            sig6_opt(r.variance),
            sig6_opt(r.ci_low),
            sig6_opt(r.ci_high),
            r.variance_method,
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// balance
// ---------------------------------------------------------------------------

fn cmd_balance(mut args: BalanceArgs) -> Result<()> {
    let map = merge_common(&mut args.common)?;
    merge!(map, args.input, "input");
    merge!(map, args.method, "method");
    if !args.survey {
        if let Some(v) = map.get("survey") {
            args.survey = parse_bool("survey", v)?;
        }
    }

    init_threads(args.common.threads)?;
    let format = resolve_format(&args.common.format)?;
    let sample = load_input(&args.input)?;

    let method = args.method.as_deref().unwrap_or("all");
    let all = method == "all";
    let mut reports = Vec::new();
    if all || method == "unweighted" {
        reports.push(standardized_differences(&sample, None, "unweighted")?);
    }
    if all || method == "initial" || method == "calibration" {
        let fit = fit_logistic(&sample, false, None)?;
        let e0 = fit.predict(&sample)?;
        let (d, _) = initial_weights(&e0, &sample)?;
        if all || method == "initial" {
            reports.push(standardized_differences(&sample, Some(&d), "initial")?);
        }
        if all || method == "calibration" {
            let options = EstimationOptions {
                survey: args.survey,
                ..EstimationOptions::default()
            };
            let (cal, _) = CalibrationEstimator::calibrate(&sample, &options)?;
            reports.push(standardized_differences(
                &sample,
                Some(&cal.alpha),
                "calibration",
            )?);
        }
    }
    if reports.is_empty() {
        return Err(Error::Config(format!("unknown balance method {method:?}")));
    }

    let text = match format {
        Format::Json => {
            serde_json::to_string_pretty(&json!({ "reports": reports })).unwrap() + "\n"
        }
        Format::Table => reports.iter().map(balance_table).collect(),
    };
    write_output(&args.common.output, &text)
}

/// One grid per weight set: rows are clusters plus the whole population,
/// columns are covariates.
fn balance_table(report: &BalanceReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("weights: {}\n", report.weight_label));
    out.push_str(&format!("{:<16}", "cluster"));
    for cov in &report.covariates {
        out.push_str(&format!(" {:>12}", cov.name));
    }
    out.push('\n');
    for (i, key) in report.cluster_keys.iter().enumerate() {
        out.push_str(&format!("{key:<16}"));
        for cov in &report.covariates {
            out.push_str(&format!(" {:>12}", sig6(cov.per_cluster[i])));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<16}", "whole pop"));
    for cov in &report.covariates {
        out.push_str(&format!(" {:>12}", sig6(cov.whole_population)));
    }
    out.push_str("\n\n");
    out
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(mut args: SimulateArgs) -> Result<()> {
    let map = merge_common(&mut args.common)?;
    merge!(map, args.scenario, "scenario");
    merge!(map, args.reps, "reps");
    merge!(map, args.m, "m");
    merge!(map, args.ne, "ne");
    merge!(map, args.population_clusters, "population-clusters");

    init_threads(args.common.threads)?;
    let format = resolve_format(&args.common.format)?;

    let scenario = args.scenario.as_deref().unwrap_or("1");
    let mut cfg = scenario_preset(scenario)?;
    if let Some(reps) = args.reps {
        cfg.reps = reps;
    }
    if let Some(m) = args.m {
        cfg.m = m;
    }
    if let Some(ne) = args.ne {
        cfg.n_e = ne;
    }
    if let Some(pc) = args.population_clusters {
        cfg.population_clusters = pc;
    }
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    let summary = run_monte_carlo(&cfg)?;

    let text = match format {
        Format::Json => serde_json::to_string_pretty(&summary).unwrap() + "\n",
        Format::Table => simulate_table(scenario, &summary),
    };
    write_output(&args.common.output, &text)
}

fn simulate_table(scenario: &str, summary: &SimSummary) -> String {
    let cfg: &ScenarioConfig = &summary.scenario;
    let mut out = String::new();
    out.push_str(&format!(
        "scenario {} (m={}, ne={}), {} replicates\n",
        scenario.trim_start_matches("scenario"),
        cfg.m,
        cfg.n_e,
        summary.replicates
    ));
    out.push_str(&format!(
        "{:<12} {:>10} {:>12} {:>8} {:>10}\n",
        "method", "bias", "var(x1e-3)", "cvg%", "failures"
    ));
    for m in &summary.methods {
        out.push_str(&format!(
            "{:<12} {:>10} {:>12} {:>8} {:>10}\n",
            m.method,
            sig6(m.bias),
            sig6(m.variance * 1e3),
            sig6(m.coverage_percent),
            m.failures,
        ));
    }
    out
}
