//! Command-line front end.
//!
//! Exit status is 0 on success, 1 for configuration or usage errors and 2
//! for failures while running.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::calibration::{decide, Decision};
use crate::metrics::{classification_metrics, confusion, trapezoid_auc, AttackMapping};
use crate::model::{argmax, ModelParams};
use crate::simulator::{
    prepare_data, preset, straggler_metrics, Method, RoundReport, Scenario, SimError, Simulation,
    StragglerRow, TrainingRun,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Scenario(s) => CliError::Config(s.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cfhfc", version, about = "Clustered, calibrated federated intrusion-detection simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct ScenarioArgs {
    /// Built-in scenario: scenario1, scenario2 or scenario3.
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub straggler_fraction: Option<f64>,
    #[arg(long)]
    pub straggler_slowdown: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one method and write per-round results.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Train several methods on identical data and compare them.
    Compare {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Comma-separated; the first entry is compared against the rest.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
    },
    /// Derive ROC points, a confusion matrix and a summary from a run directory.
    Report { dir: PathBuf },
    /// Print the fully resolved default configuration.
    Defaults,
}

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

fn default_fractions() -> Vec<f64> {
    DEFAULT_FRACTIONS.to_vec()
}

/// On-disk configuration. `scenario` holds overrides applied on top of
/// the preset; unknown keys anywhere are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub scenario: Value,
    #[serde(default)]
    pub methods: Option<Vec<Method>>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_fractions")]
    pub straggler_fractions: Vec<f64>,
}

/// Configuration after presets, files and flags are combined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub preset: String,
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub out: PathBuf,
    pub straggler_fractions: Vec<f64>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let kind_changes = matches!((b.get("kind"), p.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changes {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError::Config(format!("{}: field `{field}`: {}", path.display(), e.inner()))
    })
}

pub fn resolve(args: &ScenarioArgs, method: Option<Method>, methods: Option<Vec<Method>>) -> Result<ResolvedConfig> {
    let file = args.config.as_deref().map(read_config).transpose()?;
    let preset_name = args
        .preset
        .clone()
        .or_else(|| file.as_ref().and_then(|f| f.preset.clone()))
        .unwrap_or_else(|| "scenario1".to_string());
    let base = preset(&preset_name).map_err(|e| CliError::Config(e.to_string()))?;
    let mut value = serde_json::to_value(&base).expect("scenario serializes");
    if let Some(f) = &file {
        if !f.scenario.is_null() {
            if !f.scenario.is_object() {
                return Err(CliError::Config("field `scenario`: expected an object".into()));
            }
            merge(&mut value, f.scenario.clone());
        }
    }
    let mut scenario: Scenario = serde_path_to_error::deserialize(value).map_err(|e| {
        CliError::Config(format!("field `scenario.{}`: {}", e.path(), e.inner()))
    })?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(r) = args.rounds {
        scenario.rounds = r;
    }
    if let Some(f) = args.straggler_fraction {
        scenario.straggler_fraction = f;
    }
    if let Some(s) = args.straggler_slowdown {
        scenario.straggler_slowdown = s;
    }
    if let Some(m) = method {
        scenario.method = m;
    }
    scenario.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let methods = methods
        .or_else(|| file.as_ref().and_then(|f| f.methods.clone()))
        .unwrap_or_else(|| vec![Method::Cfhfc, Method::Fedavg, Method::Fedprox]);
    let out = args
        .out
        .clone()
        .or_else(|| file.as_ref().and_then(|f| f.out.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    let straggler_fractions = file.map(|f| f.straggler_fractions).unwrap_or_else(default_fractions);
    if straggler_fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
        return Err(CliError::Config("field `straggler_fractions`: values must lie in [0, 1)".into()));
    }
    Ok(ResolvedConfig {
        preset: preset_name,
        scenario,
        methods,
        out,
        straggler_fractions,
    })
}

/// `printf("%.9g")` formatting.
pub fn g9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| io_err(path, e))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub const ROUND_HEADER: [&str; 13] = [
    "round",
    "method",
    "global_loss",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "fpr",
    "fnr",
    "suspicious",
    "tau_global",
    "sync_latency_s",
    "mean_cluster_latency_s",
];

fn round_row(r: &RoundReport) -> Vec<String> {
    let m = &r.metrics;
    let mean_cluster = if r.clusters.is_empty() {
        r.sync_latency_s
    } else {
        r.clusters.iter().map(|c| c.latency_s).sum::<f64>() / r.clusters.len() as f64
    };
    vec![
        r.round.to_string(),
        r.method.to_string(),
        g9(r.global_loss),
        g9(m.accuracy),
        g9(m.precision),
        g9(m.recall),
        g9(m.f1),
        g9(m.fpr),
        g9(m.fnr),
        r.suspicious.to_string(),
        g9(r.tau_global),
        g9(r.sync_latency_s),
        g9(mean_cluster),
    ]
}

const CLUSTER_HEADER: [&str; 10] = [
    "round",
    "cluster_id",
    "members",
    "weight",
    "confidence",
    "threshold",
    "fnr",
    "fpr",
    "resource_index",
    "latency_s",
];

fn cluster_rows(reports: &[RoundReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .flat_map(|r| {
            r.clusters.iter().map(move |c| {
                vec![
                    r.round.to_string(),
                    c.cluster_id.to_string(),
                    c.members.to_string(),
                    g9(c.weight),
                    g9(c.confidence),
                    g9(c.threshold),
                    g9(c.fnr),
                    g9(c.fpr),
                    g9(c.resource_index),
                    g9(c.latency_s),
                ]
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SavedModel {
    pub method: Method,
    pub num_classes: usize,
    pub num_features: usize,
    pub params: Vec<f64>,
    pub tau_global: f64,
}

fn latency_stats(run: &TrainingRun) -> Value {
    let lat: Vec<f64> = run.reports.iter().map(|r| r.sync_latency_s).collect();
    let total: f64 = lat.iter().sum();
    json!({
        "total_s": total,
        "mean_round_s": if lat.is_empty() { 0.0 } else { total / lat.len() as f64 },
        "max_round_s": lat.iter().cloned().fold(0.0, f64::max),
    })
}

fn summary(cfg: &ResolvedConfig, sim: &Simulation, run: &TrainingRun) -> Value {
    let last = run.reports.last();
    json!({
        "seed": cfg.scenario.seed,
        "preset": cfg.preset,
        "method": cfg.scenario.method,
        "rounds_run": run.reports.len(),
        "converged_round": run.converged_round,
        "final_metrics": last.map(|r| &r.metrics),
        "final_loss": last.map(|r| r.global_loss),
        "tau_global": run.final_state.tau_global,
        "latency": latency_stats(run),
        "data": {
            "clients": sim.data.clients.len(),
            "test_samples": sim.data.test.len(),
            "resampled": sim.data.resampled,
            "dropped": sim.data.dropped,
        },
        "wall_clock_s": run.reports.iter().map(|r| r.wall_clock_s).sum::<f64>(),
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn cmd_run(cfg: &ResolvedConfig) -> Result<TrainingRun> {
    let sim = Simulation::new(cfg.scenario.clone())?;
    let run = sim.run()?;
    let dir = &cfg.out;
    ensure_dir(dir)?;
    write_rows(&dir.join("rounds.csv"), &ROUND_HEADER, run.reports.iter().map(round_row))?;
    write_rows(&dir.join("clusters.csv"), &CLUSTER_HEADER, cluster_rows(&run.reports))?;
    write_json(&dir.join("summary.json"), &summary(cfg, &sim, &run))?;
    write_json(&dir.join("config.resolved.json"), cfg)?;
    let model = run.final_model();
    write_json(
        &dir.join("model.json"),
        &SavedModel {
            method: cfg.scenario.method,
            num_classes: model.num_classes(),
            num_features: model.num_features(),
            params: model.as_slice().to_vec(),
            tau_global: run.final_state.tau_global,
        },
    )?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub final_accuracy: f64,
    pub final_fnr: f64,
    pub final_fpr: f64,
    pub rounds_run: usize,
    pub total_latency_s: f64,
    pub mean_round_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmePoint {
    pub straggler_fraction: f64,
    pub candidate_sme: f64,
    pub baseline_sme: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub baseline: Method,
    /// Candidate final accuracy minus baseline final accuracy.
    pub accuracy_gap: f64,
    /// How much lower the candidate's mean round latency is, in percent
    /// of the baseline's.
    pub latency_reduction_pct: f64,
    pub sme: Vec<SmePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub candidate: Method,
    pub results: Vec<MethodResult>,
    pub deltas: Vec<Delta>,
    pub stragglers: Vec<StragglerRow>,
}

pub fn cmd_compare(cfg: &ResolvedConfig) -> Result<Comparison> {
    if cfg.methods.len() < 2 {
        return Err(CliError::Config(format!(
            "field `methods`: at least 2 methods are required, got {}",
            cfg.methods.len()
        )));
    }
    let data = prepare_data(&cfg.scenario)?;
    let mut results = Vec::new();
    let mut rows = Vec::new();
    for &m in &cfg.methods {
        let scenario = Scenario {
            method: m,
            ..cfg.scenario.clone()
        };
        let sim = Simulation::with_data(scenario, data.clone())?;
        let run = sim.run()?;
        let last = run.reports.last();
        let total = run.total_latency_s();
        results.push(MethodResult {
            method: m,
            final_accuracy: last.map_or(0.0, |r| r.metrics.accuracy),
            final_fnr: last.map_or(0.0, |r| r.metrics.fnr),
            final_fpr: last.map_or(0.0, |r| r.metrics.fpr),
            rounds_run: run.reports.len(),
            total_latency_s: total,
            mean_round_latency_s: if run.reports.is_empty() { 0.0 } else { total / run.reports.len() as f64 },
        });
        rows.extend(run.reports.iter().map(round_row));
    }

    let mut unique: Vec<Method> = Vec::new();
    for &m in &cfg.methods {
        if !unique.contains(&m) {
            unique.push(m);
        }
    }
    let stragglers = straggler_metrics(&cfg.scenario, &[cfg.scenario.num_clients], &cfg.straggler_fractions, &unique)?;
    let sme_of = |m: Method, f: f64| {
        stragglers
            .iter()
            .find(|r| r.method == m && r.straggler_fraction == f)
            .map_or(1.0, |r| r.sme)
    };

    let cand = &results[0];
    let deltas = results[1..]
        .iter()
        .map(|b| Delta {
            baseline: b.method,
            accuracy_gap: cand.final_accuracy - b.final_accuracy,
            latency_reduction_pct: if b.mean_round_latency_s > 0.0 {
                100.0 * (b.mean_round_latency_s - cand.mean_round_latency_s) / b.mean_round_latency_s
            } else {
                0.0
            },
            sme: cfg
                .straggler_fractions
                .iter()
                .map(|&f| SmePoint {
                    straggler_fraction: f,
                    candidate_sme: sme_of(cand.method, f),
                    baseline_sme: sme_of(b.method, f),
                })
                .collect(),
        })
        .collect();

    let dir = &cfg.out;
    ensure_dir(dir)?;
    write_rows(&dir.join("compare.csv"), &ROUND_HEADER, rows)?;
    write_rows(
        &dir.join("stragglers.csv"),
        &["method", "num_clients", "straggler_fraction", "total_time_s", "relative_training_time", "sme"],
        stragglers.iter().map(|r| {
            vec![
                r.method.to_string(),
                r.num_clients.to_string(),
                g9(r.straggler_fraction),
                g9(r.total_time_s),
                g9(r.relative_training_time),
                g9(r.sme),
            ]
        }),
    )?;
    let cmp = Comparison {
        seed: cfg.scenario.seed,
        candidate: cand.method,
        results,
        deltas,
        stragglers,
    };
    write_json(&dir.join("compare.json"), &cmp)?;
    write_json(&dir.join("config.resolved.json"), cfg)?;
    Ok(cmp)
}

/// Number of evenly spaced thresholds in the ROC sweep, both ends included.
pub const ROC_POINTS: usize = 101;

/// Smallest nonconformity score over the attack classes. A sample is
/// flagged as attack at threshold `tau` exactly when this is `<= tau`,
/// i.e. when its prediction set contains an attack class.
fn attack_score(p: &[f64], mapping: &AttackMapping) -> f64 {
    p.iter()
        .enumerate()
        .filter(|(c, _)| mapping.is_attack(*c))
        .map(|(_, &pc)| 1.0 - pc)
        .fold(f64::INFINITY, f64::min)
}

/// (tau, fpr, tpr) points, sorted by tau. The thresholds are an even grid
/// on [0, 1] together with every observed attack score, so the curve is
/// exact however narrow the score range is.
pub fn roc_sweep(probs: &[Vec<f64>], truths: &[usize], mapping: &AttackMapping) -> Vec<(f64, f64, f64)> {
    let mut scored: Vec<(f64, bool)> = probs
        .iter()
        .zip(truths)
        .map(|(p, &y)| (attack_score(p, mapping), mapping.is_attack(y)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = scored.iter().filter(|s| s.1).count();
    let negatives = scored.len() - positives;

    let mut taus: Vec<f64> = (0..ROC_POINTS).map(|i| i as f64 / (ROC_POINTS - 1) as f64).collect();
    // Thresholds are snapped to their printed precision so each written row
    // reproduces exactly and no two rows share a tau.
    taus.extend(
        scored
            .iter()
            .map(|s| s.0)
            .filter(|t| (0.0..=1.0).contains(t))
            .map(|t| g9(t).parse::<f64>().unwrap_or(t)),
    );
    taus.sort_by(f64::total_cmp);
    taus.dedup();

    let rate = |k: usize, d: usize| if d == 0 { 0.0 } else { k as f64 / d as f64 };
    let (mut idx, mut tp, mut fp) = (0usize, 0usize, 0usize);
    taus.into_iter()
        .map(|tau| {
            while idx < scored.len() && scored[idx].0 <= tau {
                if scored[idx].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                idx += 1;
            }
            (tau, rate(fp, negatives), rate(tp, positives))
        })
        .collect()
}

pub fn cmd_report(dir: &Path) -> Result<String> {
    let rounds_path = dir.join("rounds.csv");
    let mut reader = csv::Reader::from_path(&rounds_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", rounds_path.display())))?;
    let records: Vec<csv::StringRecord> = reader
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Config(format!("{}: {e}", rounds_path.display())))?;
    let last = records
        .last()
        .ok_or_else(|| CliError::Config(format!("{} has no rounds", rounds_path.display())))?
        .clone();
    let cfg_path = dir.join("config.resolved.json");
    let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| CliError::Config(format!("{}: {e}", cfg_path.display())))?;
    let cfg: ResolvedConfig = serde_json::from_str(&cfg_text)
        .map_err(|e| CliError::Config(format!("{}: {e}", cfg_path.display())))?;
    let model_path = dir.join("model.json");
    let model_text =
        fs::read_to_string(&model_path).map_err(|e| CliError::Config(format!("{}: {e}", model_path.display())))?;
    let saved: SavedModel = serde_json::from_str(&model_text)
        .map_err(|e| CliError::Config(format!("{}: {e}", model_path.display())))?;
    let model = ModelParams::from_flat(saved.num_classes, saved.num_features, saved.params)
        .map_err(|e| CliError::Config(format!("{}: {e}", model_path.display())))?;

    let sim = Simulation::new(cfg.scenario.clone())?;
    let probs = model
        .predict_proba(sim.data.test.features())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let truths = sim.data.test.labels();
    let mapping = sim.attack_mapping();

    let roc = roc_sweep(&probs, truths, &mapping);
    write_rows(
        &dir.join("roc_sweep.csv"),
        &["tau", "fpr", "tpr"],
        roc.iter().map(|(t, f, p)| vec![g9(*t), g9(*f), g9(*p)]),
    )?;
    let auc = trapezoid_auc(&roc.iter().map(|(_, f, p)| (*f, *p)).collect::<Vec<_>>());

    let decisions: Vec<Decision> = probs
        .iter()
        .map(|p| match saved.method {
            Method::Cfhfc => decide(p, saved.tau_global),
            _ => Decision::label(argmax(p)),
        })
        .collect();
    let counts = confusion(&decisions, truths, &mapping).map_err(|e| CliError::Runtime(e.to_string()))?;
    let k = sim.data.num_classes;
    let mut header: Vec<String> = vec!["true_class".into()];
    header.extend((0..k).map(|c| format!("pred_{c}")));
    header.push("suspicious".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(
        &dir.join("confusion.csv"),
        &header_refs,
        counts.per_class.iter().enumerate().map(|(c, row)| {
            std::iter::once(c.to_string())
                .chain(row.iter().map(|v| v.to_string()))
                .collect()
        }),
    )?;
    let m = classification_metrics(&counts).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut text = String::new();
    text.push_str(&format!("method            {}\n", saved.method));
    text.push_str(&format!("seed              {}\n", cfg.scenario.seed));
    text.push_str(&format!("rounds            {}\n", records.len()));
    text.push_str(&format!("final loss        {}\n", last.get(2).unwrap_or("")));
    text.push_str(&format!("tau_global        {}\n", g9(saved.tau_global)));
    for (name, v) in [
        ("accuracy", m.accuracy),
        ("precision", m.precision),
        ("recall", m.recall),
        ("f1", m.f1),
        ("fpr", m.fpr),
        ("fnr", m.fnr),
        ("roc_auc", auc),
    ] {
        text.push_str(&format!("{name:<18}{}\n", g9(v)));
    }
    text.push_str(&format!("tp tn fp fn       {} {} {} {}\n", counts.tp, counts.tn, counts.fp, counts.fn_));
    text.push_str(&format!("suspicious        {}\n", counts.suspicious()));
    fs::write(dir.join("summary.txt"), &text).map_err(|e| io_err(&dir.join("summary.txt"), e))?;
    Ok(text)
}

fn defaults_json() -> String {
    let scenario = Scenario::default();
    let cfg = ResolvedConfig {
        preset: scenario.name.clone(),
        scenario,
        methods: Method::ALL.to_vec(),
        out: PathBuf::from("out"),
        straggler_fractions: default_fractions(),
    };
    serde_json::to_string_pretty(&cfg).expect("defaults serialize")
}

pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Run { scenario, method } => {
            let cfg = resolve(&scenario, method, None)?;
            let run = cmd_run(&cfg)?;
            let acc = run.reports.last().map_or(0.0, |r| r.metrics.accuracy);
            Ok(format!(
                "{} rounds of {} written to {} (final accuracy {})\n",
                run.reports.len(),
                cfg.scenario.method,
                cfg.out.display(),
                g9(acc)
            ))
        }
        Command::Compare { scenario, methods } => {
            let cfg = resolve(&scenario, None, methods)?;
            let cmp = cmd_compare(&cfg)?;
            let mut s = String::new();
            for d in &cmp.deltas {
                s.push_str(&format!(
                    "{} vs {}: accuracy gap {}, latency reduction {}%\n",
                    cmp.candidate,
                    d.baseline,
                    g9(d.accuracy_gap),
                    g9(d.latency_reduction_pct)
                ));
            }
            Ok(s)
        }
        Command::Report { dir } => cmd_report(&dir),
        Command::Defaults => Ok(defaults_json() + "\n"),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(out) => {
            let _ = std::io::stdout().write_all(out.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333333"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (100.0, "100"),
            (0.985, "0.985"),
            (9.9999999999, "10"),
        ];
        for (x, want) in cases {
            assert_eq!(g9(x), want, "formatting {x}");
        }
    }

    #[test]
    fn merge_overrides_nested_fields() {
        let mut base = json!({"a": {"b": 1, "c": 2}, "d": 3});
        merge(&mut base, json!({"a": {"c": 5}}));
        assert_eq!(base, json!({"a": {"b": 1, "c": 5}, "d": 3}));
    }

    #[test]
    fn merge_replaces_tagged_variant() {
        let mut base = json!({"source": {"kind": "synthetic", "num_classes": 4}});
        merge(&mut base, json!({"source": {"kind": "csv", "path": "x.csv", "label_column": "y"}}));
        assert_eq!(base["source"], json!({"kind": "csv", "path": "x.csv", "label_column": "y"}));
    }

    #[test]
    fn roc_endpoints() {
        let probs = vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.6, 0.4]];
        let truths = [0, 1, 1];
        let roc = roc_sweep(&probs, &truths, &AttackMapping::normal_is_zero(2));
        assert_eq!(roc[0], (0.0, 0.0, 0.0));
        assert_eq!(*roc.last().unwrap(), (1.0, 1.0, 1.0));
        assert!(roc.windows(2).all(|w| w[0].1 <= w[1].1 && w[0].2 <= w[1].2));
    }

    #[test]
    fn defaults_round_trip_through_config() {
        let text = defaults_json();
        let cfg: ResolvedConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg.scenario, Scenario::default());
        let as_run: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(as_run.preset.as_deref(), Some("scenario1"));
    }
}
