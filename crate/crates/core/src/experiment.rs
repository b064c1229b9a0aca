//! Config files, ablation plans, CSV output and summaries.
//!
//! A config file is TOML holding one [`TrainConfig`] at the top level and an
//! optional `[sweep]` table that turns it into an [`ExperimentPlan`]. Every
//! run writes `run-<config hash>.csv`; the plan summary is rebuilt from those
//! files alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::balancer::Statistic;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::trainer::{
    BalanceConfig, MechanismKind, ModelConfig, OptimizerConfig, RunRecord, TrainConfig, Trainer,
};
use crate::Potential;

/// Version tag written as the first line of every run CSV.
pub const CSV_VERSION_LINE: &str = "# phibal-csv v1";
/// Run CSV columns, in order.
pub const CSV_COLUMNS: [&str; 11] = [
    "step", "layer", "task_loss", "accuracy", "max_vio", "gini", "mech", "phi", "eta", "batch", "seed",
];
/// Environment variable that forces single-job execution when set to `1`.
pub const DETERMINISTIC_ENV: &str = "PHIBAL_DETERMINISTIC";

const DEFAULT_ETAS: [f64; 7] = [0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];

/// The quantity varied across a plan's runs.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    Phi(Vec<Potential>),
    Eta(Vec<f64>),
    BatchSize(Vec<usize>),
    Mechanism(Vec<MechanismKind>),
    Statistic(Vec<Statistic>),
    Alpha(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Phi(_) => "phi",
            SweepAxis::Eta(_) => "eta",
            SweepAxis::BatchSize(_) => "batch",
            SweepAxis::Mechanism(_) => "mechanism",
            SweepAxis::Statistic(_) => "statistic",
            SweepAxis::Alpha(_) => "alpha",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Phi(v) => v.len(),
            SweepAxis::Eta(v) | SweepAxis::Alpha(v) => v.len(),
            SweepAxis::BatchSize(v) => v.len(),
            SweepAxis::Mechanism(v) => v.len(),
            SweepAxis::Statistic(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Applies value `i` to `config`; returns its display label.
    fn apply(&self, i: usize, config: &mut TrainConfig) -> String {
        match self {
            SweepAxis::Phi(v) => {
                config.balance.phi = v[i];
                v[i].to_string()
            }
            SweepAxis::Eta(v) => {
                config.balance.eta = v[i];
                v[i].to_string()
            }
            SweepAxis::BatchSize(v) => {
                config.batch = v[i];
                v[i].to_string()
            }
            SweepAxis::Mechanism(v) => {
                config.balance.mechanism = v[i];
                v[i].token().to_string()
            }
            SweepAxis::Statistic(v) => {
                config.balance.statistic = v[i];
                statistic_token(v[i]).to_string()
            }
            SweepAxis::Alpha(v) => {
                config.balance.alpha = v[i];
                v[i].to_string()
            }
        }
    }
}

fn statistic_token(s: Statistic) -> &'static str {
    match s {
        Statistic::Probability => "probability",
        Statistic::Frequency => "frequency",
    }
}

/// A grid of runs over one axis, each repeated over consecutive seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub base: TrainConfig,
    /// `None` runs the base config alone.
    pub axis: Option<SweepAxis>,
    pub repeats: usize,
    pub out: Option<PathBuf>,
}

/// One concrete run of a plan.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub index: usize,
    /// Axis value label, or `base` for single runs.
    pub label: String,
    pub config: TrainConfig,
}

impl RunSpec {
    pub fn csv_name(&self) -> String {
        format!("run-{}.csv", self.config.short_hash())
    }
}

impl ExperimentPlan {
    pub fn single(config: TrainConfig) -> Self {
        Self {
            base: config,
            axis: None,
            repeats: 1,
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("sweep.repeats must be at least 1".into()));
        }
        if self.axis.as_ref().is_some_and(SweepAxis::is_empty) {
            return Err(Error::Config("sweep.values must not be empty".into()));
        }
        for run in self.runs() {
            run.config
                .validate()
                .map_err(|e| Error::Config(format!("run {} ({}): {e}", run.index, run.label)))?;
        }
        Ok(())
    }

    /// Runs in plan order: axis values outermost, seeds `base.seed + r`.
    pub fn runs(&self) -> Vec<RunSpec> {
        let values = self.axis.as_ref().map_or(1, SweepAxis::len);
        let mut out = Vec::with_capacity(values * self.repeats);
        for v in 0..values {
            for r in 0..self.repeats {
                let mut config = self.base.clone();
                config.seed = self.base.seed.wrapping_add(r as u64);
                let label = match &self.axis {
                    Some(axis) => axis.apply(v, &mut config),
                    None => "base".to_string(),
                };
                out.push(RunSpec {
                    index: out.len(),
                    label,
                    config,
                });
            }
        }
        out
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    axis: String,
    #[serde(default)]
    values: Option<Vec<toml::Value>>,
    #[serde(default = "one")]
    repeats: usize,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn one() -> usize {
    1
}

/// On-disk layout: the run config's keys plus an optional `[sweep]` table.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    steps: Option<u64>,
    eval_every: Option<u64>,
    window: Option<usize>,
    batch: Option<usize>,
    model: Option<ModelConfig>,
    balance: Option<BalanceConfig>,
    optimizer: Option<OptimizerConfig>,
    corpus: Option<CorpusSpec>,
    checked: Option<bool>,
    sweep: Option<SweepSection>,
}

fn value_error(i: usize, v: &toml::Value, what: &str) -> Error {
    Error::Config(format!("sweep.values[{i}] = {v}: expected {what}"))
}

fn parse_values<T>(values: &[toml::Value], what: &str, f: impl Fn(&toml::Value) -> Option<T>) -> Result<Vec<T>> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| f(v).ok_or_else(|| value_error(i, v, what)))
        .collect()
}

fn parse_token<T: std::str::FromStr<Err = Error>>(values: &[toml::Value]) -> Result<Vec<T>> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = v.as_str().ok_or_else(|| value_error(i, v, "a string"))?;
            s.parse().map_err(|e| Error::Config(format!("sweep.values[{i}]: {e}")))
        })
        .collect()
}

fn as_f64(v: &toml::Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

fn parse_axis(section: &SweepSection) -> Result<SweepAxis> {
    let values = section.values.as_deref();
    let need = || values.ok_or_else(|| Error::Config(format!("sweep axis `{}` needs values", section.axis)));
    Ok(match section.axis.as_str() {
        "phi" => SweepAxis::Phi(match values {
            Some(v) => parse_token(v)?,
            None => Potential::catalog(),
        }),
        "eta" => SweepAxis::Eta(match values {
            Some(v) => parse_values(v, "a number", as_f64)?,
            None => DEFAULT_ETAS.to_vec(),
        }),
        "batch" => SweepAxis::BatchSize(parse_values(need()?, "a positive integer", |v| {
            v.as_integer().filter(|&i| i > 0).map(|i| i as usize)
        })?),
        "mechanism" => SweepAxis::Mechanism(parse_token(need()?)?),
        "statistic" => SweepAxis::Statistic(parse_values(need()?, "\"probability\" or \"frequency\"", |v| {
            match v.as_str()? {
                "probability" => Some(Statistic::Probability),
                "frequency" => Some(Statistic::Frequency),
                _ => None,
            }
        })?),
        "alpha" => SweepAxis::Alpha(parse_values(need()?, "a number", as_f64)?),
        other => {
            return Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected phi, eta, batch, mechanism, statistic or alpha)"
            )))
        }
    })
}

/// Parses config text. Unknown keys, bad potential tokens and invalid values
/// are reported with their location.
pub fn parse_config_str(text: &str) -> Result<ExperimentPlan> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    let d = TrainConfig::default();
    let base = TrainConfig {
        seed: file.seed.unwrap_or(d.seed),
        steps: file.steps.unwrap_or(d.steps),
        eval_every: file.eval_every.unwrap_or(d.eval_every),
        window: file.window.unwrap_or(d.window),
        batch: file.batch.unwrap_or(d.batch),
        model: file.model.unwrap_or(d.model),
        balance: file.balance.unwrap_or(d.balance),
        optimizer: file.optimizer.unwrap_or(d.optimizer),
        corpus: file.corpus.unwrap_or(d.corpus),
        checked: file.checked.unwrap_or(d.checked),
    };
    let plan = match file.sweep {
        None => ExperimentPlan::single(base),
        Some(s) => ExperimentPlan {
            axis: Some(parse_axis(&s)?),
            repeats: s.repeats,
            out: s.out,
            base,
        },
    };
    plan.validate()?;
    Ok(plan)
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentPlan> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Worker count: one when [`DETERMINISTIC_ENV`] is `1`, else the request,
/// else the machine's parallelism.
pub fn resolve_jobs(requested: Option<usize>) -> usize {
    if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1") {
        return 1;
    }
    requested
        .filter(|&j| j > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn mech_label(config: &TrainConfig) -> &'static str {
    let b = &config.balance;
    if b.alpha == 0.0 && b.mechanism != MechanismKind::LossFree {
        "none"
    } else {
        b.mechanism.token()
    }
}

/// Writes `record` as a versioned run CSV.
pub fn write_run_csv(path: &Path, config: &TrainConfig, record: &RunRecord) -> Result<()> {
    let mut buf = format!("{CSV_VERSION_LINE}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(CSV_COLUMNS).map_err(io)?;
        let mech = mech_label(config);
        let phi = config.balance.phi.to_string();
        for row in &record.rows {
            for (l, m) in row.layers.iter().enumerate() {
                w.write_record([
                    row.step.to_string(),
                    l.to_string(),
                    row.task_loss.to_string(),
                    row.accuracy.to_string(),
                    m.max_vio.to_string(),
                    m.gini.to_string(),
                    mech.to_string(),
                    phi.clone(),
                    config.balance.eta.to_string(),
                    config.batch.to_string(),
                    config.seed.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// One parsed CSV row.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct CsvRow {
    pub step: u64,
    pub layer: usize,
    pub task_loss: f64,
    pub accuracy: f64,
    pub max_vio: f64,
    pub gini: f64,
    pub mech: String,
    pub phi: String,
    pub eta: f64,
    pub batch: usize,
    pub seed: u64,
}

pub fn read_run_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_VERSION_LINE) {
        return Err(Error::Config(format!("{}: missing `{CSV_VERSION_LINE}` header", path.display())));
    }
    let mut r = csv::ReaderBuilder::new().from_reader(&text.as_bytes()[CSV_VERSION_LINE.len() + 1..]);
    let headers = r.headers().map_err(|e| Error::Io(e.to_string()))?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Config(format!("{}: unexpected columns {headers:?}", path.display())));
    }
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Terminal metrics of one run, read back from its CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Terminal {
    pub step: u64,
    /// Mean over layers.
    pub max_vio: f64,
    pub gini: f64,
    pub task_loss: f64,
    pub accuracy: f64,
}

pub fn terminal_metrics(rows: &[CsvRow]) -> Option<Terminal> {
    let step = rows.iter().map(|r| r.step).max()?;
    let last: Vec<&CsvRow> = rows.iter().filter(|r| r.step == step).collect();
    let n = last.len() as f64;
    Some(Terminal {
        step,
        max_vio: last.iter().map(|r| r.max_vio).sum::<f64>() / n,
        gini: last.iter().map(|r| r.gini).sum::<f64>() / n,
        task_loss: last[0].task_loss,
        accuracy: last[0].accuracy,
    })
}

/// What happened to one run.
#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed { csv: PathBuf },
    Failed { error: Error, snapshot: Option<PathBuf> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub status: RunStatus,
}

impl RunOutcome {
    pub fn is_numerical_failure(&self) -> bool {
        matches!(
            self.status,
            RunStatus::Failed {
                error: Error::Numerical { .. },
                ..
            }
        )
    }
}

/// Results of [`run_plan`], in plan order.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutcome {
    pub runs: Vec<RunOutcome>,
    pub summary: PathBuf,
}

impl PlanOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &RunOutcome> {
        self.runs.iter().filter(|r| matches!(r.status, RunStatus::Failed { .. }))
    }
}

fn execute(spec: &RunSpec, out: &Path) -> RunStatus {
    let csv = out.join(spec.csv_name());
    let mut trainer = match Trainer::new(spec.config.clone()) {
        Ok(t) => t,
        Err(error) => return RunStatus::Failed { error, snapshot: None },
    };
    match trainer.run() {
        Ok(_) => match write_run_csv(&csv, &spec.config, trainer.record()) {
            Ok(()) => RunStatus::Completed { csv },
            Err(error) => RunStatus::Failed { error, snapshot: None },
        },
        Err(error) => {
            let path = out.join(format!("run-{}.snapshot.json", spec.config.short_hash()));
            let snapshot = serde_json::to_vec(&trainer.snapshot())
                .ok()
                .and_then(|bytes| fs::write(&path, bytes).ok())
                .map(|_| path);
            RunStatus::Failed { error, snapshot }
        }
    }
}

fn ensure_writable(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    let probe = out.join(".phibal-write-probe");
    fs::write(&probe, b"").map_err(|e| Error::Io(format!("{} is not writable: {e}", out.display())))?;
    fs::remove_file(&probe)?;
    Ok(())
}

/// Runs every configuration of `plan` on `jobs` workers, writes one CSV per
/// run and `summary.md`. The output directory is checked before any run
/// starts; a failing run is recorded without stopping the others.
pub fn run_plan(plan: &ExperimentPlan, out: &Path, jobs: usize) -> Result<PlanOutcome> {
    plan.validate()?;
    ensure_writable(out)?;
    let runs = plan.runs();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Io(e.to_string()))?;
    let statuses: Vec<RunStatus> = pool.install(|| runs.par_iter().map(|r| execute(r, out)).collect());
    let outcome_runs: Vec<RunOutcome> = runs
        .into_iter()
        .zip(statuses)
        .map(|(spec, status)| RunOutcome { spec, status })
        .collect();
    let summary = out.join("summary.md");
    fs::write(&summary, render_summary(plan, &outcome_runs)?)?;
    Ok(PlanOutcome {
        runs: outcome_runs,
        summary,
    })
}

/// Aggregate over the seeds of one axis value.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub label: String,
    pub runs: usize,
    /// `(mean, half-range)` pairs.
    pub max_vio: (f64, f64),
    pub gini: (f64, f64),
    pub task_loss: (f64, f64),
    pub accuracy: (f64, f64),
}

fn mean_half_range(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, (hi - lo) / 2.0)
}

/// Groups completed runs by axis value using only their CSV files, ranked by
/// mean terminal MaxVio.
pub fn summarize(runs: &[RunOutcome]) -> Result<Vec<GroupSummary>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Terminal>> = BTreeMap::new();
    for r in runs {
        if let RunStatus::Completed { csv } = &r.status {
            let rows = read_run_csv(csv)?;
            let Some(t) = terminal_metrics(&rows) else { continue };
            if !groups.contains_key(&r.spec.label) {
                order.push(r.spec.label.clone());
            }
            groups.entry(r.spec.label.clone()).or_default().push(t);
        }
    }
    let mut out: Vec<GroupSummary> = order
        .into_iter()
        .map(|label| {
            let ts = &groups[&label];
            let pick = |f: fn(&Terminal) -> f64| mean_half_range(&ts.iter().map(f).collect::<Vec<_>>());
            GroupSummary {
                runs: ts.len(),
                max_vio: pick(|t| t.max_vio),
                gini: pick(|t| t.gini),
                task_loss: pick(|t| t.task_loss),
                accuracy: pick(|t| t.accuracy),
                label,
            }
        })
        .collect();
    out.sort_by(|a, b| a.max_vio.0.total_cmp(&b.max_vio.0));
    Ok(out)
}

fn render_summary(plan: &ExperimentPlan, runs: &[RunOutcome]) -> Result<String> {
    let groups = summarize(runs)?;
    let axis = plan.axis.as_ref().map_or("none", SweepAxis::name);
    let mut s = String::new();
    let _ = writeln!(s, "# Sweep summary\n");
    let _ = writeln!(
        s,
        "Axis: `{axis}`. Runs: {}. Seeds per value: {}. Values are mean ± half-range over seeds at the final step; MaxVio and Gini are averaged over layers.\n",
        runs.len(),
        plan.repeats
    );
    let _ = writeln!(s, "| rank | {axis} | runs | max_vio | gini | task_loss | accuracy |");
    let _ = writeln!(s, "|---:|---|---:|---|---|---|---|");
    let pm = |(m, h): (f64, f64)| format!("{m:.4} ± {h:.4}");
    for (i, g) in groups.iter().enumerate() {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            i + 1,
            g.label,
            g.runs,
            pm(g.max_vio),
            pm(g.gini),
            pm(g.task_loss),
            pm(g.accuracy)
        );
    }
    let failed: Vec<&RunOutcome> = runs.iter().filter(|r| matches!(r.status, RunStatus::Failed { .. })).collect();
    if !failed.is_empty() {
        let _ = writeln!(s, "\n## Failed runs\n");
        let _ = writeln!(s, "| run | {axis} | seed | error |");
        let _ = writeln!(s, "|---:|---|---:|---|");
        for r in failed {
            if let RunStatus::Failed { error, .. } = &r.status {
                let _ = writeln!(s, "| {} | {} | {} | {} |", r.spec.index, r.spec.label, r.spec.config.seed, error);
            }
        }
    }
    Ok(s)
}
