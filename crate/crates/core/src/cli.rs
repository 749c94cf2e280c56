//! The `sweetspot` command line.
//!
//! Exit codes: 0 success, 1 domain failure, 2 usage or config error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::bayesopt::{run_bayopt, write_trials_csv_file, BayOpConfig, Knobs, PenaltyKind};
use crate::config::{ConfigError, Experiment};
use crate::controller::{control_loop, write_timeline_csv_file, LoadSchedule, SimSystem};
use crate::domain::enumerate_grid;
use crate::error::Error;
use crate::model::{self, FitDataset, FitResult};
use crate::sim::{pareto_frontier, sweep, write_sweep_csv_file, RowStatus, SimOptions, SweepOptions};
use crate::trace::{
    bin_hourly, default_systems, parse_trace_str, replay, scale_trace_by, synthetic_diurnal,
    write_summary_json, write_trace_csv, DiurnalSpec, Fingerprint, ReplaySetup, ReplaySummary, ReplaySystem, SystemKind,
    BUNDLED_TRACE,
};

#[derive(Debug, Parser)]
#[command(name = "sweetspot", version, about = "Find energy-efficient ITR-delay/DVFS settings under a tail-latency SLA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sweep the configured grid at fixed load; writes sweep.csv and frontier.csv.
    Sweep(SweepArgs),
    /// Fit the analytic latency/energy model to a sweep CSV.
    Fit(FitArgs),
    /// One Bayesian-optimization run at fixed load; writes the trial history.
    Bayopt(TuneArgs),
    /// Run the tune/settle controller over time; writes the timeline.
    Control(TuneArgs),
    /// Replay a diurnal trace against the five comparison systems.
    Replay(ReplayArgs),
    /// Normalize replay energy against a baseline system.
    Compare(CompareArgs),
    /// Write the synthetic diurnal trace.
    GenTrace(GenTraceArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `root_seed` (and the optimizer seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Sweep CSV (itr_us,dvfs_ghz,tail_latency_us,energy_j).
    pub sweep_csv: PathBuf,
    /// Output JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional experiment file supplying the [fit] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KnobArg {
    Both,
    Itr,
    Dvfs,
}

impl From<KnobArg> for Knobs {
    fn from(k: KnobArg) -> Self {
        match k {
            KnobArg::Both => Knobs::Both,
            KnobArg::Itr => Knobs::ItrOnly,
            KnobArg::Dvfs => Knobs::DvfsOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PenaltyArg {
    SlaEnergy,
    LatencyOnly,
}

impl From<PenaltyArg> for PenaltyKind {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::SlaEnergy => PenaltyKind::SlaEnergy,
            PenaltyArg::LatencyOnly => PenaltyKind::LatencyOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub knobs: Option<KnobArg>,
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyArg>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trace CSV; overrides [trace].path.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyArg>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Replay summary JSON files.
    #[arg(required = true)]
    pub summaries: Vec<PathBuf>,
    /// System every other one is normalized against.
    #[arg(long, default_value = "linux-default")]
    pub baseline: String,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub hours: Option<usize>,
    #[arg(long)]
    pub mean_qps: Option<f64>,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Domain(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Domain(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Domain(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

pub fn execute(command: Command) -> CmdResult {
    match command {
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Bayopt(a) => cmd_bayopt(&a),
        Command::Control(a) => cmd_control(&a),
        Command::Replay(a) => cmd_replay(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::GenTrace(a) => cmd_gen_trace(&a),
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<Experiment, Failure> {
    let mut exp = Experiment::load(path)?;
    if let Some(s) = seed {
        exp.config.root_seed = s;
        exp.config.bayop.seed = s;
    }
    Ok(exp)
}

fn ensure_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Domain(format!("cannot create {}: {e}", dir.display())))
}

fn ensure_parent(file: &Path) -> CmdResult {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn cmd_sweep(a: &SweepArgs) -> CmdResult {
    let exp = load(&a.common.config, a.common.seed)?;
    let cfg = &exp.config;
    let opts = SweepOptions {
        repetitions: cfg.sweep.repetitions,
        root_seed: cfg.root_seed,
        jobs: a.common.jobs,
        sim: SimOptions::default(),
    };
    let grid = enumerate_grid(&exp.space);
    info!("sweeping {} configs x {} repetitions", grid.len(), opts.repetitions);
    let rows = sweep(&grid, &exp.workload(cfg.root_seed), exp.workload_os(), &cfg.power, &exp.sla, &opts)?;
    if rows.iter().all(|r| r.status != RowStatus::Ok) {
        return Err(Failure::Domain(format!("all {} configs unstable: offered load exceeds capacity", rows.len())));
    }
    let frontier = pareto_frontier(&rows);
    ensure_dir(&a.common.out)?;
    write_sweep_csv_file(&rows, &a.common.out.join("sweep.csv"))?;
    write_sweep_csv_file(&frontier, &a.common.out.join("frontier.csv"))?;
    println!("{} rows, {} SLA-feasible, {} on the frontier", rows.len(), rows.iter().filter(|r| r.sla_ok).count(), frontier.len());
    Ok(())
}

/// Observed vs predicted values for one fitted row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRowReport {
    pub itr_us: u32,
    pub dvfs_ghz: f64,
    pub observed_latency_us: f64,
    pub predicted_latency_us: f64,
    pub observed_energy_j: f64,
    pub predicted_energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub fit: FitResult,
    pub rows: Vec<FitRowReport>,
}

fn cmd_fit(a: &FitArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => load(p, None)?.config.fit,
        None => model::FitConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = FitDataset::read_csv(&a.sweep_csv)?;
    let init = model::heuristic_init(&data);
    let result = model::fit(&data, &init, &cfg)?;
    let rows = data
        .rows()
        .iter()
        .map(|r| -> Result<FitRowReport, Error> {
            Ok(FitRowReport {
                itr_us: r.config.itr.get(),
                dvfs_ghz: r.config.dvfs.get(),
                observed_latency_us: r.tail_latency_us,
                predicted_latency_us: model::predict_latency(&result.params, &r.config)?,
                observed_energy_j: r.energy_j,
                predicted_energy_j: model::predict_energy_floored(&result.params, &r.config, result.itr_floor_us)?,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = FitReport { fit: result, rows };
    ensure_parent(&a.out)?;
    write_json(&report, &a.out)?;
    let p = &report.fit.params;
    println!(
        "Z={:.4} alpha={:.4} phi={:.4} gamma={:.4} beta={:.4} (loss {:.4}, converged {})",
        p.z,
        p.alpha,
        p.phi,
        p.gamma,
        p.beta,
        report.fit.latency_loss + report.fit.energy_loss,
        report.fit.converged
    );
    Ok(())
}

fn tune_config(exp: &Experiment, knobs: Option<KnobArg>, penalty: Option<PenaltyArg>) -> BayOpConfig {
    let mut b = exp.bayop();
    if let Some(k) = knobs {
        b.knobs = k.into();
    }
    if let Some(p) = penalty {
        b.penalty = p.into();
    }
    b
}

/// The simulator with the knob the optimizer does not own left to the
/// stock dynamic policy.
fn sim_system(exp: &Experiment, knobs: Knobs, load: LoadSchedule) -> SimSystem {
    let sys = ReplaySystem { name: String::new(), os: exp.workload_os().clone(), kind: SystemKind::Bayop { knobs } };
    let options = SimOptions { policy: sys.policy(&exp.space), ..SimOptions::default() };
    SimSystem::new(sys.os, exp.config.power.clone(), load, exp.sla.percentile, exp.config.root_seed)
        .with_sizes(exp.config.workload.sizes.clone())
        .with_options(options)
}

fn cmd_bayopt(a: &TuneArgs) -> CmdResult {
    let exp = load(&a.common.config, a.common.seed)?;
    let bayop = tune_config(&exp, a.knobs, a.penalty);
    bayop.candidates(&exp.space).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut system = sim_system(&exp, bayop.knobs, LoadSchedule::Constant { qps: exp.offered_qps() });
    let outcome = run_bayopt(&mut system, &exp.sla, &bayop, &exp.space)?;
    ensure_parent(&a.common.out)?;
    write_trials_csv_file(&outcome, &a.common.out)?;
    println!("best {} after {} trials, penalty {}", outcome.best, outcome.trials.len(), outcome.best_penalty);
    Ok(())
}

fn cmd_control(a: &TuneArgs) -> CmdResult {
    let exp = load(&a.common.config, a.common.seed)?;
    let bayop = tune_config(&exp, a.knobs, a.penalty);
    bayop.candidates(&exp.space).map_err(|e| Failure::Usage(e.to_string()))?;
    let load = exp.config.control.load.clone().unwrap_or(LoadSchedule::Constant { qps: exp.offered_qps() });
    let mut system = sim_system(&exp, bayop.knobs, load);
    let trigger = exp.config.trigger.unwrap_or_default();
    let timeline = control_loop(
        &mut system,
        &exp.sla,
        &trigger,
        &bayop,
        &exp.space,
        &exp.controller(),
        exp.config.control.horizon_s,
    )?;
    ensure_parent(&a.common.out)?;
    write_timeline_csv_file(&timeline, &a.common.out)?;
    println!(
        "{} entries, {} tunes, {:.1} J, {} settled violations",
        timeline.entries.len(),
        timeline.count(crate::controller::Event::TuneStart),
        timeline.total_joules(),
        timeline.violations(&exp.sla, false)
    );
    Ok(())
}

fn cmd_replay(a: &ReplayArgs) -> CmdResult {
    let exp = load(&a.common.config, a.common.seed)?;
    let cfg = &exp.config;
    let cols = exp.trace_columns();
    let parsed = match a.trace.as_ref().or(cfg.trace.path.as_ref()) {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Domain(format!("{}: {e}", p.display())))?;
            parse_trace_str(&text, &cols)?
        }
        None => parse_trace_str(BUNDLED_TRACE, &Default::default())?,
    };
    if parsed.malformed > 0 {
        log::warn!("skipped {} malformed trace rows", parsed.malformed);
    }
    let binned = bin_hourly(&parsed.records, cfg.trace.bin_seconds)?;
    let (target, anchor) = exp.scale_target();
    let binned = scale_trace_by(&binned, target, anchor)?;
    let mut bayop = exp.bayop();
    if let Some(p) = a.penalty {
        bayop.penalty = p.into();
    }
    let setup = ReplaySetup {
        space: exp.space.clone(),
        sla: exp.sla,
        power: cfg.power.clone(),
        sizes: cfg.workload.sizes.clone(),
        bayop,
        control: exp.controller(),
        trigger: cfg.trigger,
        root_seed: cfg.root_seed,
        jobs: a.common.jobs,
    };
    let systems = default_systems(exp.profile(&cfg.trace.general_os), exp.profile(&cfg.trace.specialized_os));
    info!("replaying {} bins against {} systems", binned.bins.len(), systems.len());
    let outcome = replay(&binned, &setup, &systems)?;
    ensure_dir(&a.common.out)?;
    for run in &outcome.runs {
        write_timeline_csv_file(&run.timeline, &a.common.out.join(format!("{}.csv", run.system.name)))?;
    }
    write_summary_json(&outcome.summary, &a.common.out.join("summary.json"))?;
    print!("{}", render_table(&compare_rows(&[("", &outcome.summary)], &systems[0].name)?));
    Ok(())
}

/// One line of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub summary: String,
    pub system: String,
    pub total_joules: f64,
    pub normalized_energy: f64,
    pub violations: usize,
}

/// Normalizes every system's energy by the first system called `baseline`.
/// All summaries must share one fingerprint.
pub fn compare_rows(summaries: &[(&str, &ReplaySummary)], baseline: &str) -> Result<Vec<CompareRow>, Failure> {
    let Some((first_label, first)) = summaries.first() else {
        return Err(Failure::Usage("no summaries given".into()));
    };
    for (label, s) in &summaries[1..] {
        if s.fingerprint != first.fingerprint {
            return Err(Failure::Domain(format!(
                "fingerprint mismatch: {label} ({}) vs {first_label} ({})",
                describe(&s.fingerprint),
                describe(&first.fingerprint)
            )));
        }
    }
    let base = summaries
        .iter()
        .flat_map(|(_, s)| s.systems.iter())
        .find(|s| s.system == baseline)
        .ok_or_else(|| Failure::Usage(format!("baseline system {baseline:?} not found")))?;
    if !(base.total_joules > 0.0) {
        return Err(Failure::Domain(format!("baseline {baseline:?} used no energy")));
    }
    Ok(summaries
        .iter()
        .flat_map(|(label, s)| {
            s.systems.iter().map(move |sys| CompareRow {
                summary: label.to_string(),
                system: sys.system.clone(),
                total_joules: sys.total_joules,
                normalized_energy: sys.total_joules / base.total_joules,
                violations: sys.violations,
            })
        })
        .collect())
}

fn describe(f: &Fingerprint) -> String {
    format!("p{} < {} us, {} s bins, trace {}", f.percentile, f.bound_us, f.bin_seconds, &f.trace_sha256[..12.min(f.trace_sha256.len())])
}

fn render_table(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>14} {:>10} {:>10}", "system", "energy_j", "normalized", "violations");
    for r in rows {
        let name = if r.summary.is_empty() { r.system.clone() } else { format!("{}:{}", r.summary, r.system) };
        let _ = writeln!(out, "{:<24} {:>14.1} {:>10.3} {:>10}", name, r.total_joules, r.normalized_energy, r.violations);
    }
    out
}

fn cmd_compare(a: &CompareArgs) -> CmdResult {
    let mut loaded = Vec::new();
    for p in &a.summaries {
        let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        let s: ReplaySummary =
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: not a replay summary: {e}", p.display())))?;
        loaded.push((p.display().to_string(), s));
    }
    let refs: Vec<(&str, &ReplaySummary)> = loaded.iter().map(|(l, s)| (l.as_str(), s)).collect();
    let rows = compare_rows(&refs, &a.baseline)?;
    print!("{}", render_table(&rows));
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        let mut w = csv::Writer::from_path(out).map_err(Error::from)?;
        for r in &rows {
            w.serialize(r).map_err(Error::from)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_gen_trace(a: &GenTraceArgs) -> CmdResult {
    let mut spec = DiurnalSpec::default();
    if let Some(h) = a.hours {
        spec.hours = h;
    }
    if let Some(q) = a.mean_qps {
        spec.mean_qps = q;
    }
    let records = synthetic_diurnal(&spec, a.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    ensure_parent(&a.out)?;
    let mut buf = Vec::new();
    write_trace_csv(&records, &mut buf)?;
    std::fs::write(&a.out, buf)?;
    println!("{} samples over {} h", records.len(), spec.hours);
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::SystemSummary;

    fn summary(sha: &str, systems: &[(&str, f64)]) -> ReplaySummary {
        ReplaySummary {
            fingerprint: Fingerprint { percentile: 99.0, bound_us: 500.0, bin_seconds: 3600.0, trace_sha256: sha.into() },
            filled_bins: vec![],
            systems: systems
                .iter()
                .map(|(n, j)| SystemSummary {
                    system: n.to_string(),
                    total_joules: *j,
                    violations: 0,
                    violations_whole: 0,
                    tunes: 0,
                    mean_watts_per_bin: vec![],
                    flagged_bins: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn normalizes_against_the_baseline() {
        let s = summary("aa", &[("linux-default", 100.0), ("linux-bayop", 60.0)]);
        let rows = compare_rows(&[("a", &s)], "linux-default").unwrap();
        assert_eq!(rows[0].normalized_energy, 1.0);
        assert!((rows[1].normalized_energy - 0.60).abs() < 1e-12);
    }

    #[test]
    fn identical_summaries_compare_at_one() {
        let s = summary("aa", &[("linux-default", 123.0)]);
        let rows = compare_rows(&[("a", &s), ("b", &s)], "linux-default").unwrap();
        assert!(rows.iter().all(|r| r.normalized_energy == 1.0));
    }

    #[test]
    fn fingerprint_mismatch_is_a_domain_failure() {
        let a = summary("aa", &[("linux-default", 1.0)]);
        let b = summary("bb", &[("linux-default", 1.0)]);
        let err = compare_rows(&[("a", &a), ("b", &b)], "linux-default").unwrap_err();
        assert_eq!(err.code(), 1);
    }

    #[test]
    fn missing_baseline_is_a_usage_error() {
        let a = summary("aa", &[("x", 1.0)]);
        assert_eq!(compare_rows(&[("a", &a)], "linux-default").unwrap_err().code(), 2);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["sweetspot", "sweep"]), 2);
        assert_eq!(run(["sweetspot", "frobnicate"]), 2);
        assert_eq!(run(["sweetspot", "bayopt", "--config", "x.toml", "--out", "y", "--knobs", "neither"]), 2);
    }
}
