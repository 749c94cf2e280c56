use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BinnedTrace;
use crate::bayesopt::{BayOpConfig, Knobs};
use crate::controller::{baseline_loop, control_loop, ControllerConfig, ControllerTimeline, Event, LoadSchedule, SimSystem, TriggerPolicy};
use crate::domain::{ConfigSpace, SlaObjective};
use crate::error::{Error, Result};
use crate::sim::{AdaptiveItr, DvfsPolicy, DynamicPolicy, ItrPolicy, Ondemand, OsProfile, PowerModel, SimOptions, SizeDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemKind {
    /// Stock kernel governors on both knobs, never tuned.
    Baseline,
    /// The controller tunes `knobs`; the kernel keeps managing the other one.
    Bayop { knobs: Knobs },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySystem {
    pub name: String,
    pub os: OsProfile,
    pub kind: SystemKind,
}

impl ReplaySystem {
    pub fn policy(&self, space: &ConfigSpace) -> DynamicPolicy {
        let ondemand = || DvfsPolicy::Ondemand { governor: Ondemand::default(), space: space.clone() };
        let adaptive = || ItrPolicy::Adaptive(AdaptiveItr::default());
        match self.kind {
            SystemKind::Baseline => DynamicPolicy::stock(space),
            SystemKind::Bayop { knobs: Knobs::Both } => DynamicPolicy::fixed(),
            SystemKind::Bayop { knobs: Knobs::ItrOnly } => DynamicPolicy { itr: ItrPolicy::Static, dvfs: ondemand() },
            SystemKind::Bayop { knobs: Knobs::DvfsOnly } => DynamicPolicy { itr: adaptive(), dvfs: DvfsPolicy::Static },
        }
    }
}

/// The five-way comparison: stock kernel, full search, each single knob, and
/// full search on the specialized stack.
pub fn default_systems(general: &OsProfile, specialized: &OsProfile) -> Vec<ReplaySystem> {
    let sys = |name: &str, os: &OsProfile, kind| ReplaySystem { name: name.into(), os: os.clone(), kind };
    vec![
        sys("linux-default", general, SystemKind::Baseline),
        sys("linux-bayop", general, SystemKind::Bayop { knobs: Knobs::Both }),
        sys("linux-itr-bayop", general, SystemKind::Bayop { knobs: Knobs::ItrOnly }),
        sys("linux-dvfs-bayop", general, SystemKind::Bayop { knobs: Knobs::DvfsOnly }),
        sys(&format!("{}-bayop", specialized.name), specialized, SystemKind::Bayop { knobs: Knobs::Both }),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySetup {
    pub space: ConfigSpace,
    pub sla: SlaObjective,
    pub power: PowerModel,
    pub sizes: SizeDistribution,
    pub bayop: BayOpConfig,
    pub control: ControllerConfig,
    /// Defaults to a periodic trigger at every bin edge.
    pub trigger: Option<TriggerPolicy>,
    pub root_seed: u64,
    pub jobs: Option<usize>,
}

/// Identifies what a summary was computed against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub percentile: f64,
    pub bound_us: f64,
    pub bin_seconds: f64,
    /// SHA-256 of the replayed per-bin rates.
    pub trace_sha256: String,
}

impl Fingerprint {
    pub fn of(binned: &BinnedTrace, sla: &SlaObjective) -> Self {
        let text: Vec<String> = binned.bins.iter().map(|b| b.mean_qps.to_string()).collect();
        let digest = Sha256::digest(text.join(",").as_bytes());
        let trace_sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        Fingerprint { percentile: sla.percentile, bound_us: sla.bound_us, bin_seconds: binned.bin_seconds, trace_sha256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub system: String,
    pub total_joules: f64,
    /// Steady-state windows over the SLA.
    pub violations: usize,
    /// The same, counting search trials too.
    pub violations_whole: usize,
    pub tunes: usize,
    pub mean_watts_per_bin: Vec<f64>,
    /// Bins where some measurement failed (overload).
    pub flagged_bins: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub fingerprint: Fingerprint,
    /// Bins whose rate was carried over from a neighbour.
    pub filled_bins: Vec<usize>,
    pub systems: Vec<SystemSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemRun {
    pub system: ReplaySystem,
    pub timeline: ControllerTimeline,
    pub summary: SystemSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub runs: Vec<SystemRun>,
    pub summary: ReplaySummary,
}

impl ReplayOutcome {
    pub fn run(&self, name: &str) -> Option<&SystemRun> {
        self.runs.iter().find(|r| r.system.name == name)
    }
}

pub fn replay(binned: &BinnedTrace, setup: &ReplaySetup, systems: &[ReplaySystem]) -> Result<ReplayOutcome> {
    if binned.bins.is_empty() {
        return Err(Error::Trace("empty trace".into()));
    }
    setup.sla.validate()?;
    setup.power.validate()?;
    let work = || -> Result<Vec<SystemRun>> { systems.par_iter().map(|s| replay_one(binned, setup, s)).collect() };
    let runs = match setup.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    let summary = ReplaySummary {
        fingerprint: Fingerprint::of(binned, &setup.sla),
        filled_bins: binned.bins.iter().filter(|b| b.filled).map(|b| b.index).collect(),
        systems: runs.iter().map(|r| r.summary.clone()).collect(),
    };
    Ok(ReplayOutcome { runs, summary })
}

fn replay_one(binned: &BinnedTrace, setup: &ReplaySetup, system: &ReplaySystem) -> Result<SystemRun> {
    let load = LoadSchedule::Binned { bin_seconds: binned.bin_seconds, qps: binned.means() };
    let options = SimOptions { policy: system.policy(&setup.space), ..SimOptions::default() };
    let mut sim = SimSystem::new(system.os.clone(), setup.power.clone(), load, setup.sla.percentile, setup.root_seed)
        .with_sizes(setup.sizes.clone())
        .with_options(options);
    let ctrl = ControllerConfig { align_s: Some(binned.bin_seconds), ..setup.control.clone() };
    let horizon = binned.horizon_s();
    let timeline = match system.kind {
        SystemKind::Baseline => baseline_loop(&mut sim, &setup.space, &ctrl, horizon)?,
        SystemKind::Bayop { knobs } => {
            let trigger = setup.trigger.unwrap_or(TriggerPolicy::Periodic { period_s: binned.bin_seconds });
            let bayop = BayOpConfig { knobs, ..setup.bayop.clone() };
            control_loop(&mut sim, &setup.sla, &trigger, &bayop, &setup.space, &ctrl, horizon)?
        }
    };
    let summary = summarize(&system.name, &timeline, binned, &setup.sla);
    Ok(SystemRun { system: system.clone(), timeline, summary })
}

fn summarize(name: &str, tl: &ControllerTimeline, binned: &BinnedTrace, sla: &SlaObjective) -> SystemSummary {
    let bs = binned.bin_seconds;
    let mean_watts_per_bin = (0..binned.bins.len())
        .map(|k| tl.joules_between(k as f64 * bs, (k + 1) as f64 * bs) / bs)
        .collect();
    let mut flagged_bins: Vec<usize> = tl
        .entries
        .iter()
        .filter(|e| e.event != Event::TuneStart && e.measurement.is_none())
        .map(|e| ((e.t_s / bs).floor() as usize).min(binned.bins.len() - 1))
        .collect();
    flagged_bins.dedup();
    SystemSummary {
        system: name.into(),
        total_joules: tl.total_joules(),
        violations: tl.violations(sla, false),
        violations_whole: tl.violations(sla, true),
        tunes: tl.count(Event::TuneStart),
        mean_watts_per_bin,
        flagged_bins,
    }
}

pub fn write_summary_json(summary: &ReplaySummary, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> ReplaySetup {
        ReplaySetup {
            space: ConfigSpace::stepped(200, 2, 1.2, 3.0, 0.2).unwrap(),
            sla: SlaObjective::default(),
            power: PowerModel::default(),
            sizes: SizeDistribution::default(),
            bayop: BayOpConfig { n_trials: 8, n_init: 4, trial_window_s: 0.05, ..BayOpConfig::default() },
            control: ControllerConfig { sample_period_s: 60.0, sample_window_s: 0.05, ..ControllerConfig::default() },
            trigger: None,
            root_seed: 11,
            jobs: Some(2),
        }
    }

    fn short_trace(means: &[f64]) -> BinnedTrace {
        BinnedTrace::from_means(120.0, means)
    }

    #[test]
    fn flat_trace_settles_identically_every_bin() {
        let systems = default_systems(&OsProfile::general_purpose(), &OsProfile::specialized());
        let out = replay(&short_trace(&[60_000.0; 3]), &setup(), &systems[1..2]).unwrap();
        let tl = &out.runs[0].timeline;
        let settled: Vec<_> = tl.entries.iter().filter(|e| e.event == Event::Settled).map(|e| e.config).collect();
        assert_eq!(settled.len(), 3);
        assert!(settled.windows(2).all(|w| w[0] == w[1]));
        let trials: Vec<Vec<_>> = tl
            .entries
            .split(|e| e.event == Event::TuneStart)
            .skip(1)
            .map(|chunk| chunk.iter().filter(|e| e.event == Event::TuneTrial).map(|e| (e.config, e.measurement)).collect())
            .collect();
        assert!(trials.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn baseline_never_tunes_and_bins_add_up() {
        let systems = default_systems(&OsProfile::general_purpose(), &OsProfile::specialized());
        let trace = short_trace(&[30_000.0, 90_000.0]);
        let out = replay(&trace, &setup(), &systems).unwrap();
        assert_eq!(out.runs.len(), 5);
        let base = out.run("linux-default").unwrap();
        assert_eq!(base.summary.tunes, 0);
        assert_eq!(base.timeline.count(Event::TuneTrial), 0);
        for r in &out.runs {
            let per_bin: f64 = r.summary.mean_watts_per_bin.iter().map(|w| w * trace.bin_seconds).sum();
            assert!((per_bin - r.summary.total_joules).abs() <= 1e-9 * r.summary.total_joules);
            let span: f64 = r.timeline.entries.iter().map(|e| e.span_s).sum();
            assert!((span - trace.horizon_s()).abs() < 1e-6, "{}: {span}", r.system.name);
        }
        assert_eq!(out.run("linux-bayop").unwrap().summary.tunes, 2);
    }

    #[test]
    fn single_knob_systems_only_move_their_knob() {
        let systems = default_systems(&OsProfile::general_purpose(), &OsProfile::specialized());
        let out = replay(&short_trace(&[50_000.0]), &setup(), &systems[2..4]).unwrap();
        let itr_only = &out.runs[0].timeline;
        assert!(itr_only.entries.iter().filter(|e| e.event == Event::TuneTrial).all(|e| e.config.dvfs.mhz() == 3000));
        let dvfs_only = &out.runs[1].timeline;
        assert!(dvfs_only.entries.iter().filter(|e| e.event == Event::TuneTrial).all(|e| e.config.itr.0 == 0));
    }

    #[test]
    fn fingerprint_tracks_trace_and_sla() {
        let a = Fingerprint::of(&short_trace(&[1.0, 2.0]), &SlaObjective::default());
        let b = Fingerprint::of(&short_trace(&[1.0, 2.5]), &SlaObjective::default());
        assert_ne!(a.trace_sha256, b.trace_sha256);
        assert_eq!(a, Fingerprint::of(&short_trace(&[1.0, 2.0]), &SlaObjective::default()));
        assert_eq!(a.trace_sha256.len(), 64);
    }
}
