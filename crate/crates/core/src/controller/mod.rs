//! The live loop: measure, tune on a trigger, then hold the winner.
//!
//! Time is simulated. Each trial consumes its measurement window; between
//! tunes the controller takes a short sample every `sample_period_s` and lets
//! that sample stand for the whole period when accounting energy.

mod system;
mod systems;

pub use system::SystemUnderControl;
pub use systems::{LoadSchedule, ReplayStub, SimSystem};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bayesopt::{best_trial, run_trials, BayOpConfig};
use crate::domain::{meets_sla, Config, ConfigSpace, Measurement, SlaObjective};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerPolicy {
    Periodic { period_s: f64 },
    /// Retune when the load moved by more than this fraction since the last tune.
    LoadDelta { delta_fraction: f64 },
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        TriggerPolicy::Periodic { period_s: 3600.0 }
    }
}

impl TriggerPolicy {
    pub fn validate(&self) -> Result<()> {
        let v = match self {
            TriggerPolicy::Periodic { period_s } => *period_s,
            TriggerPolicy::LoadDelta { delta_fraction } => *delta_fraction,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("trigger {self:?}: threshold must be positive")))
        }
    }
}

pub fn trigger_check(policy: &TriggerPolicy, now_s: f64, last_tune_s: f64, qps_now: f64, qps_at_last_tune: f64) -> bool {
    match *policy {
        TriggerPolicy::Periodic { period_s } => now_s - last_tune_s >= period_s,
        TriggerPolicy::LoadDelta { delta_fraction } => {
            if qps_at_last_tune <= 0.0 {
                return qps_now > 0.0;
            }
            (qps_now - qps_at_last_tune).abs() / qps_at_last_tune > delta_fraction
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Spacing of steady-state samples.
    pub sample_period_s: f64,
    /// Length of each steady-state sample.
    pub sample_window_s: f64,
    /// Config in force before the first tune and after a failed one.
    pub initial: Option<Config>,
    /// Entries never span a multiple of this (e.g. trace bin edges).
    pub align_s: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { sample_period_s: 600.0, sample_window_s: 1.0, initial: None, align_s: None }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.sample_period_s) || !pos(self.sample_window_s) || self.align_s.is_some_and(|a| !pos(a)) {
            return Err(Error::invalid("control: sample period/window and alignment must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    TuneStart,
    TuneTrial,
    Settled,
    Sample,
    /// Every trial of a tune failed; the previous config was restored.
    Degraded,
}

impl Event {
    pub fn as_str(self) -> &'static str {
        match self {
            Event::TuneStart => "tune_start",
            Event::TuneTrial => "tune_trial",
            Event::Settled => "settled",
            Event::Sample => "sample",
            Event::Degraded => "degraded",
        }
    }

    /// Steady-state entries, as opposed to search activity.
    pub fn is_steady(self) -> bool {
        matches!(self, Event::Settled | Event::Sample | Event::Degraded)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub t_s: f64,
    pub event: Event,
    pub config: Config,
    pub measurement: Option<Measurement>,
    /// Wall time this entry stands for.
    pub span_s: f64,
}

impl TimelineEntry {
    pub fn watts(&self) -> Option<f64> {
        self.measurement.map(|m| m.watts())
    }

    /// Measured power times the represented span.
    pub fn energy_j(&self) -> f64 {
        self.watts().map_or(0.0, |w| w * self.span_s)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ControllerTimeline {
    pub entries: Vec<TimelineEntry>,
}

impl ControllerTimeline {
    pub fn count(&self, event: Event) -> usize {
        self.entries.iter().filter(|e| e.event == event).count()
    }

    pub fn total_joules(&self) -> f64 {
        self.entries.iter().map(TimelineEntry::energy_j).sum()
    }

    pub fn joules_between(&self, t0: f64, t1: f64) -> f64 {
        self.entries.iter().filter(|e| e.t_s >= t0 && e.t_s < t1).map(TimelineEntry::energy_j).sum()
    }

    /// Measured entries missing the SLA; search trials count only when
    /// `include_trials`. Entries without a measurement count as violations.
    pub fn violations(&self, sla: &SlaObjective, include_trials: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.event != Event::TuneStart && (include_trials || e.event.is_steady()))
            .filter(|e| e.measurement.is_none_or(|m| !meets_sla(&m, sla)))
            .count()
    }

    /// Energy-weighted watts of the steady-state entries.
    pub fn settled_watts(&self) -> Option<f64> {
        let (j, s) = self
            .entries
            .iter()
            .filter(|e| e.event.is_steady() && e.measurement.is_some())
            .fold((0.0, 0.0), |(j, s), e| (j + e.energy_j(), s + e.span_s));
        (s > 0.0).then(|| j / s)
    }
}

fn next_boundary(t: f64, step: f64) -> f64 {
    let k = (t / step).floor() + 1.0;
    k * step
}

/// Runs the tune/settle loop until `horizon_s`. The first tune happens at t=0.
pub fn control_loop(
    system: &mut dyn SystemUnderControl,
    sla: &SlaObjective,
    trigger: &TriggerPolicy,
    bayop: &BayOpConfig,
    space: &ConfigSpace,
    ctrl: &ControllerConfig,
    horizon_s: f64,
) -> Result<ControllerTimeline> {
    run_loop(system, sla, Some((trigger, bayop)), space, ctrl, horizon_s)
}

/// The same loop with tuning disabled: the system keeps `ctrl.initial` (or the
/// grid's fastest setting) and is only sampled.
pub fn baseline_loop(
    system: &mut dyn SystemUnderControl,
    space: &ConfigSpace,
    ctrl: &ControllerConfig,
    horizon_s: f64,
) -> Result<ControllerTimeline> {
    run_loop(system, &SlaObjective::default(), None, space, ctrl, horizon_s)
}

fn run_loop(
    system: &mut dyn SystemUnderControl,
    sla: &SlaObjective,
    tuning: Option<(&TriggerPolicy, &BayOpConfig)>,
    space: &ConfigSpace,
    ctrl: &ControllerConfig,
    horizon_s: f64,
) -> Result<ControllerTimeline> {
    ctrl.validate()?;
    if !(horizon_s > 0.0) || !horizon_s.is_finite() {
        return Err(Error::invalid("control horizon must be positive"));
    }
    if let Some((trigger, bayop)) = tuning {
        trigger.validate()?;
        bayop.validate()?;
    }
    let mut current = ctrl.initial.unwrap_or(Config { itr: space.itr_min(), dvfs: space.f_max() });
    system.apply(current)?;

    let mut tl = ControllerTimeline::default();
    let mut t = 0.0;
    let mut last_tune: Option<(f64, f64)> = None;
    let mut qps_now = 0.0;
    while t < horizon_s {
        let due = match (tuning, last_tune) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some((trig, _)), Some((lt, lq))) => trigger_check(trig, t, lt, qps_now, lq),
        };
        let mut event = Event::Sample;
        if let Some((_, bayop)) = tuning.filter(|_| due) {
            let t0 = t;
            tl.entries.push(TimelineEntry { t_s: t, event: Event::TuneStart, config: current, measurement: None, span_s: 0.0 });
            system.sync_clock(t);
            let cfg = bayop;
            let trials = run_trials(system, sla, cfg, space)?;
            for tr in &trials {
                tl.entries.push(TimelineEntry {
                    t_s: t,
                    event: Event::TuneTrial,
                    config: tr.config,
                    measurement: tr.measurement,
                    span_s: cfg.trial_window_s,
                });
                t += cfg.trial_window_s;
            }
            match best_trial(&trials) {
                Some(i) => {
                    current = trials[i].config;
                    event = Event::Settled;
                }
                None => {
                    log::warn!("tune at t={t0}s: all trials failed, keeping {current}");
                    event = Event::Degraded;
                }
            }
            system.apply(current)?;
            let seen: Vec<f64> = trials.iter().filter_map(|tr| tr.measurement.map(|m| m.observed_qps)).collect();
            let q = if seen.is_empty() { qps_now } else { seen.iter().sum::<f64>() / seen.len() as f64 };
            last_tune = Some((t0, q));
        }
        if t >= horizon_s {
            break;
        }
        system.sync_clock(t);
        let measurement = match system.measure(ctrl.sample_window_s) {
            Ok(m) => {
                qps_now = m.observed_qps;
                Some(m)
            }
            Err(e) => {
                log::warn!("sample at t={t}s failed: {e}");
                None
            }
        };
        let mut next = (t + ctrl.sample_period_s).min(horizon_s);
        if let (Some((TriggerPolicy::Periodic { period_s }, _)), Some((lt, _))) = (tuning, last_tune) {
            next = next.min(lt + period_s);
        }
        if let Some((trig @ TriggerPolicy::LoadDelta { .. }, _)) = tuning {
            if let (Some(m), Some((lt, lq))) = (measurement, last_tune) {
                if trigger_check(trig, t, lt, m.observed_qps, lq) {
                    next = next.min(t + ctrl.sample_window_s);
                }
            }
        }
        if let Some(a) = ctrl.align_s {
            next = next.min(next_boundary(t, a));
        }
        let next = next.max(t + ctrl.sample_window_s.min(horizon_s - t));
        tl.entries.push(TimelineEntry { t_s: t, event, config: current, measurement, span_s: next - t });
        t = next;
    }
    Ok(tl)
}

pub const TIMELINE_CSV_HEADER: &str = "t_s,event,itr_us,dvfs_ghz,tail_latency_us,energy_j,watts";

/// `energy_j` is the energy the entry stands for (watts times span).
pub fn write_timeline_csv<W: Write>(tl: &ControllerTimeline, mut out: W) -> Result<()> {
    writeln!(out, "{TIMELINE_CSV_HEADER}")?;
    for e in &tl.entries {
        match &e.measurement {
            Some(m) => writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.t_s,
                e.event.as_str(),
                e.config.itr,
                e.config.dvfs,
                m.tail_latency_us,
                e.energy_j(),
                m.watts()
            )?,
            None => writeln!(out, "{},{},{},{},,,", e.t_s, e.event.as_str(), e.config.itr, e.config.dvfs)?,
        }
    }
    Ok(())
}

pub fn write_timeline_csv_file(tl: &ControllerTimeline, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_timeline_csv(tl, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}
