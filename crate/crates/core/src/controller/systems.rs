use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::SystemUnderControl;
use crate::domain::{Config, Measurement};
use crate::error::{Error, Result};
use crate::seed;
use crate::sim::{run_sim_with, OsProfile, PowerModel, SimOptions, SizeDistribution, WorkloadSpec};

/// Offered load as a function of the controller's clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadSchedule {
    Constant { qps: f64 },
    /// Piecewise-constant bins starting at t=0; the last bin extends forever.
    Binned { bin_seconds: f64, qps: Vec<f64> },
}

impl LoadSchedule {
    pub fn qps_at(&self, t_s: f64) -> f64 {
        match self {
            LoadSchedule::Constant { qps } => *qps,
            LoadSchedule::Binned { bin_seconds, qps } => {
                let k = (t_s.max(0.0) / bin_seconds).floor() as usize;
                qps[k.min(qps.len() - 1)]
            }
        }
    }

    /// Start of the constant-rate segment containing `t_s`.
    pub fn segment_start(&self, t_s: f64) -> f64 {
        match self {
            LoadSchedule::Constant { .. } => 0.0,
            LoadSchedule::Binned { bin_seconds, qps } => {
                let k = ((t_s.max(0.0) / bin_seconds).floor() as usize).min(qps.len() - 1);
                k as f64 * bin_seconds
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LoadSchedule::Constant { qps } => qps.is_finite() && *qps >= 0.0,
            LoadSchedule::Binned { bin_seconds, qps } => {
                *bin_seconds > 0.0 && !qps.is_empty() && qps.iter().all(|q| q.is_finite() && *q >= 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("load schedule needs finite, non-negative rates and positive bins"))
        }
    }
}

/// The simulator as a live system. Each `measure` runs a fresh simulation of
/// the current load for the requested window and advances the clock by it.
///
/// Arrival streams are keyed by the offset into the current load segment, so
/// identical segments replay identical traffic.
#[derive(Debug, Clone)]
pub struct SimSystem {
    pub os: OsProfile,
    pub power: PowerModel,
    pub sizes: SizeDistribution,
    pub load: LoadSchedule,
    /// Tail percentile reported by `measure`.
    pub percentile: f64,
    /// Kernel-managed behaviour for any knob the controller does not own.
    pub options: SimOptions,
    pub root_seed: u64,
    clock_s: f64,
    applied: Option<Config>,
}

impl SimSystem {
    pub fn new(os: OsProfile, power: PowerModel, load: LoadSchedule, percentile: f64, root_seed: u64) -> Self {
        SimSystem {
            os,
            power,
            sizes: SizeDistribution::default(),
            load,
            percentile,
            options: SimOptions::default(),
            root_seed,
            clock_s: 0.0,
            applied: None,
        }
    }

    pub fn with_options(mut self, options: SimOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_sizes(mut self, sizes: SizeDistribution) -> Self {
        self.sizes = sizes;
        self
    }

    pub fn clock(&self) -> f64 {
        self.clock_s
    }

    pub fn applied(&self) -> Option<Config> {
        self.applied
    }
}

impl SystemUnderControl for SimSystem {
    fn apply(&mut self, config: Config) -> Result<()> {
        self.applied = Some(config);
        Ok(())
    }

    fn measure(&mut self, window_seconds: f64) -> Result<Measurement> {
        let config = self.applied.ok_or_else(|| Error::Measurement("no config applied".into()))?;
        let qps = self.load.qps_at(self.clock_s);
        let offset_us = ((self.clock_s - self.load.segment_start(self.clock_s)) * 1e6).round() as u64;
        let seed = seed::derive(self.root_seed, &[seed::stream::MEASURE, offset_us]);
        self.clock_s += window_seconds;
        if qps <= 0.0 {
            return Ok(Measurement {
                tail_latency_us: 0.0,
                energy_joules: self.power.resting_watts() * window_seconds,
                window_seconds,
                observed_qps: 0.0,
            });
        }
        let w = WorkloadSpec { sizes: self.sizes.clone(), ..WorkloadSpec::open(qps, window_seconds, seed) };
        run_sim_with(&w, config, &self.os, &self.power, &self.options)?.measurement(self.percentile)
    }

    fn describe(&self) -> String {
        format!("sim({})", self.os.name)
    }

    fn sync_clock(&mut self, now_s: f64) {
        self.clock_s = now_s;
    }
}

/// Scripted system for tests: looks up a per-config measurement (per second
/// of window) and reports the scheduled load as observed qps.
#[derive(Debug, Clone)]
pub struct ReplayStub {
    pub table: HashMap<Config, Measurement>,
    /// Used for configs missing from `table`; `None` makes them fail.
    pub fallback: Option<Measurement>,
    pub load: LoadSchedule,
    pub applied_log: Vec<Config>,
    clock_s: f64,
}

impl ReplayStub {
    pub fn new(table: HashMap<Config, Measurement>, fallback: Option<Measurement>, load: LoadSchedule) -> Self {
        ReplayStub { table, fallback, load, applied_log: Vec::new(), clock_s: 0.0 }
    }

    /// Every config measures the same.
    pub fn uniform(m: Measurement, load: LoadSchedule) -> Self {
        ReplayStub::new(HashMap::new(), Some(m), load)
    }

    pub fn current(&self) -> Option<Config> {
        self.applied_log.last().copied()
    }
}

impl SystemUnderControl for ReplayStub {
    fn apply(&mut self, config: Config) -> Result<()> {
        self.applied_log.push(config);
        Ok(())
    }

    fn measure(&mut self, window_seconds: f64) -> Result<Measurement> {
        let config = self.current().ok_or_else(|| Error::Measurement("no config applied".into()))?;
        let base = self
            .table
            .get(&config)
            .or(self.fallback.as_ref())
            .copied()
            .ok_or_else(|| Error::Measurement(format!("no scripted measurement for {config}")))?;
        let qps = self.load.qps_at(self.clock_s);
        self.clock_s += window_seconds;
        Ok(Measurement {
            energy_joules: base.watts() * window_seconds,
            window_seconds,
            observed_qps: qps,
            ..base
        })
    }

    fn describe(&self) -> String {
        "replay-stub".into()
    }

    fn sync_clock(&mut self, now_s: f64) {
        self.clock_s = now_s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::run_sim;

    #[test]
    fn binned_schedule_lookup() {
        let s = LoadSchedule::Binned { bin_seconds: 10.0, qps: vec![1.0, 2.0, 3.0] };
        assert_eq!(s.qps_at(0.0), 1.0);
        assert_eq!(s.qps_at(9.999), 1.0);
        assert_eq!(s.qps_at(10.0), 2.0);
        assert_eq!(s.qps_at(1e6), 3.0);
    }

    #[test]
    fn measure_reflects_the_applied_config() {
        let load = LoadSchedule::Constant { qps: 40_000.0 };
        let mut sys = SimSystem::new(OsProfile::general_purpose(), PowerModel::default(), load, 99.0, 3);
        assert!(sys.measure(0.1).is_err());
        let cfg = Config::new(50, 1.5).unwrap();
        sys.apply(cfg).unwrap();
        let m = sys.measure(0.1).unwrap();
        let w = WorkloadSpec::open(40_000.0, 0.1, seed::derive(3, &[seed::stream::MEASURE, 0]));
        let direct = run_sim(&w, cfg, &sys.os, &sys.power).unwrap();
        assert_eq!(m.energy_joules, direct.energy_joules);
        assert_eq!(m.tail_latency_us, direct.tail_latency(99.0).unwrap());
        assert!((sys.clock() - 0.1).abs() < 1e-12);

        sys.apply(Config::new(0, 3.0).unwrap()).unwrap();
        let m2 = sys.measure(0.1).unwrap();
        assert!(m2.watts() > m.watts());
    }

    #[test]
    fn zero_load_is_resting_power() {
        let load = LoadSchedule::Constant { qps: 0.0 };
        let mut sys = SimSystem::new(OsProfile::general_purpose(), PowerModel::default(), load, 99.0, 0);
        sys.apply(Config::new(0, 3.0).unwrap()).unwrap();
        let m = sys.measure(2.0).unwrap();
        assert_eq!(m.energy_joules, 2.0 * PowerModel::default().p_sleep);
    }
}
