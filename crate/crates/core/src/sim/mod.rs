//! Discrete-event model of a single-core network server with an interrupt
//! throttle (ITR-delay) and a CPU frequency knob.

mod engine;
mod governor;
mod pareto;
mod sweep;

pub use engine::{run_sim, run_sim_with, SimOptions};
pub use governor::{adaptive_itr_step, ondemand_governor_step, AdaptiveItr, DvfsPolicy, DynamicPolicy, ItrPolicy, Ondemand};
pub use pareto::{nondominated_indices, pareto_frontier};
pub use sweep::{sweep, sweep_seed, write_sweep_csv, write_sweep_csv_file, RowStatus, SweepOptions, SweepRow, SWEEP_CSV_HEADER};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{nearest_rank_percentile, Config, FrequencyGHz, Measurement};
use crate::error::{Error, Result};

/// Cycle costs of a software stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OsProfile {
    pub name: String,
    /// Interrupt entry, driver and stack traversal, per interrupt.
    pub per_interrupt_cycles: u64,
    /// Application work per request.
    pub per_request_cycles: u64,
    /// Payload-proportional work per KB.
    pub per_kb_cycles: u64,
}

impl OsProfile {
    /// General-purpose kernel stack.
    pub fn general_purpose() -> Self {
        OsProfile { name: "linux".into(), per_interrupt_cycles: 6000, per_request_cycles: 6000, per_kb_cycles: 3000 }
    }

    /// Library-OS style specialized stack: 2.5x cheaper on every path.
    pub fn specialized() -> Self {
        OsProfile { name: "ebbrt".into(), per_interrupt_cycles: 2400, per_request_cycles: 2400, per_kb_cycles: 1200 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_interrupt_cycles == 0 || self.per_request_cycles == 0 {
            return Err(Error::invalid(format!("os profile {}: cycle counts must be positive", self.name)));
        }
        Ok(())
    }

    pub fn request_cycles(&self, kb: f64) -> f64 {
        self.per_request_cycles as f64 + self.per_kb_cycles as f64 * kb
    }
}

/// Power draw per CPU state: busy at `p_idle + k_dyn * f^exponent`, idle at
/// `p_idle`, optionally a single sleep state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerModel {
    pub p_idle: f64,
    pub k_dyn: f64,
    pub exponent: f64,
    pub sleep_enabled: bool,
    pub p_sleep: f64,
    pub sleep_entry_idle_us: f64,
    pub wake_latency_us: f64,
}

impl Default for PowerModel {
    /// Active power at 3.0 GHz is ~3x active power at 1.2 GHz. The sleep
    /// state is entered after 50 us of continuous idle.
    fn default() -> Self {
        PowerModel {
            p_idle: 44.0,
            k_dyn: 4.0,
            exponent: 3.0,
            sleep_enabled: true,
            p_sleep: 10.0,
            sleep_entry_idle_us: 50.0,
            wake_latency_us: 50.0,
        }
    }
}

impl PowerModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.p_idle, self.k_dyn, self.exponent, self.p_sleep, self.sleep_entry_idle_us, self.wake_latency_us]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.p_idle < 0.0 || self.k_dyn <= 0.0 || self.exponent <= 0.0 {
            return Err(Error::invalid("power model: p_idle >= 0, k_dyn > 0 and exponent > 0 required"));
        }
        if !(0.0..=self.p_idle).contains(&self.p_sleep) {
            return Err(Error::invalid("power model: 0 <= p_sleep <= p_idle required"));
        }
        if self.wake_latency_us < 0.0 || self.sleep_entry_idle_us < 0.0 {
            return Err(Error::invalid("power model: sleep timings must be non-negative"));
        }
        Ok(())
    }

    /// Draw of a CPU with nothing to do.
    pub fn resting_watts(&self) -> f64 {
        if self.sleep_enabled {
            self.p_sleep
        } else {
            self.p_idle
        }
    }

    pub fn active_watts(&self, f: FrequencyGHz) -> f64 {
        self.p_idle + self.k_dyn * f.get().powf(self.exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadMode {
    /// Poisson arrivals at a fixed external rate.
    Open,
    /// One outstanding message bouncing between two identical hosts.
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub min_kb: f64,
    pub max_kb: f64,
}

/// Request payload sizes in KB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SizeDistribution {
    Fixed { kb: f64 },
    Uniform { min_kb: f64, max_kb: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

impl Default for SizeDistribution {
    /// Mostly tiny values with a tail up to 1 KB (mean 0.2 KB).
    fn default() -> Self {
        SizeDistribution::Mixture {
            components: vec![
                MixtureComponent { weight: 0.7, min_kb: 0.001, max_kb: 0.1 },
                MixtureComponent { weight: 0.3, min_kb: 0.1, max_kb: 1.0 },
            ],
        }
    }
}

impl SizeDistribution {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |lo: f64, hi: f64| lo >= 0.0 && hi >= lo && hi.is_finite();
        let ok = match self {
            SizeDistribution::Fixed { kb } => *kb >= 0.0 && kb.is_finite(),
            SizeDistribution::Uniform { min_kb, max_kb } => range_ok(*min_kb, *max_kb),
            SizeDistribution::Mixture { components } => {
                !components.is_empty()
                    && components.iter().all(|c| c.weight > 0.0 && range_ok(c.min_kb, c.max_kb))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid size distribution {self:?}")))
        }
    }

    pub fn mean_kb(&self) -> f64 {
        match self {
            SizeDistribution::Fixed { kb } => *kb,
            SizeDistribution::Uniform { min_kb, max_kb } => 0.5 * (min_kb + max_kb),
            SizeDistribution::Mixture { components } => {
                let w: f64 = components.iter().map(|c| c.weight).sum();
                components.iter().map(|c| c.weight * 0.5 * (c.min_kb + c.max_kb)).sum::<f64>() / w
            }
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let uniform = |rng: &mut R, lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        match self {
            SizeDistribution::Fixed { kb } => *kb,
            SizeDistribution::Uniform { min_kb, max_kb } => uniform(rng, *min_kb, *max_kb),
            SizeDistribution::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                let mut u = rng.random::<f64>() * total;
                for c in components {
                    if u < c.weight {
                        return uniform(rng, c.min_kb, c.max_kb);
                    }
                    u -= c.weight;
                }
                let last = components.last().expect("validated non-empty");
                uniform(rng, last.min_kb, last.max_kb)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub mode: WorkloadMode,
    /// Open mode arrival rate.
    pub qps: f64,
    /// Closed mode message size.
    pub message_kb: f64,
    /// Open mode payload sizes.
    pub sizes: SizeDistribution,
    /// Open mode: arrival horizon. Closed mode: time cap when `rounds` is unset.
    pub duration_s: f64,
    /// Closed mode: number of round trips.
    pub rounds: Option<u64>,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            mode: WorkloadMode::Open,
            qps: 95_000.0,
            message_kb: 64.0,
            sizes: SizeDistribution::default(),
            duration_s: 1.0,
            rounds: None,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn open(qps: f64, duration_s: f64, seed: u64) -> Self {
        WorkloadSpec { mode: WorkloadMode::Open, qps, duration_s, seed, ..WorkloadSpec::default() }
    }

    pub fn closed(message_kb: f64, rounds: u64, seed: u64) -> Self {
        WorkloadSpec {
            mode: WorkloadMode::Closed,
            message_kb,
            rounds: Some(rounds),
            duration_s: 3600.0,
            seed,
            ..WorkloadSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::invalid("workload duration must be positive"));
        }
        match self.mode {
            WorkloadMode::Open if !(self.qps > 0.0) || !self.qps.is_finite() => {
                Err(Error::invalid("open workload needs qps > 0"))
            }
            WorkloadMode::Closed if !(self.message_kb > 0.0) || !self.message_kb.is_finite() => {
                Err(Error::invalid("closed workload needs message_kb > 0"))
            }
            WorkloadMode::Closed if self.rounds == Some(0) => Err(Error::invalid("closed workload needs rounds > 0")),
            _ => self.sizes.validate(),
        }
    }
}

/// Requests per second the stack sustains at `f` with one interrupt per
/// request (no coalescing).
pub fn capacity_qps(os: &OsProfile, sizes: &SizeDistribution, f: FrequencyGHz) -> f64 {
    let cycles = os.per_interrupt_cycles as f64 + os.request_cycles(sizes.mean_kb());
    f.hz() / cycles
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub latency_samples_us: Vec<f64>,
    pub energy_joules: f64,
    pub interrupt_count: u64,
    /// Total cycles executed.
    pub instructions_proxy: u64,
    pub busy_seconds: f64,
    pub idle_seconds: f64,
    pub sleep_seconds: f64,
    /// Accounting horizon: the workload duration, extended to the last completion.
    pub elapsed_seconds: f64,
    pub served: u64,
    /// Open mode: requests/s. Closed mode: MB/s (1 MB = 1024 KB).
    pub throughput: f64,
    /// Busy time per frequency, ascending by frequency.
    pub busy_by_freq: Vec<(FrequencyGHz, f64)>,
    /// Knob values in effect when the run ended.
    pub final_config: Config,
}

impl SimResult {
    pub fn tail_latency(&self, percentile: f64) -> Result<f64> {
        nearest_rank_percentile(&self.latency_samples_us, percentile)
    }

    pub fn measurement(&self, percentile: f64) -> Result<Measurement> {
        Ok(Measurement {
            tail_latency_us: self.tail_latency(percentile)?,
            energy_joules: self.energy_joules,
            window_seconds: self.elapsed_seconds,
            observed_qps: self.served as f64 / self.elapsed_seconds,
        })
    }

    /// Energy recomputed from the state totals.
    pub fn energy_from_states(&self, power: &PowerModel) -> f64 {
        let busy: f64 = self.busy_by_freq.iter().map(|(f, s)| s * power.active_watts(*f)).sum();
        busy + self.idle_seconds * power.p_idle + self.sleep_seconds * power.p_sleep
    }
}
