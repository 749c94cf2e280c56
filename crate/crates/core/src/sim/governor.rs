//! Emulations of the dynamic policies a stock kernel runs when the knobs are
//! not pinned: a utilization-driven frequency governor and a two-class
//! interrupt moderation heuristic.

use serde::{Deserialize, Serialize};

use crate::domain::{ConfigSpace, FrequencyGHz, ItrDelayMicros};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ondemand {
    pub up_threshold: f64,
    pub target_load: f64,
    pub sampling_ms: f64,
}

impl Default for Ondemand {
    fn default() -> Self {
        Ondemand { up_threshold: 0.95, target_load: 0.8, sampling_ms: 10.0 }
    }
}

impl Ondemand {
    pub fn step(&self, utilization: f64, current: FrequencyGHz, space: &ConfigSpace) -> FrequencyGHz {
        if utilization > self.up_threshold {
            return space.f_max();
        }
        let wanted = current.get() * utilization.max(0.0) / self.target_load;
        if wanted <= space.f_min().get() {
            space.f_min()
        } else {
            space.frequency_at_least(wanted)
        }
    }
}

/// Jump to f_max above 95% utilization, otherwise pick the lowest frequency
/// that would bring utilization to 80%.
pub fn ondemand_governor_step(utilization: f64, current: FrequencyGHz, space: &ConfigSpace) -> FrequencyGHz {
    Ondemand::default().step(utilization, current, space)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveItr {
    pub window_us: f64,
    pub bulk_bytes_per_s: f64,
    pub bulk_pkts_per_s: f64,
    pub bulk_itr_us: u32,
    pub latency_itr_us: u32,
}

impl Default for AdaptiveItr {
    fn default() -> Self {
        AdaptiveItr {
            window_us: 1000.0,
            bulk_bytes_per_s: 40e6,
            bulk_pkts_per_s: 180e3,
            bulk_itr_us: 50,
            latency_itr_us: 2,
        }
    }
}

impl AdaptiveItr {
    pub fn is_bulk(&self, bytes_per_s: f64, pkts_per_s: f64) -> bool {
        bytes_per_s >= self.bulk_bytes_per_s || pkts_per_s >= self.bulk_pkts_per_s
    }

    pub fn step(&self, bytes_per_s: f64, pkts_per_s: f64) -> ItrDelayMicros {
        if self.is_bulk(bytes_per_s, pkts_per_s) {
            ItrDelayMicros(self.bulk_itr_us)
        } else {
            ItrDelayMicros(self.latency_itr_us)
        }
    }
}

/// Bulk traffic gets a long throttle interval, everything else the short one.
pub fn adaptive_itr_step(recent_throughput: f64, recent_pkts: f64) -> ItrDelayMicros {
    AdaptiveItr::default().step(recent_throughput, recent_pkts)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ItrPolicy {
    /// Use the applied config's ITR-delay.
    #[default]
    Static,
    Adaptive(AdaptiveItr),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DvfsPolicy {
    /// Use the applied config's frequency.
    #[default]
    Static,
    Ondemand { governor: Ondemand, space: ConfigSpace },
}

/// Which knobs the simulated kernel manages itself.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DynamicPolicy {
    pub itr: ItrPolicy,
    pub dvfs: DvfsPolicy,
}

impl DynamicPolicy {
    pub fn fixed() -> Self {
        DynamicPolicy::default()
    }

    /// Stock kernel: both knobs dynamic.
    pub fn stock(space: &ConfigSpace) -> Self {
        DynamicPolicy {
            itr: ItrPolicy::Adaptive(AdaptiveItr::default()),
            dvfs: DvfsPolicy::Ondemand { governor: Ondemand::default(), space: space.clone() },
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.itr, ItrPolicy::Static) && matches!(self.dvfs, DvfsPolicy::Static)
    }
}
