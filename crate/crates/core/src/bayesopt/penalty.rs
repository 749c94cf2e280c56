use serde::{Deserialize, Serialize};

use crate::domain::{Measurement, SlaObjective};

/// Energy, multiplied by `(tail - bound + 1)` once the tail exceeds the bound.
/// Latencies are in microseconds, so a 100 us overshoot costs a factor of 101.
pub fn penalty(m: &Measurement, sla: &SlaObjective) -> f64 {
    m.energy_joules * (m.tail_latency_us - sla.bound_us + 1.0).max(1.0)
}

/// Performance-only objective: the tail latency itself.
pub fn penalty_latency_only(m: &Measurement) -> f64 {
    m.tail_latency_us
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    #[default]
    SlaEnergy,
    LatencyOnly,
}

impl PenaltyKind {
    pub fn evaluate(self, m: &Measurement, sla: &SlaObjective) -> f64 {
        match self {
            PenaltyKind::SlaEnergy => penalty(m, sla),
            PenaltyKind::LatencyOnly => penalty_latency_only(m),
        }
    }
}
