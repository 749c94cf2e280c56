use crate::controller::SystemUnderControl;
use crate::domain::{Config, Measurement};
use crate::error::{Error, Result};

use super::{energy_at, latency_at, ModelParams};

/// The analytic model used as a deterministic system under control.
///
/// Tail latency is the model's per-request latency; window energy is a static
/// draw plus `qps` requests' worth of model energy, with ITR floored as in
/// fitting so the zero-coalescing column stays positive.
#[derive(Debug, Clone)]
pub struct ModelSurface {
    pub params: ModelParams,
    pub qps: f64,
    pub static_watts: f64,
    pub itr_floor_us: f64,
    applied: Option<Config>,
}

impl ModelSurface {
    pub fn new(params: ModelParams, qps: f64, static_watts: f64) -> Self {
        ModelSurface { params, qps, static_watts, itr_floor_us: 1.0, applied: None }
    }

    pub fn evaluate(&self, config: &Config, window_seconds: f64) -> Measurement {
        let f = config.dvfs.get();
        let itr = f64::from(config.itr.0);
        let per_req = energy_at(&self.params, itr.max(self.itr_floor_us), f);
        Measurement {
            tail_latency_us: latency_at(&self.params, itr, f),
            energy_joules: window_seconds * (self.static_watts + self.qps * per_req),
            window_seconds,
            observed_qps: self.qps,
        }
    }
}

impl SystemUnderControl for ModelSurface {
    fn apply(&mut self, config: Config) -> Result<()> {
        self.applied = Some(config);
        Ok(())
    }

    fn measure(&mut self, window_seconds: f64) -> Result<Measurement> {
        let cfg = self.applied.ok_or_else(|| Error::Measurement("no config applied".into()))?;
        Ok(self.evaluate(&cfg, window_seconds))
    }

    fn describe(&self) -> String {
        format!("model-surface(qps={})", self.qps)
    }
}
