use crate::domain::{Config, Measurement};
use crate::error::Result;

/// A live system the controller can reconfigure and observe.
///
/// `apply` followed by `measure` must reflect the applied config. The
/// controller owns the system exclusively; implementations only need `Send`.
pub trait SystemUnderControl: Send {
    fn apply(&mut self, config: Config) -> Result<()>;

    fn measure(&mut self, window_seconds: f64) -> Result<Measurement>;

    fn describe(&self) -> String;

    /// Tells time-varying systems (e.g. trace-driven load) the controller's clock.
    fn sync_clock(&mut self, _now_s: f64) {}
}
