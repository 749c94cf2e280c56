//! Experiment configuration files (TOML).
//!
//! Every section is optional and falls back to the defaults used by the
//! library. Errors carry the 1-based line of the offending key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayesopt::BayOpConfig;
use crate::controller::{ControllerConfig, LoadSchedule, TriggerPolicy};
use crate::error::Error;
use crate::domain::{Config, ConfigSpace, FrequencyGHz, ItrDelayMicros, SlaObjective, ITR_STEP_US};
use crate::model::FitConfig;
use crate::sim::{capacity_qps, OsProfile, PowerModel, SizeDistribution, WorkloadMode, WorkloadSpec};
use crate::trace::{ScaleAnchor, TraceColumns};

pub const SCHEMA_VERSION: u32 = 1;

/// A config problem, located in the source text when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let file = self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<config>".into());
        match self.line {
            Some(line) => write!(f, "{file}:{line}: {}", self.message),
            None => write!(f, "{file}: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSection {
    /// Explicit lists win over the stepped range below.
    pub itr_values_us: Option<Vec<u32>>,
    pub dvfs_values_ghz: Option<Vec<f64>>,
    pub itr_max_us: u32,
    pub itr_step_us: u32,
    pub dvfs_min_ghz: f64,
    pub dvfs_max_ghz: f64,
    pub dvfs_step_ghz: f64,
}

impl Default for SpaceSection {
    fn default() -> Self {
        SpaceSection {
            itr_values_us: None,
            dvfs_values_ghz: None,
            itr_max_us: 1024,
            itr_step_us: ITR_STEP_US,
            dvfs_min_ghz: 1.2,
            dvfs_max_ghz: 3.0,
            dvfs_step_ghz: 0.1,
        }
    }
}

impl SpaceSection {
    pub fn build(&self) -> crate::Result<ConfigSpace> {
        let stepped = || {
            ConfigSpace::stepped(self.itr_max_us, self.itr_step_us, self.dvfs_min_ghz, self.dvfs_max_ghz, self.dvfs_step_ghz)
        };
        if self.itr_step_us % ITR_STEP_US != 0 {
            return Err(Error::invalid(format!("itr step must be a multiple of {ITR_STEP_US} us")));
        }
        let itr = match &self.itr_values_us {
            Some(v) => {
                if let Some(bad) = v.iter().find(|&&u| u % ITR_STEP_US != 0) {
                    return Err(Error::invalid(format!("itr value {bad} is not a multiple of {ITR_STEP_US} us")));
                }
                v.iter().map(|&u| ItrDelayMicros(u)).collect()
            }
            None => stepped()?.itr_values().to_vec(),
        };
        let dvfs = match &self.dvfs_values_ghz {
            Some(v) => v.iter().map(|&g| FrequencyGHz::new(g)).collect::<crate::Result<Vec<_>>>()?,
            None => stepped()?.dvfs_values().to_vec(),
        };
        ConfigSpace::new(itr, dvfs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlaSection {
    pub percentile: f64,
    pub bound_us: f64,
}

impl Default for SlaSection {
    fn default() -> Self {
        let d = SlaObjective::default();
        SlaSection { percentile: d.percentile, bound_us: d.bound_us }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub mode: WorkloadMode,
    /// Name of an entry in `os_profiles`.
    pub os: String,
    pub qps: f64,
    /// When set, overrides `qps` with this fraction of the stack's capacity
    /// at the highest grid frequency.
    pub load_fraction: Option<f64>,
    pub message_kb: f64,
    pub rounds: Option<u64>,
    pub duration_s: f64,
    pub sizes: SizeDistribution,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let w = WorkloadSpec::default();
        WorkloadSection {
            mode: w.mode,
            os: "linux".into(),
            qps: w.qps,
            load_fraction: None,
            message_kb: w.message_kb,
            rounds: w.rounds,
            duration_s: w.duration_s,
            sizes: w.sizes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub per_interrupt_cycles: u64,
    pub per_request_cycles: u64,
    #[serde(default)]
    pub per_kb_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub repetitions: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { repetitions: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub sample_period_s: f64,
    pub sample_window_s: f64,
    pub initial_itr_us: Option<u32>,
    pub initial_dvfs_ghz: Option<f64>,
    /// Length of a `control` run.
    pub horizon_s: f64,
    /// Load seen by a `control` run; defaults to the workload rate.
    pub load: Option<LoadSchedule>,
}

impl Default for ControlSection {
    fn default() -> Self {
        let c = ControllerConfig::default();
        ControlSection {
            sample_period_s: c.sample_period_s,
            sample_window_s: c.sample_window_s,
            initial_itr_us: None,
            initial_dvfs_ghz: None,
            horizon_s: 4.0 * 3600.0,
            load: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    /// CSV trace; the bundled synthetic trace when unset.
    pub path: Option<PathBuf>,
    pub timestamp_column: String,
    pub qps_column: String,
    pub bin_seconds: f64,
    /// Rescale so the busiest bin carries this rate; the default scenario
    /// uses [`DEFAULT_PEAK_QPS`] when neither target is set.
    pub peak_qps: Option<f64>,
    /// Rescale so the mean bin carries this rate (exclusive with `peak_qps`).
    pub mean_qps: Option<f64>,
    /// Profile for the four general-purpose systems.
    pub general_os: String,
    /// Profile for the specialized-stack system.
    pub specialized_os: String,
}

impl Default for TraceSection {
    fn default() -> Self {
        let cols = TraceColumns::default();
        TraceSection {
            path: None,
            timestamp_column: cols.timestamp,
            qps_column: cols.qps,
            bin_seconds: 3600.0,
            peak_qps: None,
            mean_qps: None,
            general_os: "linux".into(),
            specialized_os: "ebbrt".into(),
        }
    }
}

/// Peak rate of the default replay scenario.
pub const DEFAULT_PEAK_QPS: f64 = 150_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default)]
    pub space: SpaceSection,
    #[serde(default)]
    pub sla: SlaSection,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default)]
    pub power: PowerModel,
    /// Merged over the built-in `linux` and `ebbrt` profiles.
    #[serde(default)]
    pub os_profiles: BTreeMap<String, ProfileSection>,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub bayop: BayOpConfig,
    #[serde(default)]
    pub trigger: Option<TriggerPolicy>,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub trace: TraceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            root_seed: 0,
            space: SpaceSection::default(),
            sla: SlaSection::default(),
            workload: WorkloadSection::default(),
            power: PowerModel::default(),
            os_profiles: BTreeMap::new(),
            sweep: SweepSection::default(),
            fit: FitConfig::default(),
            bayop: BayOpConfig::default(),
            trigger: None,
            control: ControlSection::default(),
            trace: TraceSection::default(),
        }
    }
}

/// A config with every section checked and the derived objects built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub space: ConfigSpace,
    pub sla: SlaObjective,
    pub profiles: BTreeMap<String, OsProfile>,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            line: None,
            message: format!("cannot read: {e}"),
        })?;
        Experiment::parse(&text).map_err(|e| ConfigError { path: Some(path.to_path_buf()), ..e })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError {
            path: None,
            line: e.span().map(|s| line_of_offset(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        Experiment::from_config(config, text)
    }

    /// Validates `config`; `text` (possibly empty) is only used to locate errors.
    pub fn from_config(config: ExperimentConfig, text: &str) -> Result<Self, ConfigError> {
        let fail = |section: &str, key: &str, msg: String| ConfigError {
            path: None,
            line: locate(text, section, key),
            message: if section.is_empty() { format!("{key}: {msg}") } else { format!("[{section}] {key}: {msg}") },
        };

        if config.schema_version != SCHEMA_VERSION {
            return Err(fail(
                "",
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", config.schema_version),
            ));
        }
        let space = config.space.build().map_err(|e| fail("space", space_key(&config.space), e.to_string()))?;
        let sla = SlaObjective::new(config.sla.percentile, config.sla.bound_us).map_err(|e| {
            let key = if (0.0..=100.0).contains(&config.sla.percentile) && config.sla.percentile > 0.0 {
                "bound_us"
            } else {
                "percentile"
            };
            fail("sla", key, e.to_string())
        })?;
        config.power.validate().map_err(|e| fail("power", "", e.to_string()))?;

        let mut profiles = BTreeMap::new();
        for p in [OsProfile::general_purpose(), OsProfile::specialized()] {
            profiles.insert(p.name.clone(), p);
        }
        for (name, p) in &config.os_profiles {
            let profile = OsProfile {
                name: name.clone(),
                per_interrupt_cycles: p.per_interrupt_cycles,
                per_request_cycles: p.per_request_cycles,
                per_kb_cycles: p.per_kb_cycles,
            };
            profile
                .validate()
                .map_err(|e| fail(&format!("os_profiles.{name}"), "per_request_cycles", e.to_string()))?;
            profiles.insert(name.clone(), profile);
        }
        for (section, key, name) in [
            ("workload", "os", &config.workload.os),
            ("trace", "general_os", &config.trace.general_os),
            ("trace", "specialized_os", &config.trace.specialized_os),
        ] {
            if !profiles.contains_key(name) {
                let known: Vec<&str> = profiles.keys().map(String::as_str).collect();
                return Err(fail(section, key, format!("unknown os profile {name:?} (known: {})", known.join(", "))));
            }
        }

        let w = &config.workload;
        if let Some(f) = w.load_fraction {
            if !(f > 0.0 && f.is_finite()) {
                return Err(fail("workload", "load_fraction", "must be positive".into()));
            }
        }
        let exp = Experiment { config: config.clone(), space, sla, profiles };
        exp.workload(0).validate().map_err(|e| {
            let key = match w.mode {
                WorkloadMode::Open if w.load_fraction.is_none() && !(w.qps > 0.0) => "qps",
                WorkloadMode::Closed if !(w.message_kb > 0.0) => "message_kb",
                WorkloadMode::Closed if w.rounds == Some(0) => "rounds",
                _ if !(w.duration_s > 0.0) => "duration_s",
                _ => "sizes",
            };
            fail("workload", key, e.to_string())
        })?;

        if config.sweep.repetitions == 0 {
            return Err(fail("sweep", "repetitions", "must be at least 1".into()));
        }
        if config.fit.restarts == 0 || config.fit.max_iters == 0 || !(config.fit.learning_rate > 0.0) {
            return Err(fail("fit", "", "restarts, max_iters and learning_rate must be positive".into()));
        }
        config.bayop.validate().map_err(|e| fail("bayop", "n_init", e.to_string()))?;
        config.bayop.candidates(&exp.space).map_err(|e| fail("bayop", "", e.to_string()))?;
        if let Some(t) = &config.trigger {
            t.validate().map_err(|e| fail("trigger", "", e.to_string()))?;
        }
        let c = &config.control;
        exp.controller().validate().map_err(|e| fail("control", "", e.to_string()))?;
        if !(c.horizon_s > 0.0 && c.horizon_s.is_finite()) {
            return Err(fail("control", "horizon_s", "must be positive".into()));
        }
        if let Some(init) = exp.initial_config().map_err(|e| fail("control", "initial_itr_us", e.to_string()))? {
            if !exp.space.contains(&init) {
                return Err(fail("control", "initial_itr_us", format!("initial config {init} is not on the grid")));
            }
        }
        if let Some(load) = &c.load {
            load.validate().map_err(|e| fail("control", "load", e.to_string()))?;
        }

        let t = &config.trace;
        if !(t.bin_seconds > 0.0 && t.bin_seconds.is_finite()) {
            return Err(fail("trace", "bin_seconds", "must be positive".into()));
        }
        match (t.peak_qps, t.mean_qps) {
            (Some(_), Some(_)) => return Err(fail("trace", "mean_qps", "set at most one of peak_qps and mean_qps".into())),
            (Some(q), None) | (None, Some(q)) if !(q > 0.0 && q.is_finite()) => {
                let key = if t.peak_qps.is_some() { "peak_qps" } else { "mean_qps" };
                return Err(fail("trace", key, "must be positive".into()));
            }
            _ => {}
        }
        Ok(exp)
    }

    pub fn profile(&self, name: &str) -> &OsProfile {
        &self.profiles[name]
    }

    pub fn workload_os(&self) -> &OsProfile {
        self.profile(&self.config.workload.os)
    }

    /// Offered open-mode rate after resolving `load_fraction`.
    pub fn offered_qps(&self) -> f64 {
        let w = &self.config.workload;
        match w.load_fraction {
            Some(f) => f * capacity_qps(self.workload_os(), &w.sizes, self.space.f_max()),
            None => w.qps,
        }
    }

    pub fn workload(&self, seed: u64) -> WorkloadSpec {
        let w = &self.config.workload;
        WorkloadSpec {
            mode: w.mode,
            qps: self.offered_qps(),
            message_kb: w.message_kb,
            sizes: w.sizes.clone(),
            duration_s: w.duration_s,
            rounds: w.rounds,
            seed,
        }
    }

    pub fn initial_config(&self) -> crate::Result<Option<Config>> {
        let c = &self.config.control;
        match (c.initial_itr_us, c.initial_dvfs_ghz) {
            (None, None) => Ok(None),
            (itr, dvfs) => Config::new(
                itr.unwrap_or(self.space.itr_min().get()),
                dvfs.unwrap_or(self.space.f_max().get()),
            )
            .map(Some),
        }
    }

    pub fn controller(&self) -> ControllerConfig {
        let c = &self.config.control;
        ControllerConfig {
            sample_period_s: c.sample_period_s,
            sample_window_s: c.sample_window_s,
            initial: self.initial_config().ok().flatten(),
            align_s: None,
        }
    }

    pub fn bayop(&self) -> BayOpConfig {
        self.config.bayop.clone()
    }

    pub fn scale_target(&self) -> (f64, ScaleAnchor) {
        match (self.config.trace.peak_qps, self.config.trace.mean_qps) {
            (None, Some(q)) => (q, ScaleAnchor::Mean),
            (p, _) => (p.unwrap_or(DEFAULT_PEAK_QPS), ScaleAnchor::Peak),
        }
    }

    pub fn trace_columns(&self) -> TraceColumns {
        TraceColumns { timestamp: self.config.trace.timestamp_column.clone(), qps: self.config.trace.qps_column.clone() }
    }
}

fn space_key(s: &SpaceSection) -> &'static str {
    if s.itr_values_us.is_some() {
        "itr_values_us"
    } else if s.dvfs_values_ghz.is_some() {
        "dvfs_values_ghz"
    } else {
        "itr_max_us"
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of `key` inside `[section]` (top level when `section` is empty), or
/// of the section header when the key is absent.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section && !key.is_empty() {
            let lhs = line.split('=').next().unwrap_or("").trim();
            if line.contains('=') && lhs == key {
                return Some(i + 1);
            }
        }
    }
    header
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_uses_defaults() {
        let exp = Experiment::parse("schema_version = 1\n").unwrap();
        assert_eq!(exp.space, ConfigSpace::default_grid());
        assert_eq!(exp.sla, SlaObjective::default());
        assert_eq!(exp.config.power, PowerModel::default());
        assert!(exp.profiles.contains_key("linux") && exp.profiles.contains_key("ebbrt"));
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let err = Experiment::parse("schema_version = 1\n[sla]\nbound_us = = 3\n").unwrap_err();
        assert_eq!(err.line, Some(3), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Experiment::parse("schema_version = 1\n\n[bayop]\nn_trails = 3\n").unwrap_err();
        assert_eq!(err.line, Some(4), "{err}");
        assert!(err.message.contains("n_trails"));
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let err = Experiment::parse("schema_version = 1\n[sla]\npercentile = 99\nbound_us = -5\n").unwrap_err();
        assert_eq!(err.line, Some(4), "{err}");

        let err = Experiment::parse("schema_version = 1\n[workload]\nos = \"plan9\"\n").unwrap_err();
        assert_eq!(err.line, Some(3));
        assert!(err.to_string().contains("plan9"));

        let err = Experiment::parse("schema_version = 2\n").unwrap_err();
        assert_eq!(err.line, Some(1));

        let err = Experiment::parse("schema_version = 1\n[bayop]\nn_trials = 4\nn_init = 6\n").unwrap_err();
        assert_eq!(err.line, Some(4));
    }

    #[test]
    fn missing_schema_version_is_an_error() {
        assert!(Experiment::parse("root_seed = 3\n").is_err());
    }

    #[test]
    fn explicit_lists_and_custom_profiles() {
        let text = r#"
schema_version = 1
[space]
itr_values_us = [0, 100]
dvfs_values_ghz = [1.5, 2.5]
[workload]
os = "tiny"
load_fraction = 0.5
[os_profiles.tiny]
per_interrupt_cycles = 100
per_request_cycles = 200
"#;
        let exp = Experiment::parse(text).unwrap();
        assert_eq!(exp.space.len(), 4);
        assert_eq!(exp.workload_os().per_kb_cycles, 0);
        let cap = capacity_qps(exp.workload_os(), &exp.config.workload.sizes, FrequencyGHz::new(2.5).unwrap());
        assert!((exp.offered_qps() - 0.5 * cap).abs() < 1e-9);
    }

    #[test]
    fn odd_itr_values_are_rejected() {
        let err = Experiment::parse("schema_version = 1\n[space]\nitr_values_us = [0, 3]\n").unwrap_err();
        assert_eq!(err.line, Some(3));
    }

    #[test]
    fn tagged_sections_round_trip() {
        let text = r#"
schema_version = 1
[trigger]
kind = "load_delta"
delta_fraction = 0.2
[control.load]
kind = "binned"
bin_seconds = 60
qps = [1000, 2000]
"#;
        let exp = Experiment::parse(text).unwrap();
        assert_eq!(exp.config.trigger, Some(TriggerPolicy::LoadDelta { delta_fraction: 0.2 }));
        assert!(matches!(exp.config.control.load, Some(LoadSchedule::Binned { .. })));
    }
}
