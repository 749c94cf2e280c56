//! Load traces: parsing, hourly binning, scaling and replay.

mod replay;

pub use replay::{
    default_systems, replay, write_summary_json, Fingerprint, ReplayOutcome, ReplaySetup, ReplaySystem, SystemKind, SystemRun,
    SystemSummary, ReplaySummary,
};

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// The synthetic 24 h trace shipped with the crate (one row per minute).
pub const BUNDLED_TRACE: &str = include_str!("../../data/diurnal_trace.csv");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp_s: f64,
    pub qps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrace {
    pub records: Vec<TraceRecord>,
    /// Rows skipped because a field was missing, unparsable or negative.
    pub malformed: usize,
}

/// Column names to read; the default is `timestamp_s,qps`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceColumns {
    pub timestamp: String,
    pub qps: String,
}

impl Default for TraceColumns {
    fn default() -> Self {
        TraceColumns { timestamp: "timestamp_s".into(), qps: "qps".into() }
    }
}

pub fn parse_trace(path: &Path) -> Result<ParsedTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Trace(format!("{}: {e}", path.display())))?;
    parse_trace_str(&text, &TraceColumns::default())
}

pub fn parse_trace_str(text: &str, cols: &TraceColumns) -> Result<ParsedTrace> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Trace(e.to_string()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Trace(format!("missing column {name}")))
    };
    let (ti, qi) = (find(&cols.timestamp)?, find(&cols.qps)?);
    let mut records = Vec::new();
    let mut malformed = 0;
    for rec in rdr.records() {
        let parsed = rec.ok().and_then(|r| {
            let t: f64 = r.get(ti)?.trim().parse().ok()?;
            let q: f64 = r.get(qi)?.trim().parse().ok()?;
            (t.is_finite() && q.is_finite() && t >= 0.0 && q >= 0.0).then_some(TraceRecord { timestamp_s: t, qps: q })
        });
        match parsed {
            Some(r) => records.push(r),
            None => malformed += 1,
        }
    }
    if malformed > 0 {
        log::warn!("trace: skipped {malformed} malformed rows");
    }
    if records.is_empty() {
        return Err(Error::Trace("no valid rows".into()));
    }
    records.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
    Ok(ParsedTrace { records, malformed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub index: usize,
    pub mean_qps: f64,
    /// No records fell in this bin; the value was copied from a neighbour.
    pub filled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedTrace {
    pub bin_seconds: f64,
    pub bins: Vec<Bin>,
}

impl BinnedTrace {
    pub fn from_means(bin_seconds: f64, means: &[f64]) -> Self {
        let bins = means.iter().enumerate().map(|(index, &mean_qps)| Bin { index, mean_qps, filled: false }).collect();
        BinnedTrace { bin_seconds, bins }
    }

    pub fn means(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.mean_qps).collect()
    }

    pub fn peak(&self) -> f64 {
        self.bins.iter().map(|b| b.mean_qps).fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.bins.iter().map(|b| b.mean_qps).sum::<f64>() / self.bins.len() as f64
    }

    pub fn horizon_s(&self) -> f64 {
        self.bin_seconds * self.bins.len() as f64
    }
}

/// Bin `k` covers `[k*bin, (k+1)*bin)` counted from t=0. Empty bins take the
/// previous bin's mean; a leading empty bin takes the first non-empty one.
pub fn bin_hourly(records: &[TraceRecord], bin_seconds: f64) -> Result<BinnedTrace> {
    if records.is_empty() {
        return Err(Error::Trace("no records to bin".into()));
    }
    if !(bin_seconds > 0.0) || !bin_seconds.is_finite() {
        return Err(Error::invalid("bin_seconds must be positive"));
    }
    let last = records.iter().map(|r| r.timestamp_s).fold(0.0, f64::max);
    let n = (last / bin_seconds).floor() as usize + 1;
    let mut sums = vec![(0.0, 0usize); n];
    for r in records {
        let k = (r.timestamp_s / bin_seconds).floor() as usize;
        sums[k].0 += r.qps;
        sums[k].1 += 1;
    }
    let mut bins: Vec<Bin> = sums
        .iter()
        .enumerate()
        .map(|(index, &(s, c))| Bin { index, mean_qps: if c > 0 { s / c as f64 } else { f64::NAN }, filled: c == 0 })
        .collect();
    let first = bins.iter().position(|b| !b.filled).expect("at least one record");
    for k in 0..n {
        if bins[k].filled {
            bins[k].mean_qps = if k < first { bins[first].mean_qps } else { bins[k - 1].mean_qps };
        }
    }
    let filled = bins.iter().filter(|b| b.filled).count();
    if filled > 0 {
        log::warn!("trace: {filled} empty bins filled from neighbours");
    }
    Ok(BinnedTrace { bin_seconds, bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleAnchor {
    /// The busiest bin lands on the target.
    #[default]
    Peak,
    /// The average bin lands on the target.
    Mean,
}

pub fn scale_trace(binned: &BinnedTrace, target_peak_qps: f64) -> Result<BinnedTrace> {
    scale_trace_by(binned, target_peak_qps, ScaleAnchor::Peak)
}

pub fn scale_trace_by(binned: &BinnedTrace, target_qps: f64, anchor: ScaleAnchor) -> Result<BinnedTrace> {
    if !(target_qps > 0.0) || !target_qps.is_finite() {
        return Err(Error::invalid("scale target must be positive"));
    }
    let reference = match anchor {
        ScaleAnchor::Peak => binned.peak(),
        ScaleAnchor::Mean => binned.mean(),
    };
    if !(reference > 0.0) {
        return Err(Error::Trace("cannot scale an all-zero trace".into()));
    }
    let k = target_qps / reference;
    let mut out = binned.clone();
    for b in &mut out.bins {
        b.mean_qps *= k;
    }
    Ok(out)
}

/// Scales raw records by a factor (useful before binning).
pub fn scale_records(records: &[TraceRecord], factor: f64) -> Vec<TraceRecord> {
    records.iter().map(|r| TraceRecord { qps: r.qps * factor, ..*r }).collect()
}

/// Sinusoidal day with multiplicative Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiurnalSpec {
    pub hours: usize,
    pub samples_per_hour: usize,
    pub mean_qps: f64,
    /// Peak-to-mean swing as a fraction of the mean.
    pub amplitude: f64,
    pub peak_hour: f64,
    /// Relative std-dev of per-sample noise.
    pub noise: f64,
}

impl Default for DiurnalSpec {
    fn default() -> Self {
        DiurnalSpec { hours: 24, samples_per_hour: 60, mean_qps: 50_000.0, amplitude: 0.6, peak_hour: 15.0, noise: 0.05 }
    }
}

pub fn synthetic_diurnal(spec: &DiurnalSpec, root_seed: u64) -> Result<Vec<TraceRecord>> {
    if spec.hours == 0 || spec.samples_per_hour == 0 || !(spec.mean_qps > 0.0) || !(0.0..1.0).contains(&spec.amplitude) {
        return Err(Error::invalid("diurnal spec: need hours, samples, mean > 0 and 0 <= amplitude < 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(root_seed, &[seed::stream::TRACE]));
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let step = 3600.0 / spec.samples_per_hour as f64;
    let n = spec.hours * spec.samples_per_hour;
    Ok((0..n)
        .map(|i| {
            let t = i as f64 * step;
            let phase = 2.0 * std::f64::consts::PI * (t / 3600.0 - spec.peak_hour) / 24.0;
            let base = spec.mean_qps * (1.0 + spec.amplitude * phase.cos());
            let q = (base * (1.0 + noise.sample(&mut rng))).max(0.0);
            TraceRecord { timestamp_s: t, qps: q.round() }
        })
        .collect())
}

pub fn write_trace_csv<W: Write>(records: &[TraceRecord], mut out: W) -> Result<()> {
    writeln!(out, "timestamp_s,qps")?;
    for r in records {
        writeln!(out, "{},{}", r.timestamp_s, r.qps)?;
    }
    Ok(())
}
