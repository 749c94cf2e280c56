//! Analytic per-request latency and energy model.
//!
//! Latency of one request is the DVFS-scaled work term plus the expected
//! wait behind the coalescing timer:
//!
//! ```text
//! dt = Z / f^(1 + alpha) + phi * itr            (us)
//! dJ = gamma * (phi * itr_seconds) * f^beta     (J)
//! ```
//!
//! The model assumes requests do not queue behind each other, so it is only
//! meant for light-to-moderate load.

mod fit;
mod surface;

pub use fit::{fit, heuristic_init, loss_and_gradient, FitConfig, FitResult, RestartSummary, Unconstrained};
pub use surface::ModelSurface;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Config, FrequencyGHz};
use crate::error::{Error, Result};

/// Free parameters of the latency/energy model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Work scale, us * GHz^(1+alpha).
    pub z: f64,
    /// DVFS dependence of the work term; -1 means none.
    pub alpha: f64,
    /// Mean position in the receive queue, as a fraction of the ITR-delay.
    pub phi: f64,
    /// Energy conversion, watts.
    pub gamma: f64,
    /// DVFS dependence of per-request energy.
    pub beta: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.z > 0.0
            && self.gamma > 0.0
            && (0.0..=1.0).contains(&self.phi)
            && self.alpha.is_finite()
            && self.beta.is_finite()
            && self.z.is_finite()
            && self.gamma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid model parameters {self:?}")))
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.z, self.alpha, self.phi, self.gamma, self.beta]
    }
}

fn checked_freq(f: FrequencyGHz) -> Result<f64> {
    let v = f.get();
    if v <= 0.0 {
        return Err(Error::Domain(format!("dvfs must be positive, got {v}")));
    }
    Ok(v)
}

/// Work term plus coalescing wait, in microseconds.
pub fn predict_latency(params: &ModelParams, config: &Config) -> Result<f64> {
    let f = checked_freq(config.dvfs)?;
    Ok(latency_at(params, f64::from(config.itr.0), f))
}

/// Energy per request, in joules. Zero when `itr` or `phi` is zero.
pub fn predict_energy(params: &ModelParams, config: &Config) -> Result<f64> {
    let f = checked_freq(config.dvfs)?;
    Ok(energy_at(params, f64::from(config.itr.0), f))
}

/// [`predict_energy`] with `itr` raised to `itr_floor_us`, matching what the
/// fit compares against observations.
pub fn predict_energy_floored(params: &ModelParams, config: &Config, itr_floor_us: f64) -> Result<f64> {
    let f = checked_freq(config.dvfs)?;
    Ok(energy_at(params, f64::from(config.itr.0).max(itr_floor_us), f))
}

pub(crate) fn latency_at(p: &ModelParams, itr_us: f64, f: f64) -> f64 {
    p.z / f.powf(1.0 + p.alpha) + p.phi * itr_us
}

pub(crate) fn energy_at(p: &ModelParams, itr_us: f64, f: f64) -> f64 {
    p.gamma * (p.phi * itr_us * 1e-6) * f.powf(p.beta)
}

/// One observed row: setting, tail latency (us) and energy (J).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub config: Config,
    pub tail_latency_us: f64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDataset {
    rows: Vec<FitRow>,
}

pub const MIN_FIT_ROWS: usize = 8;

impl FitDataset {
    pub fn new(rows: Vec<FitRow>) -> Result<Self> {
        if rows.len() < MIN_FIT_ROWS {
            return Err(Error::InsufficientData(format!(
                "{} rows, need at least {MIN_FIT_ROWS}",
                rows.len()
            )));
        }
        if let Some(r) = rows
            .iter()
            .find(|r| !(r.tail_latency_us > 0.0 && r.energy_j > 0.0) || !r.tail_latency_us.is_finite() || !r.energy_j.is_finite())
        {
            return Err(Error::invalid(format!("observations must be positive, got {r:?}")));
        }
        Ok(FitDataset { rows })
    }

    pub fn rows(&self) -> &[FitRow] {
        &self.rows
    }

    /// Reads `itr_us,dvfs_ghz,tail_latency_us,energy_j`; extra columns are
    /// ignored and rows with empty observations (unstable sweep rows) skipped.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::invalid(format!("missing column {name}")))
        };
        let (ci, cf, cl, ce) = (col("itr_us")?, col("dvfs_ghz")?, col("tail_latency_us")?, col("energy_j")?);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let get = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
            if get(cl).is_empty() || get(ce).is_empty() {
                continue;
            }
            let parse = |i: usize| -> Result<f64> {
                get(i).parse::<f64>().map_err(|e| Error::invalid(format!("bad value {:?}: {e}", get(i))))
            };
            let itr = get(ci).parse::<u32>().map_err(|e| Error::invalid(format!("bad itr {:?}: {e}", get(ci))))?;
            rows.push(FitRow {
                config: Config::new(itr, parse(cf)?)?,
                tail_latency_us: parse(cl)?,
                energy_j: parse(ce)?,
            });
        }
        FitDataset::new(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(z: f64, alpha: f64, phi: f64, gamma: f64, beta: f64) -> ModelParams {
        ModelParams { z, alpha, phi, gamma, beta }
    }

    #[test]
    fn latency_examples() {
        let p = params(200.0, -1.0, 0.0, 1.0, 1.0);
        for f in [1.3, 2.0, 2.9] {
            let v = predict_latency(&p, &Config::new(0, f).unwrap()).unwrap();
            assert!((v - 200.0).abs() < 1e-12);
        }
        let p = params(100.0, 0.0, 0.25, 1.0, 1.0);
        assert!((predict_latency(&p, &Config::new(100, 2.0).unwrap()).unwrap() - 75.0).abs() < 1e-12);
        let p = params(100.0, 0.0, 0.0, 1.0, 1.0);
        assert!((predict_latency(&p, &Config::new(0, 2.0).unwrap()).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn energy_examples() {
        let p = params(1.0, 0.0, 0.5, 0.01, 2.0);
        let e = predict_energy(&p, &Config::new(100, 2.0).unwrap()).unwrap();
        assert!((e - 2e-6).abs() < 1e-18);

        let p = params(1.0, 0.0, 1.0, 1.0, 0.0);
        for f in [1.2, 2.0, 3.0] {
            let e = predict_energy(&p, &Config::new(10, f).unwrap()).unwrap();
            assert!((e - 1e-5).abs() < 1e-18);
        }

        let p = params(1.0, 0.0, 0.0, 1.0, 2.0);
        assert_eq!(predict_energy(&p, &Config::new(300, 2.5).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn dataset_needs_eight_positive_rows() {
        let row = FitRow { config: Config::new(10, 2.0).unwrap(), tail_latency_us: 10.0, energy_j: 1.0 };
        assert!(matches!(FitDataset::new(vec![row; 3]), Err(Error::InsufficientData(_))));
        let mut rows = vec![row; 8];
        assert!(FitDataset::new(rows.clone()).is_ok());
        rows[3].energy_j = 0.0;
        assert!(FitDataset::new(rows).is_err());
    }

    proptest! {
        #[test]
        fn latency_monotone(z in 1.0f64..500.0, alpha in -0.99f64..2.0, phi in 0.0f64..1.0,
                            i1 in 0u32..500, i2 in 0u32..500, f1 in 1.0f64..3.5, f2 in 1.0f64..3.5) {
            let p = params(z, alpha, phi, 1.0, 1.0);
            let (ilo, ihi) = (i1.min(i2), i1.max(i2));
            let (flo, fhi) = (f1.min(f2), f1.max(f2));
            let lat = |i, f| predict_latency(&p, &Config::new(i, f).unwrap()).unwrap();
            prop_assert!(lat(ilo, flo) <= lat(ihi, flo) + 1e-9);
            let (a, b) = (lat(ilo, FrequencyGHz::new(flo).unwrap().get()), lat(ilo, FrequencyGHz::new(fhi).unwrap().get()));
            prop_assert!(b <= a + 1e-9);
        }

        #[test]
        fn energy_sign_and_linearity(beta in -3.0f64..3.0, itr in 1u32..500, f1 in 1.0f64..3.5, f2 in 1.0f64..3.5) {
            let p = params(100.0, 0.0, 0.5, 0.1, beta);
            let cfg1 = Config::new(itr, f1).unwrap();
            let cfg2 = Config::new(itr, f2).unwrap();
            let (e1, e2) = (predict_energy(&p, &cfg1).unwrap(), predict_energy(&p, &cfg2).unwrap());
            let df = cfg2.dvfs.get() - cfg1.dvfs.get();
            if df != 0.0 && beta.abs() > 1e-9 {
                prop_assert_eq!((e2 - e1).signum() * df.signum(), beta.signum());
            }
            let double = predict_energy(&p, &Config::new(itr * 2, f1).unwrap()).unwrap();
            prop_assert!((double - 2.0 * e1).abs() <= 1e-12 * e1.abs().max(1e-30));
        }
    }
}
