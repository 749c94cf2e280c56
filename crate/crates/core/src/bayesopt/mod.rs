//! Fixed-budget Bayesian optimization over the knob grid.
//!
//! A handful of Latin-hypercube trials seed a GP fitted to `ln(Rp)`; every
//! later trial measures the grid point with the highest expected improvement.

mod acquisition;
mod gp;
mod penalty;

pub use acquisition::{expected_improvement, expected_improvement_from, suggest_next, MAX_CANDIDATES};
pub use gp::{GpHyper, GpSurrogate, LENGTH_SCALE_GRID, NOISE_GRID};
pub use penalty::{penalty, penalty_latency_only, PenaltyKind};

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::SystemUnderControl;
use crate::domain::{Config, ConfigSpace, FrequencyGHz, ItrDelayMicros, Measurement, SlaObjective};
use crate::error::{Error, Result};
use crate::seed;

/// Which knobs the optimizer may move; the other one stays at its anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knobs {
    #[default]
    Both,
    ItrOnly,
    DvfsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BayOpConfig {
    pub n_trials: usize,
    pub n_init: usize,
    pub seed: u64,
    pub knobs: Knobs,
    /// ITR-delay held fixed under `dvfs_only`; defaults to the grid minimum.
    pub itr_anchor_us: Option<u32>,
    /// Frequency held fixed under `itr_only`; defaults to the grid maximum.
    pub dvfs_anchor_ghz: Option<f64>,
    /// Measurement window per trial, seconds.
    pub trial_window_s: f64,
    pub penalty: PenaltyKind,
}

impl Default for BayOpConfig {
    fn default() -> Self {
        BayOpConfig {
            n_trials: 30,
            n_init: 8,
            seed: 0,
            knobs: Knobs::Both,
            itr_anchor_us: None,
            dvfs_anchor_ghz: None,
            trial_window_s: 1.0,
            penalty: PenaltyKind::SlaEnergy,
        }
    }
}

impl BayOpConfig {
    /// `n_init == n_trials` is accepted and means pure quasi-random search.
    pub fn validate(&self) -> Result<()> {
        if self.n_init < 1 || self.n_init > self.n_trials {
            return Err(Error::invalid(format!(
                "bayop: need 1 <= n_init <= n_trials, got n_init={} n_trials={}",
                self.n_init, self.n_trials
            )));
        }
        if !(self.trial_window_s > 0.0) || !self.trial_window_s.is_finite() {
            return Err(Error::invalid("bayop: trial_window_s must be positive"));
        }
        Ok(())
    }

    /// Grid points the optimizer may propose, in grid order.
    pub fn candidates(&self, space: &ConfigSpace) -> Result<Vec<Config>> {
        let itr_anchor = ItrDelayMicros(self.itr_anchor_us.unwrap_or(space.itr_min().0));
        let dvfs_anchor = match self.dvfs_anchor_ghz {
            Some(g) => FrequencyGHz::new(g)?,
            None => space.f_max(),
        };
        let all = crate::domain::enumerate_grid(space);
        let out: Vec<Config> = match self.knobs {
            Knobs::Both => all,
            Knobs::ItrOnly => all.into_iter().filter(|c| c.dvfs == dvfs_anchor).collect(),
            Knobs::DvfsOnly => all.into_iter().filter(|c| c.itr == itr_anchor).collect(),
        };
        if out.is_empty() {
            return Err(Error::invalid(format!(
                "bayop: anchor ({itr_anchor}, {dvfs_anchor}) is not on the config grid"
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: Config,
    /// `None` when the measurement failed.
    pub measurement: Option<Measurement>,
    /// `+inf` for failed trials.
    pub penalty: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayOptOutcome {
    pub best: Config,
    pub best_penalty: f64,
    pub best_index: usize,
    pub trials: Vec<Trial>,
}

impl BayOptOutcome {
    /// Best penalty after each trial.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.trials
            .iter()
            .scan(f64::INFINITY, |b, t| {
                *b = b.min(t.penalty);
                Some(*b)
            })
            .collect()
    }
}

/// Latin-hypercube indices over `candidates` (grid order, so the axes are
/// recoverable from the distinct itr and dvfs values present).
fn latin_hypercube(candidates: &[Config], n: usize, rng: &mut ChaCha8Rng) -> Vec<Config> {
    let mut itrs: Vec<ItrDelayMicros> = candidates.iter().map(|c| c.itr).collect();
    itrs.dedup();
    let mut fs: Vec<FrequencyGHz> = candidates.iter().map(|c| c.dvfs).collect();
    fs.sort_by(|a, b| a.get().total_cmp(&b.get()));
    fs.dedup();
    let mut strata = |len: usize| -> Vec<usize> {
        let mut picks: Vec<usize> = (0..n)
            .map(|k| {
                let (lo, hi) = stratum(k, n, len);
                rng.random_range(lo..hi)
            })
            .collect();
        picks.shuffle(rng);
        picks
    };
    let ii = strata(itrs.len());
    let fi = strata(fs.len());
    ii.into_iter()
        .zip(fi)
        .map(|(i, f)| Config { itr: itrs[i], dvfs: fs[f] })
        .collect()
}

/// Index range of stratum `k` of `n` over `len` grid values; strata repeat
/// when there are fewer values than strata.
fn stratum(k: usize, n: usize, len: usize) -> (usize, usize) {
    let lo = k * len / n;
    let hi = ((k + 1) * len / n).max(lo + 1).min(len);
    (lo.min(len - 1), hi)
}

fn log_target(rp: f64) -> f64 {
    rp.max(f64::MIN_POSITIVE).ln()
}

/// Runs `cfg.n_trials` sequential trials against `system` and leaves it on the
/// best config found. Fails only when every trial failed.
pub fn run_bayopt(
    system: &mut dyn SystemUnderControl,
    sla: &SlaObjective,
    cfg: &BayOpConfig,
    space: &ConfigSpace,
) -> Result<BayOptOutcome> {
    let trials = run_trials(system, sla, cfg, space)?;
    let best_index = best_trial(&trials).ok_or_else(|| Error::Measurement(format!("all {} trials failed", trials.len())))?;
    let (best, best_penalty) = (trials[best_index].config, trials[best_index].penalty);
    system.apply(best)?;
    Ok(BayOptOutcome { best, best_penalty, best_index, trials })
}

/// Index of the lowest finite penalty; the earliest wins ties.
pub fn best_trial(trials: &[Trial]) -> Option<usize> {
    trials
        .iter()
        .enumerate()
        .filter(|(_, t)| t.penalty.is_finite())
        .min_by(|a, b| a.1.penalty.total_cmp(&b.1.penalty).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

/// The search itself: the system is left on the last trial's config.
pub fn run_trials(
    system: &mut dyn SystemUnderControl,
    sla: &SlaObjective,
    cfg: &BayOpConfig,
    space: &ConfigSpace,
) -> Result<Vec<Trial>> {
    cfg.validate()?;
    sla.validate()?;
    let candidates = cfg.candidates(space)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[seed::stream::BAYOPT]));
    let init = latin_hypercube(&candidates, cfg.n_init, &mut rng);

    let mut trials: Vec<Trial> = Vec::with_capacity(cfg.n_trials);
    let mut seen: HashSet<Config> = HashSet::new();
    for t in 0..cfg.n_trials {
        let config = if t < cfg.n_init {
            init[t]
        } else {
            next_guided(&trials, &candidates, &seen, space, cfg, t, &mut rng)?
        };
        seen.insert(config);
        trials.push(run_trial(system, sla, cfg, t, config));
    }
    Ok(trials)
}

fn run_trial(system: &mut dyn SystemUnderControl, sla: &SlaObjective, cfg: &BayOpConfig, index: usize, config: Config) -> Trial {
    let measured = system
        .apply(config)
        .and_then(|_| system.measure(cfg.trial_window_s))
        .and_then(|m| m.validate().map(|_| m));
    match measured {
        Ok(m) => Trial { index, config, measurement: Some(m), penalty: cfg.penalty.evaluate(&m, sla), error: None },
        Err(e) => {
            log::warn!("trial {index} at {config} failed: {e}");
            Trial { index, config, measurement: None, penalty: f64::INFINITY, error: Some(e.to_string()) }
        }
    }
}

fn next_guided(
    trials: &[Trial],
    candidates: &[Config],
    seen: &HashSet<Config>,
    space: &ConfigSpace,
    cfg: &BayOpConfig,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Config> {
    let unseen: Vec<Config> = candidates.iter().copied().filter(|c| !seen.contains(c)).collect();
    let pool = if unseen.is_empty() { candidates } else { &unseen[..] };

    let finite: Vec<f64> = trials.iter().filter(|t| t.penalty.is_finite()).map(|t| log_target(t.penalty)).collect();
    if finite.is_empty() {
        return Ok(pool[rng.random_range(0..pool.len())]);
    }
    let worst = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let best = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let xs: Vec<[f64; 2]> = trials.iter().map(|t| space.normalize(&t.config)).collect();
    let ys: Vec<f64> = trials
        .iter()
        .map(|t| if t.penalty.is_finite() { log_target(t.penalty) } else { worst + 1.0 })
        .collect();
    let gp = GpSurrogate::fit(&xs, &ys)?;
    suggest_next(&gp, pool, space, best, seed::derive(cfg.seed, &[seed::stream::SUBSAMPLE, t as u64]))
}

pub const TRIAL_CSV_HEADER: &str = "trial,itr_us,dvfs_ghz,tail_latency_us,energy_j,penalty,applied";

/// Trial history; `applied` marks the trial whose config was left in place.
pub fn write_trials_csv<W: Write>(outcome: &BayOptOutcome, mut out: W) -> Result<()> {
    writeln!(out, "{TRIAL_CSV_HEADER}")?;
    for t in &outcome.trials {
        let applied = t.index == outcome.best_index;
        match &t.measurement {
            Some(m) => writeln!(
                out,
                "{},{},{},{},{},{},{}",
                t.index, t.config.itr, t.config.dvfs, m.tail_latency_us, m.energy_joules, t.penalty, applied
            )?,
            None => writeln!(out, "{},{},{},,,inf,{}", t.index, t.config.itr, t.config.dvfs, applied)?,
        }
    }
    Ok(())
}

pub fn write_trials_csv_file(outcome: &BayOptOutcome, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_trials_csv(outcome, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelParams, ModelSurface};

    fn surface() -> ModelSurface {
        let p = ModelParams { z: 150.0, alpha: 0.3, phi: 0.4, gamma: 0.02, beta: 2.1 };
        ModelSurface::new(p, 95_000.0, 40.0)
    }

    fn space() -> ConfigSpace {
        ConfigSpace::stepped(400, 2, 1.3, 3.0, 0.1).unwrap()
    }

    /// Scripted system: fails whenever the config's itr is listed.
    struct Flaky {
        inner: ModelSurface,
        bad_itr: Vec<u32>,
        current: Option<Config>,
    }

    impl SystemUnderControl for Flaky {
        fn apply(&mut self, config: Config) -> Result<()> {
            self.current = Some(config);
            self.inner.apply(config)
        }
        fn measure(&mut self, w: f64) -> Result<Measurement> {
            match self.current {
                Some(c) if self.bad_itr.contains(&c.itr.0) => Err(Error::Measurement("scripted failure".into())),
                _ => self.inner.measure(w),
            }
        }
        fn describe(&self) -> String {
            "flaky".into()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let sla = SlaObjective::new(99.0, 200.0).unwrap();
        let cfg = BayOpConfig { seed: 5, n_trials: 14, ..BayOpConfig::default() };
        let a = run_bayopt(&mut surface(), &sla, &cfg, &space()).unwrap();
        let b = run_bayopt(&mut surface(), &sla, &cfg, &space()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials.len(), 14);
    }

    #[test]
    fn best_so_far_never_increases_and_best_is_argmin() {
        let sla = SlaObjective::new(99.0, 200.0).unwrap();
        let cfg = BayOpConfig { seed: 2, ..BayOpConfig::default() };
        let out = run_bayopt(&mut surface(), &sla, &cfg, &space()).unwrap();
        let bsf = out.best_so_far();
        assert!(bsf.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*bsf.last().unwrap(), out.best_penalty);
        assert_eq!(out.trials[out.best_index].config, out.best);
    }

    #[test]
    fn pure_quasi_random_budget() {
        let sla = SlaObjective::default();
        let cfg = BayOpConfig { n_trials: 8, n_init: 8, seed: 1, ..BayOpConfig::default() };
        let out = run_bayopt(&mut surface(), &sla, &cfg, &space()).unwrap();
        let min = out.trials.iter().map(|t| t.penalty).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_penalty, min);
        assert!(BayOpConfig { n_init: 0, ..cfg.clone() }.validate().is_err());
        assert!(BayOpConfig { n_init: 9, ..cfg }.validate().is_err());
    }

    #[test]
    fn latin_hypercube_covers_each_stratum_once() {
        let cands = crate::domain::enumerate_grid(&space());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = latin_hypercube(&cands, 8, &mut rng);
        let which = |idx: usize, len: usize| (0..8).find(|&k| (stratum(k, 8, len).0..stratum(k, 8, len).1).contains(&idx)).unwrap();
        let mut itr_strata: Vec<usize> = pts.iter().map(|c| which(c.itr.0 as usize / 2, 201)).collect();
        let mut f_strata: Vec<usize> = pts.iter().map(|c| which(((c.dvfs.mhz() - 1300) / 100) as usize, 18)).collect();
        itr_strata.sort();
        f_strata.sort();
        assert_eq!(itr_strata, (0..8).collect::<Vec<_>>());
        assert_eq!(f_strata, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn single_knob_restrictions_hold_the_anchor() {
        let sla = SlaObjective::new(99.0, 200.0).unwrap();
        let cfg = BayOpConfig { knobs: Knobs::DvfsOnly, itr_anchor_us: Some(40), seed: 4, ..BayOpConfig::default() };
        let out = run_bayopt(&mut surface(), &sla, &cfg, &space()).unwrap();
        assert!(out.trials.iter().all(|t| t.config.itr.0 == 40));

        let cfg = BayOpConfig { knobs: Knobs::ItrOnly, seed: 4, ..BayOpConfig::default() };
        let out = run_bayopt(&mut surface(), &sla, &cfg, &space()).unwrap();
        assert!(out.trials.iter().all(|t| t.config.dvfs.mhz() == 3000));

        let cfg = BayOpConfig { knobs: Knobs::DvfsOnly, itr_anchor_us: Some(41), ..BayOpConfig::default() };
        assert!(run_bayopt(&mut surface(), &sla, &cfg, &space()).is_err());
    }

    #[test]
    fn failed_trials_score_infinity_and_loop_continues() {
        let sla = SlaObjective::new(99.0, 200.0).unwrap();
        let bad_itr: Vec<u32> = (0..=400).step_by(2).filter(|i| i % 4 == 0).collect();
        let mut sys = Flaky { inner: surface(), bad_itr, current: None };
        let cfg = BayOpConfig { seed: 8, n_trials: 16, ..BayOpConfig::default() };
        let out = run_bayopt(&mut sys, &sla, &cfg, &space()).unwrap();
        assert_eq!(out.trials.len(), 16);
        for t in &out.trials {
            assert_eq!(t.measurement.is_none(), t.config.itr.0 % 4 == 0);
            if t.measurement.is_none() {
                assert_eq!(t.penalty, f64::INFINITY);
            }
        }
        assert!(out.best_penalty.is_finite());
        assert_eq!(sys.current, Some(out.best));
    }

    #[test]
    fn all_failures_is_an_error() {
        let sla = SlaObjective::default();
        let mut sys = Flaky { inner: surface(), bad_itr: (0..=400).collect(), current: None };
        let cfg = BayOpConfig { n_trials: 10, ..BayOpConfig::default() };
        assert!(run_bayopt(&mut sys, &sla, &cfg, &space()).is_err());
    }

    #[test]
    fn trial_csv_marks_the_applied_row() {
        let sla = SlaObjective::default();
        let cfg = BayOpConfig { n_trials: 10, seed: 3, ..BayOpConfig::default() };
        let out = run_bayopt(&mut surface(), &sla, &cfg, &space()).unwrap();
        let mut buf = Vec::new();
        write_trials_csv(&out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRIAL_CSV_HEADER);
        assert_eq!(lines.len(), 11);
        assert_eq!(lines.iter().filter(|l| l.ends_with(",true")).count(), 1);
    }
}
