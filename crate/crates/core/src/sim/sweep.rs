use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_sim_with, OsProfile, PowerModel, SimOptions, WorkloadSpec};
use crate::domain::{meets_sla, nearest_rank_percentile, Config, Measurement, SlaObjective};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub repetitions: usize,
    pub root_seed: u64,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub jobs: Option<usize>,
    pub sim: SimOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { repetitions: 1, root_seed: 0, jobs: None, sim: SimOptions::default() }
    }
}

/// Seed of repetition `rep`. It depends only on the root and the repetition,
/// so every config in a sweep sees the same arrival stream per repetition and
/// any single row can be rerun in isolation.
pub fn sweep_seed(root_seed: u64, rep: usize) -> u64 {
    seed::derive(root_seed, &[seed::stream::SWEEP_REP, rep as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Unstable(String),
}

/// One swept config, aggregated over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: Config,
    /// Pooled-sample tail latency and mean energy; `None` when unstable.
    pub measurement: Option<Measurement>,
    pub sla_ok: bool,
    pub interrupts: f64,
    pub instructions_proxy: f64,
    pub elapsed_seconds: f64,
    pub throughput: f64,
    /// Relative std-dev of energy across repetitions.
    pub energy_rel_std: f64,
    pub status: RowStatus,
}

pub fn sweep(
    configs: &[Config],
    workload: &WorkloadSpec,
    os: &OsProfile,
    power: &PowerModel,
    sla: &SlaObjective,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if opts.repetitions == 0 {
        return Err(Error::invalid("sweep needs at least one repetition"));
    }
    sla.validate()?;
    workload.validate()?;
    os.validate()?;
    power.validate()?;
    let work = || -> Vec<SweepRow> { configs.par_iter().map(|c| sweep_one(*c, workload, os, power, sla, opts)).collect() };
    match opts.jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::invalid(e.to_string()))?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

fn sweep_one(
    config: Config,
    workload: &WorkloadSpec,
    os: &OsProfile,
    power: &PowerModel,
    sla: &SlaObjective,
    opts: &SweepOptions,
) -> SweepRow {
    let r = opts.repetitions as f64;
    let mut pooled = Vec::new();
    let mut energies = Vec::with_capacity(opts.repetitions);
    let (mut interrupts, mut instr, mut elapsed, mut served, mut throughput) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for rep in 0..opts.repetitions {
        let mut w = workload.clone();
        w.seed = sweep_seed(opts.root_seed, rep);
        match run_sim_with(&w, config, os, power, &opts.sim) {
            Ok(res) => {
                energies.push(res.energy_joules);
                interrupts += res.interrupt_count as f64;
                instr += res.instructions_proxy as f64;
                elapsed += res.elapsed_seconds;
                served += res.served as f64;
                throughput += res.throughput;
                pooled.extend_from_slice(&res.latency_samples_us);
            }
            Err(e) => return unstable_row(config, e.to_string()),
        }
    }
    let tail = match nearest_rank_percentile(&pooled, sla.percentile) {
        Ok(t) => t,
        Err(e) => return unstable_row(config, e.to_string()),
    };
    let mean_e = energies.iter().sum::<f64>() / r;
    let var = energies.iter().map(|e| (e - mean_e).powi(2)).sum::<f64>() / r;
    let m = Measurement {
        tail_latency_us: tail,
        energy_joules: mean_e,
        window_seconds: elapsed / r,
        observed_qps: served / elapsed,
    };
    SweepRow {
        config,
        measurement: Some(m),
        sla_ok: meets_sla(&m, sla),
        interrupts: interrupts / r,
        instructions_proxy: instr / r,
        elapsed_seconds: elapsed / r,
        throughput: throughput / r,
        energy_rel_std: if mean_e > 0.0 { var.sqrt() / mean_e } else { 0.0 },
        status: RowStatus::Ok,
    }
}

fn unstable_row(config: Config, msg: String) -> SweepRow {
    SweepRow {
        config,
        measurement: None,
        sla_ok: false,
        interrupts: 0.0,
        instructions_proxy: 0.0,
        elapsed_seconds: 0.0,
        throughput: 0.0,
        energy_rel_std: 0.0,
        status: RowStatus::Unstable(msg),
    }
}

pub const SWEEP_CSV_HEADER: &str = "itr_us,dvfs_ghz,tail_latency_us,energy_j,sla_ok,interrupts,instructions_proxy";

/// Writes the sweep CSV; unstable rows keep their config with empty
/// measurement columns.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        match &r.measurement {
            Some(m) => writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.config.itr, r.config.dvfs, m.tail_latency_us, m.energy_joules, r.sla_ok, r.interrupts, r.instructions_proxy
            )?,
            None => writeln!(out, "{},{},,,false,,", r.config.itr, r.config.dvfs)?,
        }
    }
    Ok(())
}

pub fn write_sweep_csv_file(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_sweep_csv(rows, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}
