use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::governor::{DvfsPolicy, DynamicPolicy, ItrPolicy};
use super::{OsProfile, PowerModel, SimResult, WorkloadMode, WorkloadSpec};
use crate::domain::{Config, FrequencyGHz, ItrDelayMicros};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    /// Pending-request count that declares the config unstable.
    pub queue_cap: usize,
    pub policy: DynamicPolicy,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { queue_cap: 1_000_000, policy: DynamicPolicy::fixed() }
    }
}

/// Runs one workload against a fixed config.
pub fn run_sim(workload: &WorkloadSpec, config: Config, os: &OsProfile, power: &PowerModel) -> Result<SimResult> {
    run_sim_with(workload, config, os, power, &SimOptions::default())
}

pub fn run_sim_with(
    workload: &WorkloadSpec,
    config: Config,
    os: &OsProfile,
    power: &PowerModel,
    opts: &SimOptions,
) -> Result<SimResult> {
    workload.validate()?;
    os.validate()?;
    power.validate()?;
    let mut sim = Engine::new(workload, config, os, power, opts);
    match workload.mode {
        WorkloadMode::Open => sim.run_open()?,
        WorkloadMode::Closed => sim.run_closed(),
    }
    Ok(sim.finish())
}

/// CPU state accounting. Time only moves forward through `idle_until` and
/// `run`; every segment is charged at its state's power as it is recorded.
struct Cpu<'a> {
    power: &'a PowerModel,
    free_at: f64,
    busy: f64,
    idle: f64,
    sleep: f64,
    energy: f64,
    busy_by_freq: Vec<(FrequencyGHz, f64)>,
}

impl<'a> Cpu<'a> {
    fn new(power: &'a PowerModel) -> Self {
        Cpu { power, free_at: 0.0, busy: 0.0, idle: 0.0, sleep: 0.0, energy: 0.0, busy_by_freq: Vec::new() }
    }

    fn charge_idle(&mut self, secs: f64) {
        self.idle += secs;
        self.energy += secs * self.power.p_idle;
    }

    fn charge_sleep(&mut self, secs: f64) {
        self.sleep += secs;
        self.energy += secs * self.power.p_sleep;
    }

    /// Idles (and possibly sleeps) until `t`; returns when work can start.
    fn idle_until(&mut self, t: f64) -> f64 {
        if t <= self.free_at {
            return self.free_at;
        }
        let gap = t - self.free_at;
        let entry = self.power.sleep_entry_idle_us * 1e-6;
        let start = if self.power.sleep_enabled && gap > entry {
            let wake = self.power.wake_latency_us * 1e-6;
            self.charge_idle(entry);
            self.charge_sleep(gap - entry);
            self.charge_idle(wake);
            t + wake
        } else {
            self.charge_idle(gap);
            t
        };
        self.free_at = start;
        start
    }

    /// Executes `cycles` starting at `start` (>= free_at); returns completion time.
    fn run(&mut self, start: f64, cycles: f64, f: FrequencyGHz) -> f64 {
        debug_assert!(start >= self.free_at);
        let secs = cycles / f.hz();
        self.busy += secs;
        self.energy += secs * self.power.active_watts(f);
        match self.busy_by_freq.iter_mut().find(|(g, _)| *g == f) {
            Some((_, s)) => *s += secs,
            None => {
                self.busy_by_freq.push((f, secs));
                self.busy_by_freq.sort_by(|a, b| a.0.get().total_cmp(&b.0.get()));
            }
        }
        self.free_at = start + secs;
        self.free_at
    }

    /// Idle out to `end` without a wake-up.
    fn close(&mut self, end: f64) {
        if end <= self.free_at {
            return;
        }
        let gap = end - self.free_at;
        let entry = self.power.sleep_entry_idle_us * 1e-6;
        if self.power.sleep_enabled && gap > entry {
            self.charge_idle(entry);
            self.charge_sleep(gap - entry);
        } else {
            self.charge_idle(gap);
        }
        self.free_at = end;
    }
}

/// Window statistics feeding the dynamic policies.
struct Governors<'a> {
    policy: &'a DynamicPolicy,
    itr: ItrDelayMicros,
    freq: FrequencyGHz,
    itr_next_s: f64,
    itr_bytes: f64,
    itr_pkts: f64,
    dvfs_next_s: f64,
    dvfs_busy: f64,
}

impl<'a> Governors<'a> {
    fn new(policy: &'a DynamicPolicy, config: Config) -> Self {
        let itr_next_s = match &policy.itr {
            ItrPolicy::Adaptive(a) => a.window_us * 1e-6,
            ItrPolicy::Static => f64::INFINITY,
        };
        let dvfs_next_s = match &policy.dvfs {
            DvfsPolicy::Ondemand { governor, .. } => governor.sampling_ms * 1e-3,
            DvfsPolicy::Static => f64::INFINITY,
        };
        let (itr, freq) = match (&policy.itr, &policy.dvfs) {
            (ItrPolicy::Adaptive(a), _) => (ItrDelayMicros(a.latency_itr_us), config.dvfs),
            _ => (config.itr, config.dvfs),
        };
        let freq = match &policy.dvfs {
            DvfsPolicy::Ondemand { space, .. } => space.f_max(),
            DvfsPolicy::Static => freq,
        };
        Governors { policy, itr, freq, itr_next_s, itr_bytes: 0.0, itr_pkts: 0.0, dvfs_next_s, dvfs_busy: 0.0 }
    }

    /// Closes every policy window that ended at or before `now`.
    fn advance(&mut self, now: f64) {
        if let ItrPolicy::Adaptive(a) = &self.policy.itr {
            let w = a.window_us * 1e-6;
            while self.itr_next_s <= now {
                self.itr = a.step(self.itr_bytes / w, self.itr_pkts / w);
                self.itr_bytes = 0.0;
                self.itr_pkts = 0.0;
                self.itr_next_s += w;
            }
        }
        if let DvfsPolicy::Ondemand { governor, space } = &self.policy.dvfs {
            let w = governor.sampling_ms * 1e-3;
            while self.dvfs_next_s <= now {
                let util = (self.dvfs_busy / w).min(1.0);
                self.freq = governor.step(util, self.freq, space);
                self.dvfs_busy = 0.0;
                self.dvfs_next_s += w;
            }
        }
    }

    fn on_packet(&mut self, kb: f64) {
        self.itr_bytes += kb * 1024.0;
        self.itr_pkts += 1.0;
    }

    fn on_busy(&mut self, secs: f64) {
        self.dvfs_busy += secs;
    }
}

struct Engine<'a> {
    workload: &'a WorkloadSpec,
    os: &'a OsProfile,
    opts: &'a SimOptions,
    cpu: Cpu<'a>,
    gov: Governors<'a>,
    rng: ChaCha8Rng,
    latencies: Vec<f64>,
    interrupts: u64,
    cycles: u64,
    served: u64,
    end_s: f64,
    throughput: f64,
}

#[derive(Clone, Copy)]
struct Pending {
    arrival: f64,
    kb: f64,
}

impl<'a> Engine<'a> {
    fn new(workload: &'a WorkloadSpec, config: Config, os: &'a OsProfile, power: &'a PowerModel, opts: &'a SimOptions) -> Self {
        Engine {
            workload,
            os,
            opts,
            cpu: Cpu::new(power),
            gov: Governors::new(&opts.policy, config),
            rng: ChaCha8Rng::seed_from_u64(workload.seed),
            latencies: Vec::new(),
            interrupts: 0,
            cycles: 0,
            served: 0,
            end_s: 0.0,
            throughput: 0.0,
        }
    }

    fn run_open(&mut self) -> Result<()> {
        let w = self.workload;
        let exp = Exp::new(w.qps).map_err(|e| Error::invalid(e.to_string()))?;
        let mut next_arrival = exp.sample(&mut self.rng);
        let mut pending: VecDeque<Pending> = VecDeque::new();
        let mut last_fire = f64::NEG_INFINITY;
        self.latencies.reserve((w.qps * w.duration_s * 1.05) as usize);

        loop {
            if pending.is_empty() {
                if next_arrival >= w.duration_s {
                    break;
                }
                let kb = w.sizes.sample(&mut self.rng);
                pending.push_back(Pending { arrival: next_arrival, kb });
                next_arrival += exp.sample(&mut self.rng);
            }
            let first = pending.front().expect("non-empty").arrival;
            // Throttle semantics: at most one interrupt per ITR interval.
            let fire = (last_fire + self.gov.itr.seconds()).max(first);
            let start = self.cpu.idle_until(fire);
            while next_arrival <= start && next_arrival < w.duration_s {
                let kb = w.sizes.sample(&mut self.rng);
                pending.push_back(Pending { arrival: next_arrival, kb });
                next_arrival += exp.sample(&mut self.rng);
            }
            if pending.len() > self.opts.queue_cap {
                return Err(Error::Unstable {
                    config: Config { itr: self.gov.itr, dvfs: self.gov.freq },
                    queue_len: pending.len(),
                });
            }
            self.gov.advance(start);
            let f = self.gov.freq;
            let hz = f.hz();

            let mut cycles = self.os.per_interrupt_cycles as f64;
            for p in pending.drain(..) {
                self.gov.on_packet(p.kb);
                cycles += self.os.request_cycles(p.kb);
                let done = start + cycles / hz;
                self.latencies.push((done - p.arrival) * 1e6);
                self.served += 1;
            }
            let end = self.cpu.run(start, cycles, f);
            self.gov.on_busy(end - start);
            self.cycles += cycles.round() as u64;
            self.interrupts += 1;
            last_fire = fire;
        }
        self.end_s = w.duration_s.max(self.cpu.free_at);
        self.throughput = self.served as f64 / self.end_s;
        Ok(())
    }

    /// Ping-pong between this host and an identical peer. Only this host's
    /// energy is accounted; the peer mirrors the same knobs.
    fn run_closed(&mut self) {
        let w = self.workload;
        let msg_cycles = self.os.per_interrupt_cycles as f64 + self.os.request_cycles(w.message_kb);
        let mut arrival = 0.0;
        let mut last_fire = f64::NEG_INFINITY;
        let mut peer_last_fire = f64::NEG_INFINITY;
        let mut rounds = 0u64;
        loop {
            match w.rounds {
                Some(n) if rounds >= n => break,
                None if arrival >= w.duration_s => break,
                _ => {}
            }
            let itr = self.gov.itr.seconds();
            let fire = (last_fire + itr).max(arrival);
            let start = self.cpu.idle_until(fire);
            self.gov.on_packet(w.message_kb);
            self.gov.advance(start);
            let f = self.gov.freq;
            let done = self.cpu.run(start, msg_cycles, f);
            self.gov.on_busy(done - start);
            self.latencies.push((done - arrival) * 1e6);
            self.cycles += msg_cycles.round() as u64;
            self.interrupts += 1;
            self.served += 1;
            last_fire = fire;

            let peer_fire = (peer_last_fire + itr).max(done);
            peer_last_fire = peer_fire;
            arrival = peer_fire + msg_cycles / f.hz();
            rounds += 1;
        }
        self.end_s = arrival.max(self.cpu.free_at);
        self.throughput = if self.end_s > 0.0 {
            rounds as f64 * w.message_kb / 1024.0 / self.end_s
        } else {
            0.0
        };
    }

    fn finish(mut self) -> SimResult {
        self.cpu.close(self.end_s);
        SimResult {
            latency_samples_us: self.latencies,
            energy_joules: self.cpu.energy,
            interrupt_count: self.interrupts,
            instructions_proxy: self.cycles,
            busy_seconds: self.cpu.busy,
            idle_seconds: self.cpu.idle,
            sleep_seconds: self.cpu.sleep,
            elapsed_seconds: self.end_s,
            served: self.served,
            throughput: self.throughput,
            busy_by_freq: self.cpu.busy_by_freq,
            final_config: Config { itr: self.gov.itr, dvfs: self.gov.freq },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SizeDistribution;

    fn power() -> PowerModel {
        PowerModel { sleep_enabled: false, ..PowerModel::default() }
    }

    #[test]
    fn single_request_closed_form() {
        let os = OsProfile::general_purpose();
        // Scan seeds for a run with exactly one arrival.
        let mut w = WorkloadSpec::open(1000.0, 1e-3, 3);
        w.sizes = SizeDistribution::Fixed { kb: 0.5 };
        let cfg = Config::new(0, 2.0).unwrap();
        let mut seed = 0;
        let r = loop {
            w.seed = seed;
            let r = run_sim(&w, cfg, &os, &power()).unwrap();
            if r.served == 1 {
                break r;
            }
            seed += 1;
        };
        let expect = (6000.0 + 6000.0 + 3000.0 * 0.5) / 2.0e9 * 1e6;
        assert!((r.latency_samples_us[0] - expect).abs() < 1e-9);
        assert_eq!(r.interrupt_count, 1);
    }

    #[test]
    fn throttle_bounds_interrupts() {
        let w = WorkloadSpec::open(10_000.0, 1.0, 11);
        let r = run_sim(&w, Config::new(100, 2.0).unwrap(), &OsProfile::general_purpose(), &power()).unwrap();
        assert!(r.interrupt_count <= 10_000);
        assert!(r.interrupt_count <= r.served);
    }

    #[test]
    fn deterministic() {
        let w = WorkloadSpec::open(50_000.0, 0.2, 5);
        let cfg = Config::new(20, 1.8).unwrap();
        let a = run_sim(&w, cfg, &OsProfile::general_purpose(), &power()).unwrap();
        let b = run_sim(&w, cfg, &OsProfile::general_purpose(), &power()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn states_cover_elapsed_and_energy_closes() {
        let mut pm = power();
        for sleep in [false, true] {
            pm.sleep_enabled = sleep;
            let w = WorkloadSpec::open(20_000.0, 0.5, 9);
            let r = run_sim(&w, Config::new(40, 1.5).unwrap(), &OsProfile::general_purpose(), &pm).unwrap();
            let total = r.busy_seconds + r.idle_seconds + r.sleep_seconds;
            assert!((total - r.elapsed_seconds).abs() < 1e-9, "{total} vs {}", r.elapsed_seconds);
            let recomputed = r.energy_from_states(&pm);
            assert!((recomputed - r.energy_joules).abs() <= 1e-9 * r.energy_joules);
            assert_eq!(r.sleep_seconds > 0.0, sleep);
        }
    }

    #[test]
    fn overload_is_reported() {
        let w = WorkloadSpec::open(2_000_000.0, 0.5, 1);
        let opts = SimOptions { queue_cap: 10_000, ..SimOptions::default() };
        let err = run_sim_with(&w, Config::new(0, 1.2).unwrap(), &OsProfile::general_purpose(), &power(), &opts)
            .unwrap_err();
        assert!(err.to_string().starts_with("unstable: offered load exceeds capacity"));
        assert!(err.to_string().contains("dvfs=1.2GHz"));
    }

    #[test]
    fn closed_round_is_twice_service_without_coalescing() {
        let os = OsProfile::general_purpose();
        let w = WorkloadSpec::closed(8.0, 100, 1);
        let r = run_sim(&w, Config::new(0, 2.0).unwrap(), &os, &power()).unwrap();
        let service = (6000.0 + 6000.0 + 3000.0 * 8.0) / 2.0e9;
        assert!((r.elapsed_seconds - 100.0 * 2.0 * service).abs() < 1e-12);
        let mb_per_s = 8.0 / 1024.0 / (2.0 * service);
        assert!((r.throughput - mb_per_s).abs() < 1e-6 * mb_per_s);
    }

    #[test]
    fn closed_coalescing_stretches_rounds() {
        let os = OsProfile::general_purpose();
        let w = WorkloadSpec::closed(8.0, 200, 1);
        let fast = run_sim(&w, Config::new(0, 2.0).unwrap(), &os, &power()).unwrap();
        let slow = run_sim(&w, Config::new(200, 2.0).unwrap(), &os, &power()).unwrap();
        assert!(slow.elapsed_seconds > fast.elapsed_seconds);
        assert!(slow.energy_joules > fast.energy_joules);
    }

    #[test]
    fn stock_policy_moves_knobs() {
        let space = crate::domain::ConfigSpace::default_grid();
        let opts = SimOptions { policy: DynamicPolicy::stock(&space), ..SimOptions::default() };
        let w = WorkloadSpec::open(30_000.0, 0.5, 2);
        let r = run_sim_with(&w, Config::new(0, 3.0).unwrap(), &OsProfile::general_purpose(), &power(), &opts).unwrap();
        // Light load: ondemand settles below f_max, moderation stays in the latency class.
        assert!(r.final_config.dvfs < space.f_max());
        assert_eq!(r.final_config.itr, ItrDelayMicros(2));
        assert!(r.busy_by_freq.len() > 1);
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn accounting_closes(qps in 1_000.0f64..120_000.0, itr in 0u32..200, f in 12u32..=30, seed in 0u64..1000, sleep: bool) {
            let pm = PowerModel { sleep_enabled: sleep, ..PowerModel::default() };
            let w = WorkloadSpec::open(qps, 0.05, seed);
            let r = run_sim(&w, Config::new(2 * itr, f as f64 / 10.0).unwrap(), &OsProfile::general_purpose(), &pm).unwrap();
            let total = r.busy_seconds + r.idle_seconds + r.sleep_seconds;
            prop_assert!((total - r.elapsed_seconds).abs() < 1e-9);
            prop_assert!((r.energy_from_states(&pm) - r.energy_joules).abs() <= 1e-9 * r.energy_joules);
            prop_assert!(r.interrupt_count <= r.served);
            prop_assert_eq!(&r, &run_sim(&w, Config::new(2 * itr, f as f64 / 10.0).unwrap(), &OsProfile::general_purpose(), &pm).unwrap());
        }

        #[test]
        fn latency_at_least_service_time(qps in 1_000.0f64..120_000.0, itr in 0u32..200, kb in 0.1f64..4.0, seed in 0u64..1000) {
            let os = OsProfile::general_purpose();
            let mut w = WorkloadSpec::open(qps, 0.05, seed);
            w.sizes = SizeDistribution::Fixed { kb };
            let cfg = Config::new(2 * itr, 2.0).unwrap();
            let r = run_sim(&w, cfg, &os, &power()).unwrap();
            let service = (os.per_interrupt_cycles as f64 + os.request_cycles(kb)) / 2.0e9 * 1e6;
            prop_assert!(r.latency_samples_us.iter().all(|&l| l >= service - 1e-9));
        }

        #[test]
        fn single_in_flight_delay_within_itr(kb in 1.0f64..64.0, itr in 0u32..200, f in 12u32..=30) {
            let os = OsProfile::general_purpose();
            let w = WorkloadSpec::closed(kb, 50, 1);
            let cfg = Config::new(2 * itr, f as f64 / 10.0).unwrap();
            let r = run_sim(&w, cfg, &os, &power()).unwrap();
            let service = (os.per_interrupt_cycles as f64 + os.request_cycles(kb)) / cfg.dvfs.hz() * 1e6;
            let bound = service + f64::from(2 * itr);
            prop_assert!(r.latency_samples_us.iter().all(|&l| l >= service - 1e-9 && l <= bound + 1e-9));
        }

        #[test]
        fn p99_non_decreasing_in_itr(qps in 5_000.0f64..100_000.0, a in 0u32..250, b in 0u32..250, seed in 0u64..1000) {
            let os = OsProfile::general_purpose();
            let w = WorkloadSpec::open(qps, 0.1, seed);
            let (lo, hi) = (2 * a.min(b), 2 * a.max(b));
            let p99 = |itr| run_sim(&w, Config::new(itr, 2.0).unwrap(), &os, &power()).unwrap().tail_latency(99.0).unwrap();
            prop_assert!(p99(hi) >= p99(lo), "itr {} vs {}", lo, hi);
        }
    }
}
