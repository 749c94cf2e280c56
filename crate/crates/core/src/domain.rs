//! Knob types, the configuration grid, SLA objectives and percentile math.

use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default ITR-delay granularity of the 82599-class NICs, in microseconds.
pub const ITR_STEP_US: u32 = 2;

/// CPU frequency in GHz, quantized to 1 MHz so grid values compare exactly.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FrequencyGHz(f64);

impl FrequencyGHz {
    pub fn new(ghz: f64) -> Result<Self> {
        if !ghz.is_finite() || ghz <= 0.0 {
            return Err(Error::Domain(format!("frequency must be positive, got {ghz}")));
        }
        Ok(FrequencyGHz((ghz * 1000.0).round() / 1000.0))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn hz(self) -> f64 {
        self.0 * 1e9
    }

    pub fn mhz(self) -> u32 {
        (self.0 * 1000.0).round() as u32
    }
}

impl Eq for FrequencyGHz {}

impl Hash for FrequencyGHz {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.mhz().hash(state);
    }
}

impl TryFrom<f64> for FrequencyGHz {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        FrequencyGHz::new(v)
    }
}

impl From<FrequencyGHz> for f64 {
    fn from(f: FrequencyGHz) -> f64 {
        f.0
    }
}

impl fmt::Display for FrequencyGHz {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Minimum interval the NIC enforces between interrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItrDelayMicros(pub u32);

impl ItrDelayMicros {
    pub fn get(self) -> u32 {
        self.0
    }

    pub fn seconds(self) -> f64 {
        f64::from(self.0) * 1e-6
    }
}

impl fmt::Display for ItrDelayMicros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One (ITR-delay, DVFS) setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Config {
    pub itr: ItrDelayMicros,
    pub dvfs: FrequencyGHz,
}

impl Config {
    pub fn new(itr_us: u32, dvfs_ghz: f64) -> Result<Self> {
        Ok(Config { itr: ItrDelayMicros(itr_us), dvfs: FrequencyGHz::new(dvfs_ghz)? })
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(itr={}us, dvfs={}GHz)", self.itr, self.dvfs)
    }
}

/// The discrete grid of settings a controller may choose from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSpace {
    itr_values: Vec<ItrDelayMicros>,
    dvfs_values: Vec<FrequencyGHz>,
}

impl ConfigSpace {
    pub fn new(itr_values: Vec<ItrDelayMicros>, dvfs_values: Vec<FrequencyGHz>) -> Result<Self> {
        if itr_values.is_empty() || dvfs_values.is_empty() {
            return Err(Error::invalid("config space lists must be non-empty"));
        }
        if itr_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("itr values must be strictly ascending"));
        }
        if dvfs_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("dvfs values must be strictly ascending"));
        }
        Ok(ConfigSpace { itr_values, dvfs_values })
    }

    /// Regular grid: ITR `0..=itr_max` in `itr_step` increments, DVFS from
    /// `f_min` to `f_max` in `f_step` increments.
    pub fn stepped(itr_max: u32, itr_step: u32, f_min: f64, f_max: f64, f_step: f64) -> Result<Self> {
        if itr_step == 0 {
            return Err(Error::invalid("itr step must be positive"));
        }
        if !(f_step > 0.0) || !(f_max >= f_min) {
            return Err(Error::invalid("dvfs range must be ascending with a positive step"));
        }
        let itr_values = (0..=itr_max / itr_step).map(|i| ItrDelayMicros(i * itr_step)).collect();
        let n = ((f_max - f_min) / f_step + 1e-6).floor() as usize;
        let dvfs_values = (0..=n)
            .map(|i| FrequencyGHz::new(f_min + i as f64 * f_step))
            .collect::<Result<Vec<_>>>()?;
        ConfigSpace::new(itr_values, dvfs_values)
    }

    /// ITR 0-1024 us step 2, DVFS 1.2-3.0 GHz step 0.1.
    pub fn default_grid() -> Self {
        ConfigSpace::stepped(1024, ITR_STEP_US, 1.2, 3.0, 0.1).expect("static grid is valid")
    }

    pub fn itr_values(&self) -> &[ItrDelayMicros] {
        &self.itr_values
    }

    pub fn dvfs_values(&self) -> &[FrequencyGHz] {
        &self.dvfs_values
    }

    pub fn len(&self) -> usize {
        self.itr_values.len() * self.dvfs_values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn f_min(&self) -> FrequencyGHz {
        self.dvfs_values[0]
    }

    pub fn f_max(&self) -> FrequencyGHz {
        *self.dvfs_values.last().expect("non-empty")
    }

    pub fn itr_min(&self) -> ItrDelayMicros {
        self.itr_values[0]
    }

    pub fn itr_max(&self) -> ItrDelayMicros {
        *self.itr_values.last().expect("non-empty")
    }

    pub fn contains(&self, config: &Config) -> bool {
        self.itr_values.binary_search(&config.itr).is_ok()
            && self.dvfs_values.iter().any(|f| *f == config.dvfs)
    }

    /// Config at grid indices (row-major in itr, dvfs).
    pub fn at(&self, itr_idx: usize, dvfs_idx: usize) -> Config {
        Config { itr: self.itr_values[itr_idx], dvfs: self.dvfs_values[dvfs_idx] }
    }

    /// Min-max normalized coordinates in [0,1]^2.
    pub fn normalize(&self, config: &Config) -> [f64; 2] {
        let (lo, hi) = (f64::from(self.itr_min().0), f64::from(self.itr_max().0));
        let x = if hi > lo { (f64::from(config.itr.0) - lo) / (hi - lo) } else { 0.0 };
        let (flo, fhi) = (self.f_min().get(), self.f_max().get());
        let y = if fhi > flo { (config.dvfs.get() - flo) / (fhi - flo) } else { 0.0 };
        [x, y]
    }

    /// Smallest grid frequency >= `ghz`, or f_max when none is.
    pub fn frequency_at_least(&self, ghz: f64) -> FrequencyGHz {
        self.dvfs_values
            .iter()
            .copied()
            .find(|f| f.get() >= ghz - 1e-9)
            .unwrap_or_else(|| self.f_max())
    }
}

/// Full cross product of the space, row-major in (itr, dvfs).
pub fn enumerate_grid(space: &ConfigSpace) -> Vec<Config> {
    let mut out = Vec::with_capacity(space.len());
    for &itr in space.itr_values() {
        for &dvfs in space.dvfs_values() {
            out.push(Config { itr, dvfs });
        }
    }
    out
}

/// Tail-latency objective, e.g. 99% of requests under 500 us.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlaObjective {
    pub percentile: f64,
    pub bound_us: f64,
}

impl SlaObjective {
    pub fn new(percentile: f64, bound_us: f64) -> Result<Self> {
        let sla = SlaObjective { percentile, bound_us };
        sla.validate()?;
        Ok(sla)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::invalid(format!("SLA percentile must be in (0,100), got {}", self.percentile)));
        }
        if !(self.bound_us > 0.0) || !self.bound_us.is_finite() {
            return Err(Error::invalid(format!("SLA bound must be positive, got {}", self.bound_us)));
        }
        Ok(())
    }
}

impl Default for SlaObjective {
    fn default() -> Self {
        SlaObjective { percentile: 99.0, bound_us: 500.0 }
    }
}

/// Tail latency and energy observed over one measurement window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub tail_latency_us: f64,
    pub energy_joules: f64,
    pub window_seconds: f64,
    pub observed_qps: f64,
}

impl Measurement {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.tail_latency_us, self.energy_joules, self.window_seconds, self.observed_qps];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("measurement fields must be finite"));
        }
        if self.tail_latency_us < 0.0 || self.energy_joules < 0.0 || self.observed_qps < 0.0 {
            return Err(Error::invalid("measurement fields must be non-negative"));
        }
        if self.window_seconds <= 0.0 {
            return Err(Error::invalid("measurement window must be positive"));
        }
        Ok(())
    }

    pub fn watts(&self) -> f64 {
        self.energy_joules / self.window_seconds
    }
}

/// Strict comparison: a tail exactly at the bound is a violation.
pub fn meets_sla(m: &Measurement, sla: &SlaObjective) -> bool {
    m.tail_latency_us < sla.bound_us
}

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample.
pub fn nearest_rank_percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::invalid(format!("percentile must be in (0,100), got {p}")));
    }
    let n = samples.len();
    let rank = ((p * n as f64) / 100.0).ceil() as usize;
    let idx = rank.clamp(1, n) - 1;
    let mut buf = samples.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    Ok(*v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(tail: f64) -> Measurement {
        Measurement { tail_latency_us: tail, energy_joules: 1.0, window_seconds: 1.0, observed_qps: 1.0 }
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(nearest_rank_percentile(&[5.0], 99.0).unwrap(), 5.0);
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank_percentile(&xs, 99.0).unwrap(), 99.0);
        assert!(matches!(nearest_rank_percentile(&[], 99.0), Err(Error::NoSamples)));
        assert!(nearest_rank_percentile(&[1.0], 100.0).is_err());
    }

    #[test]
    fn percentile_matches_full_sort_on_exponential_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..10_000).map(|_| -100.0 * (1.0 - rng.random::<f64>()).ln()).collect();
        let mut sorted = xs.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let oracle = sorted[(0.99f64 * 10_000.0).ceil() as usize - 1];
        let got = nearest_rank_percentile(&xs, 99.0).unwrap();
        assert!((got - oracle).abs() <= 0.03 * oracle);
        assert_eq!(got, oracle);
    }

    #[test]
    fn grid_order_and_size() {
        let space = ConfigSpace::new(
            vec![ItrDelayMicros(0), ItrDelayMicros(2)],
            vec![FrequencyGHz::new(1.3).unwrap(), FrequencyGHz::new(2.9).unwrap()],
        )
        .unwrap();
        let got: Vec<(u32, f64)> = enumerate_grid(&space).iter().map(|c| (c.itr.0, c.dvfs.get())).collect();
        assert_eq!(got, vec![(0, 1.3), (0, 2.9), (2, 1.3), (2, 2.9)]);

        let space = ConfigSpace::stepped(400, 2, 1.5, 2.9, 0.1).unwrap();
        assert_eq!(space.dvfs_values().len(), 15);
        assert_eq!(enumerate_grid(&space).len(), 201 * 15);
    }

    #[test]
    fn full_scale_grid_cardinality() {
        // ~2 million combinations: 0..=200_000 us in 2 us steps times 18 p-states.
        let space = ConfigSpace::stepped(222_222, 2, 1.3, 3.0, 0.1).unwrap();
        let grid = enumerate_grid(&space);
        assert_eq!(grid.len(), space.itr_values().len() * space.dvfs_values().len());
        assert!(grid.len() > 1_900_000 && grid.len() < 2_100_000);
    }

    #[test]
    fn default_grid_shape() {
        let space = ConfigSpace::default_grid();
        assert_eq!(space.itr_values().len(), 513);
        assert_eq!(space.dvfs_values().len(), 19);
        assert_eq!(space.f_min().get(), 1.2);
        assert_eq!(space.f_max().get(), 3.0);
    }

    #[test]
    fn space_rejects_bad_lists() {
        let f = |v: f64| FrequencyGHz::new(v).unwrap();
        assert!(ConfigSpace::new(vec![], vec![f(1.0)]).is_err());
        assert!(ConfigSpace::new(vec![ItrDelayMicros(2), ItrDelayMicros(2)], vec![f(1.0)]).is_err());
        assert!(ConfigSpace::new(vec![ItrDelayMicros(0)], vec![f(2.0), f(1.0)]).is_err());
        assert!(FrequencyGHz::new(0.0).is_err());
    }

    #[test]
    fn sla_strictness() {
        let sla = SlaObjective::default();
        assert!(meets_sla(&m(400.0), &sla));
        assert!(!meets_sla(&m(500.0), &sla));
        assert!(!meets_sla(&m(600.0), &sla));
    }

    proptest! {
        #[test]
        fn percentile_monotone_in_p(xs in prop::collection::vec(0.0f64..1e6, 1..200), p1 in 0.1f64..99.9, p2 in 0.1f64..99.9) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let a = nearest_rank_percentile(&xs, lo).unwrap();
            let b = nearest_rank_percentile(&xs, hi).unwrap();
            prop_assert!(a <= b);
            prop_assert!(xs.contains(&a));
        }

        #[test]
        fn grid_members_validate(ni in 1u32..30, nf in 1usize..10) {
            let space = ConfigSpace::stepped(ni * 2, 2, 1.2, 1.2 + 0.1 * (nf as f64 - 1.0), 0.1).unwrap();
            let grid = enumerate_grid(&space);
            prop_assert_eq!(grid.len(), space.itr_values().len() * space.dvfs_values().len());
            prop_assert!(grid.iter().all(|c| space.contains(c)));
        }

        #[test]
        fn meets_sla_antitone(t1 in 0.0f64..2000.0, t2 in 0.0f64..2000.0) {
            let sla = SlaObjective::default();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(meets_sla(&m(lo), &sla) >= meets_sla(&m(hi), &sla));
        }
    }
}
