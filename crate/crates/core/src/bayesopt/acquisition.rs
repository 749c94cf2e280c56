use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::gp::GpSurrogate;
use crate::domain::{Config, ConfigSpace};
use crate::error::{Error, Result};

/// Acquisition is evaluated on at most this many grid points per step.
pub const MAX_CANDIDATES: usize = 50_000;

/// Expected improvement below `best` for a Gaussian with mean `mu` and
/// standard deviation `sigma` (minimization).
pub fn expected_improvement_from(mu: f64, sigma: f64, best: f64) -> f64 {
    if !(sigma > 0.0) {
        return (best - mu).max(0.0);
    }
    let n = Normal::standard();
    let z = (best - mu) / sigma;
    ((best - mu) * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

pub fn expected_improvement(surrogate: &GpSurrogate, point: &[f64; 2], best_so_far: f64) -> f64 {
    let (mu, var) = surrogate.predict(point);
    expected_improvement_from(mu, var.sqrt(), best_so_far)
}

/// Argmax of EI over `candidates` (uniformly subsampled above
/// [`MAX_CANDIDATES`]); ties go to the earliest candidate in grid order.
pub fn suggest_next(
    surrogate: &GpSurrogate,
    candidates: &[Config],
    space: &ConfigSpace,
    best_so_far: f64,
    seed: u64,
) -> Result<Config> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to suggest from"));
    }
    let picked: Vec<usize> = if candidates.len() > MAX_CANDIDATES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, candidates.len(), MAX_CANDIDATES).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..candidates.len()).collect()
    };
    let mut best_i = picked[0];
    let mut best_ei = f64::NEG_INFINITY;
    for i in picked {
        let ei = expected_improvement(surrogate, &space.normalize(&candidates[i]), best_so_far);
        if ei > best_ei {
            best_ei = ei;
            best_i = i;
        }
    }
    Ok(candidates[best_i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayesopt::gp::GpHyper;
    use crate::domain::{FrequencyGHz, ItrDelayMicros};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn closed_form_cases() {
        assert_eq!(expected_improvement_from(5.0, 0.0, 5.0), 0.0);
        assert_eq!(expected_improvement_from(4.0, 0.0, 5.0), 1.0);
        let ei = expected_improvement_from(3.0, 1.0, 3.0);
        assert!((ei - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn matches_monte_carlo_at_ten_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for k in 0..10 {
            let mu = rng.random_range(-2.0..2.0);
            let sigma = rng.random_range(0.5..2.0);
            let best = rng.random_range(-1.0..1.0) + if k % 3 == 0 { 1.0 } else { 0.0 };
            let n = 400_000;
            let mc = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (best - (mu + sigma * z)).max(0.0)
                })
                .sum::<f64>()
                / n as f64;
            let ei = expected_improvement_from(mu, sigma, best);
            assert!((ei - mc).abs() <= 0.02 * ei, "point {k}: ei {ei} mc {mc}");
        }
    }

    fn two_point_space() -> ConfigSpace {
        ConfigSpace::new(vec![ItrDelayMicros(0), ItrDelayMicros(100)], vec![FrequencyGHz::new(2.0).unwrap()]).unwrap()
    }

    #[test]
    fn prefers_unobserved_candidate() {
        let space = two_point_space();
        let cands = crate::domain::enumerate_grid(&space);
        // Observed optimum at the first candidate, tiny noise, short length-scale.
        let hyper = GpHyper { length_scales: [0.2, 0.2], signal_var: 1.0, noise_var: 1e-6 };
        let gp = GpSurrogate::fit_with(&[space.normalize(&cands[0])], &[1.0], hyper).unwrap();
        let ei_obs = expected_improvement(&gp, &space.normalize(&cands[0]), 1.0);
        let ei_new = expected_improvement(&gp, &space.normalize(&cands[1]), 1.0);
        assert!(ei_obs < 1e-3 && ei_new > ei_obs);
        assert_eq!(suggest_next(&gp, &cands, &space, 1.0, 0).unwrap(), cands[1]);
    }

    #[test]
    fn total_when_everything_is_observed() {
        let space = two_point_space();
        let cands = crate::domain::enumerate_grid(&space);
        let xs: Vec<[f64; 2]> = cands.iter().map(|c| space.normalize(c)).collect();
        let gp = GpSurrogate::fit(&xs, &[1.0, 2.0]).unwrap();
        let s = suggest_next(&gp, &cands, &space, 1.0, 0).unwrap();
        assert!(cands.contains(&s));
    }

    #[test]
    fn subsampling_is_deterministic() {
        let space = ConfigSpace::stepped(2 * 5_000, 2, 1.2, 3.0, 0.1).unwrap();
        let cands = crate::domain::enumerate_grid(&space);
        assert!(cands.len() > MAX_CANDIDATES);
        let gp = GpSurrogate::fit(&[[0.5, 0.5], [0.1, 0.2]], &[1.0, 3.0]).unwrap();
        let a = suggest_next(&gp, &cands, &space, 1.0, 9).unwrap();
        let b = suggest_next(&gp, &cands, &space, 1.0, 9).unwrap();
        assert_eq!(a, b);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn ei_non_negative_and_vanishes_at_best_observation(
            pts in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, -3.0f64..3.0), 2..12),
            q in (0.0f64..1.0, 0.0f64..1.0),
        ) {
            let xs: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.2).collect();
            let hyper = GpHyper { length_scales: [0.3, 0.3], signal_var: 1.0, noise_var: 1e-10 };
            let gp = GpSurrogate::fit_with(&xs, &ys, hyper).unwrap();
            let best = ys.iter().copied().fold(f64::INFINITY, f64::min);
            let ei = expected_improvement(&gp, &[q.0, q.1], best);
            proptest::prop_assert!(ei >= 0.0 && ei.is_finite());
            let at = xs[ys.iter().position(|&y| y == best).unwrap()];
            let (mu, var) = gp.predict(&at);
            let tol = (mu - best).abs() + var.sqrt();
            proptest::prop_assert!(expected_improvement(&gp, &at, best) <= tol + 1e-9);
        }
    }
}
