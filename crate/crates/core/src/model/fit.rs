use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FitDataset, ModelParams};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub restarts: usize,
    /// A restart counts as converged when its total loss is below this.
    pub convergence_threshold: f64,
    /// Std-dev of the Gaussian jitter applied to the unconstrained init of
    /// every restart after the first.
    pub init_jitter: f64,
    /// Learning rate decays geometrically to `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f64,
    /// ITR values below this are raised to it before evaluating log energy.
    pub itr_floor_us: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 1e-2,
            max_iters: 5000,
            restarts: 5,
            convergence_threshold: 0.05,
            init_jitter: 0.25,
            final_lr_fraction: 0.01,
            itr_floor_us: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub params: Option<ModelParams>,
    pub loss: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub latency_loss: f64,
    pub energy_loss: f64,
    pub restarts: usize,
    pub best_restart: usize,
    pub converged: bool,
    pub itr_floor_us: f64,
    pub per_restart: Vec<RestartSummary>,
}

/// Optimizer coordinates: `[ln Z, alpha, logit phi, ln gamma, beta]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unconstrained(pub [f64; 5]);

const PHI_EPS: f64 = 1e-9;

impl Unconstrained {
    pub fn from_params(p: &ModelParams) -> Self {
        let phi = p.phi.clamp(PHI_EPS, 1.0 - PHI_EPS);
        Unconstrained([p.z.ln(), p.alpha, (phi / (1.0 - phi)).ln(), p.gamma.ln(), p.beta])
    }

    pub fn to_params(self) -> ModelParams {
        let [lz, alpha, lphi, lg, beta] = self.0;
        ModelParams { z: lz.exp(), alpha, phi: sigmoid(lphi), gamma: lg.exp(), beta }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Joint log-space loss and its gradient in unconstrained coordinates.
///
/// Returns `(latency_mse, energy_mse, grad)`; the objective is the sum of the
/// two mean-squared errors.
pub fn loss_and_gradient(theta: &Unconstrained, data: &FitDataset, itr_floor_us: f64) -> (f64, f64, [f64; 5]) {
    let p = theta.to_params();
    let n = data.rows().len() as f64;
    let (mut lat_loss, mut en_loss) = (0.0, 0.0);
    let mut g = [0.0; 5];
    let dphi_dlogit = p.phi * (1.0 - p.phi);
    for row in data.rows() {
        let f = row.config.dvfs.get();
        let ln_f = f.ln();
        let itr = f64::from(row.config.itr.0);

        let work = p.z * (-(1.0 + p.alpha) * ln_f).exp();
        let lat = work + p.phi * itr;
        let r_lat = lat.ln() - row.tail_latency_us.ln();
        lat_loss += r_lat * r_lat;
        let c = 2.0 * r_lat / (n * lat);
        g[0] += c * work;
        g[1] += c * (-work * ln_f);
        g[2] += c * itr * dphi_dlogit;

        let itr_e = itr.max(itr_floor_us);
        let ln_e = p.gamma.ln() + p.phi.ln() + (itr_e * 1e-6).ln() + p.beta * ln_f;
        let r_en = ln_e - row.energy_j.ln();
        en_loss += r_en * r_en;
        let c = 2.0 * r_en / n;
        g[2] += c * (1.0 - p.phi);
        g[3] += c;
        g[4] += c * ln_f;
    }
    (lat_loss / n, en_loss / n, g)
}

struct Adam {
    m: [f64; 5],
    v: [f64; 5],
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new() -> Self {
        Adam { m: [0.0; 5], v: [0.0; 5], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64; 5], grad: &[f64; 5], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::B1.powi(self.t);
        let bc2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..5 {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            theta[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

struct RestartOutcome {
    theta: Unconstrained,
    lat_loss: f64,
    en_loss: f64,
}

fn run_restart(data: &FitDataset, start: Unconstrained, cfg: &FitConfig) -> Option<RestartOutcome> {
    let mut theta = start.0;
    let mut adam = Adam::new();
    let decay = if cfg.max_iters > 1 {
        cfg.final_lr_fraction.max(1e-12).ln() / (cfg.max_iters - 1) as f64
    } else {
        0.0
    };
    let mut best: Option<RestartOutcome> = None;
    for it in 0..cfg.max_iters {
        let (ll, el, g) = loss_and_gradient(&Unconstrained(theta), data, cfg.itr_floor_us);
        let loss = ll + el;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        if best.as_ref().is_none_or(|b| loss < b.lat_loss + b.en_loss) {
            best = Some(RestartOutcome { theta: Unconstrained(theta), lat_loss: ll, en_loss: el });
        }
        let lr = cfg.learning_rate * (decay * it as f64).exp();
        adam.step(&mut theta, &g, lr);
    }
    let (ll, el, _) = loss_and_gradient(&Unconstrained(theta), data, cfg.itr_floor_us);
    if (ll + el).is_finite() && best.as_ref().is_none_or(|b| ll + el < b.lat_loss + b.en_loss) {
        best = Some(RestartOutcome { theta: Unconstrained(theta), lat_loss: ll, en_loss: el });
    }
    best
}

/// Fits the model by adaptive-moment gradient descent on the joint log-space
/// loss, with `cfg.restarts` jittered starts. Restart 0 starts exactly at `init`.
pub fn fit(data: &FitDataset, init: &ModelParams, cfg: &FitConfig) -> Result<FitResult> {
    init.validate()?;
    if cfg.restarts == 0 {
        return Err(Error::invalid("fit needs at least one restart"));
    }
    let base = Unconstrained::from_params(init);
    let starts: Vec<Unconstrained> = (0..cfg.restarts)
        .map(|r| {
            if r == 0 {
                return base;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[seed::stream::FIT_RESTART, r as u64]));
            let mut th = base.0;
            for v in th.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.init_jitter * z;
            }
            Unconstrained(th)
        })
        .collect();

    let outcomes: Vec<Option<RestartOutcome>> = starts.par_iter().map(|s| run_restart(data, *s, cfg)).collect();

    let per_restart: Vec<RestartSummary> = outcomes
        .iter()
        .map(|o| match o {
            Some(o) => {
                let loss = o.lat_loss + o.en_loss;
                RestartSummary { params: Some(o.theta.to_params()), loss, converged: loss < cfg.convergence_threshold }
            }
            None => RestartSummary { params: None, loss: f64::INFINITY, converged: false },
        })
        .collect();

    let (best_idx, best) = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.as_ref().map(|o| (i, o)))
        .min_by(|a, b| (a.1.lat_loss + a.1.en_loss).total_cmp(&(b.1.lat_loss + b.1.en_loss)))
        .ok_or(Error::FitDiverged)?;

    let params = best.theta.to_params();
    let total = best.lat_loss + best.en_loss;
    Ok(FitResult {
        params,
        latency_loss: best.lat_loss,
        energy_loss: best.en_loss,
        restarts: cfg.restarts,
        best_restart: best_idx,
        converged: total < cfg.convergence_threshold,
        itr_floor_us: cfg.itr_floor_us,
        per_restart,
    })
}

/// Data-driven starting point: unit-exponent work term sized from the fastest
/// row, quadratic energy, phi = 0.5.
pub fn heuristic_init(data: &FitDataset) -> ModelParams {
    let rows = data.rows();
    let fastest = rows
        .iter()
        .min_by(|a, b| a.tail_latency_us.total_cmp(&b.tail_latency_us))
        .expect("dataset is non-empty");
    let phi = 0.5;
    let mut gammas: Vec<f64> = rows
        .iter()
        .map(|r| {
            let f = r.config.dvfs.get();
            let itr = f64::from(r.config.itr.0).max(1.0) * 1e-6;
            r.energy_j / (phi * itr * f * f)
        })
        .collect();
    gammas.sort_by(|a, b| a.total_cmp(b));
    ModelParams {
        z: fastest.tail_latency_us * fastest.config.dvfs.get(),
        alpha: 0.0,
        phi,
        gamma: gammas[gammas.len() / 2].max(1e-12),
        beta: 2.0,
    }
}
