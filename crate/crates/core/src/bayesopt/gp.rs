//! Gaussian-process surrogate over the normalized knob square.
//!
//! Squared-exponential kernel with one length-scale per knob. Outputs are
//! standardized internally; hyperparameters come from a small fixed grid
//! scored by log marginal likelihood.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const LENGTH_SCALE_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];
/// Noise variances relative to the standardized output variance.
pub const NOISE_GRID: [f64; 3] = [1e-4, 1e-2, 1e-1];
const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpHyper {
    pub length_scales: [f64; 2],
    pub signal_var: f64,
    pub noise_var: f64,
}

impl GpHyper {
    pub fn kernel(&self, a: &[f64; 2], b: &[f64; 2]) -> f64 {
        let d0 = (a[0] - b[0]) / self.length_scales[0];
        let d1 = (a[1] - b[1]) / self.length_scales[1];
        self.signal_var * (-0.5 * (d0 * d0 + d1 * d1)).exp()
    }
}

#[derive(Debug, Clone)]
pub struct GpSurrogate {
    xs: Vec<[f64; 2]>,
    hyper: GpHyper,
    jitter: f64,
    y_mean: f64,
    y_std: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_marginal_likelihood: f64,
}

struct Factored {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    lml: f64,
}

fn factor(xs: &[[f64; 2]], ys: &DVector<f64>, hyper: &GpHyper) -> Option<Factored> {
    let n = xs.len();
    let k = DMatrix::from_fn(n, n, |i, j| hyper.kernel(&xs[i], &xs[j]));
    for &jitter in &JITTERS {
        let mut kn = k.clone();
        for i in 0..n {
            kn[(i, i)] += hyper.noise_var + jitter;
        }
        if let Some(chol) = Cholesky::new(kn) {
            let alpha = chol.solve(ys);
            let log_det: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
            let lml = -0.5 * ys.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            if lml.is_finite() {
                return Some(Factored { chol, alpha, jitter, lml });
            }
        }
    }
    None
}

impl GpSurrogate {
    /// Fits on normalized inputs `xs` (each in [0,1]^2) and raw outputs `ys`,
    /// choosing hyperparameters by grid search on the marginal likelihood.
    pub fn fit(xs: &[[f64; 2]], ys: &[f64]) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::invalid("GP needs matching, non-empty inputs and outputs"));
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::invalid("GP outputs must be finite"));
        }
        let n = ys.len() as f64;
        let y_mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        let y_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let ys_std = DVector::from_iterator(ys.len(), ys.iter().map(|y| (y - y_mean) / y_std));

        let mut best: Option<(GpHyper, Factored)> = None;
        for &l0 in &LENGTH_SCALE_GRID {
            for &l1 in &LENGTH_SCALE_GRID {
                for &noise in &NOISE_GRID {
                    let hyper = GpHyper { length_scales: [l0, l1], signal_var: 1.0, noise_var: noise };
                    if let Some(f) = factor(xs, &ys_std, &hyper) {
                        if best.as_ref().is_none_or(|(_, b)| f.lml > b.lml) {
                            best = Some((hyper, f));
                        }
                    }
                }
            }
        }
        let (hyper, f) = best.ok_or(Error::GpDegenerate)?;
        Ok(GpSurrogate {
            xs: xs.to_vec(),
            hyper,
            jitter: f.jitter,
            y_mean,
            y_std,
            chol: f.chol,
            alpha: f.alpha,
            log_marginal_likelihood: f.lml,
        })
    }

    /// Fits with fixed hyperparameters (output standardization still applies).
    pub fn fit_with(xs: &[[f64; 2]], ys: &[f64], hyper: GpHyper) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::invalid("GP needs matching, non-empty inputs and outputs"));
        }
        let n = ys.len() as f64;
        let y_mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        let y_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let ys_std = DVector::from_iterator(ys.len(), ys.iter().map(|y| (y - y_mean) / y_std));
        let f = factor(xs, &ys_std, &hyper).ok_or(Error::GpDegenerate)?;
        Ok(GpSurrogate {
            xs: xs.to_vec(),
            hyper,
            jitter: f.jitter,
            y_mean,
            y_std,
            chol: f.chol,
            alpha: f.alpha,
            log_marginal_likelihood: f.lml,
        })
    }

    pub fn hyper(&self) -> GpHyper {
        self.hyper
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `(mean, std)` used to standardize outputs.
    pub fn output_scaling(&self) -> (f64, f64) {
        (self.y_mean, self.y_std)
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Posterior mean and latent-function variance at `x`, in output units.
    pub fn predict(&self, x: &[f64; 2]) -> (f64, f64) {
        let kstar = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| self.hyper.kernel(xi, x)));
        let mean = kstar.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&kstar).expect("factor is non-singular");
        let var = (self.hyper.signal_var - v.dot(&v)).max(0.0);
        (self.y_mean + self.y_std * mean, var * self.y_std * self.y_std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense Gaussian elimination with partial pivoting; independent of the
    /// Cholesky path used by the surrogate.
    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
            x[i] = (b[i] - s) / a[i][i];
        }
        x
    }

    fn five_linear_points() -> (Vec<[f64; 2]>, Vec<f64>) {
        let xs = vec![[0.0, 0.0], [0.25, 0.8], [0.5, 0.3], [0.75, 0.6], [1.0, 1.0]];
        let ys = xs.iter().map(|x| 3.0 + 2.0 * x[0] - 1.5 * x[1]).collect();
        (xs, ys)
    }

    #[test]
    fn single_observation_interpolates() {
        let gp = GpSurrogate::fit(&[[0.3, 0.4]], &[2.5]).unwrap();
        let (m, _) = gp.predict(&[0.3, 0.4]);
        assert!((m - 2.5).abs() <= gp.hyper().noise_var.sqrt());
    }

    #[test]
    fn posterior_matches_explicit_solve() {
        let (xs, ys) = five_linear_points();
        let gp = GpSurrogate::fit(&xs, &ys).unwrap();
        let h = gp.hyper();
        let (mu, sd) = gp.output_scaling();
        let n = xs.len();
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| h.kernel(&xs[i], &xs[j]) + if i == j { h.noise_var + gp.jitter() } else { 0.0 })
                    .collect()
            })
            .collect();
        let b: Vec<f64> = ys.iter().map(|y| (y - mu) / sd).collect();
        let w = solve(a, b);
        for probe in [xs[2], [0.1, 0.9], [0.6, 0.2]] {
            let oracle = mu + sd * (0..n).map(|i| h.kernel(&xs[i], &probe) * w[i]).sum::<f64>();
            let (m, _) = gp.predict(&probe);
            assert!((m - oracle).abs() < 1e-6, "{m} vs {oracle}");
        }
        // Linear target: the noise floor keeps observed points close.
        let (m, _) = gp.predict(&xs[2]);
        assert!((m - ys[2]).abs() < 0.05);
    }

    #[test]
    fn duplicate_points_with_disagreement_are_absorbed() {
        let xs = vec![[0.5, 0.5], [0.5, 0.5], [0.2, 0.9]];
        let gp = GpSurrogate::fit(&xs, &[1.0, 2.0, 0.0]).unwrap();
        let (m, v) = gp.predict(&[0.5, 0.5]);
        assert!(m.is_finite() && v.is_finite());
        assert!(m > 0.5 && m < 2.5);
    }

    #[test]
    fn variance_at_observed_inputs_is_bounded_by_noise() {
        let (xs, ys) = five_linear_points();
        let gp = GpSurrogate::fit(&xs, &ys).unwrap();
        let (_, sd) = gp.output_scaling();
        let bound = (gp.hyper().noise_var + gp.jitter()) * sd * sd;
        for x in &xs {
            let (_, v) = gp.predict(x);
            assert!(v <= bound * (1.0 + 1e-9), "{v} > {bound}");
        }
    }
}
