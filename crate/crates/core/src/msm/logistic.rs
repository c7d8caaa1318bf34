use serde::{Deserialize, Serialize};

use super::linalg::cholesky_solve;
use crate::diffcore::sigmoid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// L2 penalty used when the unpenalized fit fails to settle.
    pub fallback_l2: f64,
    /// Coefficient norm on standardized features treated as separation.
    pub divergence_norm: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            max_iter: 500,
            tol: 1e-6,
            fallback_l2: 1e-3,
            divergence_norm: 30.0,
        }
    }
}

/// Logistic regression on standardized features, intercept first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Set when the L2 fallback was needed.
    pub regularized: bool,
}

impl LogisticFit {
    pub fn logit(&self, features: &[f64]) -> f64 {
        let mut z = self.coef[0];
        for (j, &f) in features.iter().enumerate() {
            z += self.coef[j + 1] * (f - self.mean[j]) / self.std[j];
        }
        z
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        sigmoid(self.logit(features))
    }
}

struct Design {
    rows: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

impl Design {
    fn dim(&self) -> usize {
        self.rows[0].len()
    }

    /// Mean negative log-likelihood plus `l2/2 ‖w‖²` (intercept unpenalized).
    fn loss(&self, w: &[f64], l2: f64) -> f64 {
        let mut acc = 0.0;
        for (r, &y) in self.rows.iter().zip(&self.labels) {
            let z: f64 = r.iter().zip(w).map(|(a, b)| a * b).sum();
            // log(1 + e^z) − y z, evaluated stably
            acc += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
        }
        acc / self.rows.len() as f64 + 0.5 * l2 * w[1..].iter().map(|v| v * v).sum::<f64>()
    }

    fn grad_hess(&self, w: &[f64], l2: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let n = self.rows.len() as f64;
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        for (r, &y) in self.rows.iter().zip(&self.labels) {
            let z: f64 = r.iter().zip(w).map(|(a, b)| a * b).sum();
            let p = sigmoid(z);
            let s = p * (1.0 - p);
            for a in 0..d {
                g[a] += (p - y) * r[a];
                for b in 0..=a {
                    h[a * d + b] += s * r[a] * r[b];
                }
            }
        }
        for a in 0..d {
            g[a] /= n;
            for b in 0..=a {
                h[a * d + b] /= n;
                h[b * d + a] = h[a * d + b];
            }
            if a > 0 {
                g[a] += l2 * w[a];
                h[a * d + a] += l2;
            }
        }
        (g, h)
    }

    /// Damped Newton: halve the step until the loss decreases; a tiny ridge
    /// keeps the Hessian solvable.
    fn newton(&self, l2: f64, opts: &LogisticOptions) -> (Vec<f64>, usize, f64, bool) {
        let d = self.dim();
        let mut w = vec![0.0; d];
        let mut f = self.loss(&w, l2);
        let mut gnorm = f64::INFINITY;
        for it in 0..opts.max_iter {
            let (g, mut h) = self.grad_hess(&w, l2);
            gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gnorm < opts.tol {
                return (w, it, gnorm, true);
            }
            for a in 0..d {
                h[a * d + a] += 1e-10;
            }
            let step = match cholesky_solve(&h, &g, d) {
                Ok(s) => s.x,
                Err(_) => g.clone(),
            };
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = w.iter().zip(&step).map(|(a, b)| a - t * b).collect();
                let fc = self.loss(&cand, l2);
                if fc <= f || t < 1e-10 {
                    w = cand;
                    f = fc;
                    break;
                }
                t *= 0.5;
            }
            if w.iter().map(|v| v * v).sum::<f64>().sqrt() > opts.divergence_norm {
                return (w, it + 1, gnorm, false);
            }
        }
        (w, opts.max_iter, gnorm, false)
    }
}

/// Maximum-likelihood logistic regression. Constant labels are rejected; a fit
/// that diverges or fails to converge is redone with an L2 penalty and flagged.
pub fn fit_logistic(
    features: &[Vec<f64>],
    labels: &[bool],
    opts: &LogisticOptions,
) -> Result<LogisticFit> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::param(
            "logistic regression needs matching, non-empty inputs",
        ));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Degenerate(
            "treatment labels are constant; propensity is not identifiable".into(),
        ));
    }
    let d = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for r in features {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for r in features {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    }
    let design = Design {
        rows: features
            .iter()
            .map(|r| {
                std::iter::once(1.0)
                    .chain(r.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s))
                    .collect()
            })
            .collect(),
        labels: labels.iter().map(|&l| f64::from(u8::from(l))).collect(),
    };
    let (mut coef, mut iterations, mut grad_norm, mut converged) = design.newton(0.0, opts);
    let mut regularized = false;
    if !converged {
        (coef, iterations, grad_norm, converged) = design.newton(opts.fallback_l2, opts);
        regularized = true;
    }
    Ok(LogisticFit {
        coef,
        mean,
        std,
        iterations,
        grad_norm,
        converged,
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_balanced_rate() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![(i % 7) as f64]).collect();
        let y: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
        let m = fit_logistic(&x, &y, &LogisticOptions::default()).unwrap();
        assert!(m.converged && !m.regularized);
        assert!((m.predict(&[3.0]) - 0.5).abs() < 0.1);
    }

    #[test]
    fn constant_labels_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            fit_logistic(&x, &[true, true], &LogisticOptions::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn separable_data_falls_back() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let m = fit_logistic(&x, &y, &LogisticOptions::default()).unwrap();
        assert!(m.regularized);
        assert!(m.predict(&[0.0]) < 0.5 && m.predict(&[19.0]) > 0.5);
    }
}
