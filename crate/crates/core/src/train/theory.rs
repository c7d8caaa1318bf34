//! Closed forms for the optimal classifier and the representation objective
//! on finite spaces.

use crate::error::{Error, Result};

/// Optimal classifier output at one point: `G*_j = α_j P_j / Σ_i α_i P_i`.
pub fn lemma1_oracle(priors: &[f64], densities: &[f64]) -> Result<Vec<f64>> {
    if priors.len() != densities.len() || priors.is_empty() {
        return Err(Error::param(
            "priors and densities must have the same non-zero length",
        ));
    }
    if priors
        .iter()
        .chain(densities)
        .any(|&v| v < 0.0 || !v.is_finite())
    {
        return Err(Error::param(
            "priors and densities must be finite and non-negative",
        ));
    }
    let weighted: Vec<f64> = priors.iter().zip(densities).map(|(a, p)| a * p).collect();
    let total: f64 = weighted.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all weighted densities are zero".into()));
    }
    Ok(weighted.into_iter().map(|w| w / total).collect())
}

/// The classifier's pointwise objective `Σ_j α_j P_j log G_j`.
pub fn classifier_objective(priors: &[f64], densities: &[f64], g: &[f64]) -> f64 {
    priors
        .iter()
        .zip(densities)
        .zip(g)
        .map(|((a, p), gj)| {
            let w = a * p;
            if w == 0.0 {
                0.0
            } else {
                w * gj.ln()
            }
        })
        .sum()
}

/// `KL(p ‖ q)` over a finite support; `+∞` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        acc += pi * (pi / qi).ln();
    }
    acc
}

/// Distribution of the representation under treatment `j`: pushes the
/// history distribution through `map` (history index → representation index).
pub fn pushforward(map: &[usize], history_probs: &[f64], n_repr: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_repr];
    for (&r, &p) in map.iter().zip(history_probs) {
        out[r] += p;
    }
    out
}

/// Representation objective `Σ_j KL(Σ_i α_i P^Φ_i ‖ P^Φ_j)` for a map on a
/// finite history space. `conditionals[j]` is the history distribution under
/// treatment `j`.
pub fn theorem1_objective(
    map: &[usize],
    n_repr: usize,
    priors: &[f64],
    conditionals: &[Vec<f64>],
) -> Result<f64> {
    if priors.len() != conditionals.len() {
        return Err(Error::param("one conditional per treatment is required"));
    }
    if map.iter().any(|&r| r >= n_repr) {
        return Err(Error::param("map points outside the representation space"));
    }
    for c in conditionals {
        if c.len() != map.len() {
            return Err(Error::param("conditionals must cover the history space"));
        }
    }
    let pushed: Vec<Vec<f64>> = conditionals
        .iter()
        .map(|c| pushforward(map, c, n_repr))
        .collect();
    let mut mixture = vec![0.0; n_repr];
    for (a, p) in priors.iter().zip(&pushed) {
        for (m, v) in mixture.iter_mut().zip(p) {
            *m += a * v;
        }
    }
    Ok(pushed.iter().map(|p| kl_divergence(&mixture, p)).sum())
}

/// Every map from `n_hist` histories to `n_repr` points, in lexicographic order.
pub fn all_maps(n_hist: usize, n_repr: usize) -> Vec<Vec<usize>> {
    let total = n_repr.pow(n_hist as u32);
    (0..total)
        .map(|mut code| {
            (0..n_hist)
                .map(|_| {
                    let r = code % n_repr;
                    code /= n_repr;
                    r
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lemma1_examples() {
        let g = lemma1_oracle(&[0.5, 0.5], &[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.5, 0.5]);
        let g = lemma1_oracle(&[0.3, 0.7], &[2.0, 1.0]).unwrap();
        assert!((g[0] - 0.6 / 1.3).abs() < 1e-15);
        assert!((g[0] - 0.461_538).abs() < 1e-6 && (g[1] - 0.538_462).abs() < 1e-6);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(
            lemma1_oracle(&[0.5, 0.5], &[0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn kl_edge_cases() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
        assert!(kl_divergence(&[0.9, 0.1], &[0.5, 0.5]) > 0.0);
    }

    #[test]
    fn balanced_map_scores_zero() {
        let priors = [0.4, 0.6];
        let cond = vec![vec![0.3, 0.2, 0.1, 0.4], vec![0.1, 0.4, 0.2, 0.3]];
        assert!(
            theorem1_objective(&[0, 0, 1, 1], 2, &priors, &cond)
                .unwrap()
                .abs()
                < 1e-15
        );
        assert_eq!(
            theorem1_objective(&[0, 0, 0, 0], 2, &priors, &cond).unwrap(),
            0.0
        );
        assert!(theorem1_objective(&[0, 1, 0, 1], 2, &priors, &cond).unwrap() > 0.0);
        assert_eq!(all_maps(4, 2).len(), 16);
    }
}
