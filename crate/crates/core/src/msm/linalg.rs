use crate::error::{Error, Result};

pub struct Solve {
    pub x: Vec<f64>,
    /// Squared ratio of the largest to smallest Cholesky pivot; a cheap
    /// condition-number estimate.
    pub condition: f64,
}

/// Solves `A x = b` for symmetric positive definite row-major `A` (`n × n`).
pub fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Solve> {
    if a.len() != n * n || b.len() != n {
        return Err(Error::Dimension {
            op: "cholesky_solve",
            left: vec![a.len()],
            right: vec![n, b.len()],
        });
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Degenerate(format!(
                        "matrix not positive definite at pivot {i}"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    let diag = (0..n).map(|i| l[i * n + i]);
    let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| {
        (lo.min(d), hi.max(d))
    });
    Ok(Solve {
        x,
        condition: (hi / lo).powi(2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let s = cholesky_solve(&a, &[2.0, 1.0], 2).unwrap();
        assert!((s.x[0] - 0.5).abs() < 1e-15 && s.x[1].abs() < 1e-15);
        assert!(cholesky_solve(&[1.0, 2.0, 2.0, 1.0], &[0.0, 0.0], 2).is_err());
    }
}
