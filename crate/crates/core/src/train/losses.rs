use crate::diffcore::{Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean squared error over every entry of `pred` against `target`.
pub fn loss_factual<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if target.is_empty() {
        return Err(Error::param("factual loss over an empty batch"));
    }
    let diff = pred.sub(pred.tape().constant(target.clone()))?;
    diff.mul(diff)?.mean()
}

/// Cross-entropy of the classifier against the observed treatments, averaged over rows.
pub fn loss_ga<'t>(probs: Var<'t>, onehot: &Tensor) -> Result<Var<'t>> {
    let rows = onehot.rows();
    if rows == 0 {
        return Err(Error::param("classification loss over an empty batch"));
    }
    let logp = probs.log_floor(PROB_FLOOR)?;
    logp.mul(probs.tape().constant(onehot.clone()))?
        .sum()?
        .scale(-1.0 / rows as f64)
}

/// Cross-entropy of the classifier against the uniform distribution, averaged over rows.
pub fn loss_conf(probs: Var<'_>) -> Result<Var<'_>> {
    let v = probs.value();
    let (rows, d_a) = (v.rows(), v.cols());
    if rows == 0 {
        return Err(Error::param("confusion loss over an empty batch"));
    }
    probs
        .log_floor(PROB_FLOOR)?
        .sum()?
        .scale(-1.0 / (rows * d_a) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn factual_examples() {
        let tape = Tape::new();
        let y = m(&[vec![0.5], vec![2.0]]);
        assert_eq!(
            loss_factual(tape.constant(y.clone()), &y).unwrap().item(),
            0.0
        );
        assert_eq!(
            loss_factual(tape.constant(m(&[vec![0.0]])), &m(&[vec![1.0]]))
                .unwrap()
                .item(),
            1.0
        );
        let l = loss_factual(
            tape.constant(m(&[vec![1.0], vec![1.0]])),
            &m(&[vec![0.0], vec![3.0]]),
        )
        .unwrap();
        assert!((l.item() - 2.5).abs() < 1e-15);
        assert!(loss_factual(
            tape.constant(Tensor::zeros(&[0, 1])),
            &Tensor::zeros(&[0, 1])
        )
        .is_err());
    }

    #[test]
    fn classification_examples() {
        let tape = Tape::new();
        let sure = m(&[vec![0.0, 1.0, 0.0, 0.0]]);
        assert_eq!(
            loss_ga(tape.constant(sure.clone()), &sure).unwrap().item(),
            0.0
        );
        let uniform = tape.constant(Tensor::filled(&[1, 4], 0.25));
        assert!((loss_ga(uniform, &sure).unwrap().item() - 4f64.ln()).abs() < 1e-12);
        let p = tape.constant(m(&[vec![0.7, 0.3]]));
        let l = loss_ga(p, &m(&[vec![0.0, 1.0]])).unwrap().item();
        assert!((l - 1.2040).abs() < 1e-4);
        // zero probability on the true class stays finite through the floor
        let l = loss_ga(tape.constant(m(&[vec![1.0, 0.0]])), &m(&[vec![0.0, 1.0]]))
            .unwrap()
            .item();
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn confusion_examples() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::filled(&[3, 4], 0.25));
        assert!((loss_conf(uniform).unwrap().item() - 4f64.ln()).abs() < 1e-12);
        let l = loss_conf(tape.constant(m(&[vec![0.9, 0.1]])))
            .unwrap()
            .item();
        assert!((l - 1.2040).abs() < 1e-4);
        assert!(l >= 2f64.ln());
    }
}
