use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::ParamSet;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub steps: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One descent step with learning rate `lr`. Parameters without a
    /// gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        self.steps += 1;
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of `{name}`"),
                });
            }
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "optimizer step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * gv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                    let c1 = 1.0 - beta1.powi(self.steps as i32);
                    let c2 = 1.0 - beta2.powi(self.steps as i32);
                    for (((x, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Moves `shadow` toward `live`: `e ← β·e + (1 − β)·θ`.
///
/// Written as `e + (1 − β)(θ − e)` so an unchanged parameter leaves its shadow
/// bitwise unchanged; `β = 0` copies.
pub fn ema_update(shadow: &mut ParamSet, live: &ParamSet, beta: f64) -> Result<()> {
    for (name, e) in shadow.iter_mut() {
        let t = live.get(name)?;
        if beta == 0.0 {
            *e = t.clone();
            continue;
        }
        for (ev, tv) in e.data_mut().iter_mut().zip(t.data()) {
            *ev += (1.0 - beta) * (tv - *ev);
        }
    }
    Ok(())
}
