use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::{loss_conf, loss_factual, loss_ga};
use super::optim::{ema_update, GradMap, Optimizer, OptimizerKind};
use crate::diffcore::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    classify_treatment, encode, predict_outcome, Bound, CtConfig, CtParams, Dropout, ParamSet,
    SeqBatch,
};

/// How the representation is pushed toward treatment invariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Balancing {
    /// Counterfactual domain confusion with the iterative three-group update.
    #[default]
    Cdc,
    /// No adversarial part: only the outcome head and representation train.
    None,
    /// One joint objective with the classifier gradient reversed into `Φ`.
    GradientReversal { lambda: f64 },
}

/// Loss values seen during one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_gy: f64,
    pub l_ga: f64,
    pub l_conf: f64,
}

/// The gradient oracles consumed by [`adversarial_step`].
pub trait AdversarialObjective {
    /// `(∇θ_Y L_GY, ∇θ_R [L_GY + α·L_conf], L_GY, L_conf)` with the classifier
    /// fixed at `treatment`.
    fn outcome_grads(
        &mut self,
        repr: &ParamSet,
        outcome: &ParamSet,
        treatment: &ParamSet,
        alpha: f64,
    ) -> Result<(GradMap, GradMap, f64, f64)>;

    /// `(∇θ_A L_GA, L_GA)` with the representation fixed at `repr`.
    fn treatment_grads(&mut self, repr: &ParamSet, treatment: &ParamSet) -> Result<(GradMap, f64)>;

    /// Gradients of `L_GY + L_GA` for all three groups, with the classifier
    /// gradient multiplied by `−λ` on its way into the representation.
    fn reversal_grads(
        &mut self,
        params: &CtParams,
        lambda: f64,
    ) -> Result<([GradMap; 3], StepLosses)>;
}

/// Live parameters, their EMA shadows and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: CtParams,
    pub ema: CtParams,
    pub opt_repr: Optimizer,
    pub opt_outcome: Optimizer,
    pub opt_treatment: Optimizer,
    pub step: u64,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: CtParams, kind: OptimizerKind) -> Self {
        TrainState {
            ema: params.clone(),
            params,
            opt_repr: Optimizer::new(kind),
            opt_outcome: Optimizer::new(kind),
            opt_treatment: Optimizer::new(kind),
            step: 0,
            epoch: 0,
        }
    }
}

/// Per-step hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub balancing: Balancing,
}

fn check_finite(losses: &StepLosses, state: &TrainState) -> Result<()> {
    let vals = [
        ("L_GY", losses.l_gy),
        ("L_GA", losses.l_ga),
        ("L_conf", losses.l_conf),
    ];
    for (name, v) in vals {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: format!(
                    "{name} at step {} (epoch {}): losses {losses:?}",
                    state.step + 1,
                    state.epoch
                ),
            });
        }
    }
    Ok(())
}

/// One iteration of the adversarial update with EMA.
///
/// Order: outcome head step on `L_GY`; representation step on
/// `L_GY + α·L_conf` using the classifier's EMA shadow; EMA of both; classifier
/// step on `L_GA` using the representation's fresh EMA shadow; EMA of the
/// classifier. Both first steps read the pre-step parameters.
pub fn adversarial_step<O: AdversarialObjective + ?Sized>(
    state: &mut TrainState,
    objective: &mut O,
    cfg: &StepConfig,
) -> Result<StepLosses> {
    if !(0.0..1.0).contains(&cfg.beta) {
        return Err(Error::param(format!(
            "EMA smoothing {} outside [0, 1)",
            cfg.beta
        )));
    }
    if cfg.alpha < 0.0 || cfg.lr < 0.0 {
        return Err(Error::param("learning rate and α must be non-negative"));
    }
    let mut losses = StepLosses::default();
    match cfg.balancing {
        Balancing::GradientReversal { lambda } => {
            let ([g_r, g_y, g_a], l) = objective.reversal_grads(&state.params, lambda)?;
            losses = l;
            check_finite(&losses, state)?;
            state
                .opt_outcome
                .step(&mut state.params.outcome, &g_y, cfg.lr)?;
            state.opt_repr.step(&mut state.params.repr, &g_r, cfg.lr)?;
            state
                .opt_treatment
                .step(&mut state.params.treatment, &g_a, cfg.lr)?;
            ema_update(&mut state.ema.outcome, &state.params.outcome, cfg.beta)?;
            ema_update(&mut state.ema.repr, &state.params.repr, cfg.beta)?;
            ema_update(&mut state.ema.treatment, &state.params.treatment, cfg.beta)?;
        }
        Balancing::Cdc | Balancing::None => {
            let alpha = if cfg.balancing == Balancing::Cdc {
                cfg.alpha
            } else {
                0.0
            };
            let (g_y, g_r, l_gy, l_conf) = objective.outcome_grads(
                &state.params.repr,
                &state.params.outcome,
                &state.ema.treatment,
                alpha,
            )?;
            losses.l_gy = l_gy;
            losses.l_conf = l_conf;
            check_finite(&losses, state)?;
            state
                .opt_outcome
                .step(&mut state.params.outcome, &g_y, cfg.lr)?;
            state.opt_repr.step(&mut state.params.repr, &g_r, cfg.lr)?;
            ema_update(&mut state.ema.outcome, &state.params.outcome, cfg.beta)?;
            ema_update(&mut state.ema.repr, &state.params.repr, cfg.beta)?;
            if cfg.balancing == Balancing::Cdc {
                let (g_a, l_ga) =
                    objective.treatment_grads(&state.ema.repr, &state.params.treatment)?;
                losses.l_ga = l_ga;
                check_finite(&losses, state)?;
                state
                    .opt_treatment
                    .step(&mut state.params.treatment, &g_a, cfg.lr)?;
            }
            ema_update(&mut state.ema.treatment, &state.params.treatment, cfg.beta)?;
        }
    }
    state.step += 1;
    Ok(losses)
}

fn collect(grads: &Gradients, bound: &Bound<'_>) -> GradMap {
    bound
        .iter()
        .map(|(name, var)| (name.clone(), grads.wrt(*var)))
        .collect()
}

/// The Causal Transformer losses on one (augmented) minibatch.
pub struct CtObjective<'a, R: Rng + ?Sized> {
    pub cfg: &'a CtConfig,
    pub batch: &'a SeqBatch,
    pub training: bool,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> CtObjective<'_, R> {
    fn phi_at_targets<'t>(&mut self, repr: &Bound<'t>) -> Result<Var<'t>> {
        let mut drop = Dropout {
            p: self.cfg.dropout,
            attn: self.cfg.attn_dropout,
            training: self.training,
            rng: &mut *self.rng,
        };
        let phi = encode(self.cfg, repr, self.batch, &mut drop)?;
        if self.batch.target_rows.is_empty() {
            return Err(Error::param("minibatch has no target positions"));
        }
        phi.select_rows(&self.batch.target_rows)
    }

    fn targets(&self) -> (crate::diffcore::Tensor, crate::diffcore::Tensor) {
        let pick = |m: &crate::diffcore::Tensor| {
            let mut d = Vec::with_capacity(self.batch.target_rows.len() * m.cols());
            for &r in &self.batch.target_rows {
                d.extend_from_slice(m.row(r));
            }
            crate::diffcore::Tensor::new(vec![self.batch.target_rows.len(), m.cols()], d).unwrap()
        };
        (pick(&self.batch.a_cur), pick(&self.batch.y_next))
    }
}

impl<R: Rng + ?Sized> AdversarialObjective for CtObjective<'_, R> {
    fn outcome_grads(
        &mut self,
        repr: &ParamSet,
        outcome: &ParamSet,
        treatment: &ParamSet,
        alpha: f64,
    ) -> Result<(GradMap, GradMap, f64, f64)> {
        let tape = Tape::new();
        let r = repr.bind(&tape, true);
        let y = outcome.bind(&tape, true);
        let a = treatment.bind(&tape, false);
        let phi = self.phi_at_targets(&r)?;
        let (a_t, y_next) = self.targets();
        let pred = predict_outcome(&y, phi, tape.constant(a_t))?;
        let l_gy = loss_factual(pred, &y_next)?;
        let l_conf = loss_conf(classify_treatment(&a, phi)?)?;
        let total = if alpha > 0.0 {
            l_gy.add(l_conf.scale(alpha)?)?
        } else {
            l_gy
        };
        let grads = tape.backward(total)?;
        Ok((
            collect(&grads, &y),
            collect(&grads, &r),
            l_gy.item(),
            l_conf.item(),
        ))
    }

    fn treatment_grads(&mut self, repr: &ParamSet, treatment: &ParamSet) -> Result<(GradMap, f64)> {
        let tape = Tape::new();
        let r = repr.bind(&tape, false);
        let a = treatment.bind(&tape, true);
        let phi = self.phi_at_targets(&r)?;
        let (a_t, _) = self.targets();
        let l_ga = loss_ga(classify_treatment(&a, phi)?, &a_t)?;
        let grads = tape.backward(l_ga)?;
        Ok((collect(&grads, &a), l_ga.item()))
    }

    fn reversal_grads(
        &mut self,
        params: &CtParams,
        lambda: f64,
    ) -> Result<([GradMap; 3], StepLosses)> {
        let tape = Tape::new();
        let r = params.repr.bind(&tape, true);
        let y = params.outcome.bind(&tape, true);
        let a = params.treatment.bind(&tape, true);
        let phi = self.phi_at_targets(&r)?;
        let (a_t, y_next) = self.targets();
        let pred = predict_outcome(&y, phi, tape.constant(a_t.clone()))?;
        let l_gy = loss_factual(pred, &y_next)?;
        let probs = classify_treatment(&a, phi.grad_reverse(lambda)?)?;
        let l_ga = loss_ga(probs, &a_t)?;
        let l_conf = loss_conf(probs)?;
        let grads = tape.backward(l_gy.add(l_ga)?)?;
        Ok((
            [
                collect(&grads, &r),
                collect(&grads, &y),
                collect(&grads, &a),
            ],
            StepLosses {
                l_gy: l_gy.item(),
                l_ga: l_ga.item(),
                l_conf: l_conf.item(),
            },
        ))
    }
}
