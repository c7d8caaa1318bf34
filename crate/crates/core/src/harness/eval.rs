use std::collections::HashMap;
use std::io::Write;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{
    outcome_head, representations, rollout_many, Checkpoint, CtConfig, PatientTrajectory,
    RolloutQuery, SeqBatch, Standardizer,
};
use crate::msm::{fit_logistic, fit_msm, LogisticOptions, MsmModel, MsmPatient};
use crate::train::{train, TrainConfig, TrainResult};
use crate::tumorsim::{one_hot, treatment_parts, Counterfactual, Dataset, Split, N_TREATMENTS};

use super::metrics::normalized_rmse;

const CHUNK: usize = 128;

/// Covariate and outcome standardizers fitted on the training split.
pub fn fit_scalers(train: &[PatientTrajectory]) -> Result<(Standardizer, Standardizer)> {
    Ok((
        Standardizer::fit(train.iter().map(|t| &t.x))?,
        Standardizer::fit(train.iter().map(|t| &t.y))?,
    ))
}

pub fn scale_trajectory(
    t: &PatientTrajectory,
    x: &Standardizer,
    y: &Standardizer,
) -> PatientTrajectory {
    PatientTrajectory {
        x: x.transform(&t.x),
        a: t.a.clone(),
        y: y.transform(&t.y),
        v: t.v.clone(),
    }
}

/// Model trajectories of one split, scaled with the checkpoint's standardizers.
pub fn model_inputs(ck: &Checkpoint, data: &Dataset, split: Split) -> Vec<PatientTrajectory> {
    let raw = data.trajectories(split);
    let d_x = ck.config.d_x;
    let d_y = ck.config.d_y;
    let xs = ck
        .x_scaler
        .clone()
        .unwrap_or_else(|| Standardizer::identity(d_x));
    let ys = ck
        .y_scaler
        .clone()
        .unwrap_or_else(|| Standardizer::identity(d_y));
    raw.iter().map(|t| scale_trajectory(t, &xs, &ys)).collect()
}

/// Input and output widths of the simulator data.
pub fn simulator_dims(mut cfg: CtConfig) -> CtConfig {
    cfg.d_x = 2;
    cfg.d_a = N_TREATMENTS;
    cfg.d_y = 1;
    cfg.d_v = 1;
    cfg
}

/// Trains the Causal Transformer on the training split with standardized
/// covariates and outcomes; the checkpoint carries the EMA parameters.
pub fn train_ct(
    model: &CtConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    log: Option<&mut dyn Write>,
) -> Result<(Checkpoint, TrainResult)> {
    let train_raw = data.trajectories(Split::Train);
    let (xs, ys) = fit_scalers(&train_raw)?;
    let train_set: Vec<_> = train_raw
        .iter()
        .map(|t| scale_trajectory(t, &xs, &ys))
        .collect();
    let val_set: Vec<_> = data
        .trajectories(Split::Val)
        .iter()
        .map(|t| scale_trajectory(t, &xs, &ys))
        .collect();
    let result = train(model, cfg, &train_set, &val_set, log)?;
    let mut ck = Checkpoint::new(model.clone(), result.state.params.clone());
    ck.ema = Some(result.state.ema.clone());
    ck.x_scaler = Some(xs);
    ck.y_scaler = Some(ys);
    Ok((ck, result))
}

/// Representations `Φ_t` for every position of every trajectory, row
/// `i·T + t` for trajectory `i`.
pub fn all_representations(ck: &Checkpoint, trajs: &[PatientTrajectory]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for chunk in trajs.chunks(CHUNK) {
        let refs: Vec<&PatientTrajectory> = chunk.iter().collect();
        let batch = SeqBatch::from_trajectories(&refs)?;
        let phi = representations(&ck.config, ck.eval_params(), &batch)?;
        rows += phi.rows();
        data.extend_from_slice(phi.data());
    }
    Tensor::new(vec![rows, ck.config.d_r], data)
}

/// Aligned predictions and ground truth for one horizon.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Horizon {
    pub tau: usize,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
}

impl Horizon {
    pub fn rmse(&self, v_max: f64) -> Result<f64> {
        normalized_rmse(&self.pred, &self.truth, v_max)
    }
}

fn patient_index(data: &Dataset) -> HashMap<usize, usize> {
    data.test
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id, i))
        .collect()
}

fn lookup(index: &HashMap<usize, usize>, cf: &Counterfactual) -> Result<usize> {
    index.get(&cf.patient).copied().ok_or_else(|| {
        Error::param(format!(
            "counterfactual for unknown test patient {}",
            cf.patient
        ))
    })
}

/// One-step counterfactual predictions. `Φ_t` does not see `A_t`, so one
/// factual pass per patient serves all four treatments at every origin.
pub fn ct_one_step(ck: &Checkpoint, data: &Dataset) -> Result<Horizon> {
    let trajs = model_inputs(ck, data, Split::Test);
    let t_len = trajs.first().map_or(0, PatientTrajectory::len);
    let phi = all_representations(ck, &trajs)?;
    let index = patient_index(data);
    let cfs = &data.test_cf.one_step;
    let d_r = ck.config.d_r;
    let mut phi_rows = Vec::with_capacity(cfs.len() * d_r);
    let mut a_rows = Vec::with_capacity(cfs.len() * N_TREATMENTS);
    let mut truth = Vec::with_capacity(cfs.len());
    for cf in cfs {
        let i = lookup(&index, cf)?;
        if cf.origin >= t_len {
            return Err(Error::param(format!(
                "origin {} beyond the trajectory",
                cf.origin
            )));
        }
        phi_rows.extend_from_slice(phi.row(i * t_len + cf.origin));
        a_rows.extend_from_slice(&one_hot(cf.intervention[0]));
        truth.push(cf.outcomes[0]);
    }
    if truth.is_empty() {
        return Err(Error::param("no one-step counterfactuals"));
    }
    let n = truth.len();
    let y = outcome_head(
        ck.eval_params(),
        &Tensor::new(vec![n, d_r], phi_rows)?,
        &Tensor::new(vec![n, N_TREATMENTS], a_rows)?,
    )?;
    let y = match &ck.y_scaler {
        Some(s) => s.inverse(&y),
        None => y,
    };
    Ok(Horizon {
        tau: 1,
        pred: y.data().to_vec(),
        truth,
    })
}

/// Horizons `2..=tau_max` from autoregressive rollouts over the multi-step
/// counterfactuals.
pub fn ct_multi_step(ck: &Checkpoint, data: &Dataset, tau_max: usize) -> Result<Vec<Horizon>> {
    let trajs = model_inputs(ck, data, Split::Test);
    let index = patient_index(data);
    let cfs = &data.test_cf.multi_step;
    let mut horizons: Vec<Horizon> = (2..=tau_max)
        .map(|tau| Horizon {
            tau,
            ..Horizon::default()
        })
        .collect();
    if tau_max < 2 {
        return Ok(horizons);
    }
    let interventions: Vec<Tensor> = cfs
        .iter()
        .map(|cf| {
            let steps = tau_max.min(cf.intervention.len());
            let mut d = Vec::with_capacity(steps * N_TREATMENTS);
            for &c in &cf.intervention[..steps] {
                d.extend_from_slice(&one_hot(c));
            }
            Tensor::new(vec![steps, N_TREATMENTS], d)
        })
        .collect::<Result<_>>()?;
    let mut queries = Vec::with_capacity(cfs.len());
    for (cf, iv) in cfs.iter().zip(&interventions) {
        queries.push(RolloutQuery {
            traj: &trajs[lookup(&index, cf)?],
            origin: cf.origin,
            intervention: iv,
        });
    }
    let preds = rollout_many(&ck.config, ck.eval_params(), &queries)?;
    for (cf, p) in cfs.iter().zip(preds) {
        let p = match &ck.y_scaler {
            Some(s) => s.inverse(&p),
            None => p,
        };
        for h in horizons.iter_mut() {
            if h.tau <= p.rows() {
                h.pred.push(p.row(h.tau - 1)[0]);
                h.truth.push(cf.outcomes[h.tau - 1]);
            }
        }
    }
    Ok(horizons)
}

/// Training and validation patients in the baseline's form.
pub fn msm_patients(data: &Dataset, splits: &[Split]) -> Result<Vec<MsmPatient>> {
    let mut out = Vec::new();
    for &s in splits {
        for t in data.trajectories(s) {
            out.push(MsmPatient::from_trajectory(&t)?);
        }
    }
    Ok(out)
}

/// Fits the baseline on the merged training and validation splits.
pub fn fit_msm_baseline(data: &Dataset, tau_max: usize) -> Result<MsmModel> {
    let fit_set = msm_patients(data, &[Split::Train, Split::Val])?;
    fit_msm(&fit_set, tau_max, &LogisticOptions::default())
}

fn bits(cat: usize) -> Vec<bool> {
    let (c, r) = treatment_parts(cat);
    vec![c, r]
}

/// Baseline predictions for horizons `1..=tau_max`: horizon 1 from the
/// one-step set, longer horizons from the multi-step set.
pub fn msm_horizons(model: &MsmModel, data: &Dataset, tau_max: usize) -> Result<Vec<Horizon>> {
    let test = msm_patients(data, &[Split::Test])?;
    let index = patient_index(data);
    let mut one = Horizon {
        tau: 1,
        ..Horizon::default()
    };
    for cf in &data.test_cf.one_step {
        let p = &test[lookup(&index, cf)?];
        one.pred
            .push(model.predict(p, cf.origin, &[bits(cf.intervention[0])])?[0]);
        one.truth.push(cf.outcomes[0]);
    }
    let mut out = vec![one];
    for tau in 2..=tau_max {
        let mut h = Horizon {
            tau,
            ..Horizon::default()
        };
        for cf in &data.test_cf.multi_step {
            if cf.intervention.len() < tau {
                continue;
            }
            let p = &test[lookup(&index, cf)?];
            let iv: Vec<Vec<bool>> = cf.intervention[..tau].iter().map(|&c| bits(c)).collect();
            h.pred.push(model.predict(p, cf.origin, &iv)?[tau - 1]);
            h.truth.push(cf.outcomes[tau - 1]);
        }
        out.push(h);
    }
    Ok(out)
}

/// Treatment-probe accuracies from frozen representations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeScore {
    /// Components thresholded at their training prevalence.
    pub prior_corrected: f64,
    /// Components thresholded at one half.
    pub raw: f64,
}

/// Logistic probes predicting the factual treatment components from frozen
/// `Φ_t`: fitted on training positions, scored on test positions. A
/// prediction counts when every component is right.
pub fn probe_accuracy(ck: &Checkpoint, data: &Dataset) -> Result<ProbeScore> {
    let features = |split: Split| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let trajs = model_inputs(ck, data, split);
        let phi = all_representations(ck, &trajs)?;
        let mut labels = Vec::with_capacity(phi.rows());
        for t in &trajs {
            for i in 0..t.len() {
                labels.push(t.a.row(i).iter().position(|&v| v == 1.0).unwrap_or(0));
            }
        }
        Ok((
            (0..phi.rows()).map(|r| phi.row(r).to_vec()).collect(),
            labels,
        ))
    };
    let (x_train, y_train) = features(Split::Train)?;
    let (x_test, y_test) = features(Split::Test)?;
    let opts = LogisticOptions::default();
    let mut models = Vec::new();
    for part in [|c| treatment_parts(c).0, |c| treatment_parts(c).1] {
        let labels: Vec<bool> = y_train.iter().map(|&c| part(c)).collect();
        let prevalence = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
        models.push((fit_logistic(&x_train, &labels, &opts)?, prevalence));
    }
    let score = |threshold: &dyn Fn(f64) -> f64| {
        let hits = x_test
            .iter()
            .zip(&y_test)
            .filter(|(f, &c)| {
                let (tc, tr) = treatment_parts(c);
                let [(mc, pc), (mr, pr)] = [&models[0], &models[1]];
                (mc.predict(f) > threshold(*pc)) == tc && (mr.predict(f) > threshold(*pr)) == tr
            })
            .count();
        hits as f64 / y_test.len() as f64
    };
    Ok(ProbeScore {
        prior_corrected: score(&|p| p),
        raw: score(&|_| 0.5),
    })
}
