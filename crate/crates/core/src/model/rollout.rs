use std::collections::BTreeMap;

use super::config::CtConfig;
use super::data::{PatientTrajectory, SeqBatch};
use super::forward::{outcome_head, representations};
use super::params::CtParams;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// A multi-step prediction request.
///
/// `origin` is the last observed position; `intervention` holds the `τ`
/// treatments applied at positions `origin, …, origin + τ − 1`.
#[derive(Clone, Copy, Debug)]
pub struct RolloutQuery<'a> {
    pub traj: &'a PatientTrajectory,
    pub origin: usize,
    pub intervention: &'a Tensor,
}

/// Predicts `Ŷ_{origin+1}, …, Ŷ_{origin+τ}` under an intervention.
///
/// After the origin, covariates are zeroed and hidden from attention and
/// predicted outcomes are fed back as outcome inputs.
pub fn rollout(
    cfg: &CtConfig,
    params: &CtParams,
    traj: &PatientTrajectory,
    origin: usize,
    intervention: &Tensor,
) -> Result<Tensor> {
    let q = RolloutQuery {
        traj,
        origin,
        intervention,
    };
    Ok(rollout_many(cfg, params, &[q])?.remove(0))
}

/// Batched [`rollout`]; queries sharing origin and horizon run together.
pub fn rollout_many(
    cfg: &CtConfig,
    params: &CtParams,
    queries: &[RolloutQuery<'_>],
) -> Result<Vec<Tensor>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        let tau = q.intervention.rows();
        if q.intervention.shape().len() != 2 || tau < 1 {
            return Err(Error::param("rollout needs a horizon of at least 1"));
        }
        if q.intervention.cols() != cfg.d_a {
            return Err(Error::config(format!(
                "intervention width {} does not match d_a = {}",
                q.intervention.cols(),
                cfg.d_a
            )));
        }
        if q.origin >= q.traj.len() {
            return Err(Error::param(format!(
                "origin {} outside a trajectory of length {}",
                q.origin,
                q.traj.len()
            )));
        }
        groups.entry((q.origin, tau)).or_default().push(i);
    }
    let mut out: Vec<Option<Tensor>> = vec![None; queries.len()];
    for ((origin, tau), members) in groups {
        let group: Vec<&RolloutQuery> = members.iter().map(|&i| &queries[i]).collect();
        let preds = rollout_group(cfg, params, &group, origin, tau)?;
        for (i, p) in members.into_iter().zip(preds) {
            out[i] = Some(p);
        }
    }
    Ok(out
        .into_iter()
        .map(|p| p.expect("every query answered"))
        .collect())
}

fn rollout_group(
    cfg: &CtConfig,
    params: &CtParams,
    group: &[&RolloutQuery<'_>],
    origin: usize,
    tau: usize,
) -> Result<Vec<Tensor>> {
    let d_y = cfg.d_y;
    let mut preds: Vec<Vec<f64>> = vec![Vec::with_capacity(tau * d_y); group.len()];
    for k in 1..=tau {
        let len = origin + k;
        let batch = horizon_batch(cfg, group, origin, len, &preds)?;
        let phi = representations(cfg, params, &batch)?;
        let rows: Vec<usize> = (0..group.len()).map(|b| b * len + len - 1).collect();
        let mut phi_last = Vec::with_capacity(rows.len() * cfg.d_r);
        let mut a_last = Vec::with_capacity(rows.len() * cfg.d_a);
        for (b, &r) in rows.iter().enumerate() {
            phi_last.extend_from_slice(phi.row(r));
            a_last.extend_from_slice(group[b].intervention.row(k - 1));
        }
        let y = outcome_head(
            params,
            &Tensor::new(vec![rows.len(), cfg.d_r], phi_last)?,
            &Tensor::new(vec![rows.len(), cfg.d_a], a_last)?,
        )?;
        for (b, p) in preds.iter_mut().enumerate() {
            p.extend_from_slice(y.row(b));
        }
    }
    preds
        .into_iter()
        .map(|p| Tensor::new(vec![tau, d_y], p))
        .collect()
}

/// Inputs for step `len − origin` of a rollout: observed data up to the
/// origin, intervention treatments and fed-back predictions after it.
fn horizon_batch(
    cfg: &CtConfig,
    group: &[&RolloutQuery<'_>],
    origin: usize,
    len: usize,
    preds: &[Vec<f64>],
) -> Result<SeqBatch> {
    let n = group.len();
    let (d_x, d_a, d_y, d_v) = (cfg.d_x, cfg.d_a, cfg.d_y, cfg.d_v);
    let mut a_prev = Vec::with_capacity(n * len * d_a);
    let mut a_cur = Vec::with_capacity(n * len * d_a);
    let mut x = Vec::with_capacity(n * len * d_x);
    let mut y = Vec::with_capacity(n * len * d_y);
    let mut v = Vec::with_capacity(n * d_v);
    let mut x_visible = Vec::with_capacity(n * len);
    let treatment_at = |q: &RolloutQuery, p: usize| -> Vec<f64> {
        if p < origin {
            q.traj.a.row(p).to_vec()
        } else {
            q.intervention.row(p - origin).to_vec()
        }
    };
    for (b, q) in group.iter().enumerate() {
        for p in 0..len {
            if p == 0 {
                a_prev.extend(std::iter::repeat_n(0.0, d_a));
            } else {
                a_prev.extend(treatment_at(q, p - 1));
            }
            a_cur.extend(treatment_at(q, p));
            if p <= origin {
                x.extend_from_slice(q.traj.x.row(p));
                y.extend_from_slice(q.traj.y.row(p));
                x_visible.push(true);
            } else {
                x.extend(std::iter::repeat_n(0.0, d_x));
                let step = p - origin - 1;
                y.extend_from_slice(&preds[b][step * d_y..(step + 1) * d_y]);
                x_visible.push(false);
            }
        }
        v.extend_from_slice(&q.traj.v);
    }
    Ok(SeqBatch {
        batch: n,
        len,
        a_prev: Tensor::new(vec![n * len, d_a], a_prev)?,
        x: Tensor::new(vec![n * len, d_x], x)?,
        y: Tensor::new(vec![n * len, d_y], y)?,
        v: Tensor::new(vec![n, d_v], v)?,
        a_cur: Tensor::new(vec![n * len, d_a], a_cur)?,
        y_next: Tensor::zeros(&[n * len, d_y]),
        x_visible,
        target_rows: Vec::new(),
    })
}
