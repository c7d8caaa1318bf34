//! Marginal structural models: logistic propensity models, stabilized inverse
//! probability of treatment weights, and one weighted linear outcome
//! regression per horizon.

mod linalg;
mod logistic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PatientTrajectory;

pub use linalg::{cholesky_solve, Solve};
pub use logistic::{fit_logistic, LogisticFit, LogisticOptions};

/// Floor applied to denominator probabilities.
pub const PROB_FLOOR: f64 = 1e-6;
/// Ridge added to the outcome normal equations (intercept excluded).
pub const RIDGE: f64 = 1e-8;
/// Condition estimate above which an outcome solve is flagged.
pub const COND_FLAG: f64 = 1e12;

/// One patient in the form the baseline consumes: time-varying covariates,
/// outcomes, statics and binary treatment components.
#[derive(Clone, Debug, PartialEq)]
pub struct MsmPatient {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<Vec<bool>>,
}

impl MsmPatient {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Splits a one-hot treatment trajectory over `2^k` categories into `k`
    /// binary components (category bit `j` is component `j`).
    pub fn from_trajectory(t: &PatientTrajectory) -> Result<Self> {
        let d_a = t.a.cols();
        let k = d_a.trailing_zeros() as usize;
        if d_a != 1 << k || d_a < 2 {
            return Err(Error::param(
                "treatment categories must be a power of two ≥ 2",
            ));
        }
        let a = (0..t.len())
            .map(|i| {
                let cat = t.a.row(i).iter().position(|&v| v == 1.0).unwrap_or(0);
                (0..k).map(|j| cat >> j & 1 == 1).collect()
            })
            .collect();
        Ok(MsmPatient {
            x: (0..t.len()).map(|i| t.x.row(i).to_vec()).collect(),
            y: (0..t.len()).map(|i| t.y.row(i)[0]).collect(),
            v: t.v.clone(),
            a,
        })
    }

    fn n_components(&self) -> usize {
        self.a.first().map_or(0, Vec::len)
    }

    /// Applications of each component strictly before `t`.
    fn counts(&self, t: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.n_components()];
        for a in &self.a[..t] {
            for (cj, &aj) in c.iter_mut().zip(a) {
                if aj {
                    *cj += 1.0;
                }
            }
        }
        c
    }

    /// `[X_t, X_{t−1}, Y_t, Y_{t−1}, V, counts]`; lags at `t = 0` repeat `t`.
    pub fn history_features(&self, t: usize) -> Vec<f64> {
        let p = t.saturating_sub(1);
        let mut f = Vec::new();
        f.extend_from_slice(&self.x[t]);
        f.extend_from_slice(&self.x[p]);
        f.push(self.y[t]);
        f.push(self.y[p]);
        f.extend_from_slice(&self.v);
        f.extend(self.counts(t));
        f
    }

    pub fn treatment_features(&self, t: usize) -> Vec<f64> {
        self.counts(t)
    }
}

/// Which conditioning set a propensity model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Past treatment counts only (nominator).
    Treatments,
    /// Full history (denominator).
    History,
}

/// One logistic model per treatment component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Propensity {
    pub conditioning: Conditioning,
    pub components: Vec<LogisticFit>,
}

impl Propensity {
    fn features(&self, p: &MsmPatient, t: usize) -> Vec<f64> {
        match self.conditioning {
            Conditioning::Treatments => p.treatment_features(t),
            Conditioning::History => p.history_features(t),
        }
    }

    /// `P(A_t = a_t | ·)` assuming independent components given the features.
    pub fn prob_of(&self, p: &MsmPatient, t: usize, a: &[bool]) -> f64 {
        let f = self.features(p, t);
        self.components
            .iter()
            .zip(a)
            .map(|(m, &aj)| {
                let q = m.predict(&f);
                if aj {
                    q
                } else {
                    1.0 - q
                }
            })
            .product()
    }

    pub fn any_regularized(&self) -> bool {
        self.components.iter().any(|c| c.regularized)
    }
}

/// Fits one propensity model per treatment component on every time step.
pub fn fit_propensity(
    data: &[MsmPatient],
    conditioning: Conditioning,
    opts: &LogisticOptions,
) -> Result<Propensity> {
    let k = data
        .first()
        .map(MsmPatient::n_components)
        .ok_or_else(|| Error::param("no patients to fit"))?;
    let mut features = Vec::new();
    let mut labels = vec![Vec::new(); k];
    for p in data {
        for t in 0..p.len() {
            features.push(match conditioning {
                Conditioning::Treatments => p.treatment_features(t),
                Conditioning::History => p.history_features(t),
            });
            for (j, l) in labels.iter_mut().enumerate() {
                l.push(p.a[t][j]);
            }
        }
    }
    let components = labels
        .iter()
        .enumerate()
        .map(|(j, l)| {
            fit_logistic(&features, l, opts)
                .map_err(|e| e.in_stage(format!("propensity component {j}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Propensity {
        conditioning,
        components,
    })
}

/// A rolling-origin chunk: predict `Y_{origin+τ}` from the history at `origin`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub patient: usize,
    pub origin: usize,
}

/// Every chunk whose `τ`-step target lies inside the trajectory.
pub fn chunks(data: &[MsmPatient], tau: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    for (i, p) in data.iter().enumerate() {
        for origin in 1..p.len().saturating_sub(tau) {
            out.push(Chunk { patient: i, origin });
        }
    }
    out
}

/// Raw stabilized weight of one chunk: product over the `τ` applied treatments
/// of nominator over denominator probabilities. The flag reports whether a
/// denominator probability hit the floor.
pub fn raw_weight(
    num: &Propensity,
    den: &Propensity,
    p: &MsmPatient,
    origin: usize,
    tau: usize,
) -> (f64, bool) {
    let mut w = 1.0;
    let mut floored = false;
    for n in origin..origin + tau {
        let q = den.prob_of(p, n, &p.a[n]);
        if q < PROB_FLOOR {
            floored = true;
        }
        w *= num.prob_of(p, n, &p.a[n]) / q.max(PROB_FLOOR);
    }
    (w, floored)
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Stabilized weights of a chunk set after normalization and truncation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub values: Vec<f64>,
    /// Mean of the normalized weights before truncation.
    pub normalized_mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub floored: usize,
}

/// Weights normalized to mean 1 and clamped to their 1st and 99th percentiles.
pub fn stabilized_weights(
    num: &Propensity,
    den: &Propensity,
    data: &[MsmPatient],
    chunks: &[Chunk],
    tau: usize,
) -> Result<Weights> {
    if chunks.is_empty() {
        return Err(Error::param("no chunks to weight"));
    }
    let mut floored = 0;
    let mut raw: Vec<f64> = chunks
        .iter()
        .map(|c| {
            let (w, f) = raw_weight(num, den, &data[c.patient], c.origin, tau);
            floored += usize::from(f);
            w
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::NonFinite {
            op: "stabilized weight normalization".into(),
        });
    }
    for w in &mut raw {
        *w /= mean;
    }
    let normalized_mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let mut sorted = raw.clone();
    sorted.sort_by(f64::total_cmp);
    let lower = quantile(&sorted, 0.01);
    let upper = quantile(&sorted, 0.99);
    for w in &mut raw {
        *w = w.clamp(lower, upper);
    }
    Ok(Weights {
        values: raw,
        normalized_mean,
        lower,
        upper,
        floored,
    })
}

/// Outcome features: history at the origin followed by the component bits
/// of each of the `τ` interventions.
pub fn outcome_features(p: &MsmPatient, origin: usize, intervention: &[Vec<bool>]) -> Vec<f64> {
    let mut f = p.history_features(origin);
    for a in intervention {
        f.extend(a.iter().map(|&b| f64::from(u8::from(b))));
    }
    f
}

/// Weighted least-squares model for one horizon, on centered features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub tau: usize,
    /// Intercept first.
    pub coef: Vec<f64>,
    pub mean: Vec<f64>,
    pub condition: f64,
    pub ill_conditioned: bool,
}

impl OutcomeModel {
    pub fn predict(&self, features: &[f64]) -> f64 {
        let mut acc = self.coef[0];
        for (j, &f) in features.iter().enumerate() {
            acc += self.coef[j + 1] * (f - self.mean[j]);
        }
        acc
    }
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; rows[0].len()];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Closed-form weighted least squares on `rows` → `targets`.
pub fn fit_wls(
    rows: &[Vec<f64>],
    targets: &[f64],
    weights: Option<&[f64]>,
    tau: usize,
) -> Result<OutcomeModel> {
    if rows.is_empty() || rows.len() != targets.len() {
        return Err(Error::param(
            "outcome regression needs matching, non-empty rows and targets",
        ));
    }
    if let Some(w) = weights {
        if w.len() != rows.len() {
            return Err(Error::param("one weight per row is required"));
        }
    }
    let mean = column_means(rows);
    let d = rows[0].len() + 1;
    let mut xtx = vec![0.0; d * d];
    let mut xty = vec![0.0; d];
    let mut z = vec![0.0; d];
    for (i, (r, &y)) in rows.iter().zip(targets).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        z[0] = 1.0;
        for j in 0..d - 1 {
            z[j + 1] = r[j] - mean[j];
        }
        for a in 0..d {
            let wa = w * z[a];
            xty[a] += wa * y;
            for b in 0..=a {
                xtx[a * d + b] += wa * z[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtx[b * d + a] = xtx[a * d + b];
        }
        if a > 0 {
            xtx[a * d + a] += RIDGE;
        }
    }
    let Solve { x, condition } = cholesky_solve(&xtx, &xty, d)?;
    Ok(OutcomeModel {
        tau,
        coef: x,
        mean,
        condition,
        ill_conditioned: condition > COND_FLAG,
    })
}

/// Fits the `τ`-horizon outcome regression on factual chunks.
pub fn fit_outcome(
    data: &[MsmPatient],
    chunks: &[Chunk],
    weights: Option<&[f64]>,
    tau: usize,
) -> Result<OutcomeModel> {
    let mut rows = Vec::with_capacity(chunks.len());
    let mut targets = Vec::with_capacity(chunks.len());
    for c in chunks {
        let p = &data[c.patient];
        rows.push(outcome_features(
            p,
            c.origin,
            &p.a[c.origin..c.origin + tau],
        ));
        targets.push(p.y[c.origin + tau]);
    }
    fit_wls(&rows, &targets, weights, tau)
}

/// Quantiles of one horizon's truncated weights, kept for the summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub tau: usize,
    pub chunks: usize,
    pub normalized_mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub q50: f64,
    pub q90: f64,
    pub floored: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsmModel {
    pub nominator: Propensity,
    pub denominator: Propensity,
    /// `outcome[k]` predicts `k + 1` steps ahead.
    pub outcome: Vec<OutcomeModel>,
    pub weights: Vec<WeightSummary>,
}

/// Fits the propensity models and an outcome regression for every horizon
/// `1..=tau_max`.
pub fn fit_msm(data: &[MsmPatient], tau_max: usize, opts: &LogisticOptions) -> Result<MsmModel> {
    let nominator = fit_propensity(data, Conditioning::Treatments, opts)
        .map_err(|e| e.in_stage("nominator"))?;
    let denominator =
        fit_propensity(data, Conditioning::History, opts).map_err(|e| e.in_stage("denominator"))?;
    let mut outcome = Vec::with_capacity(tau_max);
    let mut weights = Vec::with_capacity(tau_max);
    for tau in 1..=tau_max {
        let ch = chunks(data, tau);
        let w = stabilized_weights(&nominator, &denominator, data, &ch, tau)?;
        let mut sorted = w.values.clone();
        sorted.sort_by(f64::total_cmp);
        weights.push(WeightSummary {
            tau,
            chunks: ch.len(),
            normalized_mean: w.normalized_mean,
            lower: w.lower,
            upper: w.upper,
            q50: quantile(&sorted, 0.5),
            q90: quantile(&sorted, 0.9),
            floored: w.floored,
        });
        outcome.push(
            fit_outcome(data, &ch, Some(&w.values), tau)
                .map_err(|e| e.in_stage(format!("outcome τ={tau}")))?,
        );
    }
    Ok(MsmModel {
        nominator,
        denominator,
        outcome,
        weights,
    })
}

impl MsmModel {
    /// Predicted outcomes `1..=len` steps after `origin` under `intervention`.
    pub fn predict(
        &self,
        p: &MsmPatient,
        origin: usize,
        intervention: &[Vec<bool>],
    ) -> Result<Vec<f64>> {
        if intervention.len() > self.outcome.len() {
            return Err(Error::param(format!(
                "horizon {} exceeds the fitted maximum {}",
                intervention.len(),
                self.outcome.len()
            )));
        }
        if origin >= p.len() {
            return Err(Error::param(format!(
                "origin {origin} outside the trajectory"
            )));
        }
        Ok((1..=intervention.len())
            .map(|k| self.outcome[k - 1].predict(&outcome_features(p, origin, &intervention[..k])))
            .collect())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.0);
        assert_eq!(quantile(&s, 0.0), 0.0);
        assert!((quantile(&s, 0.01) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn wls_recovers_linear_outcome() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![i as f64, ((i * 7) % 11) as f64])
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| 3.0 - 2.0 * r[0] + 0.5 * r[1]).collect();
        let m = fit_wls(&rows, &y, None, 1).unwrap();
        for (r, t) in rows.iter().zip(&y) {
            assert!((m.predict(r) - t).abs() < 1e-8, "{} {}", m.predict(r), t);
        }
    }

    #[test]
    fn unit_weights_match_unweighted_bitwise() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()])
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] * r[1] + 0.1).collect();
        let ones = vec![1.0; rows.len()];
        let a = fit_wls(&rows, &y, None, 1).unwrap();
        let b = fit_wls(&rows, &y, Some(&ones), 1).unwrap();
        assert_eq!(a, b);
    }
}
