//! Pharmacokinetic-pharmacodynamic tumor-growth simulator with confounded
//! chemotherapy and radiotherapy assignment.
//!
//! Each patient owns independent random streams (response, noise, assignment,
//! random interventions) derived from the dataset seed and the patient index,
//! so any counterfactual replay reuses exactly the factual noise.

mod io;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::model::PatientTrajectory;

pub use io::{load_dataset, save_dataset, COUNTERFACTUAL_FILE, FACTUAL_FILE};

/// Number of treatment categories: none, chemo, radio, both.
pub const N_TREATMENTS: usize = 4;

/// Sphere volume for a diameter.
pub fn volume_from_diameter(d: f64) -> f64 {
    PI / 6.0 * d.powi(3)
}

/// Sphere diameter for a volume, `(6V/π)^{1/3}`.
pub fn diameter_from_volume(v: f64) -> f64 {
    (6.0 * v / PI).cbrt()
}

/// Category index for a (chemo, radio) pair.
pub fn treatment_category(chemo: bool, radio: bool) -> usize {
    usize::from(chemo) + 2 * usize::from(radio)
}

/// (chemo, radio) pair for a category index.
pub fn treatment_parts(category: usize) -> (bool, bool) {
    (category & 1 == 1, category & 2 == 2)
}

pub fn one_hot(category: usize) -> [f64; N_TREATMENTS] {
    let mut v = [0.0; N_TREATMENTS];
    v[category] = 1.0;
    v
}

/// Mean and standard deviation of a normal truncated to positive values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositiveNormal {
    pub mean: f64,
    pub std: f64,
}

impl PositiveNormal {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let n = Normal::new(self.mean, self.std).expect("valid normal");
        loop {
            let v = n.sample(rng);
            if v > 0.0 {
                return v;
            }
        }
    }
}

/// Log-normal initial diameter for one cancer stage, truncated to `[lower, upper]` cm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePrior {
    pub weight: f64,
    pub log_mean: f64,
    pub log_std: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Every constant the simulator needs beyond the confounding level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponsePrior {
    pub rho: PositiveNormal,
    pub alpha_r: PositiveNormal,
    pub beta_c: PositiveNormal,
    /// `β_r = α_r · ratio`.
    pub beta_r_ratio: f64,
    /// Relative boost of `α_r` in mixture component 2 and of `β_c` in component 3.
    pub component_boost: f64,
    pub stages: Vec<StagePrior>,
}

impl Default for ResponsePrior {
    fn default() -> Self {
        let stage = |weight, log_mean, log_std, upper| StagePrior {
            weight,
            log_mean,
            log_std,
            lower: 0.3,
            upper,
        };
        ResponsePrior {
            rho: PositiveNormal {
                mean: 7.00e-5,
                std: 7.23e-3,
            },
            alpha_r: PositiveNormal {
                mean: 0.0398,
                std: 0.168,
            },
            beta_c: PositiveNormal {
                mean: 0.028,
                std: 0.0007,
            },
            beta_r_ratio: 0.1,
            component_boost: 0.1,
            stages: vec![
                stage(1432.0, 1.72, 4.70, 5.0),
                stage(128.0, 1.96, 1.63, 13.0),
                stage(1306.0, 1.91, 9.40, 13.0),
                stage(7248.0, 2.76, 6.87, 13.0),
                stage(12840.0, 3.86, 8.82, 13.0),
            ],
        }
    }
}

/// Which multi-step interventions to enumerate for the test set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CfScheme {
    #[default]
    SingleSliding,
    Random,
}

impl std::str::FromStr for CfScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-sliding" | "sliding" => Ok(CfScheme::SingleSliding),
            "random" => Ok(CfScheme::Random),
            other => Err(Error::param(format!(
                "unknown counterfactual scheme `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub gamma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Trajectory length `T`.
    pub t_max: usize,
    pub tau_max: usize,
    pub seed: u64,
    pub scheme: CfScheme,
    pub noise_std: f64,
    pub d_max: f64,
    pub v_max: f64,
    /// Lower clip for volumes, cm³.
    pub v_min: f64,
    /// Carrying capacity, cm³.
    pub k: f64,
    pub window: usize,
    pub chemo_dose: f64,
    pub radio_dose: f64,
    pub response: ResponsePrior,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            gamma: 2.0,
            n_train: 1000,
            n_val: 200,
            n_test: 200,
            t_max: 30,
            tau_max: 4,
            seed: 0,
            scheme: CfScheme::SingleSliding,
            noise_std: 0.01,
            d_max: 13.0,
            v_max: 1150.0,
            v_min: volume_from_diameter(0.3),
            k: volume_from_diameter(13.0),
            window: 15,
            chemo_dose: 5.0,
            radio_dose: 2.0,
            response: ResponsePrior::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::config("γ must be non-negative"));
        }
        if self.t_max < 2 || self.t_max > 60 {
            return Err(Error::config(format!(
                "trajectory length {} outside 2..=60",
                self.t_max
            )));
        }
        if self.tau_max < 1 {
            return Err(Error::config("τ_max must be at least 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise scale must be non-negative"));
        }
        if self.window == 0 {
            return Err(Error::config("assignment window must be at least 1"));
        }
        if !(self.v_min > 0.0 && self.v_min < self.v_max) {
            return Err(Error::config(
                "volume bounds must satisfy 0 < v_min < v_max",
            ));
        }
        Ok(())
    }
}

/// Individual response parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientResponse {
    pub rho: f64,
    pub k: f64,
    pub beta_c: f64,
    pub alpha_r: f64,
    pub beta_r: f64,
    /// Mixture component 1, 2 or 3; the static covariate.
    pub mixture_id: u8,
}

/// Independent random streams of one patient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Response = 0,
    Noise = 1,
    Assignment = 2,
    Interventions = 3,
}

/// Split tag mixed into the patient streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for (seed, split, patient, purpose), independent of generation order.
pub fn patient_rng(seed: u64, split: Split, patient: usize, purpose: Purpose) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed ^ ((split as u64) << 56)) ^ patient as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(purpose as u64);
    rng
}

/// Draws a mixture component uniformly, its sensitivities, and an initial volume.
pub fn sample_patient<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> (PatientResponse, f64) {
    let prior = &cfg.response;
    let mixture_id = rng.random_range(1..=3u8);
    let mut alpha_r = prior.alpha_r;
    let mut beta_c = prior.beta_c;
    match mixture_id {
        2 => alpha_r.mean *= 1.0 + prior.component_boost,
        3 => beta_c.mean *= 1.0 + prior.component_boost,
        _ => {}
    }
    let alpha_r = alpha_r.sample(rng);
    let resp = PatientResponse {
        rho: prior.rho.sample(rng),
        k: cfg.k,
        beta_c: beta_c.sample(rng),
        alpha_r,
        beta_r: alpha_r * prior.beta_r_ratio,
        mixture_id,
    };
    let total: f64 = prior.stages.iter().map(|s| s.weight).sum();
    let mut u = rng.random_range(0.0..total);
    let mut stage = prior.stages.last().expect("at least one stage");
    for s in &prior.stages {
        if u < s.weight {
            stage = s;
            break;
        }
        u -= s.weight;
    }
    let n = Normal::new(stage.log_mean, stage.log_std).expect("valid normal");
    let (lo, hi) = (stage.lower.ln(), stage.upper.ln());
    let log_d = loop {
        let z = n.sample(rng);
        if (lo..=hi).contains(&z) {
            break z;
        }
    };
    let v0 = volume_from_diameter(log_d.exp()).clamp(cfg.v_min, cfg.v_max);
    (resp, v0)
}

/// One step of the growth recursion, clipped to `[v_min, v_max]`.
pub fn step_volume(
    y: f64,
    concentration: f64,
    dose: f64,
    resp: &PatientResponse,
    eps: f64,
    v_min: f64,
    v_max: f64,
) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::State(format!(
            "tumor volume must be positive, got {y}"
        )));
    }
    let factor = 1.0 + resp.rho * (resp.k / y).ln()
        - resp.beta_c * concentration
        - (resp.alpha_r * dose + resp.beta_r * dose * dose)
        + eps;
    Ok((factor * y).clamp(v_min, v_max))
}

/// Chemotherapy concentration: halves each step, plus `dose` when applied.
pub fn chemo_concentration(previous: f64, applied: bool, dose: f64) -> f64 {
    previous / 2.0 + if applied { dose } else { 0.0 }
}

/// Mean diameter over the last `window` volumes of `history`.
pub fn mean_recent_diameter(history: &[f64], window: usize) -> f64 {
    let start = history.len().saturating_sub(window);
    let recent = &history[start..];
    recent.iter().map(|&v| diameter_from_volume(v)).sum::<f64>() / recent.len() as f64
}

/// Treatment probability `σ(γ/D_max · (D̄ − D_max/2))` for a volume history.
pub fn assignment_probability(
    history: &[f64],
    gamma: f64,
    d_max: f64,
    window: usize,
) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::param("assignment needs at least one past volume"));
    }
    let d_bar = mean_recent_diameter(history, window);
    Ok(sigmoid(gamma / d_max * (d_bar - d_max / 2.0)))
}

/// Draws chemotherapy and radiotherapy independently with the shared probability.
pub fn assign_treatments<R: Rng + ?Sized>(
    history: &[f64],
    gamma: f64,
    d_max: f64,
    window: usize,
    rng: &mut R,
) -> Result<(bool, bool, f64)> {
    let p = assignment_probability(history, gamma, d_max, window)?;
    let chemo = rng.random::<f64>() < p;
    let radio = rng.random::<f64>() < p;
    Ok((chemo, radio, p))
}

/// A simulated patient with its factual path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimPatient {
    pub id: usize,
    pub response: PatientResponse,
    /// `Y_0, …, Y_{T−1}`.
    pub volumes: Vec<f64>,
    pub chemo: Vec<bool>,
    pub radio: Vec<bool>,
    /// Chemotherapy concentration `C_t` after the step-`t` decision.
    pub concentration: Vec<f64>,
    pub probability: Vec<f64>,
    /// `ε_t` for `t = 0, …, T + τ_max − 2`; empty when loaded from disk.
    #[serde(skip)]
    pub noise: Vec<f64>,
}

impl SimPatient {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn treatment(&self, t: usize) -> usize {
        treatment_category(self.chemo[t], self.radio[t])
    }

    /// Model inputs: covariates are the current diameter and its recent mean;
    /// the static covariate is the mixture component.
    pub fn trajectory(&self, window: usize) -> PatientTrajectory {
        let t_len = self.len();
        let mut x = Vec::with_capacity(2 * t_len);
        let mut a = Vec::with_capacity(N_TREATMENTS * t_len);
        for t in 0..t_len {
            x.push(diameter_from_volume(self.volumes[t]));
            x.push(mean_recent_diameter(&self.volumes[..=t], window));
            a.extend_from_slice(&one_hot(self.treatment(t)));
        }
        PatientTrajectory {
            x: Tensor::new(vec![t_len, 2], x).expect("shape"),
            a: Tensor::new(vec![t_len, N_TREATMENTS], a).expect("shape"),
            y: Tensor::new(vec![t_len, 1], self.volumes.clone()).expect("shape"),
            v: vec![f64::from(self.response.mixture_id)],
        }
    }
}

/// Simulates one factual path.
pub fn simulate_patient(cfg: &SimConfig, split: Split, id: usize) -> Result<SimPatient> {
    let (response, v0) = sample_patient(
        cfg,
        &mut patient_rng(cfg.seed, split, id, Purpose::Response),
    );
    let mut noise_rng = patient_rng(cfg.seed, split, id, Purpose::Noise);
    let noise_dist = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let noise: Vec<f64> = (0..cfg.t_max + cfg.tau_max)
        .map(|_| noise_dist.sample(&mut noise_rng))
        .collect();
    let mut assign_rng = patient_rng(cfg.seed, split, id, Purpose::Assignment);
    let t_len = cfg.t_max;
    let mut p = SimPatient {
        id,
        response,
        volumes: Vec::with_capacity(t_len),
        chemo: Vec::with_capacity(t_len),
        radio: Vec::with_capacity(t_len),
        concentration: Vec::with_capacity(t_len),
        probability: Vec::with_capacity(t_len),
        noise,
    };
    p.volumes.push(v0);
    let mut c_prev = 0.0;
    for t in 0..t_len {
        let (chemo, radio, prob) = assign_treatments(
            &p.volumes,
            cfg.gamma,
            cfg.d_max,
            cfg.window,
            &mut assign_rng,
        )?;
        let c = chemo_concentration(c_prev, chemo, cfg.chemo_dose);
        p.chemo.push(chemo);
        p.radio.push(radio);
        p.concentration.push(c);
        p.probability.push(prob);
        if t + 1 < t_len {
            let dose = if radio { cfg.radio_dose } else { 0.0 };
            let next = step_volume(
                p.volumes[t],
                c,
                dose,
                &response,
                p.noise[t],
                cfg.v_min,
                cfg.v_max,
            )?;
            p.volumes.push(next);
        }
        c_prev = c;
    }
    Ok(p)
}

/// Outcomes `Y_{origin+1}, …` when the treatments from `origin` on are replaced
/// by `intervention`, reusing the patient's noise.
pub fn replay(
    cfg: &SimConfig,
    patient: &SimPatient,
    origin: usize,
    intervention: &[usize],
) -> Result<Vec<f64>> {
    if origin >= patient.len() {
        return Err(Error::param(format!(
            "origin {origin} outside the trajectory"
        )));
    }
    if patient.noise.len() < origin + intervention.len() {
        return Err(Error::State(
            "patient noise is unavailable for this replay".into(),
        ));
    }
    let mut y = patient.volumes[origin];
    let mut c_prev = if origin == 0 {
        0.0
    } else {
        patient.concentration[origin - 1]
    };
    let mut out = Vec::with_capacity(intervention.len());
    for (k, &cat) in intervention.iter().enumerate() {
        if cat >= N_TREATMENTS {
            return Err(Error::param(format!(
                "treatment category {cat} out of range"
            )));
        }
        let (chemo, radio) = treatment_parts(cat);
        let c = chemo_concentration(c_prev, chemo, cfg.chemo_dose);
        let dose = if radio { cfg.radio_dose } else { 0.0 };
        y = step_volume(
            y,
            c,
            dose,
            &patient.response,
            patient.noise[origin + k],
            cfg.v_min,
            cfg.v_max,
        )?;
        out.push(y);
        c_prev = c;
    }
    Ok(out)
}

/// Ground truth for one (patient, origin, intervention).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub patient: usize,
    pub origin: usize,
    /// Treatment categories applied at `origin, origin + 1, …`.
    pub intervention: Vec<usize>,
    /// `Y_{origin+1}, …` under the intervention.
    pub outcomes: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSet {
    /// All four treatments at every origin.
    pub one_step: Vec<Counterfactual>,
    /// `2(τ_max − 1)` interventions of length `τ_max` at every origin.
    pub multi_step: Vec<Counterfactual>,
}

/// Multi-step interventions for one origin.
pub fn multi_step_interventions<R: Rng + ?Sized>(
    scheme: CfScheme,
    tau_max: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let count = 2 * tau_max.saturating_sub(1);
    match scheme {
        CfScheme::SingleSliding => {
            let mut out = Vec::with_capacity(count);
            for cat in [1usize, 2] {
                for offset in 0..tau_max.saturating_sub(1) {
                    let mut seq = vec![0; tau_max];
                    seq[offset] = cat;
                    out.push(seq);
                }
            }
            out
        }
        CfScheme::Random => (0..count)
            .map(|_| {
                (0..tau_max)
                    .map(|_| rng.random_range(0..N_TREATMENTS))
                    .collect()
            })
            .collect(),
    }
}

/// Prediction origins used for evaluation: every position with at least one
/// step of history.
pub fn origins(t_max: usize) -> std::ops::Range<usize> {
    1..t_max
}

/// Counterfactual ground truth for a set of patients.
pub fn counterfactuals(
    cfg: &SimConfig,
    split: Split,
    patients: &[SimPatient],
) -> Result<CounterfactualSet> {
    let mut set = CounterfactualSet::default();
    for p in patients {
        let mut rng = patient_rng(cfg.seed, split, p.id, Purpose::Interventions);
        for origin in origins(p.len()) {
            for cat in 0..N_TREATMENTS {
                set.one_step.push(Counterfactual {
                    patient: p.id,
                    origin,
                    intervention: vec![cat],
                    outcomes: replay(cfg, p, origin, &[cat])?,
                });
            }
            if cfg.tau_max >= 2 {
                for seq in multi_step_interventions(cfg.scheme, cfg.tau_max, &mut rng) {
                    let outcomes = replay(cfg, p, origin, &seq)?;
                    set.multi_step.push(Counterfactual {
                        patient: p.id,
                        origin,
                        intervention: seq,
                        outcomes,
                    });
                }
            }
        }
    }
    Ok(set)
}

/// Factual train/validation/test patients plus test counterfactuals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: SimConfig,
    pub train: Vec<SimPatient>,
    pub val: Vec<SimPatient>,
    pub test: Vec<SimPatient>,
    pub test_cf: CounterfactualSet,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SimPatient] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn trajectories(&self, split: Split) -> Vec<PatientTrajectory> {
        self.split(split)
            .iter()
            .map(|p| p.trajectory(self.config.window))
            .collect()
    }
}

pub fn simulate_dataset(cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let make = |split: Split, n: usize| -> Result<Vec<SimPatient>> {
        (0..n).map(|i| simulate_patient(cfg, split, i)).collect()
    };
    let train = make(Split::Train, cfg.n_train)?;
    let val = make(Split::Val, cfg.n_val)?;
    let test = make(Split::Test, cfg.n_test)?;
    let test_cf = counterfactuals(cfg, Split::Test, &test)?;
    Ok(Dataset {
        config: cfg.clone(),
        train,
        val,
        test,
        test_cf,
    })
}
