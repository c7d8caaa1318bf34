use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use super::step::{adversarial_step, Balancing, CtObjective, StepConfig, StepLosses, TrainState};
use crate::error::{Error, Result};
use crate::model::{predict_factual, CtConfig, CtParams, PatientTrajectory, SeqBatch};

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub balancing: Balancing,
    pub optimizer: OptimizerKind,
    /// Duplicate every minibatch with trailing covariates masked.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: 30,
            alpha: 0.01,
            beta: 0.99,
            batch_size: 64,
            seed: 0,
            balancing: Balancing::Cdc,
            optimizer: OptimizerKind::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config(format!("β = {} outside [0, 1)", self.beta)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("α must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("minibatch size must be at least 1"));
        }
        Ok(())
    }
}

/// Confusion weight at epoch `e` of `n_e`: `α·(2/(1 + exp(−10e/n_e)) − 1)`.
pub fn alpha_schedule(e: usize, n_e: usize, alpha: f64) -> f64 {
    if n_e == 0 {
        return alpha;
    }
    let x = e as f64 / n_e as f64;
    alpha * (2.0 / (1.0 + (-10.0 * x).exp()) - 1.0)
}

/// Appends to `batch` a copy of every sequence with its trailing `t_s`
/// covariates hidden, `t_s` uniform on `1..=T`.
pub fn augment_minibatch<R: Rng + ?Sized>(batch: &SeqBatch, rng: &mut R) -> Result<SeqBatch> {
    let counts: Vec<usize> = (0..batch.batch)
        .map(|_| rng.random_range(1..=batch.len))
        .collect();
    augment_with(batch, &counts)
}

/// [`augment_minibatch`] with explicit mask lengths, one per sequence.
pub fn augment_with(batch: &SeqBatch, counts: &[usize]) -> Result<SeqBatch> {
    if counts.len() != batch.batch {
        return Err(Error::param("one mask length per sequence is required"));
    }
    let mut dup = batch.clone();
    for (b, &c) in counts.iter().enumerate() {
        if c == 0 || c > batch.len {
            return Err(Error::param(format!(
                "mask length {c} outside 1..={}",
                batch.len
            )));
        }
        dup.mask_trailing_covariates(b, c);
    }
    batch.concat(&dup)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_GY")]
    pub l_gy: f64,
    #[serde(rename = "L_GA")]
    pub l_ga: f64,
    #[serde(rename = "L_conf")]
    pub l_conf: f64,
    pub alpha_e: f64,
    pub val_rmse: f64,
}

pub struct TrainResult {
    pub state: TrainState,
    /// Losses of every step, in order.
    pub history: Vec<StepLosses>,
    pub epochs: Vec<EpochRecord>,
}

/// One-step factual RMSE in model units over whole trajectories.
pub fn factual_rmse(cfg: &CtConfig, params: &CtParams, data: &[PatientTrajectory]) -> Result<f64> {
    let mut se = 0.0;
    let mut n = 0usize;
    for chunk in data.chunks(256) {
        let refs: Vec<&PatientTrajectory> = chunk.iter().collect();
        let batch = SeqBatch::from_trajectories(&refs)?;
        let pred = predict_factual(cfg, params, &batch)?;
        for &r in &batch.target_rows {
            for (p, y) in pred.row(r).iter().zip(batch.y_next.row(r)) {
                se += (p - y).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::param("no validation targets"));
    }
    Ok((se / n as f64).sqrt())
}

/// Trains from a seeded random initialization.
pub fn train(
    model_cfg: &CtConfig,
    cfg: &TrainConfig,
    train_set: &[PatientTrajectory],
    val_set: &[PatientTrajectory],
    log: Option<&mut dyn Write>,
) -> Result<TrainResult> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = CtParams::init(model_cfg, &mut init_rng)?;
    let state = TrainState::new(params, cfg.optimizer);
    train_from(model_cfg, cfg, state, train_set, val_set, log)
}

/// Epoch loop: shuffled minibatches, covariate-masking augmentation, one
/// adversarial step per minibatch with the α schedule applied per epoch.
/// Training uses the observed outcomes as inputs throughout.
pub fn train_from(
    model_cfg: &CtConfig,
    cfg: &TrainConfig,
    mut state: TrainState,
    train_set: &[PatientTrajectory],
    val_set: &[PatientTrajectory],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainResult> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::param(
            "training and validation sets must be non-empty",
        ));
    }
    for t in train_set.iter().chain(val_set) {
        t.validate(model_cfg)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    for e in 1..=cfg.epochs {
        state.epoch = e;
        let alpha_e = alpha_schedule(e, cfg.epochs, cfg.alpha);
        let step_cfg = StepConfig {
            lr: cfg.lr,
            alpha: alpha_e,
            beta: cfg.beta,
            balancing: cfg.balancing,
        };
        order.shuffle(&mut rng);
        let mut sums = StepLosses::default();
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&PatientTrajectory> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut batch = SeqBatch::from_trajectories(&refs)?;
            if cfg.augment {
                batch = augment_minibatch(&batch, &mut rng)?;
            }
            let mut objective = CtObjective {
                cfg: model_cfg,
                batch: &batch,
                training: true,
                rng: &mut rng,
            };
            let losses = adversarial_step(&mut state, &mut objective, &step_cfg)
                .map_err(|err| err.in_stage(format!("epoch {e}, step {}", state.step + 1)))?;
            sums.l_gy += losses.l_gy;
            sums.l_ga += losses.l_ga;
            sums.l_conf += losses.l_conf;
            count += 1;
            history.push(losses);
        }
        let n = count.max(1) as f64;
        let record = EpochRecord {
            epoch: e,
            l_gy: sums.l_gy / n,
            l_ga: sums.l_ga / n,
            l_conf: sums.l_conf / n,
            alpha_e,
            val_rmse: factual_rmse(model_cfg, &state.ema, val_set)?,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        epochs.push(record);
    }
    Ok(TrainResult {
        state,
        history,
        epochs,
    })
}
