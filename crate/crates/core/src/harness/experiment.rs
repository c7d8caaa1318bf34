use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::{
    ct_multi_step, ct_one_step, fit_msm_baseline, msm_horizons, simulator_dims, train_ct,
};
use super::metrics::{append_metrics, mean_se, MetricsRecord};
use crate::error::{Error, Result};
use crate::model::{isolate_subnetwork, Checkpoint, CtConfig, PeMode, Stream};
use crate::train::{Balancing, TrainConfig};
use crate::tumorsim::{save_dataset, simulate_dataset, Dataset, SimConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const MSM_FILE: &str = "msm_summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ct,
    Msm,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Ct => "ct",
            Method::Msm => "msm",
        }
    }
}

/// Everything that determines a batch of runs; each run is fixed by the spec
/// plus one (γ, seed) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub label: String,
    pub sim: SimConfig,
    pub model: CtConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub gammas: Vec<f64>,
    pub methods: Vec<Method>,
    /// Skip horizons beyond one step.
    pub one_step_only: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            label: "base".into(),
            sim: SimConfig::default(),
            model: simulator_dims(CtConfig::default()),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            gammas: vec![2.0],
            methods: vec![Method::Ct, Method::Msm],
            one_step_only: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.gammas.is_empty() || self.methods.is_empty() {
            return Err(Error::config("seeds, gammas and methods must be non-empty"));
        }
        self.sim.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Simulator and training configuration of one run.
    pub fn run_configs(&self, gamma: f64, seed: u64) -> (SimConfig, TrainConfig) {
        let mut sim = self.sim.clone();
        sim.gamma = gamma;
        sim.seed = seed;
        let mut train = self.train.clone();
        train.seed = seed;
        (sim, train)
    }

    pub fn horizons(&self) -> usize {
        if self.one_step_only {
            1
        } else {
            self.sim.tau_max
        }
    }

    pub fn run_dir(&self, out: &Path, gamma: f64, seed: u64) -> PathBuf {
        out.join(&self.label)
            .join(format!("gamma{gamma}"))
            .join(format!("seed{seed}"))
    }

    fn manifest(&self) -> Result<String> {
        Ok(format!(
            "format: ct-metrics v1\nspec: {}",
            serde_json::to_string(self)?
        ))
    }
}

/// What a batch of runs produced. Failed stages are listed with their tag;
/// the records of every completed stage are kept.
#[derive(Debug, Default)]
pub struct ExperimentOutput {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<String>,
}

fn record(
    spec: &ExperimentSpec,
    method: Method,
    gamma: f64,
    seed: u64,
    tau: usize,
    rmse: f64,
    n: usize,
    wall: f64,
) -> MetricsRecord {
    MetricsRecord {
        run: spec.label.clone(),
        method: method.tag().into(),
        gamma,
        tau,
        seed,
        rmse_pct: 100.0 * rmse,
        n,
        wall_s: wall,
    }
}

/// Evaluates a checkpoint on a dataset: normalized RMSE per horizon.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    data: &Dataset,
    horizons: usize,
) -> Result<Vec<(usize, f64, usize)>> {
    let v_max = data.config.v_max;
    let mut out = Vec::new();
    let one = ct_one_step(ck, data)?;
    out.push((1, one.rmse(v_max)?, one.pred.len()));
    if horizons >= 2 {
        for h in ct_multi_step(ck, data, horizons)? {
            out.push((h.tau, h.rmse(v_max)?, h.pred.len()));
        }
    }
    Ok(out)
}

fn run_one(
    spec: &ExperimentSpec,
    out: &Path,
    gamma: f64,
    seed: u64,
    output: &mut ExperimentOutput,
) -> Result<()> {
    let (sim, train_cfg) = spec.run_configs(gamma, seed);
    let dir = spec.run_dir(out, gamma, seed);
    std::fs::create_dir_all(&dir)?;
    let data = simulate_dataset(&sim).map_err(|e| e.in_stage("simulate"))?;
    save_dataset(&data, &dir.join("data")).map_err(|e| e.in_stage("save dataset"))?;
    let horizons = spec.horizons();
    let v_max = sim.v_max;
    for &method in &spec.methods {
        let started = Instant::now();
        let result: Result<Vec<(usize, f64, usize)>> = match method {
            Method::Ct => (|| {
                let mut log = BufWriter::new(File::create(dir.join(TRAIN_LOG_FILE))?);
                let (ck, _) = train_ct(&spec.model, &train_cfg, &data, Some(&mut log))
                    .map_err(|e| e.in_stage("train"))?;
                ck.save(&dir.join(CHECKPOINT_FILE))?;
                evaluate_checkpoint(&ck, &data, horizons).map_err(|e| e.in_stage("evaluate"))
            })(),
            Method::Msm => (|| {
                let model = fit_msm_baseline(&data, horizons).map_err(|e| e.in_stage("fit msm"))?;
                model.save(&dir.join(MSM_FILE))?;
                msm_horizons(&model, &data, horizons)?
                    .iter()
                    .map(|h| Ok((h.tau, h.rmse(v_max)?, h.pred.len())))
                    .collect()
            })(),
        };
        let wall = started.elapsed().as_secs_f64();
        match result {
            Ok(rows) => {
                for (tau, rmse, n) in rows {
                    output
                        .records
                        .push(record(spec, method, gamma, seed, tau, rmse, n, wall));
                }
            }
            Err(e) => output.failures.push(format!(
                "{} γ={gamma} seed={seed} {}: {e}",
                spec.label,
                method.tag()
            )),
        }
    }
    Ok(())
}

/// Simulate, train, fit the baseline and evaluate for every (γ, seed); each
/// run writes under its own directory and the metrics file gains one row
/// per (method, τ).
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<ExperimentOutput> {
    spec.validate()?;
    let mut output = ExperimentOutput::default();
    for &gamma in &spec.gammas {
        for &seed in &spec.seeds {
            if let Err(e) = run_one(spec, out, gamma, seed, &mut output) {
                output
                    .failures
                    .push(format!("{} γ={gamma} seed={seed}: {e}", spec.label));
            }
        }
    }
    append_metrics(&out.join(METRICS_FILE), &spec.manifest()?, &output.records)?;
    Ok(output)
}

/// The ablation variants of the model and training procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    FixedRelativePe,
    AbsolutePe,
    NoAttentionDropout,
    NoCrossAttention,
    NoEma,
    NoBalancing,
    GradientReversal,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Full,
        Ablation::FixedRelativePe,
        Ablation::AbsolutePe,
        Ablation::NoAttentionDropout,
        Ablation::NoCrossAttention,
        Ablation::NoEma,
        Ablation::NoBalancing,
        Ablation::GradientReversal,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::FixedRelativePe => "fixed-relative-pe",
            Ablation::AbsolutePe => "absolute-pe",
            Ablation::NoAttentionDropout => "no-attention-dropout",
            Ablation::NoCrossAttention => "no-cross-attention",
            Ablation::NoEma => "no-ema",
            Ablation::NoBalancing => "no-balancing",
            Ablation::GradientReversal => "gradient-reversal",
        }
    }

    pub fn apply(self, spec: &ExperimentSpec) -> ExperimentSpec {
        let mut s = spec.clone();
        s.label = self.tag().into();
        s.methods = vec![Method::Ct];
        match self {
            Ablation::Full => {}
            Ablation::FixedRelativePe => s.model.pe_mode = PeMode::RelativeFixed,
            Ablation::AbsolutePe => s.model.pe_mode = PeMode::Absolute,
            Ablation::NoAttentionDropout => s.model.attn_dropout = false,
            Ablation::NoCrossAttention => s.model.cross = crate::model::CrossFlags::NONE,
            Ablation::NoEma => s.train.beta = 0.0,
            Ablation::NoBalancing => s.train.alpha = 0.0,
            Ablation::GradientReversal => {
                s.train.balancing = Balancing::GradientReversal { lambda: 1.0 }
            }
        }
        s
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::param(format!("unknown ablation `{s}`")))
    }
}

/// Runs each requested ablation as its own labelled experiment.
pub fn run_ablations(
    spec: &ExperimentSpec,
    which: &[Ablation],
    out: &Path,
) -> Result<ExperimentOutput> {
    let mut all = ExperimentOutput::default();
    for &a in which {
        let o = run_experiment(&a.apply(spec), out)?;
        all.records.extend(o.records);
        all.failures.extend(o.failures);
    }
    Ok(all)
}

/// Importance of one stream: `RMSE(isolated) − RMSE(full)` per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub stream: String,
    pub tau: usize,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub se: f64,
}

fn rmse_of(
    records: &[MetricsRecord],
    label: &str,
    gamma: f64,
    seed: u64,
    tau: usize,
) -> Option<f64> {
    records
        .iter()
        .find(|r| {
            r.run == label && r.method == "ct" && r.gamma == gamma && r.seed == seed && r.tau == tau
        })
        .map(|r| r.rmse_pct)
}

/// Trains the full model and one variant per stream with that stream's
/// cross-attention links removed, and scores the difference in RMSE.
pub fn subnetwork_importance(
    spec: &ExperimentSpec,
    out: &Path,
) -> Result<(Vec<Importance>, ExperimentOutput)> {
    let gamma = *spec
        .gammas
        .first()
        .ok_or_else(|| Error::config("importance needs one confounding level"))?;
    let mut base = spec.clone();
    base.gammas = vec![gamma];
    base.methods = vec![Method::Ct];
    base.label = format!("{}-full", spec.label);
    let mut all = run_experiment(&base, out)?;
    let mut scores = Vec::new();
    for stream in Stream::ALL {
        let mut s = base.clone();
        s.model = isolate_subnetwork(&spec.model, stream.tag())?;
        s.label = format!("{}-isolate-{}", spec.label, stream.tag());
        let o = if s.model == base.model {
            // identical configuration: reuse the full runs
            let mut copy = ExperimentOutput::default();
            for r in all.records.iter().filter(|r| r.run == base.label) {
                let mut r = r.clone();
                r.run = s.label.clone();
                copy.records.push(r);
            }
            append_metrics(&out.join(METRICS_FILE), &s.manifest()?, &copy.records)?;
            copy
        } else {
            run_experiment(&s, out)?
        };
        all.records.extend(o.records);
        all.failures.extend(o.failures);
        for tau in 1..=spec.horizons() {
            let per_seed: Vec<f64> = spec
                .seeds
                .iter()
                .filter_map(|&seed| {
                    Some(
                        rmse_of(&all.records, &s.label, gamma, seed, tau)?
                            - rmse_of(&all.records, &base.label, gamma, seed, tau)?,
                    )
                })
                .collect();
            let (mean, se) = mean_se(&per_seed);
            scores.push(Importance {
                stream: stream.tag().into(),
                tau,
                per_seed,
                mean,
                se,
            });
        }
    }
    Ok((scores, all))
}
