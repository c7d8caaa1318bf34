use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ct_core::harness::acceptance::{self, DeskSettings, Report};
use ct_core::harness::{
    append_metrics, evaluate_checkpoint, fit_msm_baseline, run_ablations, run_experiment,
    subnetwork_importance, train_ct, Ablation, ExperimentOutput, ExperimentSpec, Method,
    MetricsRecord, CHECKPOINT_FILE, METRICS_FILE, MSM_FILE, TRAIN_LOG_FILE,
};
use ct_core::model::{Checkpoint, CrossFlags, PeMode};
use ct_core::train::Balancing;
use ct_core::tumorsim::{load_dataset, save_dataset, simulate_dataset, CfScheme, Dataset};

#[derive(Parser)]
#[command(
    name = "ct",
    version,
    about = "Causal Transformer experiments on the tumor-growth benchmark"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Simulate a dataset and write it as CSV.
    Simulate(Common),
    /// Train the model and fit the baseline on one dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `simulate`; simulated from the seed if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or run the full pipeline over every (γ, seed).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run ablation variants; all of them unless some are named.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Ablation>,
    },
    /// Score each stream by the RMSE increase when it is isolated.
    Importance(Common),
    /// Run the acceptance checks and print one line per check.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Check ids to run; all of them if empty.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

#[derive(Args)]
struct Common {
    /// First seed; runs use consecutive seeds from here.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// TOML experiment configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_seeds: Option<usize>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long)]
    one_step_only: bool,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    tau_max: Option<usize>,
    /// single-sliding or random.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// cdc, none or gradient-reversal.
    #[arg(long)]
    balancing: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_r: Option<usize>,
    #[arg(long)]
    n_fc: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    l_max: Option<usize>,
    /// relative-trainable, relative-fixed or absolute.
    #[arg(long)]
    pe_mode: Option<PeMode>,
    #[arg(long)]
    no_attn_dropout: bool,
    #[arg(long)]
    no_cross_attention: bool,
}

impl Common {
    /// Defaults, then the config file, then flags.
    fn spec(&self, default_seeds: usize) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentSpec::default(),
        };
        let n_seeds = match (self.n_seeds, &self.config) {
            (Some(n), _) => n,
            (None, Some(_)) => spec.seeds.len(),
            (None, None) => default_seeds,
        };
        if n_seeds == 0 {
            bail!("at least one seed is needed");
        }
        spec.seeds = (0..n_seeds as u64).map(|i| self.seed + i).collect();
        spec.sim.seed = self.seed;
        spec.train.seed = self.seed;
        if let Some(l) = &self.label {
            spec.label = l.clone();
        }
        if !self.gamma.is_empty() {
            spec.gammas = self.gamma.clone();
        }
        if !self.methods.is_empty() {
            spec.methods = self
                .methods
                .iter()
                .map(|m| match m.as_str() {
                    "ct" => Ok(Method::Ct),
                    "msm" => Ok(Method::Msm),
                    other => bail!("unknown method `{other}`"),
                })
                .collect::<Result<_>>()?;
        }
        spec.one_step_only |= self.one_step_only;
        let sim = &mut spec.sim;
        set(&mut sim.n_train, self.n_train);
        set(&mut sim.n_val, self.n_val);
        set(&mut sim.n_test, self.n_test);
        set(&mut sim.t_max, self.t_max);
        set(&mut sim.tau_max, self.tau_max);
        if let Some(s) = &self.scheme {
            sim.scheme = match s.as_str() {
                "single-sliding" => CfScheme::SingleSliding,
                "random" => CfScheme::Random,
                other => bail!("unknown counterfactual scheme `{other}`"),
            };
        }
        let train = &mut spec.train;
        set(&mut train.epochs, self.epochs);
        set(&mut train.lr, self.lr);
        set(&mut train.alpha, self.alpha);
        set(&mut train.beta, self.beta);
        set(&mut train.batch_size, self.batch_size);
        train.augment &= !self.no_augment;
        if let Some(b) = &self.balancing {
            train.balancing = match b.as_str() {
                "cdc" => Balancing::Cdc,
                "none" => Balancing::None,
                "gradient-reversal" => Balancing::GradientReversal {
                    lambda: self.lambda,
                },
                other => bail!("unknown balancing `{other}`"),
            };
        }
        let model = &mut spec.model;
        set(&mut model.blocks, self.blocks);
        set(&mut model.d_h, self.d_h);
        set(&mut model.n_heads, self.heads);
        set(&mut model.d_r, self.d_r);
        set(&mut model.n_fc, self.n_fc);
        set(&mut model.dropout, self.dropout);
        set(&mut model.l_max, self.l_max);
        set(&mut model.pe_mode, self.pe_mode);
        model.attn_dropout &= !self.no_attn_dropout;
        if self.no_cross_attention {
            model.cross = CrossFlags::NONE;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn report(out: &ExperimentOutput) -> bool {
    for r in &out.records {
        println!(
            "{} {} γ={} seed={} τ={} rmse={:.4}%",
            r.run, r.method, r.gamma, r.seed, r.tau, r.rmse_pct
        );
    }
    for f in &out.failures {
        eprintln!("failed: {f}");
    }
    out.failures.is_empty()
}

fn dataset_for(spec: &ExperimentSpec, data: Option<&Path>) -> Result<Dataset> {
    Ok(match data {
        Some(dir) => load_dataset(dir).with_context(|| format!("loading {}", dir.display()))?,
        None => simulate_dataset(&spec.run_configs(spec.gammas[0], spec.seeds[0]).0)?,
    })
}

fn simulate(common: &Common) -> Result<bool> {
    let spec = common.spec(1)?;
    for &gamma in &spec.gammas {
        for &seed in &spec.seeds {
            let (sim, _) = spec.run_configs(gamma, seed);
            let dir = spec.run_dir(&common.out_dir, gamma, seed).join("data");
            save_dataset(&simulate_dataset(&sim)?, &dir)?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(true)
}

fn train(common: &Common, data: Option<&Path>) -> Result<bool> {
    let spec = common.spec(1)?;
    let dataset = dataset_for(&spec, data)?;
    let dir = &common.out_dir;
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("spec.json"), &spec)?;
    if spec.methods.contains(&Method::Ct) {
        let (_, cfg) = spec.run_configs(dataset.config.gamma, common.seed);
        let mut log = BufWriter::new(File::create(dir.join(TRAIN_LOG_FILE))?);
        let (ck, result) = train_ct(&spec.model, &cfg, &dataset, Some(&mut log))?;
        log.flush()?;
        ck.save(&dir.join(CHECKPOINT_FILE))?;
        if let Some(last) = result.epochs.last() {
            println!(
                "trained {} epochs; last epoch {last:?}",
                result.epochs.len()
            );
        }
    }
    if spec.methods.contains(&Method::Msm) {
        let msm = fit_msm_baseline(&dataset, spec.horizons())?;
        msm.save(&dir.join(MSM_FILE))?;
        println!("wrote {}", dir.join(MSM_FILE).display());
    }
    Ok(true)
}

fn evaluate(common: &Common, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<bool> {
    let Some(ck_path) = checkpoint else {
        let spec = common.spec(3)?;
        return Ok(report(&run_experiment(&spec, &common.out_dir)?));
    };
    let spec = common.spec(1)?;
    let ck = Checkpoint::load(ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
    let dataset = dataset_for(&spec, data)?;
    let started = std::time::Instant::now();
    let rows = evaluate_checkpoint(&ck, &dataset, spec.horizons())?;
    let wall = started.elapsed().as_secs_f64();
    let records: Vec<MetricsRecord> = rows
        .into_iter()
        .map(|(tau, rmse, n)| MetricsRecord {
            run: spec.label.clone(),
            method: Method::Ct.tag().into(),
            gamma: dataset.config.gamma,
            tau,
            seed: dataset.config.seed,
            rmse_pct: 100.0 * rmse,
            n,
            wall_s: wall,
        })
        .collect();
    let manifest = format!(
        "format: ct-metrics v1\ncheckpoint: {}\ndataset seed: {}",
        ck_path.display(),
        dataset.config.seed
    );
    append_metrics(&common.out_dir.join(METRICS_FILE), &manifest, &records)?;
    Ok(report(&ExperimentOutput {
        records,
        failures: Vec::new(),
    }))
}

fn verify(common: &Common, only: &[u8]) -> Result<bool> {
    let spec = common.spec(3)?;
    let wanted = |id: u8| only.is_empty() || only.contains(&id);
    std::fs::create_dir_all(&common.out_dir)?;
    let mut reports: Vec<Report> = Vec::new();
    let mut emit = |r: Report| {
        println!("{}", r.line());
        reports.push(r);
    };
    let checks: [(u8, fn() -> ct_core::Result<Report>); 8] = [
        (1, acceptance::gradient_fidelity),
        (2, || acceptance::causality(100)),
        (3, || acceptance::lemma1(20)),
        (4, acceptance::theorem1),
        (5, acceptance::algorithm1),
        (6, acceptance::simulator),
        (9, acceptance::msm_identities),
        (10, acceptance::pe_accounting),
    ];
    for (id, check) in checks.iter().filter(|(id, _)| *id <= 6) {
        if wanted(*id) {
            emit(check()?);
        }
    }
    if wanted(7) || wanted(8) {
        let settings = DeskSettings {
            seeds: spec.seeds.clone(),
            ..DeskSettings::default()
        };
        let (comparison, probe, _) =
            acceptance::desk_scale(&settings, Some(&common.out_dir.join("desk")))?;
        if wanted(7) {
            emit(comparison);
        }
        if wanted(8) {
            emit(probe);
        }
    }
    for (id, check) in checks.iter().filter(|(id, _)| *id > 6) {
        if wanted(*id) {
            emit(check()?);
        }
    }
    let text: String = reports.iter().map(|r| r.line() + "\n").collect();
    std::fs::write(common.out_dir.join("verify.txt"), text)?;
    Ok(reports.iter().all(|r| r.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.verb {
        Verb::Simulate(common) => simulate(&common),
        Verb::Train { common, data } => train(&common, data.as_deref()),
        Verb::Evaluate {
            common,
            checkpoint,
            data,
        } => evaluate(&common, checkpoint.as_deref(), data.as_deref()),
        Verb::Ablate { common, variants } => {
            let spec = common.spec(3)?;
            let which = if variants.is_empty() {
                Ablation::ALL.to_vec()
            } else {
                variants
            };
            Ok(report(&run_ablations(&spec, &which, &common.out_dir)?))
        }
        Verb::Importance(common) => {
            let spec = common.spec(3)?;
            let (scores, out) = subnetwork_importance(&spec, &common.out_dir)?;
            for s in &scores {
                println!(
                    "importance {} τ={} {:.4} ± {:.4}",
                    s.stream, s.tau, s.mean, s.se
                );
            }
            write_json(&common.out_dir.join("importance.json"), &scores)?;
            Ok(report(&out))
        }
        Verb::Verify { common, only } => verify(&common, &only),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
