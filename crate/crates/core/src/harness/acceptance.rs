//! The acceptance checks, shared by the integration test and `ct verify`.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::eval::{
    ct_one_step, fit_msm_baseline, msm_horizons, msm_patients, probe_accuracy, simulator_dims,
    train_ct, ProbeScore,
};
use crate::diffcore::gradcheck::relative_error;
use crate::diffcore::{Tape, Tensor};
use crate::error::Result;
use crate::model::{
    classify_treatment, encode, predict_factual, predict_outcome, representations, CrossFlags,
    CtConfig, CtParams, Dropout, ParamSet, PatientTrajectory, PeMode, SeqBatch,
};
use crate::msm::{
    chunks, fit_outcome, fit_propensity, stabilized_weights, Conditioning, LogisticOptions,
};
use crate::train::theory::{
    all_maps, classifier_objective, lemma1_oracle, pushforward, theorem1_objective,
};
use crate::train::{
    adversarial_step, augment_with, loss_conf, loss_factual, loss_ga, AdversarialObjective,
    Balancing, CtObjective, GradMap, OptimizerKind, StepConfig, StepLosses, TrainConfig,
    TrainState,
};
use crate::tumorsim::{replay, simulate_dataset, SimConfig, N_TREATMENTS};

/// Outcome of one acceptance criterion.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Report {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<28} {}  {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

/// Random trajectories with one-hot treatments, for model-level checks.
pub fn random_trajectories<R: Rng + ?Sized>(
    cfg: &CtConfig,
    n: usize,
    len: usize,
    rng: &mut R,
) -> Vec<PatientTrajectory> {
    let mut normal =
        |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(rng)).collect() };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = normal(len * cfg.d_x);
        let y = normal(len * cfg.d_y);
        let v = normal(cfg.d_v);
        out.push(PatientTrajectory {
            x: Tensor::new(vec![len, cfg.d_x], x).expect("shape"),
            a: Tensor::zeros(&[len, cfg.d_a]),
            y: Tensor::new(vec![len, cfg.d_y], y).expect("shape"),
            v,
        });
    }
    for t in &mut out {
        for i in 0..len {
            let c = rng.random_range(0..cfg.d_a);
            t.a.data_mut()[i * cfg.d_a + c] = 1.0;
        }
    }
    out
}

fn small_config(d_h: usize) -> CtConfig {
    CtConfig {
        d_h,
        n_heads: 2,
        d_r: d_h,
        n_fc: d_h,
        l_max: 3,
        d_x: 2,
        d_a: 3,
        d_y: 1,
        d_v: 1,
        ..CtConfig::default()
    }
}

fn batch_targets(batch: &SeqBatch) -> (Tensor, Tensor) {
    let pick = |m: &Tensor| {
        let mut d = Vec::new();
        for &r in &batch.target_rows {
            d.extend_from_slice(m.row(r));
        }
        Tensor::new(vec![batch.target_rows.len(), m.cols()], d).expect("shape")
    };
    (pick(&batch.a_cur), pick(&batch.y_next))
}

/// `L_GY + α·L_conf + L_GA` over every parameter, without dropout.
fn full_loss(
    cfg: &CtConfig,
    params: &CtParams,
    batch: &SeqBatch,
    alpha: f64,
    grads: bool,
) -> Result<(f64, Vec<GradMap>)> {
    let tape = Tape::new();
    let groups = [&params.repr, &params.outcome, &params.treatment];
    let bound: Vec<_> = groups.iter().map(|g| g.bind(&tape, grads)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut drop = Dropout {
        p: cfg.dropout,
        attn: cfg.attn_dropout,
        training: false,
        rng: &mut rng,
    };
    let phi = encode(cfg, &bound[0], batch, &mut drop)?.select_rows(&batch.target_rows)?;
    let (a_t, y_next) = batch_targets(batch);
    let pred = predict_outcome(&bound[1], phi, tape.constant(a_t.clone()))?;
    let probs = classify_treatment(&bound[2], phi)?;
    let total = loss_factual(pred, &y_next)?
        .add(loss_conf(probs)?.scale(alpha)?)?
        .add(loss_ga(probs, &a_t)?)?;
    let value = total.item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(total)?;
    let maps = bound
        .iter()
        .map(|b| b.iter().map(|(n, v)| (n.clone(), g.wrt(*v))).collect())
        .collect();
    Ok((value, maps))
}

/// Analytic gradients of the full training loss against central differences.
pub fn gradient_fidelity() -> Result<Report> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = small_config(8);
    let params = CtParams::init(&cfg, &mut rng)?;
    let trajs = random_trajectories(&cfg, 2, 6, &mut rng);
    let refs: Vec<&PatientTrajectory> = trajs.iter().collect();
    let batch = augment_with(&SeqBatch::from_trajectories(&refs)?, &[2, 6])?;
    let alpha = 0.5;
    let (_, analytic) = full_loss(&cfg, &params, &batch, alpha, true)?;
    let h = 1e-5;
    let floor = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut checked = 0usize;
    for (gi, grads) in analytic.iter().enumerate() {
        for (name, g) in grads {
            for i in 0..g.len() {
                let mut probe = params.clone();
                let set = |p: &mut CtParams, v: f64| {
                    let group: &mut ParamSet = match gi {
                        0 => &mut p.repr,
                        1 => &mut p.outcome,
                        _ => &mut p.treatment,
                    };
                    group.get_mut(name).expect("name").data_mut()[i] = v;
                };
                let orig = [&params.repr, &params.outcome, &params.treatment][gi]
                    .get(name)?
                    .data()[i];
                set(&mut probe, orig + h);
                let up = full_loss(&cfg, &probe, &batch, alpha, false)?.0;
                set(&mut probe, orig - h);
                let down = full_loss(&cfg, &probe, &batch, alpha, false)?.0;
                let fd = (up - down) / (2.0 * h);
                let err = relative_error(g.data()[i], fd, floor);
                if err > worst {
                    worst = err;
                    worst_name = format!("{name}[{i}]");
                }
                checked += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(Report {
        id: 1,
        name: "gradient fidelity",
        passed: worst < 1e-4 && secs < 120.0,
        detail: format!(
            "{checked} parameters, max relative error {worst:.2e} at {worst_name}, {secs:.1}s"
        ),
    })
}

/// Perturbing inputs after position `t` leaves `Φ_{≤t}` and `Ŷ_{≤t+1}` bitwise unchanged.
pub fn causality(tests: usize) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut failures = 0;
    for k in 0..tests {
        let mut cfg = small_config(8);
        cfg.blocks = 1 + k % 2;
        cfg.pe_mode = [
            PeMode::RelativeTrainable,
            PeMode::RelativeFixed,
            PeMode::Absolute,
        ][k % 3];
        let params = CtParams::init(&cfg, &mut rng)?;
        let len = rng.random_range(3..=10);
        let trajs = random_trajectories(&cfg, 2, len, &mut rng);
        let t = rng.random_range(0..len - 1);
        let mut other = trajs.clone();
        for tr in &mut other {
            for s in t + 1..len {
                for v in tr.x.row_mut(s) {
                    *v += Distribution::<f64>::sample(&StandardNormal, &mut rng);
                }
                for v in tr.y.row_mut(s) {
                    *v += Distribution::<f64>::sample(&StandardNormal, &mut rng);
                }
                let row = tr.a.row_mut(s);
                row.iter_mut().for_each(|v| *v = 0.0);
                row[rng.random_range(0..cfg.d_a)] = 1.0;
            }
        }
        let mask = rng.random_range(1..=len);
        let build = |ts: &[PatientTrajectory]| -> Result<SeqBatch> {
            let refs: Vec<&PatientTrajectory> = ts.iter().collect();
            let mut b = SeqBatch::from_trajectories(&refs)?;
            if k % 4 == 3 {
                b.mask_trailing_covariates(1, mask);
            }
            Ok(b)
        };
        let (b0, b1) = (build(&trajs)?, build(&other)?);
        let (phi0, phi1) = (
            representations(&cfg, &params, &b0)?,
            representations(&cfg, &params, &b1)?,
        );
        let (y0, y1) = (
            predict_factual(&cfg, &params, &b0)?,
            predict_factual(&cfg, &params, &b1)?,
        );
        for b in 0..2 {
            for s in 0..=t {
                let r = b * len + s;
                let same_phi = phi0
                    .row(r)
                    .iter()
                    .zip(phi1.row(r))
                    .all(|(a, c)| a.to_bits() == c.to_bits());
                let same_y = y0
                    .row(r)
                    .iter()
                    .zip(y1.row(r))
                    .all(|(a, c)| a.to_bits() == c.to_bits());
                if !(same_phi && same_y) {
                    failures += 1;
                }
            }
        }
    }
    Ok(Report {
        id: 2,
        name: "causality",
        passed: failures == 0,
        detail: format!("{tests} perturbation tests, {failures} leaking positions"),
    })
}

/// Maximizes `f` over the probability simplex in `k` dimensions by
/// successively refined grids.
fn simplex_grid_max(k: usize, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut center = vec![1.0 / k as f64; k];
    let mut step = 0.05;
    let mut radius = 1.0;
    while step >= 1e-4 {
        let mut best = (f64::NEG_INFINITY, center.clone());
        let mut g = vec![0.0; k];
        fn rec(
            j: usize,
            k: usize,
            g: &mut Vec<f64>,
            used: f64,
            center: &[f64],
            radius: f64,
            step: f64,
            f: &dyn Fn(&[f64]) -> f64,
            best: &mut (f64, Vec<f64>),
        ) {
            if j == k - 1 {
                g[j] = 1.0 - used;
                if g[j] <= 0.0 {
                    return;
                }
                let v = f(g);
                if v > best.0 {
                    *best = (v, g.clone());
                }
                return;
            }
            let lo = (center[j] - radius).max(step);
            let hi = (center[j] + radius).min(1.0 - used);
            let mut n = (lo / step).ceil() as i64;
            while (n as f64) * step <= hi + 1e-12 {
                g[j] = n as f64 * step;
                rec(j + 1, k, g, used + g[j], center, radius, step, f, best);
                n += 1;
            }
        }
        rec(0, k, &mut g, 0.0, &center, radius, step, &f, &mut best);
        center = best.1;
        radius = 3.0 * step;
        step /= 10.0;
    }
    center
}

/// The closed-form optimal classifier against a grid-search maximizer.
pub fn lemma1(instances: usize) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let k = rng.random_range(2..=4);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let priors: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let dens: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..2.0)).collect();
        let closed = lemma1_oracle(&priors, &dens)?;
        let grid = simplex_grid_max(k, |g| classifier_objective(&priors, &dens, g));
        for (a, b) in closed.iter().zip(&grid) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(Report {
        id: 3,
        name: "optimal classifier",
        passed: worst < 2e-3,
        detail: format!("{instances} instances, max component gap {worst:.2e}"),
    })
}

/// On finite spaces the minimizers of the KL-sum objective are exactly the
/// balanced maps.
pub fn theorem1() -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut instances: Vec<(Vec<f64>, Vec<Vec<f64>>)> = vec![(
        vec![0.4, 0.6],
        vec![vec![0.3, 0.2, 0.1, 0.4], vec![0.1, 0.4, 0.2, 0.3]],
    )];
    for _ in 0..10 {
        let p = rng.random_range(0.1..0.9);
        let dist = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let c0 = dist(&mut rng);
        let c1 = dist(&mut rng);
        instances.push((vec![p, 1.0 - p], vec![c0, c1]));
    }
    let mut mismatches = 0;
    let mut balanced_total = 0;
    for (priors, conds) in &instances {
        let maps = all_maps(4, 2);
        let scores: Vec<f64> = maps
            .iter()
            .map(|m| theorem1_objective(m, 2, priors, conds))
            .collect::<Result<_>>()?;
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        for (m, s) in maps.iter().zip(&scores) {
            let minimizer = *s <= min + 1e-12;
            let p0 = pushforward(m, &conds[0], 2);
            let p1 = pushforward(m, &conds[1], 2);
            let balanced = p0.iter().zip(&p1).all(|(a, b)| (a - b).abs() < 1e-12);
            balanced_total += usize::from(balanced);
            if minimizer != balanced {
                mismatches += 1;
            }
        }
    }
    Ok(Report {
        id: 4,
        name: "balanced-map enumeration",
        passed: mismatches == 0,
        detail: format!(
            "{} instances × 16 maps, {balanced_total} balanced, {mismatches} set mismatches",
            instances.len()
        ),
    })
}

/// Forwards to [`CtObjective`] and records what the classifier step received.
struct Recording<'a, O> {
    inner: O,
    repr_seen_by_classifier: Option<ParamSet>,
    classifier_seen_by_repr: Option<ParamSet>,
    _marker: std::marker::PhantomData<&'a ()>,
}

impl<O: AdversarialObjective> AdversarialObjective for Recording<'_, O> {
    fn outcome_grads(
        &mut self,
        repr: &ParamSet,
        outcome: &ParamSet,
        treatment: &ParamSet,
        alpha: f64,
    ) -> Result<(GradMap, GradMap, f64, f64)> {
        self.classifier_seen_by_repr = Some(treatment.clone());
        self.inner.outcome_grads(repr, outcome, treatment, alpha)
    }

    fn treatment_grads(&mut self, repr: &ParamSet, treatment: &ParamSet) -> Result<(GradMap, f64)> {
        self.repr_seen_by_classifier = Some(repr.clone());
        self.inner.treatment_grads(repr, treatment)
    }

    fn reversal_grads(
        &mut self,
        params: &CtParams,
        lambda: f64,
    ) -> Result<([GradMap; 3], StepLosses)> {
        self.inner.reversal_grads(params, lambda)
    }
}

/// EMA with `β = 0` copies, a zero learning rate freezes everything, and the
/// classifier step reads the representation's fresh EMA shadow.
pub fn algorithm1() -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let cfg = small_config(8);
    let trajs = random_trajectories(&cfg, 4, 6, &mut rng);
    let refs: Vec<&PatientTrajectory> = trajs.iter().collect();
    let batch = SeqBatch::from_trajectories(&refs)?;
    let params = CtParams::init(&cfg, &mut rng)?;
    let run = |lr: f64, beta: f64, steps: usize| -> Result<TrainState> {
        let mut state = TrainState::new(params.clone(), OptimizerKind::default());
        let mut step_rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..steps {
            let mut obj = CtObjective {
                cfg: &cfg,
                batch: &batch,
                training: true,
                rng: &mut step_rng,
            };
            let sc = StepConfig {
                lr,
                alpha: 0.1,
                beta,
                balancing: Balancing::Cdc,
            };
            adversarial_step(&mut state, &mut obj, &sc)?;
        }
        Ok(state)
    };
    let s = run(1e-2, 0.0, 3)?;
    let beta_zero = s.ema.bitwise_eq(&s.params) && !s.params.bitwise_eq(&params);
    let s = run(0.0, 0.99, 3)?;
    let frozen = s.params.bitwise_eq(&params) && s.ema.bitwise_eq(&params);

    let mut state = TrainState::new(params.clone(), OptimizerKind::default());
    let mut step_rng = ChaCha8Rng::seed_from_u64(5);
    let mut order_ok = true;
    for _ in 0..3 {
        let ema_treatment_before = state.ema.treatment.clone();
        let mut rec = Recording {
            inner: CtObjective {
                cfg: &cfg,
                batch: &batch,
                training: true,
                rng: &mut step_rng,
            },
            repr_seen_by_classifier: None,
            classifier_seen_by_repr: None,
            _marker: std::marker::PhantomData,
        };
        let sc = StepConfig {
            lr: 1e-2,
            alpha: 0.1,
            beta: 0.5,
            balancing: Balancing::Cdc,
        };
        adversarial_step(&mut state, &mut rec, &sc)?;
        let seen_repr = rec.repr_seen_by_classifier.take();
        let seen_cls = rec.classifier_seen_by_repr.take();
        order_ok &= seen_repr
            .as_ref()
            .is_some_and(|r| r.bitwise_eq(&state.ema.repr))
            && seen_repr
                .as_ref()
                .is_some_and(|r| !r.bitwise_eq(&state.params.repr))
            && seen_cls
                .as_ref()
                .is_some_and(|c| c.bitwise_eq(&ema_treatment_before));
    }
    Ok(Report {
        id: 5,
        name: "update identities",
        passed: beta_zero && frozen && order_ok,
        detail: format!("β=0 copies: {beta_zero}, zero rate frozen: {frozen}, classifier reads EMA shadow: {order_ok}"),
    })
}

/// Assignment rate without confounding, factual replay, and treatment direction.
pub fn simulator() -> Result<Report> {
    let cfg0 = SimConfig {
        gamma: 0.0,
        n_train: 400,
        n_val: 1,
        n_test: 1,
        seed: 66,
        ..SimConfig::default()
    };
    let d0 = simulate_dataset(&cfg0)?;
    let draws: Vec<bool> = d0
        .train
        .iter()
        .flat_map(|p| p.chemo.iter().copied())
        .take(10_000)
        .collect();
    let radio: Vec<bool> = d0
        .train
        .iter()
        .flat_map(|p| p.radio.iter().copied())
        .take(10_000)
        .collect();
    let rate = draws.iter().filter(|&&b| b).count() as f64 / draws.len() as f64;
    let rate_r = radio.iter().filter(|&&b| b).count() as f64 / radio.len() as f64;
    let rate_ok =
        draws.len() == 10_000 && (rate - 0.5).abs() <= 0.02 && (rate_r - 0.5).abs() <= 0.02;

    let cfg2 = SimConfig {
        gamma: 2.0,
        n_train: 400,
        n_val: 1,
        n_test: 1,
        seed: 67,
        ..SimConfig::default()
    };
    let d2 = simulate_dataset(&cfg2)?;
    let mut replay_ok = true;
    for p in &d2.train {
        let factual: Vec<usize> = (0..p.len() - 1).map(|t| p.treatment(t)).collect();
        let out = replay(&cfg2, p, 0, &factual)?;
        replay_ok &= out
            .iter()
            .zip(&p.volumes[1..])
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let o = p.len() / 2;
        let out = replay(&cfg2, p, o, &factual[o..])?;
        replay_ok &= out
            .iter()
            .zip(&p.volumes[o + 1..])
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(68);
    let mut violations = 0;
    let pairs = 10_000;
    for _ in 0..pairs {
        let p = &d2.train[rng.random_range(0..d2.train.len())];
        let t = rng.random_range(0..p.len());
        let cat = rng.random_range(1..N_TREATMENTS);
        let treated = replay(&cfg2, p, t, &[cat])?[0];
        let untreated = replay(&cfg2, p, t, &[0])?[0];
        if treated > untreated {
            violations += 1;
        }
    }
    Ok(Report {
        id: 6,
        name: "simulator statistics",
        passed: rate_ok && replay_ok && violations == 0,
        detail: format!(
            "γ=0 rates chemo {rate:.4} radio {rate_r:.4}; replay bitwise {replay_ok}; {violations}/{pairs} treated above untreated"
        ),
    })
}

/// Settings of the desk-scale comparison.
#[derive(Clone, Debug)]
pub struct DeskSettings {
    pub sim: SimConfig,
    pub model: CtConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for DeskSettings {
    fn default() -> Self {
        DeskSettings {
            sim: SimConfig {
                gamma: 2.0,
                n_train: 1000,
                n_val: 200,
                n_test: 200,
                t_max: 30,
                tau_max: 4,
                ..SimConfig::default()
            },
            model: simulator_dims(CtConfig::default()),
            train: TrainConfig {
                epochs: 60,
                lr: 0.003,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2],
        }
    }
}

/// Per-seed results of the desk-scale runs.
#[derive(Clone, Debug)]
pub struct DeskSeed {
    pub seed: u64,
    pub ct_pct: f64,
    pub msm_pct: f64,
    pub probe_balanced: ProbeScore,
    pub probe_unbalanced: ProbeScore,
}

/// One-step comparison with the baseline, plus the balancing probe, on the
/// same simulated datasets. Returns the comparison report, the probe report
/// and the per-seed numbers.
pub fn desk_scale(
    settings: &DeskSettings,
    out: Option<&Path>,
) -> Result<(Report, Report, Vec<DeskSeed>)> {
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut comparison_secs = 0.0;
    for &seed in &settings.seeds {
        let t0 = Instant::now();
        let sim = SimConfig {
            seed,
            ..settings.sim.clone()
        };
        let data = simulate_dataset(&sim)?;
        let train_cfg = TrainConfig {
            seed,
            ..settings.train.clone()
        };
        let (ck, _) = train_ct(&settings.model, &train_cfg, &data, None)?;
        let ct = ct_one_step(&ck, &data)?.rmse(sim.v_max)?;
        let msm = fit_msm_baseline(&data, 1)?;
        let msm_rmse = msm_horizons(&msm, &data, 1)?[0].rmse(sim.v_max)?;
        comparison_secs += t0.elapsed().as_secs_f64();
        let probe_balanced = probe_accuracy(&ck, &data)?;
        let unbalanced_cfg = TrainConfig {
            alpha: 0.0,
            ..train_cfg.clone()
        };
        let (ck0, _) = train_ct(&settings.model, &unbalanced_cfg, &data, None)?;
        let probe_unbalanced = probe_accuracy(&ck0, &data)?;
        if let Some(dir) = out {
            let d = dir.join(format!("seed{seed}"));
            ck.save(&d.join("checkpoint_alpha.json"))?;
            ck0.save(&d.join("checkpoint_alpha0.json"))?;
            msm.save(&d.join("msm_summary.json"))?;
        }
        rows.push(DeskSeed {
            seed,
            ct_pct: 100.0 * ct,
            msm_pct: 100.0 * msm_rmse,
            probe_balanced,
            probe_unbalanced,
        });
    }
    let all_better = rows.iter().all(|r| r.ct_pct < r.msm_pct);
    let per_seed: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "seed {}: CT {:.3} vs MSM {:.3}",
                r.seed, r.ct_pct, r.msm_pct
            )
        })
        .collect();
    let comparison = Report {
        id: 7,
        name: "desk-scale comparison",
        passed: all_better && comparison_secs < 3600.0,
        detail: format!("{} ({comparison_secs:.0}s)", per_seed.join("; ")),
    };
    let n = rows.len() as f64;
    let mean_bal = rows
        .iter()
        .map(|r| r.probe_balanced.prior_corrected)
        .sum::<f64>()
        / n;
    let mean_unbal = rows
        .iter()
        .map(|r| r.probe_unbalanced.prior_corrected)
        .sum::<f64>()
        / n;
    let raw_bal = rows.iter().map(|r| r.probe_balanced.raw).sum::<f64>() / n;
    let raw_unbal = rows.iter().map(|r| r.probe_unbalanced.raw).sum::<f64>() / n;
    let seed_failures: Vec<u64> = rows
        .iter()
        .filter(|r| r.probe_balanced.prior_corrected >= r.probe_unbalanced.prior_corrected)
        .map(|r| r.seed)
        .collect();
    let probe = Report {
        id: 8,
        name: "balancing probe",
        passed: mean_bal < mean_unbal,
        detail: format!(
            "mean probe accuracy α>0 {mean_bal:.4} vs α=0 {mean_unbal:.4} (at one half: {raw_bal:.4} vs {raw_unbal:.4}); seeds not ordered: {seed_failures:?} ({:.0}s total)",
            started.elapsed().as_secs_f64()
        ),
    };
    Ok((comparison, probe, rows))
}

/// Identical nominator and denominator give unit weights and the unweighted
/// fit; real weights normalize to mean one.
pub fn msm_identities() -> Result<Report> {
    let sim = SimConfig {
        gamma: 2.0,
        n_train: 300,
        n_val: 50,
        n_test: 20,
        seed: 77,
        ..SimConfig::default()
    };
    let data = simulate_dataset(&sim)?;
    let fit_set = msm_patients(
        &data,
        &[crate::tumorsim::Split::Train, crate::tumorsim::Split::Val],
    )?;
    let opts = LogisticOptions::default();
    let den = fit_propensity(&fit_set, Conditioning::History, &opts)?;
    let num = fit_propensity(&fit_set, Conditioning::Treatments, &opts)?;
    let mut ones = true;
    let mut same = true;
    let mut worst_mean = 0.0f64;
    for tau in 1..=3 {
        let ch = chunks(&fit_set, tau);
        let w = stabilized_weights(&den, &den, &fit_set, &ch, tau)?;
        ones &= w.values.iter().all(|&v| v == 1.0);
        let weighted = fit_outcome(&fit_set, &ch, Some(&w.values), tau)?;
        let plain = fit_outcome(&fit_set, &ch, None, tau)?;
        same &= weighted == plain;
        let test = msm_patients(&data, &[crate::tumorsim::Split::Test])?;
        for p in &test {
            for origin in 1..p.len() - tau {
                let iv: Vec<Vec<bool>> = p.a[origin..origin + tau].to_vec();
                let f = crate::msm::outcome_features(p, origin, &iv);
                same &= weighted.predict(&f).to_bits() == plain.predict(&f).to_bits();
            }
        }
        let real = stabilized_weights(&num, &den, &fit_set, &ch, tau)?;
        worst_mean = worst_mean.max((real.normalized_mean - 1.0).abs());
    }
    Ok(Report {
        id: 9,
        name: "baseline identities",
        passed: ones && same && worst_mean <= 1e-6,
        detail: format!("unit weights {ones}; weighted ≡ unweighted {same}; normalized mean gap {worst_mean:.1e}"),
    })
}

/// Shared relative tables add `2(l_max + 1)·d_qkv` parameters; absolute
/// encodings add none and leave the blocks untouched.
pub fn pe_accounting() -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut ok = true;
    let mut details = Vec::new();
    for (blocks, l_max, d_h) in [(1, 15, 16), (2, 5, 12), (2, 3, 8)] {
        let base = CtConfig {
            blocks,
            l_max,
            d_h,
            n_heads: 2,
            ..simulator_dims(CtConfig::default())
        };
        let make = |mode: PeMode, rng: &mut ChaCha8Rng| {
            CtParams::init(
                &CtConfig {
                    pe_mode: mode,
                    ..base.clone()
                },
                rng,
            )
        };
        let trainable = make(PeMode::RelativeTrainable, &mut rng)?;
        let fixed = make(PeMode::RelativeFixed, &mut rng)?;
        let absolute = make(PeMode::Absolute, &mut rng)?;
        let expected = 2 * (l_max + 1) * base.d_qkv();
        let extra = trainable.param_count() - fixed.param_count();
        let no_cross = CtParams::init(
            &CtConfig {
                cross: CrossFlags::NONE,
                ..base.clone()
            },
            &mut rng,
        )?;
        ok &= extra == expected
            && trainable.repr.count_prefix("pe.") == expected
            && absolute.param_count() == fixed.param_count()
            && absolute.block_param_count() == trainable.block_param_count()
            && no_cross.param_count() == trainable.param_count();
        details.push(format!(
            "B={blocks} l_max={l_max}: +{extra} (expected {expected})"
        ));
    }
    Ok(Report {
        id: 10,
        name: "positional-encoding count",
        passed: ok,
        detail: details.join("; "),
    })
}
