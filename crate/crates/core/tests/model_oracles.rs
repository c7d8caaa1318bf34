//! Multi-step prediction against a step-by-step loop built from single
//! forward passes.

use ct_core::diffcore::{Tape, Tensor};
use ct_core::harness::acceptance::random_trajectories;
use ct_core::model::{
    classify_treatment, encode, isolate_subnetwork, outcome_head, predict_outcome, representations,
    rollout, rollout_many, CtConfig, CtParams, Dropout, PatientTrajectory, RolloutQuery, SeqBatch,
};
use ct_core::train::{loss_factual, loss_ga};
use ct_core::tumorsim::one_hot;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn intervention(cats: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = cats.iter().map(|&c| one_hot(c).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Feeds each prediction back by hand: a fresh trajectory per step with
/// intervention treatments, zeroed covariates after the origin and earlier
/// predictions as outcomes.
fn stepped(
    cfg: &CtConfig,
    params: &CtParams,
    traj: &PatientTrajectory,
    origin: usize,
    iv: &Tensor,
) -> Vec<f64> {
    let mut preds: Vec<f64> = Vec::new();
    for k in 1..=iv.rows() {
        let len = origin + k;
        let mut t = PatientTrajectory {
            x: Tensor::zeros(&[len, cfg.d_x]),
            a: Tensor::zeros(&[len, cfg.d_a]),
            y: Tensor::zeros(&[len, cfg.d_y]),
            v: traj.v.clone(),
        };
        for p in 0..len {
            let a_row = if p < origin {
                traj.a.row(p).to_vec()
            } else {
                iv.row(p - origin).to_vec()
            };
            t.a.row_mut(p).copy_from_slice(&a_row);
            if p <= origin {
                t.x.row_mut(p).copy_from_slice(traj.x.row(p));
                t.y.row_mut(p).copy_from_slice(traj.y.row(p));
            } else {
                t.y.set(p, 0, preds[p - origin - 1]);
            }
        }
        let mut batch = SeqBatch::from_trajectories(&[&t]).unwrap();
        batch.mask_trailing_covariates(0, k - 1);
        let phi = representations(cfg, params, &batch).unwrap();
        let last = Tensor::new(vec![1, cfg.d_r], phi.row(len - 1).to_vec()).unwrap();
        let a = Tensor::new(vec![1, cfg.d_a], iv.row(k - 1).to_vec()).unwrap();
        preds.push(outcome_head(params, &last, &a).unwrap().item());
    }
    preds
}

fn setup(seed: u64) -> (CtConfig, CtParams, Vec<PatientTrajectory>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = CtConfig {
        d_h: 8,
        n_heads: 2,
        d_r: 8,
        n_fc: 8,
        l_max: 3,
        ..CtConfig::default()
    };
    let params = CtParams::init(&cfg, &mut rng).unwrap();
    let trajs = random_trajectories(&cfg, 3, 9, &mut rng);
    (cfg, params, trajs)
}

#[test]
fn three_step_rollout_matches_hand_loop() {
    let (cfg, params, trajs) = setup(3);
    let iv = intervention(&[1, 0, 3]);
    for (i, traj) in trajs.iter().enumerate() {
        for origin in [0, 2, 5] {
            let got = rollout(&cfg, &params, traj, origin, &iv).unwrap();
            let want = stepped(&cfg, &params, traj, origin, &iv);
            for (g, w) in got.data().iter().zip(&want) {
                assert!(
                    (g - w).abs() <= 1e-12,
                    "patient {i} origin {origin}: {g} vs {w}"
                );
            }
        }
    }
}

#[test]
fn batched_rollouts_match_single_ones() {
    let (cfg, params, trajs) = setup(4);
    let ivs = [
        intervention(&[2, 2]),
        intervention(&[0, 1, 1]),
        intervention(&[3, 0]),
    ];
    let queries: Vec<RolloutQuery> = trajs
        .iter()
        .zip(&ivs)
        .zip([4usize, 4, 1])
        .map(|((traj, iv), origin)| RolloutQuery {
            traj,
            origin,
            intervention: iv,
        })
        .collect();
    let many = rollout_many(&cfg, &params, &queries).unwrap();
    for (q, got) in queries.iter().zip(&many) {
        let single = rollout(&cfg, &params, q.traj, q.origin, q.intervention).unwrap();
        assert_eq!(got.rows(), q.intervention.rows());
        for (a, b) in got.data().iter().zip(single.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn rollout_ignores_observations_after_the_origin() {
    let (cfg, params, trajs) = setup(5);
    let iv = intervention(&[1, 2, 3]);
    let origin = 3;
    let base = rollout(&cfg, &params, &trajs[0], origin, &iv).unwrap();
    let mut changed = trajs[0].clone();
    for p in origin + 1..changed.len() {
        changed.x.row_mut(p).iter_mut().for_each(|v| *v += 7.0);
        changed.y.row_mut(p).iter_mut().for_each(|v| *v -= 3.0);
        let flipped = one_hot((p + 1) % 4);
        changed.a.row_mut(p).copy_from_slice(&flipped);
    }
    let again = rollout(&cfg, &params, &changed, origin, &iv).unwrap();
    assert!(base.bitwise_eq(&again));
}

#[test]
fn rollout_rejects_bad_queries() {
    let (cfg, params, trajs) = setup(6);
    let iv = intervention(&[1]);
    assert!(rollout(&cfg, &params, &trajs[0], trajs[0].len(), &iv).is_err());
    let narrow = Tensor::zeros(&[2, cfg.d_a - 1]);
    assert!(rollout(&cfg, &params, &trajs[0], 1, &narrow).is_err());
}

#[test]
fn one_step_rollout_equals_the_factual_pass() {
    let (cfg, params, trajs) = setup(7);
    for origin in [0, 3, 8] {
        for cat in 0..4 {
            let iv = intervention(&[cat]);
            let got = rollout(&cfg, &params, &trajs[1], origin, &iv).unwrap();
            let batch = SeqBatch::from_prefixes(&[&trajs[1]], origin + 1).unwrap();
            let phi = representations(&cfg, &params, &batch).unwrap();
            let last = Tensor::new(vec![1, cfg.d_r], phi.row(origin).to_vec()).unwrap();
            let want = outcome_head(&params, &last, &iv).unwrap();
            assert!(got.bitwise_eq(&want), "origin {origin} treatment {cat}");
        }
    }
}

#[test]
fn isolating_a_stream_changes_the_output() {
    let (cfg, params, trajs) = setup(8);
    let refs: Vec<&PatientTrajectory> = trajs.iter().collect();
    let batch = SeqBatch::from_trajectories(&refs).unwrap();
    let full = representations(&cfg, &params, &batch).unwrap();
    for s in ["a", "x", "y"] {
        let iso = isolate_subnetwork(&cfg, s).unwrap();
        let out = representations(&iso, &params, &batch).unwrap();
        assert!(
            !out.bitwise_eq(&full),
            "isolating {s} left the output unchanged"
        );
    }
    assert!(isolate_subnetwork(&cfg, "z").is_err());
}

#[test]
fn heads_receive_only_their_own_gradients() {
    let (cfg, params, trajs) = setup(9);
    let refs: Vec<&PatientTrajectory> = trajs.iter().collect();
    let batch = SeqBatch::from_trajectories(&refs).unwrap();
    let targets: Vec<Vec<f64>> = batch
        .target_rows
        .iter()
        .map(|&r| batch.a_cur.row(r).to_vec())
        .collect();
    let a_t = Tensor::from_rows(&targets).unwrap();
    let y_rows: Vec<Vec<f64>> = batch
        .target_rows
        .iter()
        .map(|&r| batch.y_next.row(r).to_vec())
        .collect();
    let y_next = Tensor::from_rows(&y_rows).unwrap();
    for outcome_loss in [true, false] {
        let tape = Tape::new();
        let repr = params.repr.bind(&tape, true);
        let outcome = params.outcome.bind(&tape, true);
        let treatment = params.treatment.bind(&tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut drop = Dropout {
            p: 0.0,
            attn: false,
            training: false,
            rng: &mut rng,
        };
        let phi = encode(&cfg, &repr, &batch, &mut drop)
            .unwrap()
            .select_rows(&batch.target_rows)
            .unwrap();
        let loss = if outcome_loss {
            loss_factual(
                predict_outcome(&outcome, phi, tape.constant(a_t.clone())).unwrap(),
                &y_next,
            )
            .unwrap()
        } else {
            loss_ga(classify_treatment(&treatment, phi).unwrap(), &a_t).unwrap()
        };
        let g = tape.backward(loss).unwrap();
        let (silent, live) = if outcome_loss {
            (&treatment, &outcome)
        } else {
            (&outcome, &treatment)
        };
        for (name, v) in silent.iter() {
            assert!(
                g.wrt(*v).data().iter().all(|&x| x == 0.0),
                "{name} received a gradient"
            );
        }
        assert!(live.iter().any(|(_, v)| g.wrt(*v).max_abs() > 0.0));
        assert!(repr.iter().any(|(_, v)| g.wrt(*v).max_abs() > 0.0));
    }
}

#[test]
fn evaluation_is_deterministic() {
    let (cfg, params, trajs) = setup(10);
    let refs: Vec<&PatientTrajectory> = trajs.iter().collect();
    let batch = SeqBatch::from_trajectories(&refs).unwrap();
    let a = representations(&cfg, &params, &batch).unwrap();
    let b = representations(&cfg, &params, &batch).unwrap();
    assert!(a.bitwise_eq(&b));
}
