use ct_core::harness::{
    evaluate_checkpoint, normalized_rmse, read_manifest, read_metrics, run_experiment, Ablation,
    ExperimentSpec, Method, MetricsRecord, CHECKPOINT_FILE, METRICS_FILE, MSM_FILE, TRAIN_LOG_FILE,
};
use ct_core::model::Checkpoint;
use ct_core::train::Balancing;
use ct_core::tumorsim::{load_dataset, SimConfig};
use proptest::prelude::*;

fn tiny() -> ExperimentSpec {
    let mut spec = ExperimentSpec {
        label: "tiny".into(),
        sim: SimConfig {
            n_train: 24,
            n_val: 8,
            n_test: 6,
            t_max: 8,
            tau_max: 2,
            ..SimConfig::default()
        },
        seeds: vec![11],
        ..ExperimentSpec::default()
    };
    spec.train.epochs = 2;
    spec.train.batch_size = 8;
    spec.model.d_h = 8;
    spec.model.d_r = 8;
    spec.model.n_fc = 8;
    spec
}

fn without_time(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    records
        .iter()
        .map(|r| MetricsRecord {
            wall_s: 0.0,
            ..r.clone()
        })
        .collect()
}

#[test]
fn runs_are_deterministic_and_rows_are_not_duplicated() {
    let spec = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_experiment(&spec, a.path()).unwrap();
    let second = run_experiment(&spec, b.path()).unwrap();
    assert!(first.failures.is_empty(), "{:?}", first.failures);
    assert_eq!(without_time(&first.records), without_time(&second.records));
    // one row per method and horizon
    assert_eq!(first.records.len(), 2 * spec.sim.tau_max);

    let dir = spec.run_dir(a.path(), 2.0, 11);
    for f in [CHECKPOINT_FILE, TRAIN_LOG_FILE, MSM_FILE] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(dir.join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), spec.train.epochs);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("L_GY").is_some() && v.get("val_rmse").is_some());
    }

    run_experiment(&spec, a.path()).unwrap();
    let metrics = a.path().join(METRICS_FILE);
    assert_eq!(read_metrics(&metrics).unwrap().len(), first.records.len());
    assert!(read_manifest(&metrics).unwrap()[0].starts_with("format:"));
}

#[test]
fn saved_checkpoint_reproduces_the_reported_errors() {
    let mut spec = tiny();
    spec.methods = vec![Method::Ct];
    let out = tempfile::tempdir().unwrap();
    let result = run_experiment(&spec, out.path()).unwrap();
    let dir = spec.run_dir(out.path(), 2.0, 11);
    let ck = Checkpoint::load(&dir.join(CHECKPOINT_FILE)).unwrap();
    let data = load_dataset(&dir.join("data")).unwrap();
    let again = evaluate_checkpoint(&ck, &data, spec.horizons()).unwrap();
    for (r, (tau, rmse, n)) in result.records.iter().zip(again) {
        assert_eq!(r.tau, tau);
        assert_eq!(r.n, n);
        assert!((r.rmse_pct - 100.0 * rmse).abs() < 1e-12);
    }
}

#[test]
fn ablations_change_one_setting_each() {
    let spec = tiny();
    for a in Ablation::ALL {
        assert_eq!(a.tag().parse::<Ablation>().unwrap(), a);
        let s = a.apply(&spec);
        assert_eq!(s.label, a.tag());
        assert_eq!(s.sim, spec.sim);
    }
    assert_eq!(Ablation::NoEma.apply(&spec).train.beta, 0.0);
    assert_eq!(Ablation::NoBalancing.apply(&spec).train.alpha, 0.0);
    assert!(matches!(
        Ablation::GradientReversal.apply(&spec).train.balancing,
        Balancing::GradientReversal { .. }
    ));
    assert!("nonsense".parse::<Ablation>().is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = tiny();
    spec.seeds.clear();
    let out = tempfile::tempdir().unwrap();
    assert!(run_experiment(&spec, out.path()).is_err());
    let mut spec = tiny();
    spec.train.lr = 0.0;
    assert!(run_experiment(&spec, out.path()).is_err());
}

proptest! {
    #[test]
    fn rmse_scales_with_the_error(errs in prop::collection::vec(-50.0f64..50.0, 1..40), k in 0.1f64..10.0) {
        let truth: Vec<f64> = (0..errs.len()).map(|i| i as f64).collect();
        let pred: Vec<f64> = truth.iter().zip(&errs).map(|(t, e)| t + e).collect();
        let scaled: Vec<f64> = truth.iter().zip(&errs).map(|(t, e)| t + k * e).collect();
        let r = normalized_rmse(&pred, &truth, 1150.0).unwrap();
        let rk = normalized_rmse(&scaled, &truth, 1150.0).unwrap();
        prop_assert!((rk - k * r).abs() <= 1e-9 * (1.0 + rk));
        let max = errs.iter().fold(0.0f64, |m, e| m.max(e.abs())) / 1150.0;
        prop_assert!(r <= max + 1e-15);
    }
}
