use ct_core::harness::msm_patients;
use ct_core::msm::{
    chunks, fit_logistic, fit_msm, fit_propensity, quantile, raw_weight, Conditioning,
    LogisticOptions, MsmModel, MsmPatient,
};
use ct_core::tumorsim::{simulate_dataset, SimConfig, Split};
use ct_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn patients(gamma: f64, seed: u64) -> Vec<MsmPatient> {
    let cfg = SimConfig {
        gamma,
        seed,
        n_train: 600,
        n_val: 1,
        n_test: 1,
        t_max: 20,
        tau_max: 2,
        ..SimConfig::default()
    };
    msm_patients(&simulate_dataset(&cfg).unwrap(), &[Split::Train]).unwrap()
}

#[test]
fn unconfounded_history_model_predicts_one_half() {
    let data = patients(0.0, 1);
    let den = fit_propensity(&data, Conditioning::History, &LogisticOptions::default()).unwrap();
    let mut dev = 0.0;
    let mut n = 0.0;
    for p in &data {
        for t in 0..p.len() {
            for fit in &den.components {
                dev += (fit.predict(&p.history_features(t)) - 0.5).abs();
                n += 1.0;
            }
        }
    }
    assert_eq!(den.components.len(), 2);
    assert!(dev / n < 0.03, "mean deviation {}", dev / n);
}

fn upper_weight(data: &[MsmPatient]) -> f64 {
    let opts = LogisticOptions::default();
    let num = fit_propensity(data, Conditioning::Treatments, &opts).unwrap();
    let den = fit_propensity(data, Conditioning::History, &opts).unwrap();
    let mut w: Vec<f64> = chunks(data, 1)
        .iter()
        .map(|c| raw_weight(&num, &den, &data[c.patient], c.origin, 1).0)
        .collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter_mut().for_each(|v| *v /= mean);
    w.sort_by(f64::total_cmp);
    quantile(&w, 0.99)
}

#[test]
fn confounding_widens_the_weight_tail() {
    let flat = upper_weight(&patients(0.0, 2));
    let steep = upper_weight(&patients(2.0, 2));
    assert!(steep > flat, "99th percentile {steep} vs {flat}");
}

#[test]
fn summary_round_trips_and_predicts_identically() {
    let data = patients(2.0, 3);
    let model = fit_msm(&data, 2, &LogisticOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("msm.json");
    model.save(&path).unwrap();
    let back = MsmModel::load(&path).unwrap();
    assert_eq!(back, model);
    for w in &model.weights {
        assert!((w.normalized_mean - 1.0).abs() < 1e-6);
        assert!(w.lower <= w.q50 && w.q50 <= w.upper);
    }
    let iv = vec![vec![true, false], vec![false, false]];
    assert_eq!(
        model.predict(&data[0], 5, &iv).unwrap(),
        back.predict(&data[0], 5, &iv).unwrap()
    );
}

#[test]
fn logistic_recovers_known_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (w0, w1) = (-0.5, 1.5);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..20_000 {
        let x: f64 = rng.random_range(-2.0..2.0);
        let p = 1.0 / (1.0 + (-(w0 + w1 * x)).exp());
        xs.push(vec![x]);
        ys.push(rng.random::<f64>() < p);
    }
    let fit = fit_logistic(&xs, &ys, &LogisticOptions::default()).unwrap();
    assert!(fit.converged && !fit.regularized);
    for x in [-1.5, 0.0, 1.0] {
        let want = 1.0 / (1.0 + (-(w0 + w1 * x)).exp());
        assert!((fit.predict(&[x]) - want).abs() < 0.03);
    }
}

#[test]
fn separable_labels_fall_back_to_regularization() {
    let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
    let ys: Vec<bool> = (0..40).map(|i| i >= 20).collect();
    let fit = fit_logistic(&xs, &ys, &LogisticOptions::default()).unwrap();
    assert!(fit.regularized);
    assert!(fit.predict(&[0.0]) < 0.5 && fit.predict(&[39.0]) > 0.5);
}

#[test]
fn constant_labels_are_degenerate() {
    let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
    let err = fit_logistic(&xs, &[true; 10], &LogisticOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)), "{err}");
}
