//! A one-block, one-head, width-2 model evaluated equation by equation with
//! plain loops, against the tape-based encoder.

use ct_core::diffcore::Tensor;
use ct_core::model::{representations, CtConfig, CtParams, PatientTrajectory, SeqBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

const EPS: f64 = 1e-5;

fn cfg() -> CtConfig {
    CtConfig {
        blocks: 1,
        d_h: 2,
        n_heads: 1,
        d_r: 2,
        n_fc: 3,
        l_max: 15,
        ..CtConfig::default()
    }
}

/// Hand-set parameters: every entry is a fixed function of its name and index.
fn hand_params() -> CtParams {
    let mut p = CtParams::init(&cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (g, set) in [&mut p.repr, &mut p.outcome, &mut p.treatment]
        .into_iter()
        .enumerate()
    {
        for (k, (_, t)) in set.iter_mut().enumerate() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.6 * (1.3 * k as f64 + 0.7 * i as f64 + 0.4 * g as f64 + 0.2).sin();
            }
        }
    }
    p
}

fn get(p: &CtParams, name: &str) -> Tensor {
    p.repr.get(name).unwrap().clone()
}

fn lin(x: &Mat, p: &CtParams, prefix: &str) -> Mat {
    let w = get(p, &format!("{prefix}.w"));
    let b = get(p, &format!("{prefix}.b"));
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|o| {
                    b.data()[o]
                        + row
                            .iter()
                            .enumerate()
                            .map(|(k, xk)| xk * w.get(k, o))
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn ln(x: &Mat, p: &CtParams, prefix: &str) -> Mat {
    let g = get(p, &format!("{prefix}.g"));
    let b = get(p, &format!("{prefix}.b"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| g.data()[j] * (v - mu) / (var + EPS).sqrt() + b.data()[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Causal attention with relative key and value offsets `w[min(i − j, l_max)]`.
fn attend(hq: &Mat, hkv: &Mat, p: &CtParams, prefix: &str) -> Mat {
    let q = lin(hq, p, &format!("{prefix}.q"));
    let k = lin(hkv, p, &format!("{prefix}.k"));
    let v = lin(hkv, p, &format!("{prefix}.v"));
    let (pk, pv) = (get(p, "pe.k"), get(p, "pe.v"));
    let d = q[0].len();
    let mut out = Vec::new();
    for i in 0..q.len() {
        let logits: Vec<f64> = (0..=i)
            .map(|j| {
                (0..d)
                    .map(|c| q[i][c] * (k[j][c] + pk.get(i - j, c)))
                    .sum::<f64>()
                    / (d as f64).sqrt()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        out.push(
            (0..d)
                .map(|c| {
                    (0..=i)
                        .map(|j| e[j] / z * (v[j][c] + pv.get(i - j, c)))
                        .sum()
                })
                .collect(),
        );
    }
    out
}

/// Attention parameters are stored as `wq/bq`; rename them for `lin`.
fn with_attention_aliases(p: &CtParams) -> CtParams {
    let mut q = p.clone();
    for name in p.repr.names() {
        for (from, to) in [
            (".wq", ".q.w"),
            (".bq", ".q.b"),
            (".wk", ".k.w"),
            (".bk", ".k.b"),
            (".wv", ".v.w"),
            (".bv", ".v.b"),
        ] {
            if let Some(stem) = name.strip_suffix(from) {
                q.repr.insert(format!("{stem}{to}"), get(p, &name));
            }
        }
    }
    q
}

fn oracle(p: &CtParams, t: &PatientTrajectory) -> Mat {
    let p = &with_attention_aliases(p);
    let len = t.len();
    let rows = |m: &Tensor| -> Mat { (0..m.rows()).map(|i| m.row(i).to_vec()).collect() };
    let mut a_prev = vec![vec![0.0; t.a.cols()]];
    a_prev.extend((0..len - 1).map(|i| t.a.row(i).to_vec()));
    let h = [
        lin(&a_prev, p, "embed.a"),
        lin(&rows(&t.x), p, "embed.x"),
        lin(&rows(&t.y), p, "embed.y"),
    ];
    let v_tilde = lin(&vec![t.v.clone()], p, "embed.v")[0].clone();
    let tags = ["a", "x", "y"];
    let selfed: Vec<Mat> = (0..3)
        .map(|s| {
            ln(
                &add(
                    &attend(&h[s], &h[s], p, &format!("block0.self.{}", tags[s])),
                    &h[s],
                ),
                p,
                &format!("block0.ln_self.{}", tags[s]),
            )
        })
        .collect();
    let mut out = Vec::new();
    for s in 0..3 {
        let mut pooled: Mat = vec![v_tilde.clone(); len];
        for k in (0..3).filter(|&k| k != s) {
            let name = format!("{}_{}", tags[s], tags[k]);
            let cross = attend(&selfed[s], &h[k], p, &format!("block0.cross.{name}"));
            pooled = add(
                &pooled,
                &ln(
                    &add(&cross, &selfed[s]),
                    p,
                    &format!("block0.ln_cross.{name}"),
                ),
            );
        }
        let inner: Mat = lin(&pooled, p, &format!("block0.ff.{}.1", tags[s]))
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let ff = lin(&inner, p, &format!("block0.ff.{}.2", tags[s]));
        out.push(ln(
            &add(&ff, &pooled),
            p,
            &format!("block0.ln_ff.{}", tags[s]),
        ));
    }
    let mean: Mat = (0..len)
        .map(|i| {
            (0..2)
                .map(|c| (out[0][i][c] + out[1][i][c] + out[2][i][c]) / 3.0)
                .collect()
        })
        .collect();
    lin(&mean, p, "out")
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|v| if v > 0.0 { v } else { v.exp_m1() })
                .collect()
        })
        .collect()
}

#[test]
fn single_block_matches_direct_evaluation() {
    let p = hand_params();
    let t = PatientTrajectory {
        x: Tensor::from_rows(&[vec![0.4, -1.1], vec![1.5, 0.3]]).unwrap(),
        a: Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).unwrap(),
        y: Tensor::from_rows(&[vec![0.7], vec![-0.2]]).unwrap(),
        v: vec![2.0],
    };
    let batch = SeqBatch::from_trajectories(&[&t]).unwrap();
    let got = representations(&cfg(), &p, &batch).unwrap();
    let want = oracle(&p, &t);
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for c in 0..2 {
            worst = worst.max((got.get(i, c) - want[i][c]).abs());
        }
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}
