use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{CtConfig, PeMode, Stream};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named tensors of one parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet(BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.0
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.0.keys().cloned().collect()
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of scalar entries across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.0
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bitwise_eq(vb))
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }

    /// Records every tensor on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        Bound(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        )
    }
}

/// A [`ParamSet`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound<'t>(BTreeMap<String, Var<'t>>);

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.0.iter()
    }
}

/// Which partition a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Repr,
    Outcome,
    Treatment,
}

/// All model parameters, partitioned into representation (θ_R), outcome head
/// (θ_Y) and treatment head (θ_A).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtParams {
    pub repr: ParamSet,
    pub outcome: ParamSet,
    pub treatment: ParamSet,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

fn add_linear<R: Rng + ?Sized>(
    set: &mut ParamSet,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    set.insert(format!("{prefix}.w"), uniform(rng, fan_in, fan_out, bound));
    set.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

fn add_ln(set: &mut ParamSet, prefix: &str, d: usize) {
    set.insert(format!("{prefix}.g"), Tensor::ones(&[d]));
    set.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

fn add_attention<R: Rng + ?Sized>(set: &mut ParamSet, rng: &mut R, prefix: &str, d_h: usize) {
    let bound = 1.0 / (d_h as f64).sqrt();
    for w in ["wq", "wk", "wv"] {
        set.insert(format!("{prefix}.{w}"), uniform(rng, d_h, d_h, bound));
    }
    for b in ["bq", "bk", "bv"] {
        set.insert(format!("{prefix}.{b}"), Tensor::zeros(&[d_h]));
    }
}

/// Parameter-name helpers shared by initialization and the forward pass.
pub(crate) mod names {
    use super::Stream;

    pub fn self_attn(block: usize, s: Stream) -> String {
        format!("block{block}.self.{s}")
    }

    pub fn cross_attn(block: usize, q: Stream, k: Stream) -> String {
        format!("block{block}.cross.{q}_{k}")
    }

    pub fn ln_self(block: usize, s: Stream) -> String {
        format!("block{block}.ln_self.{s}")
    }

    pub fn ln_cross(block: usize, q: Stream, k: Stream) -> String {
        format!("block{block}.ln_cross.{q}_{k}")
    }

    pub fn ln_ff(block: usize, s: Stream) -> String {
        format!("block{block}.ln_ff.{s}")
    }

    pub fn ff(block: usize, s: Stream) -> String {
        format!("block{block}.ff.{s}")
    }
}

impl CtParams {
    /// Random initialization: weights uniform in ±1/√fan_in, biases zero,
    /// layer-norm scales one.
    pub fn init<R: Rng + ?Sized>(cfg: &CtConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d_h = cfg.d_h;
        let mut repr = ParamSet::new();
        add_linear(&mut repr, rng, "embed.a", cfg.d_a, d_h);
        add_linear(&mut repr, rng, "embed.x", cfg.d_x, d_h);
        add_linear(&mut repr, rng, "embed.y", cfg.d_y, d_h);
        add_linear(&mut repr, rng, "embed.v", cfg.d_v, d_h);
        if cfg.pe_mode == PeMode::RelativeTrainable {
            let bound = 1.0 / (cfg.d_qkv() as f64).sqrt();
            repr.insert("pe.k", uniform(rng, cfg.l_max + 1, cfg.d_qkv(), bound));
            repr.insert("pe.v", uniform(rng, cfg.l_max + 1, cfg.d_qkv(), bound));
        }
        for b in 0..cfg.blocks {
            for s in Stream::ALL {
                add_attention(&mut repr, rng, &names::self_attn(b, s), d_h);
                add_ln(&mut repr, &names::ln_self(b, s), d_h);
            }
            for q in Stream::ALL {
                for k in q.partners() {
                    add_attention(&mut repr, rng, &names::cross_attn(b, q, k), d_h);
                    add_ln(&mut repr, &names::ln_cross(b, q, k), d_h);
                }
            }
            for s in Stream::ALL {
                let ff = names::ff(b, s);
                add_linear(&mut repr, rng, &format!("{ff}.1"), d_h, d_h);
                add_linear(&mut repr, rng, &format!("{ff}.2"), d_h, d_h);
                add_ln(&mut repr, &names::ln_ff(b, s), d_h);
            }
        }
        add_linear(&mut repr, rng, "out", d_h, cfg.d_r);

        let mut outcome = ParamSet::new();
        add_linear(&mut outcome, rng, "gy.1", cfg.d_r + cfg.d_a, cfg.n_fc);
        add_linear(&mut outcome, rng, "gy.2", cfg.n_fc, cfg.d_y);

        let mut treatment = ParamSet::new();
        add_linear(&mut treatment, rng, "ga.1", cfg.d_r, cfg.n_fc);
        add_linear(&mut treatment, rng, "ga.2", cfg.n_fc, cfg.d_a);

        Ok(CtParams {
            repr,
            outcome,
            treatment,
        })
    }

    pub fn group(&self, g: Group) -> &ParamSet {
        match g {
            Group::Repr => &self.repr,
            Group::Outcome => &self.outcome,
            Group::Treatment => &self.treatment,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamSet {
        match g {
            Group::Repr => &mut self.repr,
            Group::Outcome => &mut self.outcome,
            Group::Treatment => &mut self.treatment,
        }
    }

    /// Trainable scalar count over all groups.
    pub fn param_count(&self) -> usize {
        self.repr.scalar_count() + self.outcome.scalar_count() + self.treatment.scalar_count()
    }

    /// Scalar count of the multi-input blocks only.
    pub fn block_param_count(&self) -> usize {
        self.repr.count_prefix("block")
    }

    pub fn bitwise_eq(&self, other: &CtParams) -> bool {
        self.repr.bitwise_eq(&other.repr)
            && self.outcome.bitwise_eq(&other.outcome)
            && self.treatment.bitwise_eq(&other.treatment)
    }

    pub fn all_finite(&self) -> bool {
        self.repr.all_finite() && self.outcome.all_finite() && self.treatment.all_finite()
    }
}
