use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{CtConfig, PeMode, Stream};
use super::data::SeqBatch;
use super::params::{names, Bound, CtParams};
use crate::attention::{
    absolute_pe, attend_relative, fixed_relative_pe, make_causal_mask, AttentionMask,
    AttentionVars, AttnDropout, PeVars, SeqLayout,
};
use crate::diffcore::{concat_cols, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// The three hidden-state sequences of a batch, each `[B·T, d_h]`.
#[derive(Clone, Copy, Debug)]
pub struct Streams<'t> {
    pub a: Var<'t>,
    pub x: Var<'t>,
    pub y: Var<'t>,
}

impl<'t> Streams<'t> {
    pub fn get(&self, s: Stream) -> Var<'t> {
        match s {
            Stream::A => self.a,
            Stream::X => self.x,
            Stream::Y => self.y,
        }
    }

    fn from_fn(mut f: impl FnMut(Stream) -> Result<Var<'t>>) -> Result<Self> {
        Ok(Streams {
            a: f(Stream::A)?,
            x: f(Stream::X)?,
            y: f(Stream::Y)?,
        })
    }
}

/// Attention masks for one batch: causal for treatment/outcome keys, causal
/// AND covariate visibility for covariate keys.
#[derive(Clone, Debug)]
pub struct StreamMasks {
    pub causal: AttentionMask,
    pub x_keys: Vec<AttentionMask>,
}

impl StreamMasks {
    pub fn for_batch(batch: &SeqBatch) -> Self {
        let causal = make_causal_mask(batch.len, false);
        let x_keys = if batch.all_covariates_visible() {
            vec![causal.clone()]
        } else {
            (0..batch.batch)
                .map(|b| {
                    let mut m = causal.clone();
                    m.mask_keys(&batch.x_visible[b * batch.len..(b + 1) * batch.len]);
                    m
                })
                .collect()
        };
        StreamMasks { causal, x_keys }
    }

    fn keys(&self, s: Stream) -> &[AttentionMask] {
        match s {
            Stream::X => &self.x_keys,
            _ => std::slice::from_ref(&self.causal),
        }
    }
}

/// Dropout settings for one forward pass.
pub struct Dropout<'r, R: Rng + ?Sized> {
    pub p: f64,
    pub attn: bool,
    pub training: bool,
    pub rng: &'r mut R,
}

impl<R: Rng + ?Sized> Dropout<'_, R> {
    fn apply<'t>(&mut self, v: Var<'t>) -> Result<Var<'t>> {
        v.dropout(self.p, self.training, self.rng)
    }

    fn attn_cfg(&self) -> AttnDropout {
        AttnDropout {
            p: if self.attn { self.p } else { 0.0 },
            training: self.training,
        }
    }
}

fn attention_vars<'t>(repr: &Bound<'t>, prefix: &str, n_heads: usize) -> Result<AttentionVars<'t>> {
    Ok(AttentionVars {
        w_q: repr.var(&format!("{prefix}.wq"))?,
        w_k: repr.var(&format!("{prefix}.wk"))?,
        w_v: repr.var(&format!("{prefix}.wv"))?,
        b_q: repr.var(&format!("{prefix}.bq"))?,
        b_k: repr.var(&format!("{prefix}.bk"))?,
        b_v: repr.var(&format!("{prefix}.bv"))?,
        n_heads,
    })
}

fn layer_norm<'t>(cfg: &CtConfig, repr: &Bound<'t>, prefix: &str, h: Var<'t>) -> Result<Var<'t>> {
    h.layer_norm(
        repr.var(&format!("{prefix}.g"))?,
        repr.var(&format!("{prefix}.b"))?,
        cfg.ln_eps,
    )
}

fn linear<'t>(set: &Bound<'t>, prefix: &str, h: Var<'t>) -> Result<Var<'t>> {
    h.linear(
        set.var(&format!("{prefix}.w"))?,
        set.var(&format!("{prefix}.b"))?,
    )
}

/// Relative tables for the configured encoding mode.
pub fn position_tables<'t>(
    cfg: &CtConfig,
    tape: &'t Tape,
    repr: &Bound<'t>,
) -> Result<Option<PeVars<'t>>> {
    Ok(match cfg.pe_mode {
        PeMode::RelativeTrainable => Some(PeVars {
            w_k: repr.var("pe.k")?,
            w_v: repr.var("pe.v")?,
            l_max: cfg.l_max,
        }),
        PeMode::RelativeFixed => Some(PeVars::bind(
            tape,
            &fixed_relative_pe(cfg.l_max, cfg.d_qkv()),
        )),
        PeMode::Absolute => None,
    })
}

/// Input embeddings `(A⁰, X⁰, Y⁰)` and the static representation broadcast to
/// every row, `[B·T, d_h]`.
pub fn embed<'t>(
    cfg: &CtConfig,
    repr: &Bound<'t>,
    batch: &SeqBatch,
) -> Result<(Streams<'t>, Var<'t>)> {
    let checks = [
        ("treatments", batch.a_prev.cols(), cfg.d_a),
        ("covariates", batch.x.cols(), cfg.d_x),
        ("outcomes", batch.y.cols(), cfg.d_y),
        ("statics", batch.v.cols(), cfg.d_v),
    ];
    for (name, got, want) in checks {
        if got != want {
            return Err(Error::config(format!(
                "{name} have width {got}, model expects {want}"
            )));
        }
    }
    let tape = repr.var("embed.a.w")?.tape();
    let mut streams = Streams {
        a: linear(repr, "embed.a", tape.constant(batch.a_prev.clone()))?,
        x: linear(repr, "embed.x", tape.constant(batch.x.clone()))?,
        y: linear(repr, "embed.y", tape.constant(batch.y.clone()))?,
    };
    if cfg.pe_mode == PeMode::Absolute {
        let pe = absolute_pe(batch.len, cfg.d_h);
        let mut tiled = Vec::with_capacity(batch.rows() * cfg.d_h);
        for _ in 0..batch.batch {
            tiled.extend_from_slice(pe.data());
        }
        let pe = tape.constant(Tensor::new(vec![batch.rows(), cfg.d_h], tiled)?);
        streams = Streams::from_fn(|s| streams.get(s).add(pe))?;
    }
    let v = linear(repr, "embed.v", tape.constant(batch.v.clone()))?;
    let index: Vec<usize> = (0..batch.rows()).map(|r| r / batch.len).collect();
    Ok((streams, v.select_rows(&index)?))
}

/// One multi-input block: self-attentions, cross-attentions, pooling with the
/// static representation, and the position-wise feed-forward layers.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<'t, R: Rng + ?Sized>(
    cfg: &CtConfig,
    repr: &Bound<'t>,
    block: usize,
    input: Streams<'t>,
    v_rows: Var<'t>,
    masks: &StreamMasks,
    layout: SeqLayout,
    pe: Option<&PeVars<'t>>,
    drop: &mut Dropout<'_, R>,
) -> Result<Streams<'t>> {
    let attn = drop.attn_cfg();
    let selfed = Streams::from_fn(|s| {
        let h = input.get(s);
        let w = attention_vars(repr, &names::self_attn(block, s), cfg.n_heads)?;
        let o = attend_relative(h, h, &w, pe, masks.keys(s), layout, attn, drop.rng)?;
        layer_norm(cfg, repr, &names::ln_self(block, s), o.add(h)?)
    })?;
    let pooled = Streams::from_fn(|q| {
        let own = selfed.get(q);
        let mut terms = Vec::with_capacity(2);
        for k in q.partners() {
            let term = if cfg.cross.get(q, k) {
                let w = attention_vars(repr, &names::cross_attn(block, q, k), cfg.n_heads)?;
                let o = attend_relative(
                    own,
                    input.get(k),
                    &w,
                    pe,
                    masks.keys(k),
                    layout,
                    attn,
                    drop.rng,
                )?;
                layer_norm(cfg, repr, &names::ln_cross(block, q, k), o.add(own)?)?
            } else {
                own
            };
            terms.push(term);
        }
        terms[0].add(terms[1])?.add(v_rows)
    })?;
    Streams::from_fn(|s| {
        let h = pooled.get(s);
        let ff = names::ff(block, s);
        let inner = drop.apply(linear(repr, &format!("{ff}.1"), h)?.relu()?)?;
        let out = drop.apply(linear(repr, &format!("{ff}.2"), inner)?)?;
        layer_norm(cfg, repr, &names::ln_ff(block, s), out.add(h)?)
    })
}

/// Pools the final streams into the representation `Φ`, `[B·T, d_r]`.
///
/// Rows with a visible covariate average all three streams; rows whose
/// covariate is masked average treatment and outcome only.
pub fn balanced_repr<'t, R: Rng + ?Sized>(
    repr: &Bound<'t>,
    streams: Streams<'t>,
    x_visible: &[bool],
    drop: &mut Dropout<'_, R>,
) -> Result<Var<'t>> {
    let (w_ay, w_x): (Vec<f64>, Vec<f64>) = x_visible
        .iter()
        .map(|&vis| {
            if vis {
                (1.0 / 3.0, 1.0 / 3.0)
            } else {
                (0.5, 0.0)
            }
        })
        .unzip();
    let ay = streams.a.add(streams.y)?.scale_rows(&w_ay)?;
    let pooled = ay.add(streams.x.scale_rows(&w_x)?)?;
    let phi = linear(repr, "out", pooled)?.elu()?;
    drop.apply(phi)
}

/// Full encoder pass from inputs to `Φ`.
pub fn encode<'t, R: Rng + ?Sized>(
    cfg: &CtConfig,
    repr: &Bound<'t>,
    batch: &SeqBatch,
    drop: &mut Dropout<'_, R>,
) -> Result<Var<'t>> {
    let tape = repr.var("embed.a.w")?.tape();
    let (mut streams, v_rows) = embed(cfg, repr, batch)?;
    let pe = position_tables(cfg, tape, repr)?;
    let masks = StreamMasks::for_batch(batch);
    let layout = SeqLayout {
        batch: batch.batch,
        q_len: batch.len,
        k_len: batch.len,
    };
    for b in 0..cfg.blocks {
        streams = block_forward(
            cfg,
            repr,
            b,
            streams,
            v_rows,
            &masks,
            layout,
            pe.as_ref(),
            drop,
        )?;
    }
    balanced_repr(repr, streams, &batch.x_visible, drop)
}

/// Outcome head: `concat(Φ, A) → ELU hidden layer → linear`.
pub fn predict_outcome<'t>(outcome: &Bound<'t>, phi: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    let h = linear(outcome, "gy.1", concat_cols(&[phi, a])?)?.elu()?;
    linear(outcome, "gy.2", h)
}

/// Treatment classifier: `Φ → ELU hidden layer → linear → softmax`.
pub fn classify_treatment<'t>(treatment: &Bound<'t>, phi: Var<'t>) -> Result<Var<'t>> {
    let h = linear(treatment, "ga.1", phi)?.elu()?;
    linear(treatment, "ga.2", h)?.softmax_rows(None)
}

fn eval_dropout(rng: &mut ChaCha8Rng) -> Dropout<'_, ChaCha8Rng> {
    Dropout {
        p: 0.0,
        attn: false,
        training: false,
        rng,
    }
}

/// Evaluation-mode representations for every row of `batch`.
pub fn representations(cfg: &CtConfig, params: &CtParams, batch: &SeqBatch) -> Result<Tensor> {
    let tape = Tape::new();
    let repr = params.repr.bind(&tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let phi = encode(cfg, &repr, batch, &mut eval_dropout(&mut rng))?;
    let out = (*phi.value()).clone();
    Ok(out)
}

/// Evaluation-mode outcome head on precomputed representations.
pub fn outcome_head(params: &CtParams, phi: &Tensor, a: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let outcome = params.outcome.bind(&tape, false);
    let y = predict_outcome(
        &outcome,
        tape.constant(phi.clone()),
        tape.constant(a.clone()),
    )?;
    let out = (*y.value()).clone();
    Ok(out)
}

/// Evaluation-mode treatment probabilities on precomputed representations.
pub fn treatment_head(params: &CtParams, phi: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let treatment = params.treatment.bind(&tape, false);
    let p = classify_treatment(&treatment, tape.constant(phi.clone()))?;
    let out = (*p.value()).clone();
    Ok(out)
}

/// One-step predictions `Ŷ_{i+1}` for every row under the batch's own treatments.
pub fn predict_factual(cfg: &CtConfig, params: &CtParams, batch: &SeqBatch) -> Result<Tensor> {
    let phi = representations(cfg, params, batch)?;
    outcome_head(params, &phi, &batch.a_cur)
}
