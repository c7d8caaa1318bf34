use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How positions are encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PeMode {
    /// Shared trainable relative tables.
    #[default]
    RelativeTrainable,
    /// Shared sinusoidal relative tables, not trained.
    RelativeFixed,
    /// Sinusoidal absolute encoding added to the initial hidden states.
    Absolute,
}

impl FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative-trainable" | "relative" => Ok(PeMode::RelativeTrainable),
            "relative-fixed" | "fixed" => Ok(PeMode::RelativeFixed),
            "absolute" => Ok(PeMode::Absolute),
            other => Err(Error::param(format!(
                "unknown positional encoding `{other}`"
            ))),
        }
    }
}

/// One of the three input streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    A,
    X,
    Y,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::A, Stream::X, Stream::Y];

    pub fn tag(self) -> &'static str {
        match self {
            Stream::A => "a",
            Stream::X => "x",
            Stream::Y => "y",
        }
    }

    /// The two streams a query stream cross-attends to, in block order.
    pub fn partners(self) -> [Stream; 2] {
        match self {
            Stream::A => [Stream::X, Stream::Y],
            Stream::X => [Stream::A, Stream::Y],
            Stream::Y => [Stream::X, Stream::A],
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "treatment" | "treatments" => Ok(Stream::A),
            "x" | "covariate" | "covariates" => Ok(Stream::X),
            "y" | "outcome" | "outcomes" => Ok(Stream::Y),
            other => Err(Error::param(format!("unknown stream `{other}`"))),
        }
    }
}

/// Directed cross-attention switches, named `query_key`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossFlags {
    pub a_x: bool,
    pub a_y: bool,
    pub x_a: bool,
    pub x_y: bool,
    pub y_x: bool,
    pub y_a: bool,
}

impl CrossFlags {
    pub const ALL: CrossFlags = CrossFlags {
        a_x: true,
        a_y: true,
        x_a: true,
        x_y: true,
        y_x: true,
        y_a: true,
    };

    pub const NONE: CrossFlags = CrossFlags {
        a_x: false,
        a_y: false,
        x_a: false,
        x_y: false,
        y_x: false,
        y_a: false,
    };

    pub fn get(&self, query: Stream, key: Stream) -> bool {
        match (query, key) {
            (Stream::A, Stream::X) => self.a_x,
            (Stream::A, Stream::Y) => self.a_y,
            (Stream::X, Stream::A) => self.x_a,
            (Stream::X, Stream::Y) => self.x_y,
            (Stream::Y, Stream::X) => self.y_x,
            (Stream::Y, Stream::A) => self.y_a,
            _ => false,
        }
    }

    fn set(&mut self, query: Stream, key: Stream, on: bool) {
        match (query, key) {
            (Stream::A, Stream::X) => self.a_x = on,
            (Stream::A, Stream::Y) => self.a_y = on,
            (Stream::X, Stream::A) => self.x_a = on,
            (Stream::X, Stream::Y) => self.x_y = on,
            (Stream::Y, Stream::X) => self.y_x = on,
            (Stream::Y, Stream::A) => self.y_a = on,
            _ => {}
        }
    }
}

impl Default for CrossFlags {
    fn default() -> Self {
        CrossFlags::ALL
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtConfig {
    pub blocks: usize,
    pub d_h: usize,
    pub n_heads: usize,
    pub d_r: usize,
    pub n_fc: usize,
    /// Rate for every dropout site, including attentional dropout.
    pub dropout: f64,
    /// Turns attentional dropout off while keeping the other dropout sites.
    pub attn_dropout: bool,
    pub l_max: usize,
    pub d_x: usize,
    pub d_a: usize,
    pub d_y: usize,
    pub d_v: usize,
    pub pe_mode: PeMode,
    pub cross: CrossFlags,
    pub ln_eps: f64,
}

impl Default for CtConfig {
    fn default() -> Self {
        CtConfig {
            blocks: 1,
            d_h: 16,
            n_heads: 2,
            d_r: 16,
            n_fc: 32,
            dropout: 0.1,
            attn_dropout: true,
            l_max: 15,
            d_x: 2,
            d_a: 4,
            d_y: 1,
            d_v: 1,
            pe_mode: PeMode::RelativeTrainable,
            cross: CrossFlags::ALL,
            ln_eps: 1e-5,
        }
    }
}

impl CtConfig {
    pub fn d_qkv(&self) -> usize {
        self.d_h / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("blocks", self.blocks),
            ("d_h", self.d_h),
            ("n_heads", self.n_heads),
            ("d_r", self.d_r),
            ("n_fc", self.n_fc),
            ("d_x", self.d_x),
            ("d_a", self.d_a),
            ("d_y", self.d_y),
            ("d_v", self.d_v),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.d_h % self.n_heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not divide d_h = {}",
                self.n_heads, self.d_h
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("layer-norm epsilon must be positive"));
        }
        Ok(())
    }
}

/// Copy of `config` with every cross-attention touching `which` switched off.
///
/// Parameters for the disabled attentions stay in the model, so parameter
/// counts do not change.
pub fn isolate_subnetwork(config: &CtConfig, which: &str) -> Result<CtConfig> {
    let stream: Stream = which.parse()?;
    let mut out = config.clone();
    for other in stream.partners() {
        out.cross.set(stream, other, false);
        out.cross.set(other, stream, false);
    }
    Ok(out)
}
