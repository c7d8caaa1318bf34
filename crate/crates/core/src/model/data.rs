use serde::{Deserialize, Serialize};

use super::config::CtConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// One patient's aligned sequences.
///
/// Row `t` holds the covariates `X_t`, the outcome `Y_t` and the treatment
/// `A_t` applied after observing them; `Y_{t+1}` is its result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTrajectory {
    pub x: Tensor,
    pub a: Tensor,
    pub y: Tensor,
    pub v: Vec<f64>,
}

impl PatientTrajectory {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, cfg: &CtConfig) -> Result<()> {
        let t = self.len();
        if t < 2 {
            return Err(Error::param(format!(
                "trajectory needs at least 2 steps, got {t}"
            )));
        }
        let checks = [
            ("x", &self.x, cfg.d_x),
            ("a", &self.a, cfg.d_a),
            ("y", &self.y, cfg.d_y),
        ];
        for (name, m, d) in checks {
            if m.shape() != [t, d] {
                return Err(Error::config(format!(
                    "{name} has shape {:?}, expected [{t}, {d}]",
                    m.shape()
                )));
            }
        }
        if self.v.len() != cfg.d_v {
            return Err(Error::config(format!(
                "static covariates have width {}, expected {}",
                self.v.len(),
                cfg.d_v
            )));
        }
        for i in 0..t {
            let row = self.a.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::param(format!("treatment row {i} is not one-hot")));
            }
        }
        Ok(())
    }
}

/// Equal-length sequences stacked row-wise, in the layout the model consumes.
///
/// Row `b·len + i` is position `i` of sequence `b`. The treatment stream input
/// at position `i` is the treatment of step `i − 1` (zeros at `i = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub batch: usize,
    pub len: usize,
    /// Treatment-stream input, `A_{i−1}`.
    pub a_prev: Tensor,
    pub x: Tensor,
    pub y: Tensor,
    pub v: Tensor,
    /// Treatment `A_i` fed to the outcome head and used as the classifier target.
    pub a_cur: Tensor,
    /// Next outcome `Y_{i+1}`; zero on the last position.
    pub y_next: Tensor,
    /// Whether the covariate at each row may be attended to.
    pub x_visible: Vec<bool>,
    /// Rows that carry a next-outcome target.
    pub target_rows: Vec<usize>,
}

impl SeqBatch {
    /// Stacks full trajectories; every position but the last is a target row.
    pub fn from_trajectories(trajs: &[&PatientTrajectory]) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| Error::param("empty batch"))?;
        let len = first.len();
        Self::from_prefixes(trajs, len)
    }

    /// Stacks the first `len` steps of each trajectory.
    pub fn from_prefixes(trajs: &[&PatientTrajectory], len: usize) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| Error::param("empty batch"))?;
        let (d_x, d_a, d_y, d_v) = (
            first.x.cols(),
            first.a.cols(),
            first.y.cols(),
            first.v.len(),
        );
        let batch = trajs.len();
        let mut a_prev = Vec::with_capacity(batch * len * d_a);
        let mut a_cur = Vec::with_capacity(batch * len * d_a);
        let mut x = Vec::with_capacity(batch * len * d_x);
        let mut y = Vec::with_capacity(batch * len * d_y);
        let mut y_next = Vec::with_capacity(batch * len * d_y);
        let mut v = Vec::with_capacity(batch * d_v);
        let mut target_rows = Vec::new();
        for (b, tr) in trajs.iter().enumerate() {
            if tr.len() < len
                || tr.x.cols() != d_x
                || tr.a.cols() != d_a
                || tr.y.cols() != d_y
                || tr.v.len() != d_v
            {
                return Err(Error::param(format!(
                    "trajectory {b} does not fit the batch layout"
                )));
            }
            for i in 0..len {
                if i == 0 {
                    a_prev.extend(std::iter::repeat_n(0.0, d_a));
                } else {
                    a_prev.extend_from_slice(tr.a.row(i - 1));
                }
                a_cur.extend_from_slice(tr.a.row(i));
                x.extend_from_slice(tr.x.row(i));
                y.extend_from_slice(tr.y.row(i));
                if i + 1 < tr.len() {
                    y_next.extend_from_slice(tr.y.row(i + 1));
                    if i + 1 < len {
                        target_rows.push(b * len + i);
                    }
                } else {
                    y_next.extend(std::iter::repeat_n(0.0, d_y));
                }
            }
            v.extend_from_slice(&tr.v);
        }
        Ok(SeqBatch {
            batch,
            len,
            a_prev: Tensor::new(vec![batch * len, d_a], a_prev)?,
            x: Tensor::new(vec![batch * len, d_x], x)?,
            y: Tensor::new(vec![batch * len, d_y], y)?,
            v: Tensor::new(vec![batch, d_v], v)?,
            a_cur: Tensor::new(vec![batch * len, d_a], a_cur)?,
            y_next: Tensor::new(vec![batch * len, d_y], y_next)?,
            x_visible: vec![true; batch * len],
            target_rows,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    /// Hides the trailing `count` covariates of sequence `b` from attention.
    pub fn mask_trailing_covariates(&mut self, b: usize, count: usize) {
        let start = self.len.saturating_sub(count);
        for i in start..self.len {
            self.x_visible[b * self.len + i] = false;
        }
    }

    pub fn all_covariates_visible(&self) -> bool {
        self.x_visible.iter().all(|&v| v)
    }

    /// Concatenates two batches with the same sequence length.
    pub fn concat(&self, other: &SeqBatch) -> Result<SeqBatch> {
        if self.len != other.len {
            return Err(Error::param(
                "cannot concatenate batches of different lengths",
            ));
        }
        let cat = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)
        };
        let offset = self.rows();
        let mut target_rows = self.target_rows.clone();
        target_rows.extend(other.target_rows.iter().map(|r| r + offset));
        let mut x_visible = self.x_visible.clone();
        x_visible.extend_from_slice(&other.x_visible);
        Ok(SeqBatch {
            batch: self.batch + other.batch,
            len: self.len,
            a_prev: cat(&self.a_prev, &other.a_prev)?,
            x: cat(&self.x, &other.x)?,
            y: cat(&self.y, &other.y)?,
            v: cat(&self.v, &other.v)?,
            a_cur: cat(&self.a_cur, &other.a_cur)?,
            y_next: cat(&self.y_next, &other.y_next)?,
            x_visible,
            target_rows,
        })
    }
}

/// Per-feature affine standardization fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits mean and standard deviation per column over every row of every matrix.
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in mats {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sq = vec![0.0; m.cols()];
            }
            for r in 0..m.rows() {
                for (c, v) in m.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += m.rows();
        }
        if n == 0 {
            return Err(Error::param("cannot fit a standardizer on no data"));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / nf - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn identity(width: usize) -> Self {
        Standardizer {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn transform(&self, m: &Tensor) -> Tensor {
        let mut out = m.clone();
        let cols = m.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % cols;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }

    pub fn inverse(&self, m: &Tensor) -> Tensor {
        let mut out = m.clone();
        let cols = m.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % cols;
            *v = *v * self.std[c] + self.mean[c];
        }
        out
    }
}
