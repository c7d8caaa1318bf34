use std::rc::Rc;

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// ELU with α = 1.
    Elu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn same_tape<'t>(a: &Var<'t>, b: &Var<'t>) {
    debug_assert!(std::ptr::eq(a.tape, b.tape), "vars from different tapes");
}

/// Row-wise softmax on raw slices. `allow` masks entries (false = excluded,
/// probability exactly 0). Fails if a row has no allowed entry.
pub fn softmax_rows_raw(
    x: &[f64],
    rows: usize,
    cols: usize,
    allow: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let ok = |j: usize| allow.is_none_or(|m| m[r * cols + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if ok(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { row: r });
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (j, &v) in xr.iter().enumerate() {
            if ok(j) {
                let e = (v - max).exp();
                orow[j] = e;
                sum += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

impl<'t> Var<'t> {
    /// Matrix product of two 2-D operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(dim_err("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let out = Tensor::new(vec![m, n], gemm(a.data(), b.data(), m, k, n))?;
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        self.tape.custom(
            "matmul",
            &[self, other],
            out,
            Box::new(move |g| {
                let ga = need_a.then(|| {
                    Tensor::new(vec![m, k], gemm_nt(g.data(), b.data(), m, n, k)).unwrap()
                });
                let gb = need_b.then(|| {
                    Tensor::new(vec![k, n], gemm_tn(a.data(), g.data(), m, k, n)).unwrap()
                });
                vec![ga, gb]
            }),
        )
    }

    fn zip_same(
        self,
        other: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(dim_err(op, a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        self.tape.custom(
            op,
            &[self, other],
            out,
            Box::new(move |g| {
                let grad = |d: fn(f64, f64) -> f64| {
                    let data = g
                        .data()
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&gv, (&x, &y))| gv * d(x, y))
                        .collect();
                    Tensor::new(a.shape().to_vec(), data).unwrap()
                };
                vec![need_a.then(|| grad(da)), need_b.then(|| grad(db))]
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "add", |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "sub", |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &bias);
        let (a, b) = (self.value(), bias.value());
        let n = a.cols();
        if b.len() != n {
            return Err(dim_err("add_row", a.shape(), b.shape()));
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &bv) in row.iter_mut().zip(b.data()) {
                *x += bv;
            }
        }
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let a_shape = a.shape().to_vec();
        let b_shape = b.shape().to_vec();
        let (need_a, need_b) = (self.requires_grad(), bias.requires_grad());
        self.tape.custom(
            "add_row",
            &[self, bias],
            out,
            Box::new(move |g| {
                let gb = need_b.then(|| {
                    let mut acc = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (s, &v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    Tensor::new(b_shape.clone(), acc).unwrap()
                });
                let ga = need_a.then(|| Tensor::new(a_shape.clone(), g.data().to_vec()).unwrap());
                vec![ga, gb]
            }),
        )
    }

    /// `x · W + b` for `x: m×k`, `W: k×n`, `b: n`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_row(bias)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let a = self.value();
        let out = a.map(|x| x * c);
        self.tape.custom(
            "scale",
            &[self],
            out,
            Box::new(move |g| vec![Some(g.map(|v| v * c))]),
        )
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn scale_rows(self, weights: &[f64]) -> Result<Var<'t>> {
        let a = self.value();
        if weights.len() != a.rows() {
            return Err(dim_err("scale_rows", a.shape(), &[weights.len()]));
        }
        let n = a.cols();
        let w: Rc<Vec<f64>> = Rc::new(weights.to_vec());
        let apply = move |t: &Tensor, w: &[f64]| {
            let mut d = t.data().to_vec();
            for (row, &s) in d.chunks_mut(n).zip(w) {
                row.iter_mut().for_each(|x| *x *= s);
            }
            Tensor::new(t.shape().to_vec(), d).unwrap()
        };
        let out = apply(&a, &w);
        self.tape.custom(
            "scale_rows",
            &[self],
            out,
            Box::new(move |g| vec![Some(apply(g, &w))]),
        )
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.map(|v| kind.apply(v));
        let y_saved = Rc::new(y.clone());
        self.tape.custom(
            match kind {
                Activation::Relu => "relu",
                Activation::Elu => "elu",
                Activation::Sigmoid => "sigmoid",
            },
            &[self],
            y,
            Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y_saved.data()))
                    .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.activation(Activation::Relu)
    }

    pub fn elu(self) -> Result<Var<'t>> {
        self.activation(Activation::Elu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.activation(Activation::Sigmoid)
    }

    /// `ln(max(x, floor))`; the floor keeps log-probabilities finite.
    pub fn log_floor(self, floor: f64) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.map(|v| v.max(floor).ln());
        self.tape.custom(
            "log",
            &[self],
            out,
            Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > floor { gv / xv } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    /// Row-wise softmax over the last axis; masked entries get probability 0.
    pub fn softmax_rows(self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(dim_err("softmax_rows", x.shape(), &[m.len()]));
            }
        }
        let p = softmax_rows_raw(x.data(), rows, cols, mask)?;
        let out = Tensor::new(x.shape().to_vec(), p)?;
        let probs = Rc::new(out.clone());
        self.tape.custom(
            "softmax_rows",
            &[self],
            out,
            Box::new(move |g| {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let pr = &probs.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] = pr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(probs.shape().to_vec(), d).unwrap())]
            }),
        )
    }

    /// Normalizes every vector along the last axis, then applies `gamma`/`beta`.
    /// Uses `sqrt(var + eps)` as the scale.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(Error::param("layer_norm eps must be positive"));
        }
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let d = x.cols();
        if d == 0 || gm.len() != d || bt.len() != d {
            return Err(dim_err("layer_norm", x.shape(), gm.shape()));
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xr[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gm.data()[j] * h + bt.data()[j];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let shape = x.shape().to_vec();
        let (need_x, need_g, need_b) = (
            self.requires_grad(),
            gamma.requires_grad(),
            beta.requires_grad(),
        );
        let g_shape = gm.shape().to_vec();
        let b_shape = bt.shape().to_vec();
        self.tape.custom(
            "layer_norm",
            &[self, gamma, beta],
            out,
            Box::new(move |g| {
                let gd = g.data();
                let gx = need_x.then(|| {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xh = 0.0;
                        for j in 0..d {
                            let gy = gd[r * d + j] * gm.data()[j];
                            sum_gy += gy;
                            sum_gy_xh += gy * xhat[r * d + j];
                        }
                        let nd = d as f64;
                        for j in 0..d {
                            let gy = gd[r * d + j] * gm.data()[j];
                            gx[r * d + j] =
                                inv_std[r] * (gy - sum_gy / nd - xhat[r * d + j] * sum_gy_xh / nd);
                        }
                    }
                    Tensor::new(shape.clone(), gx).unwrap()
                });
                let gg = need_g.then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                    Tensor::new(g_shape.clone(), acc).unwrap()
                });
                let gb = need_b.then(|| {
                    let mut acc = vec![0.0; d];
                    for row in gd.chunks(d) {
                        for (s, &v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    Tensor::new(b_shape.clone(), acc).unwrap()
                });
                vec![gx, gg, gb]
            }),
        )
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, returns `self` unchanged.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, training: bool, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::param(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let x = self.value();
        let keep = 1.0 / (1.0 - p);
        let mult: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out_data = x.data().iter().zip(&mult).map(|(a, m)| a * m).collect();
        let out = Tensor::new(x.shape().to_vec(), out_data)?;
        let shape = x.shape().to_vec();
        self.tape.custom(
            "dropout",
            &[self],
            out,
            Box::new(move |g| {
                let d = g.data().iter().zip(&mult).map(|(a, m)| a * m).collect();
                vec![Some(Tensor::new(shape.clone(), d).unwrap())]
            }),
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        let shape = x.shape().to_vec();
        self.tape.custom(
            "sum",
            &[self],
            out,
            Box::new(move |g| vec![Some(Tensor::filled(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return Err(Error::param("mean of empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if start > end || end > cols {
            return Err(dim_err("slice_cols", x.shape(), &[start, end]));
        }
        let w = end - start;
        let mut d = Vec::with_capacity(rows * w);
        for r in 0..rows {
            d.extend_from_slice(&x.data()[r * cols + start..r * cols + end]);
        }
        let out = Tensor::new(vec![rows, w], d)?;
        let shape = x.shape().to_vec();
        self.tape.custom(
            "slice_cols",
            &[self],
            out,
            Box::new(move |g| {
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + end]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![Some(Tensor::new(shape.clone(), gx).unwrap())]
            }),
        )
    }

    /// Gathers rows by index (repeats allowed); backward scatter-adds.
    pub fn select_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(dim_err("select_rows", x.shape(), &[bad]));
        }
        let mut d = Vec::with_capacity(index.len() * cols);
        for &i in index {
            d.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(vec![index.len(), cols], d)?;
        let index = index.to_vec();
        let shape = x.shape().to_vec();
        self.tape.custom(
            "select_rows",
            &[self],
            out,
            Box::new(move |g| {
                let mut gx = vec![0.0; rows * cols];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..cols {
                        gx[i * cols + j] += g.data()[k * cols + j];
                    }
                }
                vec![Some(Tensor::new(shape.clone(), gx).unwrap())]
            }),
        )
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(self, lambda: f64) -> Result<Var<'t>> {
        let x = self.value();
        let out = (*x).clone();
        self.tape.custom(
            "grad_reverse",
            &[self],
            out,
            Box::new(move |g| vec![Some(g.map(|v| -lambda * v))]),
        )
    }
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::param("concat_cols of nothing"))?;
    let tape: &'t Tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let rows = values[0].rows();
    for v in &values {
        if v.rows() != rows {
            return Err(dim_err("concat_cols", values[0].shape(), v.shape()));
        }
    }
    let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
    let total: usize = widths.iter().sum();
    let mut d = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &values {
            d.extend_from_slice(v.row(r));
        }
    }
    let out = Tensor::new(vec![rows, total], d)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    tape.custom(
        "concat_cols",
        parts,
        out,
        Box::new(move |g| {
            let mut offset = 0;
            let mut res = Vec::with_capacity(widths.len());
            for (w, shape) in widths.iter().zip(&shapes) {
                let mut gd = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    gd.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                }
                offset += w;
                res.push(Some(Tensor::new(shape.clone(), gd).unwrap()));
            }
            res
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let m = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        let i = tape.constant(Tensor::identity(2));
        let mv = tape.constant(m.clone());
        assert_eq!(*i.matmul(mv).unwrap().value(), m);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let p = x.softmax_rows(None).unwrap().value();
        assert!((p.data()[0] - 0.2689).abs() < 1e-4);
        assert!((p.data()[1] - 0.7311).abs() < 1e-4);

        let x = tape.constant(Tensor::filled(&[1, 4], 3.7));
        let p = x.softmax_rows(None).unwrap().value();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x =
            tape.constant(Tensor::from_rows(&[vec![5.0, -1.0, 2.0], vec![0.0, 9.0, 1.0]]).unwrap());
        let mask = [false, true, false, true, false, false];
        let p = x.softmax_rows(Some(&mask)).unwrap().value();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);

        let mask = [true, true, true, false, false, false];
        assert!(matches!(
            x.softmax_rows(Some(&mask)),
            Err(Error::DegenerateMask { row: 1 })
        ));
    }

    #[test]
    fn activations_scalar_values() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::Elu.apply(0.0), 0.0);
        assert!((Activation::Elu.apply(-50.0) + 1.0).abs() < 1e-10);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    }

    #[test]
    fn layer_norm_normalizes() {
        let tape = Tape::new();
        let x = tape.constant(
            Tensor::vector(vec![10.0, 40.0, -20.0, 5.0, 30.0])
                .reshape(vec![1, 5])
                .unwrap(),
        );
        let g = tape.constant(Tensor::ones(&[5]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = x.layer_norm(g, b, 1e-5).unwrap().value();
        let mean = y.sum() / 5.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);

        let c = tape.constant(Tensor::filled(&[1, 5], 2.5));
        let y = c.layer_norm(g, b, 1e-5).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_identity_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
        assert!(x
            .dropout(0.0, true, &mut rng)
            .unwrap()
            .value()
            .bitwise_eq(&x.value()));
        assert!(x
            .dropout(0.7, false, &mut rng)
            .unwrap()
            .value()
            .bitwise_eq(&x.value()));
        assert!(x.dropout(1.0, true, &mut rng).is_err());
        assert!(x.dropout(-0.1, true, &mut rng).is_err());

        let ones = tape.constant(Tensor::ones(&[100_000]));
        let y = ones.dropout(0.5, true, &mut rng).unwrap().value();
        let mean = y.sum() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn backward_simple_losses() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let y = tape.constant(Tensor::vector(vec![1.0, 2.0, -0.5]));
        let yh = tape.param(Tensor::vector(vec![0.5, 2.5, 1.0]));
        let d = yh.sub(y).unwrap();
        let loss = d.mul(d).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(yh).data(), &[-1.0, 1.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = x.scale(2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_reverse_flips_sign() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.grad_reverse(0.5).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[-0.5, -0.5]);
    }
}
