use std::ops::Range;

use super::{numel_of, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.044_715;

/// (outer, extent, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn gelu_value(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu_value(x)
}

impl Tensor {
    fn unary(&self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(y)
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        let mode = if self.shape() == other.shape() {
            Broadcast::Same
        } else if self.numel() == 1 {
            Broadcast::LhsScalar
        } else if other.numel() == 1 {
            Broadcast::RhsScalar
        } else {
            return Err(Error::shape(op, self.shape(), other.shape()));
        };
        let (shape, n) = match mode {
            Broadcast::LhsScalar => (other.shape().to_vec(), other.numel()),
            _ => (self.shape().to_vec(), self.numel()),
        };
        let at = move |t: &Tensor, i: usize| {
            if t.numel() == 1 {
                t.data()[0]
            } else {
                t.data()[i]
            }
        };
        let data = (0..n).map(|i| f(at(self, i), at(other, i))).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, needs| {
                let mut ga = vec![0.0; a.numel()];
                let mut gb = vec![0.0; b.numel()];
                for (i, &gi) in g.iter().enumerate() {
                    let (da, db) = df(at(&a, i), at(&b, i));
                    let ia = if a.numel() == 1 { 0 } else { i };
                    let ib = if b.numel() == 1 { 0 } else { i };
                    ga[ia] += gi * da;
                    gb[ib] += gi * db;
                }
                vec![needs[0].then_some(ga), needs[1].then_some(gb)]
            }),
        ))
    }

    /// Elementwise sum; shapes must match unless one side has one element.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|g| g * factor).collect())]),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid_value, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn gelu(&self) -> Tensor {
        self.unary(gelu_value, |x, _| gelu_derivative(x))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                reason: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        Ok(Tensor::from_op(
            Vec::new(),
            vec![self.data().iter().sum()],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        ))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        Ok(self.sum()?.scale(1.0 / self.numel() as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        super::check_shape(shape, self.numel())?;
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape().to_vec(),
                reason: format!("{op} expects a matrix"),
            }),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let src = self.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_op(
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Matrix product of `[p, q]` and `[q, r]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (p, q) = self.dims2("matmul")?;
        let (q2, r) = other.dims2("matmul")?;
        if q != q2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let data = matmul_raw(self.data(), other.data(), p, q, r);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![p, r],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, needs| {
                // dA = G Bᵀ, dB = Aᵀ G
                let ga = needs[0].then(|| {
                    let (bd, mut ga) = (b.data(), vec![0.0; p * q]);
                    for i in 0..p {
                        for k in 0..r {
                            let gik = g[i * r + k];
                            if gik == 0.0 {
                                continue;
                            }
                            for j in 0..q {
                                ga[i * q + j] += gik * bd[j * r + k];
                            }
                        }
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let (ad, mut gb) = (a.data(), vec![0.0; q * r]);
                    for i in 0..p {
                        for j in 0..q {
                            let aij = ad[i * q + j];
                            if aij == 0.0 {
                                continue;
                            }
                            let row = &mut gb[j * r..(j + 1) * r];
                            for (dst, gv) in row.iter_mut().zip(&g[i * r..(i + 1) * r]) {
                                *dst += aij * gv;
                            }
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Adds a length-`m` bias to every row of a `[.., m]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let m = *self.shape().last().unwrap_or(&1);
        if self.rank() == 0 || bias.numel() != m || bias.rank() != 1 {
            return Err(Error::shape("add_bias", self.shape(), bias.shape()));
        }
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias.data()[i % m])
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, needs| {
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; m];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % m] += gi;
                    }
                    gb
                });
                vec![needs[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// `out[l, c] = x[l, c] * w[c]`
    pub fn mul_cols(&self, w: &Tensor) -> Result<Tensor> {
        let (l, c) = self.dims2("mul_cols")?;
        if w.numel() != c || w.rank() != 1 {
            return Err(Error::shape("mul_cols", self.shape(), w.shape()));
        }
        let data = (0..l * c).map(|i| self.data()[i] * w.data()[i % c]).collect();
        let (x, wt) = (self.clone(), w.clone());
        Ok(Tensor::from_op(
            vec![l, c],
            data,
            vec![self.clone(), w.clone()],
            Box::new(move |g, _, needs| {
                let gx = needs[0].then(|| (0..l * c).map(|i| g[i] * wt.data()[i % c]).collect());
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; c];
                    for i in 0..l * c {
                        gw[i % c] += g[i] * x.data()[i];
                    }
                    gw
                });
                vec![gx, gw]
            }),
        ))
    }

    /// `out[l, c] = x[l, c] * s[l]`
    pub fn mul_rows(&self, s: &Tensor) -> Result<Tensor> {
        let (l, c) = self.dims2("mul_rows")?;
        if s.numel() != l || s.rank() != 1 {
            return Err(Error::shape("mul_rows", self.shape(), s.shape()));
        }
        let data = (0..l * c).map(|i| self.data()[i] * s.data()[i / c]).collect();
        let (x, st) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            vec![l, c],
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |g, _, needs| {
                let gx = needs[0].then(|| (0..l * c).map(|i| g[i] * st.data()[i / c]).collect());
                let gs = needs[1].then(|| {
                    let mut gs = vec![0.0; l];
                    for i in 0..l * c {
                        gs[i / c] += g[i] * x.data()[i];
                    }
                    gs
                });
                vec![gx, gs]
            }),
        ))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (x[idx(k)] - m).exp();
                    y[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    y[idx(k)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Log-softmax along `axis` via a stable log-sum-exp.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|k| (x[idx(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..n {
                    y[idx(k)] = x[idx(k)] - lse;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let gs: f64 = (0..n).map(|k| g[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = g[idx(k)] - y[idx(k)].exp() * gs;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean over `axis`; the axis is removed.
    pub fn mean(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|k| x[(o * n + k) * inner + i]).sum();
                y[o * inner + i] = s / n as f64;
            }
        }
        Ok(Tensor::from_op(
            removed_axis(self.shape(), axis),
            y,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            gx[(o * n + k) * inner + i] = g[o * inner + i] / n as f64;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Max over `axis`; the gradient goes to the first maximal element.
    pub fn max(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let mut y = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for k in 1..n {
                    if x[(o * n + k) * inner + i] > x[(o * n + best) * inner + i] {
                        best = k;
                    }
                }
                y[o * inner + i] = x[(o * n + best) * inner + i];
                arg[o * inner + i] = (o * n + best) * inner + i;
            }
        }
        let total = self.numel();
        Ok(Tensor::from_op(
            removed_axis(self.shape(), axis),
            y,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; total];
                for (gi, &src) in g.iter().zip(&arg) {
                    gx[src] += gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Copy of `range` along `axis`.
    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Tensor> {
        let (outer, n, inner) = split_axis(self.shape(), axis)?;
        if range.start >= range.end || range.end > n {
            return Err(Error::Index {
                index: range.end,
                extent: n,
            });
        }
        let len = range.end - range.start;
        let x = self.data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + range.start) * inner;
            y.extend_from_slice(&x[from..from + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let start = range.start;
        Ok(Tensor::from_op(
            shape,
            y,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let from = (o * n + start) * inner;
                    gx[from..from + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row `i` of a matrix as a `[1, cols]` tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        self.slice(0, i..i + 1)
    }

    /// Rows of a `[V, d]` matrix selected by `ids`; gradients scatter-add.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = self.dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Invalid("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                index: bad,
                extent: v,
            });
        }
        let mut y = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            y.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            y,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gx[i * d + j] += g[r * d + j];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalisation over the last axis with ε = 1e-5, followed by the
    /// affine `gain`, `bias` (both of the last extent).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "layer_norm needs rank ≥ 1".into(),
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            inv[r] = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mu) * inv[r];
            }
        }
        let (gd, bd) = (gain.data(), bias.data());
        let y = (0..x.len())
            .map(|i| xhat[i] * gd[i % d] + bd[i % d])
            .collect();
        let gain_t = gain.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _, needs| {
                let gd = gain_t.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let s = r * d;
                        let gh: Vec<f64> = (0..d).map(|j| g[s + j] * gd[j]).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghx: f64 = (0..d).map(|j| gh[j] * xhat[s + j]).sum();
                        for j in 0..d {
                            gx[s + j] = inv[r] / d as f64
                                * (d as f64 * gh[j] - sum_gh - xhat[s + j] * sum_ghx);
                        }
                    }
                    gx
                });
                let ggain = needs[1].then(|| {
                    let mut gg = vec![0.0; d];
                    for i in 0..g.len() {
                        gg[i % d] += g[i] * xhat[i];
                    }
                    gg
                });
                let gbias = needs[2].then(|| {
                    let mut gb = vec![0.0; d];
                    for i in 0..g.len() {
                        gb[i % d] += g[i];
                    }
                    gb
                });
                vec![gx, ggain, gbias]
            }),
        ))
    }

    /// Scales every row of a matrix to unit L2 norm.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        let (n, d) = self.dims2("normalize_rows")?;
        let x = self.data();
        let norms: Vec<f64> = (0..n)
            .map(|r| {
                x[r * d..(r + 1) * d]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(NORM_FLOOR)
            })
            .collect();
        let y = (0..n * d).map(|i| x[i] / norms[i / d]).collect();
        Ok(Tensor::from_op(
            vec![n, d],
            y,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    let s = r * d;
                    let dot: f64 = (0..d).map(|j| g[s + j] * y[s + j]).sum();
                    for j in 0..d {
                        gx[s + j] = (g[s + j] - y[s + j] * dot) / norms[r];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for j in 0..q {
            let aij = a[i * q + j];
            if aij == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[j * r..(j + 1) * r]) {
                *o += aij * bv;
            }
        }
    }
    out
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concat of an empty part list".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    for p in &parts[1..] {
        let same_rest = p.rank() == rank
            && (0..rank).all(|a| a == axis || p.shape()[a] == first.shape()[a]);
        if !same_rest {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let outer = numel_of(&first.shape()[..axis]);
    let inner = numel_of(&first.shape()[axis + 1..]);
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &n) in parts.iter().zip(&extents) {
            data.extend_from_slice(&p.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op(
        shape,
        data,
        parts.to_vec(),
        Box::new(move |g, _, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = extents
                .iter()
                .zip(needs)
                .map(|(&n, &need)| need.then(|| Vec::with_capacity(outer * n * inner)))
                .collect();
            for o in 0..outer {
                let mut offset = o * total * inner;
                for (gp, &n) in grads.iter_mut().zip(&extents) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[offset..offset + n * inner]);
                    }
                    offset += n * inner;
                }
            }
            grads
        }),
    ))
}

/// Same-padded 1-D cross-correlation over the sequence axis.
///
/// `x` is `[L, C_in]`, `kernels` is `[K, C_in, C_out]` with odd `K`, `bias`
/// is `[C_out]`; the result is `[L, C_out]`.
pub fn conv1d(x: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (l, cin) = x.dims2("conv1d")?;
    let (k, kcin, cout) = match *kernels.shape() {
        [k, ci, co] => (k, ci, co),
        _ => return Err(Error::shape("conv1d", x.shape(), kernels.shape())),
    };
    if k % 2 == 0 {
        return Err(Error::InvalidShape {
            shape: kernels.shape().to_vec(),
            reason: format!("conv1d kernel width must be odd, got {k}"),
        });
    }
    if kcin != cin {
        return Err(Error::shape("conv1d", x.shape(), kernels.shape()));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape("conv1d", kernels.shape(), bias.shape()));
    }
    let pad = k / 2;
    let (xd, wd, bd) = (x.data(), kernels.data(), bias.data());
    let mut out = vec![0.0; l * cout];
    for pos in 0..l {
        let orow = &mut out[pos * cout..(pos + 1) * cout];
        orow.copy_from_slice(bd);
        for t in 0..k {
            let Some(src) = (pos + t).checked_sub(pad).filter(|&s| s < l) else {
                continue;
            };
            for ci in 0..cin {
                let xv = xd[src * cin + ci];
                let w = &wd[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                for (o, wv) in orow.iter_mut().zip(w) {
                    *o += xv * wv;
                }
            }
        }
    }
    let (xc, kc) = (x.clone(), kernels.clone());
    Ok(Tensor::from_op(
        vec![l, cout],
        out,
        vec![x.clone(), kernels.clone(), bias.clone()],
        Box::new(move |g, _, needs| {
            let (xd, wd) = (xc.data(), kc.data());
            let mut gx = needs[0].then(|| vec![0.0; l * cin]);
            let mut gw = needs[1].then(|| vec![0.0; k * cin * cout]);
            for pos in 0..l {
                let grow = &g[pos * cout..(pos + 1) * cout];
                for t in 0..k {
                    let Some(src) = (pos + t).checked_sub(pad).filter(|&s| s < l) else {
                        continue;
                    };
                    for ci in 0..cin {
                        let base = (t * cin + ci) * cout;
                        if let Some(gx) = gx.as_mut() {
                            let w = &wd[base..base + cout];
                            gx[src * cin + ci] +=
                                grow.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xv = xd[src * cin + ci];
                            for (dst, gv) in gw[base..base + cout].iter_mut().zip(grow) {
                                *dst += xv * gv;
                            }
                        }
                    }
                }
            }
            let gb = needs[2].then(|| {
                let mut gb = vec![0.0; cout];
                for pos in 0..l {
                    for c in 0..cout {
                        gb[c] += g[pos * cout + c];
                    }
                }
                gb
            });
            vec![gx, gw, gb]
        }),
    ))
}
