use rand::Rng;

use super::kernels::{axpy, dot, matmul_into, matmul_nt_into, matmul_tn_acc};
use super::{Float, Tensor};
use crate::error::{Error, Result};

const GELU_C: Float = 0.797_884_6; // sqrt(2/pi)
const GELU_K: Float = 0.044_715;

/// Row structure for the fused multi-head attention op. Inputs are
/// `[batch*seq, d_model]` with rows grouped by sequence; heads are contiguous
/// column blocks of width `d_model / n_heads`.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub n_heads: usize,
    pub causal: bool,
    /// Number of attendable keys per sequence (keys at or past it are masked).
    pub key_lens: Option<Vec<usize>>,
}

impl AttentionLayout {
    fn key_limit(&self, b: usize, i: usize) -> usize {
        let mut lim = if self.causal { i + 1 } else { self.seq };
        if let Some(lens) = &self.key_lens {
            lim = lim.min(lens[b]);
        }
        lim
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tensor {
    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(shape_err("matmul", self, other));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data(), &other.data(), &mut out, m, k, n);

        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_into(g, &b.data(), &mut ga, m, n, k);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_acc(&a.data(), g, &mut gb, k, m, n);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err("add", self, other));
        }
        let out = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "add",
            vec![self.clone(), other.clone()],
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    /// Adds a `[d]` vector to every row of a `[.., d]` tensor.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_, d) = self.dims2();
        if row.numel() != d {
            return Err(shape_err("add_row", self, row));
        }
        let mut out = self.to_vec();
        {
            let r = row.data();
            for chunk in out.chunks_exact_mut(d) {
                chunk.iter_mut().zip(r.iter()).for_each(|(o, b)| *o += b);
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "add_row",
            vec![self.clone(), row.clone()],
            Box::new(move |_, g| {
                let mut gr = vec![0.0; d];
                for chunk in g.chunks_exact(d) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gr)]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err("mul", self, other));
        }
        let out = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "mul",
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let ga = a.requires_grad().then(|| {
                    g.iter().zip(b.data().iter()).map(|(g, b)| g * b).collect()
                });
                let gb = b.requires_grad().then(|| {
                    g.iter().zip(a.data().iter()).map(|(g, a)| g * a).collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, factor: Float) -> Tensor {
        let out = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            "scale",
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s as Float],
            vec![1],
            "sum",
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().scale(1.0 / n as Float)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let out = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let x = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            "gelu",
            vec![self.clone()],
            Box::new(move |_, g| {
                let grad = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::contract(format!(
                "transpose needs rank 2, got {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let out = transpose_raw(&self.data(), r, c);
        Ok(Tensor::from_op(
            out,
            vec![c, r],
            "transpose",
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(transpose_raw(g, c, r))]),
        ))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&self) -> Result<Tensor> {
        self.softmax_impl(None)
    }

    /// Softmax over the last axis where entries with `allowed[i] == false`
    /// receive exactly zero weight. Every row needs one allowed entry.
    pub fn masked_softmax(&self, allowed: &[bool]) -> Result<Tensor> {
        if allowed.len() != self.numel() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: self.shape().to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        self.softmax_impl(Some(allowed))
    }

    fn softmax_impl(&self, allowed: Option<&[bool]>) -> Result<Tensor> {
        let (_, n) = self.dims2();
        let x = self.data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: "softmax" });
        }
        let mut out = vec![0.0; x.len()];
        for (r, (xr, yr)) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let mask = allowed.map(|m| &m[r * n..(r + 1) * n]);
            let ok = |j: usize| mask.is_none_or(|m| m[j]);
            let max = (0..n)
                .filter(|&j| ok(j))
                .map(|j| xr[j])
                .fold(Float::NEG_INFINITY, Float::max);
            if max == Float::NEG_INFINITY {
                return Err(Error::contract(format!("softmax row {r} has no allowed entry")));
            }
            let mut z = 0.0;
            for j in 0..n {
                if ok(j) {
                    yr[j] = (xr[j] - max).exp();
                    z += yr[j];
                }
            }
            yr.iter_mut().for_each(|v| *v /= z);
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "softmax",
            vec![self.clone()],
            Box::new(move |y, g| {
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), gxr) in y
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                {
                    let s = dot(yr, gr);
                    for j in 0..n {
                        gxr[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Per-row normalization to zero mean / unit variance, then `gain * x + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: Float) -> Result<Tensor> {
        let (rows, d) = self.dims2();
        if gain.numel() != d {
            return Err(shape_err("layer_norm", self, gain));
        }
        if bias.numel() != d {
            return Err(shape_err("layer_norm", self, bias));
        }
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let x = self.data();
            let (gw, bw) = (gain.data(), bias.data());
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let mean = xr.iter().sum::<Float>() / d as Float;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / d as Float;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (xr[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = gw[j] * h + bw[j];
                }
            }
        }
        let gain_c = gain.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "layer_norm",
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |_, g| {
                let gw = gain_c.data();
                let mut gx = vec![0.0; rows * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        dxhat[j] = gr[j] * gw[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hr[j];
                    }
                    m1 /= d as Float;
                    m2 /= d as Float;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        ))
    }

    /// Mean of `-log softmax(logits)[target]` over rows whose target is not
    /// `ignore`.
    pub fn cross_entropy_mean(&self, targets: &[usize], ignore: Option<usize>) -> Result<Tensor> {
        let (n, c) = self.dims2();
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy_mean",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if Some(t) != ignore && t >= c {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    limit: c,
                });
            }
        }
        let valid: Vec<bool> = targets.iter().map(|&t| Some(t) != ignore).collect();
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let x = self.data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "cross_entropy_mean",
            });
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0f64;
        for r in 0..n {
            if !valid[r] {
                continue;
            }
            let xr = &x[r * c..(r + 1) * c];
            let max = xr.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (xr[j] - max).exp();
                probs[r * c + j] = e;
                z += e;
            }
            probs[r * c..(r + 1) * c].iter_mut().for_each(|p| *p /= z);
            let lse = max as f64 + (z as f64).ln();
            total += lse - xr[targets[r]] as f64;
        }
        drop(x);
        let loss = (total / count as f64) as Float;
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            "cross_entropy_mean",
            vec![self.clone()],
            Box::new(move |_, g| {
                let scale = g[0] / count as Float;
                let mut gx = probs.clone();
                for r in 0..n {
                    let row = &mut gx[r * c..(r + 1) * c];
                    if valid[r] {
                        row[targets[r]] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row lookup: output row `i` is input row `index[i]`. Gradients
    /// scatter-add back, so repeated indices accumulate.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        let (rows, d) = self.dims2();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                limit: rows,
            });
        }
        let mut out = Vec::with_capacity(index.len() * d);
        {
            let x = self.data();
            for &i in index {
                out.extend_from_slice(&x[i * d..(i + 1) * d]);
            }
        }
        let index = index.to_vec();
        let n = index.len();
        Ok(Tensor::from_op(
            out,
            vec![n, d],
            "gather_rows",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; rows * d];
                for (o, &i) in index.iter().enumerate() {
                    axpy(1.0, &g[o * d..(o + 1) * d], &mut gx[i * d..(i + 1) * d]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Column concatenation of `[n, p]` and `[n, q]`.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (n, p) = self.dims2();
        let (n2, q) = other.dims2();
        if n != n2 || self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(shape_err("concat_cols", self, other));
        }
        let w = p + q;
        let mut out = Vec::with_capacity(n * w);
        {
            let (a, b) = (self.data(), other.data());
            for r in 0..n {
                out.extend_from_slice(&a[r * p..(r + 1) * p]);
                out.extend_from_slice(&b[r * q..(r + 1) * q]);
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![n, w],
            "concat_cols",
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let mut ga = Vec::with_capacity(n * p);
                let mut gb = Vec::with_capacity(n * q);
                for row in g.chunks_exact(w) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, c) = self.dims2();
        if self.shape().len() != 2 || start + len > c || len == 0 {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                limit: c,
            });
        }
        let mut out = Vec::with_capacity(n * len);
        {
            let x = self.data();
            for r in 0..n {
                out.extend_from_slice(&x[r * c + start..r * c + start + len]);
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![n, len],
            "slice_cols",
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut gx = vec![0.0; n * c];
                for r in 0..n {
                    gx[r * c + start..r * c + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: Float, rng: &mut R) -> Tensor {
        if rate <= 0.0 {
            return self.clone();
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<Float> = (0..self.numel())
            .map(|_| {
                if rng.random::<f64>() < rate as f64 {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            "dropout",
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())]),
        )
    }

    /// Fused scaled dot-product attention over all sequences and heads:
    /// `out_i = Σ_j softmax_j(q_i·k_j / √d_head) v_j` per head, with masked
    /// keys receiving zero weight.
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, layout: &AttentionLayout) -> Result<Tensor> {
        let (rows, d) = q.dims2();
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(shape_err("attention", q, if k.shape() != q.shape() { k } else { v }));
        }
        if rows != layout.batch * layout.seq || layout.n_heads == 0 || d % layout.n_heads != 0 {
            return Err(Error::contract(format!(
                "attention layout {layout:?} does not fit input shape {:?}",
                q.shape()
            )));
        }
        if let Some(lens) = &layout.key_lens {
            if lens.len() != layout.batch || lens.contains(&0) {
                return Err(Error::contract("attention key_lens must be positive, one per sequence"));
            }
        }
        let (t, h_n) = (layout.seq, layout.n_heads);
        let dh = d / h_n;
        let scale = 1.0 / (dh as Float).sqrt();
        let mut out = vec![0.0; rows * d];
        // probs[(b*H + h)*T*T + i*T + j]
        let mut probs = vec![0.0; layout.batch * h_n * t * t];
        {
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            let mut scores = vec![0.0; t];
            for b in 0..layout.batch {
                for h in 0..h_n {
                    let col = h * dh;
                    let pbase = (b * h_n + h) * t * t;
                    for i in 0..t {
                        let lim = layout.key_limit(b, i);
                        if lim == 0 {
                            continue;
                        }
                        let qi = &qd[(b * t + i) * d + col..][..dh];
                        let mut max = Float::NEG_INFINITY;
                        for j in 0..lim {
                            let kj = &kd[(b * t + j) * d + col..][..dh];
                            scores[j] = dot(qi, kj) * scale;
                            max = max.max(scores[j]);
                        }
                        let mut z = 0.0;
                        for s in scores[..lim].iter_mut() {
                            *s = (*s - max).exp();
                            z += *s;
                        }
                        let prow = &mut probs[pbase + i * t..][..t];
                        let orow = &mut out[(b * t + i) * d + col..][..dh];
                        for j in 0..lim {
                            let p = scores[j] / z;
                            prow[j] = p;
                            axpy(p, &vd[(b * t + j) * d + col..][..dh], orow);
                        }
                    }
                }
            }
        }
        let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
        let layout = layout.clone();
        Ok(Tensor::from_op(
            out,
            vec![rows, d],
            "attention",
            vec![q.clone(), k.clone(), v.clone()],
            Box::new(move |_, g| {
                let (qd, kd, vd) = (qc.data(), kc.data(), vc.data());
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                let mut dp = vec![0.0; t];
                for b in 0..layout.batch {
                    for h in 0..h_n {
                        let col = h * dh;
                        let pbase = (b * h_n + h) * t * t;
                        for i in 0..t {
                            let lim = layout.key_limit(b, i);
                            let gi = &g[(b * t + i) * d + col..][..dh];
                            let prow = &probs[pbase + i * t..][..t];
                            let mut s = 0.0;
                            for j in 0..lim {
                                dp[j] = dot(gi, &vd[(b * t + j) * d + col..][..dh]);
                                s += prow[j] * dp[j];
                                axpy(prow[j], gi, &mut gv[(b * t + j) * d + col..][..dh]);
                            }
                            for j in 0..lim {
                                let ds = prow[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                axpy(
                                    ds,
                                    &kd[(b * t + j) * d + col..][..dh],
                                    &mut gq[(b * t + i) * d + col..][..dh],
                                );
                                axpy(
                                    ds,
                                    &qd[(b * t + i) * d + col..][..dh],
                                    &mut gk[(b * t + j) * d + col..][..dh],
                                );
                            }
                        }
                    }
                }
                vec![Some(gq), Some(gk), Some(gv)]
            }),
        ))
    }
}

fn transpose_raw(x: &[Float], r: usize, c: usize) -> Vec<Float> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[Float], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    fn p(data: &[Float], shape: &[usize]) -> Tensor {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<Float> {
        (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0) as Float)
            .collect()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(i2.matmul(&b).unwrap().to_vec(), vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_computed() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let y = t(&[0.0, 0.0], &[1, 2]).softmax().unwrap().to_vec();
        assert_eq!(y, vec![0.5, 0.5]);
        let y = t(&[0.0, (3.0 as Float).ln()], &[1, 2]).softmax().unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-6 && (y[1] - 0.75).abs() < 1e-6);
        let y = t(&[1000.0, 0.0], &[1, 2]).softmax().unwrap().to_vec();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 1.0).abs() < 1e-6 && y[1] < 1e-6);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = t(&[Float::NAN, 0.0], &[1, 2]);
        assert!(matches!(x.softmax(), Err(Error::Numeric { .. })));
        let x = t(&[Float::INFINITY, 0.0], &[1, 2]);
        assert!(matches!(x.softmax(), Err(Error::Numeric { .. })));
    }

    #[test]
    fn masked_softmax_zeroes_blocked() {
        let x = t(&[1.0, 2.0, 3.0], &[1, 3]);
        let y = x.masked_softmax(&[true, false, true]).unwrap().to_vec();
        assert_eq!(y[1], 0.0);
        assert!((y[0] + y[2] - 1.0).abs() < 1e-6);
        assert!(x.masked_softmax(&[false, false, false]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let n = v.len();
            let x = Tensor::new(v.into_iter().map(|x| x as Float).collect(), &[1, n]).unwrap();
            let y = x.softmax().unwrap().to_vec();
            let s: f64 = y.iter().map(|&v| v as f64).sum();
            prop_assert!(y.iter().all(|&v| v >= 0.0));
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6, q in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = t(&random(&mut rng, &[m, k]), &[m, k]);
            let b = t(&random(&mut rng, &[k, n]), &[k, n]);
            let c = t(&random(&mut rng, &[n, q]), &[n, q]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap().to_vec();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap().to_vec();
            let scale = left.iter().map(|v| v.abs()).fold(1.0 as Float, Float::max);
            for (l, r) in left.iter().zip(&right) {
                prop_assert!((l - r).abs() <= 1e-4 * scale);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[1.0, 1.0, 1.0], &[3]);
        let zero = t(&[0.0, 0.0, 0.0], &[3]);
        let y = t(&[5.0, 5.0, 5.0], &[1, 3]).layer_norm(&one, &zero, 1e-5).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 0.0]);

        let one2 = t(&[1.0, 1.0], &[2]);
        let zero2 = t(&[0.0, 0.0], &[2]);
        let y = t(&[1.0, 3.0], &[1, 2]).layer_norm(&one2, &zero2, 1e-12).unwrap().to_vec();
        assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);

        let bias = t(&[0.5, -0.5], &[2]);
        let y = t(&[1.0, 3.0, 7.0, -2.0], &[2, 2]).layer_norm(&zero2, &bias, 1e-5).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn cross_entropy_examples() {
        let peaked = t(&[100.0, 0.0, 0.0], &[1, 3]);
        assert!(peaked.cross_entropy_mean(&[0], None).unwrap().item() < 1e-6);

        let uniform = t(&[0.0; 4], &[1, 4]);
        let l = uniform.cross_entropy_mean(&[2], None).unwrap().item();
        assert!((l - (4.0 as Float).ln()).abs() < 1e-6);

        // Hand-masked: only row 1 counts.
        let logits = t(&[1.0, 2.0, 0.5, -1.0], &[2, 2]);
        let l = logits.cross_entropy_mean(&[9, 0], Some(9)).unwrap().item();
        let expect = ((0.5 as Float).exp() + (-1.0 as Float).exp()).ln() - 0.5;
        assert!((l - expect).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_errors() {
        let logits = t(&[0.0; 4], &[2, 2]);
        assert!(matches!(
            logits.cross_entropy_mean(&[0, 2], None),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            logits.cross_entropy_mean(&[0, 0], Some(0)),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn gather_and_concat_and_slice() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let y = x.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(y.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(x.gather_rows(&[3]).is_err());

        let col = x.slice_cols(1, 1).unwrap();
        assert_eq!(col.to_vec(), vec![2.0, 4.0, 6.0]);
        let c = col.concat_cols(&x).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(c.to_vec(), vec![2.0, 1.0, 2.0, 4.0, 3.0, 4.0, 6.0, 5.0, 6.0]);
        assert!(x.slice_cols(1, 2).is_err());
    }

    #[test]
    fn gather_scatters_gradient() {
        let w = p(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        w.gather_rows(&[1, 1, 0]).unwrap().sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_scaled_otherwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t(&[1.0; 1000], &[1000]);
        assert!(x.dropout(0.0, &mut rng).same(&x));
        let y = x.dropout(0.5, &mut rng).to_vec();
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    fn check(f: impl Fn(&[Tensor]) -> Tensor, inputs: &[Tensor], tol: f64) {
        let report = grad_check(f, inputs, 1e-3, tol.max(crate::tensor::GRAD_TOL)).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = p(&random(&mut rng, &[3, 4]), &[3, 4]);
        let b = p(&random(&mut rng, &[3, 4]), &[3, 4]);
        let r = p(&random(&mut rng, &[4]), &[4]);
        check(
            |x| {
                x[0].mul(&x[1]).unwrap().add(&x[0]).unwrap().add_row(&x[2]).unwrap().gelu().scale(1.5).sum()
            },
            &[a, b, r],
            1e-2,
        );
    }

    #[test]
    fn matmul_transpose_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = p(&random(&mut rng, &[3, 4]), &[3, 4]);
        let b = p(&random(&mut rng, &[4, 2]), &[4, 2]);
        let w = t(&random(&mut rng, &[2, 3]), &[2, 3]);
        check(
            |x| x[0].matmul(&x[1]).unwrap().transpose().unwrap().mul(&w).unwrap().sum(),
            &[a, b],
            1e-2,
        );
    }

    #[test]
    fn softmax_cross_entropy_composite_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = p(&random(&mut rng, &[4, 5]), &[4, 5]);
        let w = t(&random(&mut rng, &[4, 5]), &[4, 5]);
        check(
            |x| {
                let s = x[0].softmax().unwrap().mul(&w).unwrap();
                s.cross_entropy_mean(&[0, 3, 7, 1], Some(7)).unwrap()
            },
            &[x],
            1e-3,
        );
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = p(&random(&mut rng, &[3, 6]), &[3, 6]);
        let g = p(&random(&mut rng, &[6]), &[6]);
        let b = p(&random(&mut rng, &[6]), &[6]);
        let w = t(&random(&mut rng, &[3, 6]), &[3, 6]);
        check(
            |x| x[0].layer_norm(&x[1], &x[2], 1e-5).unwrap().mul(&w).unwrap().sum(),
            &[x, g, b],
            1e-2,
        );
    }

    #[test]
    fn structural_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = p(&random(&mut rng, &[3, 4]), &[3, 4]);
        let b = p(&random(&mut rng, &[2, 2]), &[2, 2]);
        let w = t(&random(&mut rng, &[4, 4]), &[4, 4]);
        check(
            |x| {
                let s = x[0].slice_cols(1, 2).unwrap().gather_rows(&[2, 0, 2, 1]).unwrap();
                let g = x[1].gather_rows(&[0, 1, 1, 0]).unwrap();
                s.concat_cols(&g).unwrap().mul(&w).unwrap().sum()
            },
            &[a, b],
            1e-2,
        );
    }

    #[test]
    fn masked_softmax_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = p(&random(&mut rng, &[3, 3]), &[3, 3]);
        let w = t(&random(&mut rng, &[3, 3]), &[3, 3]);
        let allowed = [true, false, false, true, true, false, true, true, true];
        check(
            |x| x[0].masked_softmax(&allowed).unwrap().mul(&w).unwrap().sum(),
            &[x],
            1e-2,
        );
    }

    /// Composite route: per (sequence, head) slicing, matmul, masked softmax.
    fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor, l: &AttentionLayout) -> Vec<Float> {
        let d = q.shape()[1];
        let dh = d / l.n_heads;
        let mut out = Vec::new();
        for b in 0..l.batch {
            let idx: Vec<usize> = (b * l.seq..(b + 1) * l.seq).collect();
            let (qb, kb, vb) = (
                q.gather_rows(&idx).unwrap(),
                k.gather_rows(&idx).unwrap(),
                v.gather_rows(&idx).unwrap(),
            );
            let allowed: Vec<bool> = (0..l.seq * l.seq)
                .map(|e| e % l.seq < l.key_limit(b, e / l.seq))
                .collect();
            let heads = (0..l.n_heads)
                .map(|h| {
                    let qh = qb.slice_cols(h * dh, dh).unwrap();
                    let kh = kb.slice_cols(h * dh, dh).unwrap();
                    let vh = vb.slice_cols(h * dh, dh).unwrap();
                    let s = qh
                        .matmul(&kh.transpose().unwrap())
                        .unwrap()
                        .scale(1.0 / (dh as Float).sqrt());
                    s.masked_softmax(&allowed).unwrap().matmul(&vh).unwrap()
                })
                .reduce(|a, b| a.concat_cols(&b).unwrap())
                .unwrap();
            out.extend(heads.to_vec());
        }
        out
    }

    #[test]
    fn fused_attention_matches_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (causal, key_lens) in [(true, None), (false, Some(vec![3, 5])), (true, Some(vec![5, 2]))] {
            let layout = AttentionLayout {
                batch: 2,
                seq: 5,
                n_heads: 2,
                causal,
                key_lens,
            };
            let q = t(&random(&mut rng, &[10, 6]), &[10, 6]);
            let k = t(&random(&mut rng, &[10, 6]), &[10, 6]);
            let v = t(&random(&mut rng, &[10, 6]), &[10, 6]);
            let fused = Tensor::attention(&q, &k, &v, &layout).unwrap().to_vec();
            let reference = reference_attention(&q, &k, &v, &layout);
            for (a, b) in fused.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn fused_attention_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let layout = AttentionLayout {
            batch: 2,
            seq: 4,
            n_heads: 2,
            causal: true,
            key_lens: Some(vec![4, 3]),
        };
        let q = p(&random(&mut rng, &[8, 4]), &[8, 4]);
        let k = p(&random(&mut rng, &[8, 4]), &[8, 4]);
        let v = p(&random(&mut rng, &[8, 4]), &[8, 4]);
        let w = t(&random(&mut rng, &[8, 4]), &[8, 4]);
        check(
            |x| Tensor::attention(&x[0], &x[1], &x[2], &layout).unwrap().mul(&w).unwrap().sum(),
            &[q, k, v],
            1e-2,
        );
    }
}
