//! Forward operations and their backward rules.

use super::{Op, Tensor, TensorInner};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

/// Row-major 2-D matrix product into a fresh buffer.
fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

impl Tensor {
    fn unary(&self, data: Vec<f64>, op: Op) -> Tensor {
        Tensor::new_node(self.shape().to_vec(), data, self.requires_grad(), op)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    /// `self + other` where `other.shape` is a suffix of `self.shape`;
    /// `other` is tiled over the leading dimensions.
    pub fn add_broadcast(&self, other: &Tensor) -> Result<Tensor> {
        let ls = self.shape();
        let rs = other.shape();
        if rs.len() > ls.len() || &ls[ls.len() - rs.len()..] != rs {
            return Err(shape_err(
                "add_broadcast",
                format!("{rs:?} is not a suffix of {ls:?}"),
            ));
        }
        let chunk = other.numel();
        let mut data = self.data().to_vec();
        for c in data.chunks_mut(chunk) {
            for (v, b) in c.iter_mut().zip(other.data()) {
                *v += b;
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new_node(
            ls.to_vec(),
            data,
            rg,
            Op::AddBroadcast(self.clone(), other.clone()),
        ))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        self.unary(data, Op::Scale(self.clone(), c))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let data = matmul_2d(self.data(), other.data(), m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new_node(
            vec![m, n],
            data,
            rg,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 3
            || other.ndim() != 3
            || self.shape()[0] != other.shape()[0]
            || self.shape()[2] != other.shape()[1]
        {
            return Err(shape_err(
                "bmm",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = other.shape()[2];
        let mut data = vec![0.0; bs * m * n];
        for b in 0..bs {
            let out = matmul_2d(
                &self.data()[b * m * k..(b + 1) * m * k],
                &other.data()[b * k * n..(b + 1) * k * n],
                m,
                k,
                n,
            );
            data[b * m * n..(b + 1) * m * n].copy_from_slice(&out);
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new_node(
            vec![bs, m, n],
            data,
            rg,
            Op::Bmm(self.clone(), other.clone()),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        if self.ndim() < 2 {
            return Err(shape_err(
                "transpose_last2",
                format!("need >= 2 dims, got {:?}", self.shape()),
            ));
        }
        let nd = self.ndim();
        let (r, c) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let outer = self.numel() / (r * c);
        let mut shape = self.shape().to_vec();
        shape[nd - 2] = c;
        shape[nd - 1] = r;
        let mut data = vec![0.0; self.numel()];
        for o in 0..outer {
            let src = &self.data()[o * r * c..(o + 1) * r * c];
            let dst = &mut data[o * r * c..(o + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        Ok(Tensor::new_node(
            shape,
            data,
            self.requires_grad(),
            Op::TransposeLast2(self.clone()),
        ))
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::new_node(
            shape.to_vec(),
            self.data().to_vec(),
            self.requires_grad(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_lastdim(&self, start: usize, len: usize) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| {
            shape_err("slice_lastdim", "scalar has no last dim".to_string())
        })?;
        if start + len > d || len == 0 {
            return Err(shape_err(
                "slice_lastdim",
                format!("[{start}, {}) out of last dim {d}", start + len),
            ));
        }
        let rows = self.numel() / d;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(Tensor::new_node(
            shape,
            data,
            self.requires_grad(),
            Op::SliceLast { x: self.clone(), start, len },
        ))
    }

    /// max(0, x); the subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.unary(data, Op::Relu(self.clone()))
    }

    /// Logistic sigmoid with the exponent clamped to ±700 so extreme inputs
    /// stay finite and strictly inside (0, 1).
    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        self.unary(data, Op::Sigmoid(self.clone()))
    }

    /// Softmax over the last axis, shifted by the per-slice max before
    /// exponentiation.
    pub fn softmax_lastdim(&self) -> Tensor {
        let d = *self.shape().last().expect("softmax needs >= 1 dim");
        let mut data = self.data().to_vec();
        for slice in data.chunks_mut(d) {
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in slice.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in slice.iter_mut() {
                *v /= sum;
            }
        }
        self.unary(data, Op::SoftmaxLast(self.clone()))
    }

    /// Per-last-axis normalization with biased variance:
    /// `(x - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| {
            shape_err("layer_norm", "scalar input".to_string())
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{d}] for input {:?}",
                    gamma.shape(),
                    beta.shape(),
                    self.shape()
                ),
            ));
        }
        let mut data = self.data().to_vec();
        for slice in data.chunks_mut(d) {
            let mean = slice.iter().sum::<f64>() / d as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (v, (g, b)) in slice.iter_mut().zip(gamma.data().iter().zip(beta.data())) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        ))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// 1/(1-rate). Identity when not training or `rate == 0`.
    pub fn dropout(&self, rate: f64, rng: &mut Rng, training: bool) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Arg(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.next_f64() < keep { scale } else { 0.0 })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            self.requires_grad(),
            Op::Dropout { x: self.clone(), mask },
        ))
    }

    /// Valid 1-D convolution: `[B,Cin,L] * [Cout,Cin,K] + bias[Cout]`.
    pub fn conv1d(&self, w: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
        if stride == 0 {
            return Err(Error::Arg("conv1d stride must be positive".to_string()));
        }
        if self.ndim() != 3 || w.ndim() != 3 {
            return Err(shape_err(
                "conv1d",
                format!("x {:?}, w {:?}: need 3-D", self.shape(), w.shape()),
            ));
        }
        let (b, cin, len) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if cin != wcin || bias.shape() != [cout] {
            return Err(shape_err(
                "conv1d",
                format!("x {:?}, w {:?}, bias {:?}", self.shape(), w.shape(), bias.shape()),
            ));
        }
        if len < k {
            return Err(Error::Arg(format!(
                "conv1d input length {len} shorter than kernel {k}: empty output"
            )));
        }
        let out_len = (len - k) / stride + 1;
        let mut data = vec![0.0; b * cout * out_len];
        let x = self.data();
        let wd = w.data();
        for bi in 0..b {
            for o in 0..cout {
                let out = &mut data[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                out.fill(bias.data()[o]);
                for i in 0..cin {
                    let xrow = &x[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                    let wrow = &wd[(o * cin + i) * k..(o * cin + i + 1) * k];
                    for (t, acc) in out.iter_mut().enumerate() {
                        let base = t * stride;
                        let mut s = 0.0;
                        for (kk, &wv) in wrow.iter().enumerate() {
                            s += xrow[base + kk] * wv;
                        }
                        *acc += s;
                    }
                }
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || bias.requires_grad();
        Ok(Tensor::new_node(
            vec![b, cout, out_len],
            data,
            rg,
            Op::Conv1d {
                x: self.clone(),
                w: w.clone(),
                bias: bias.clone(),
                stride,
            },
        ))
    }

    /// 1-D max pooling over the last axis; ties go to the first maximum.
    pub fn maxpool1d(&self, pool: usize, stride: usize) -> Result<Tensor> {
        if pool == 0 || stride == 0 {
            return Err(Error::Arg("maxpool1d pool and stride must be positive".to_string()));
        }
        if self.ndim() != 3 {
            return Err(shape_err(
                "maxpool1d",
                format!("need [B,C,L], got {:?}", self.shape()),
            ));
        }
        let (b, c, len) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if len < pool {
            return Err(Error::Arg(format!(
                "maxpool1d input length {len} shorter than window {pool}: empty output"
            )));
        }
        let out_len = (len - pool) / stride + 1;
        let mut data = vec![0.0; b * c * out_len];
        let mut argmax = vec![0usize; b * c * out_len];
        let x = self.data();
        for row in 0..b * c {
            let xrow = &x[row * len..(row + 1) * len];
            for t in 0..out_len {
                let base = t * stride;
                let mut best = xrow[base];
                let mut best_i = base;
                for off in 1..pool {
                    // strict > keeps the first maximum on ties
                    if xrow[base + off] > best {
                        best = xrow[base + off];
                        best_i = base + off;
                    }
                }
                data[row * out_len + t] = best;
                argmax[row * out_len + t] = row * len + best_i;
            }
        }
        Ok(Tensor::new_node(
            vec![b, c, out_len],
            data,
            self.requires_grad(),
            Op::MaxPool1d {
                x: self.clone(),
                pool,
                stride,
                argmax,
            },
        ))
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Tensor {
        let m = self.data().iter().sum::<f64>() / self.numel() as f64;
        Tensor::new_node(vec![1], vec![m], self.requires_grad(), Op::MeanAll(self.clone()))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>();
        Tensor::new_node(vec![1], vec![s], self.requires_grad(), Op::SumAll(self.clone()))
    }
}

/// Concatenate along the last axis; all leading dimensions must match.
pub fn concat_lastdim(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Arg("concat_lastdim of zero tensors".to_string()));
    }
    let lead = &parts[0].shape()[..parts[0].ndim() - 1];
    for p in parts {
        if p.ndim() != lead.len() + 1 || &p.shape()[..p.ndim() - 1] != lead {
            return Err(shape_err(
                "concat_lastdim",
                format!("{:?} does not align with leading {lead:?}", p.shape()),
            ));
        }
    }
    let rows: usize = lead.iter().product();
    let total_last: usize = parts.iter().map(|p| *p.shape().last().unwrap()).sum();
    let mut data = Vec::with_capacity(rows * total_last);
    for r in 0..rows {
        for p in parts {
            let d = *p.shape().last().unwrap();
            data.extend_from_slice(&p.data()[r * d..(r + 1) * d]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total_last);
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(Tensor::new_node(
        shape,
        data,
        rg,
        Op::ConcatLast(parts.to_vec()),
    ))
}

/// Affine layer `x[B,in] . w[in,out] + b[out]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_broadcast(b)
}

const BCE_CLAMP: f64 = 1e-12;

/// Mean over the batch of `-[w_pos*y*ln(p) + w_neg*(1-y)*ln(1-p)]` with log
/// arguments clamped at 1e-12. Gradient flows to `p` only.
pub fn weighted_bce(p: &Tensor, y: &[f64], w_pos: f64, w_neg: f64) -> Result<Tensor> {
    if p.numel() != y.len() {
        return Err(shape_err(
            "weighted_bce",
            format!("{} probabilities vs {} labels", p.numel(), y.len()),
        ));
    }
    for (i, &v) in p.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(Error::Numeric(format!(
                "probability p[{i}] = {v} outside [0, 1]"
            )));
        }
    }
    for (i, &l) in y.iter().enumerate() {
        if l != 0.0 && l != 1.0 {
            return Err(Error::Arg(format!("label y[{i}] = {l} not in {{0, 1}}")));
        }
    }
    let n = y.len() as f64;
    let mut loss = 0.0;
    for (&pi, &yi) in p.data().iter().zip(y) {
        loss -= w_pos * yi * pi.max(BCE_CLAMP).ln()
            + w_neg * (1.0 - yi) * (1.0 - pi).max(BCE_CLAMP).ln();
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::Numeric("weighted_bce produced non-finite loss".to_string()));
    }
    Ok(Tensor::new_node(
        vec![1],
        vec![loss],
        p.requires_grad(),
        Op::WeightedBce {
            p: p.clone(),
            y: y.to_vec(),
            w_pos,
            w_neg,
        },
    ))
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    let x = v.clamp(-700.0, 700.0);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Push `grad` of `node` into its parents. Only parents that require a
/// gradient receive one.
pub(crate) fn backprop(node: &Tensor, grad: &[f64]) {
    let inner: &TensorInner = &node.inner;
    match &inner.op {
        Op::Leaf => {}

        Op::Add(a, b) => {
            if a.requires_grad() {
                a.accumulate(grad);
            }
            if b.requires_grad() {
                b.accumulate(grad);
            }
        }

        Op::AddBroadcast(a, b) => {
            if a.requires_grad() {
                a.accumulate(grad);
            }
            if b.requires_grad() {
                let chunk = b.numel();
                let mut db = vec![0.0; chunk];
                for c in grad.chunks(chunk) {
                    for (d, g) in db.iter_mut().zip(c) {
                        *d += g;
                    }
                }
                b.accumulate(&db);
            }
        }

        Op::Mul(a, b) => {
            if a.requires_grad() {
                let da: Vec<f64> = grad.iter().zip(b.data()).map(|(g, v)| g * v).collect();
                a.accumulate(&da);
            }
            if b.requires_grad() {
                let db: Vec<f64> = grad.iter().zip(a.data()).map(|(g, v)| g * v).collect();
                b.accumulate(&db);
            }
        }

        Op::Scale(a, c) => {
            if a.requires_grad() {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                a.accumulate(&da);
            }
        }

        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                // dA = dC . B^T
                let mut bt = vec![0.0; n * k];
                for i in 0..k {
                    for j in 0..n {
                        bt[j * k + i] = b.data()[i * n + j];
                    }
                }
                a.accumulate(&matmul_2d(grad, &bt, m, n, k));
            }
            if b.requires_grad() {
                // dB = A^T . dC
                let mut at = vec![0.0; k * m];
                for i in 0..m {
                    for j in 0..k {
                        at[j * m + i] = a.data()[i * k + j];
                    }
                }
                b.accumulate(&matmul_2d(&at, grad, k, m, n));
            }
        }

        Op::Bmm(a, b) => {
            let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            if a.requires_grad() {
                let mut da = vec![0.0; bs * m * k];
                for bi in 0..bs {
                    let bd = &b.data()[bi * k * n..(bi + 1) * k * n];
                    let mut bt = vec![0.0; n * k];
                    for i in 0..k {
                        for j in 0..n {
                            bt[j * k + i] = bd[i * n + j];
                        }
                    }
                    let g = &grad[bi * m * n..(bi + 1) * m * n];
                    da[bi * m * k..(bi + 1) * m * k]
                        .copy_from_slice(&matmul_2d(g, &bt, m, n, k));
                }
                a.accumulate(&da);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; bs * k * n];
                for bi in 0..bs {
                    let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
                    let mut at = vec![0.0; k * m];
                    for i in 0..m {
                        for j in 0..k {
                            at[j * m + i] = ad[i * k + j];
                        }
                    }
                    let g = &grad[bi * m * n..(bi + 1) * m * n];
                    db[bi * k * n..(bi + 1) * k * n]
                        .copy_from_slice(&matmul_2d(&at, g, k, m, n));
                }
                b.accumulate(&db);
            }
        }

        Op::TransposeLast2(a) => {
            if a.requires_grad() {
                let nd = inner.shape.len();
                let (r, c) = (inner.shape[nd - 2], inner.shape[nd - 1]);
                let outer = grad.len() / (r * c);
                let mut da = vec![0.0; grad.len()];
                for o in 0..outer {
                    let src = &grad[o * r * c..(o + 1) * r * c];
                    let dst = &mut da[o * r * c..(o + 1) * r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dst[j * r + i] = src[i * c + j];
                        }
                    }
                }
                a.accumulate(&da);
            }
        }

        Op::Reshape(a) => {
            if a.requires_grad() {
                a.accumulate(grad);
            }
        }

        Op::SliceLast { x, start, len } => {
            if x.requires_grad() {
                let d = *x.shape().last().unwrap();
                let rows = x.numel() / d;
                let mut dx = vec![0.0; x.numel()];
                for r in 0..rows {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&grad[r * len..(r + 1) * len]);
                }
                x.accumulate(&dx);
            }
        }

        Op::ConcatLast(parts) => {
            let lead: usize = inner.shape[..inner.shape.len() - 1].iter().product();
            let total = *inner.shape.last().unwrap();
            let mut offset = 0;
            for p in parts {
                let d = *p.shape().last().unwrap();
                if p.requires_grad() {
                    let mut dp = vec![0.0; p.numel()];
                    for r in 0..lead {
                        dp[r * d..(r + 1) * d]
                            .copy_from_slice(&grad[r * total + offset..r * total + offset + d]);
                    }
                    p.accumulate(&dp);
                }
                offset += d;
            }
        }

        Op::Relu(a) => {
            if a.requires_grad() {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(a.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                a.accumulate(&da);
            }
        }

        Op::Sigmoid(a) => {
            if a.requires_grad() {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&inner.data)
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                a.accumulate(&da);
            }
        }

        Op::SoftmaxLast(a) => {
            if a.requires_grad() {
                let d = *inner.shape.last().unwrap();
                let mut da = vec![0.0; grad.len()];
                for (slice, (g, out)) in da
                    .chunks_mut(d)
                    .zip(grad.chunks(d).zip(inner.data.chunks(d)))
                {
                    let dot: f64 = g.iter().zip(out).map(|(gi, si)| gi * si).sum();
                    for ((di, gi), si) in slice.iter_mut().zip(g).zip(out) {
                        *di = si * (gi - dot);
                    }
                }
                a.accumulate(&da);
            }
        }

        Op::LayerNorm { x, gamma, beta, eps } => {
            let d = *inner.shape.last().unwrap();
            let slices = x.numel() / d;
            let mut dx = vec![0.0; x.numel()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for s in 0..slices {
                let xs = &x.data()[s * d..(s + 1) * d];
                let gs = &grad[s * d..(s + 1) * d];
                let mean = xs.iter().sum::<f64>() / d as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                // dxhat, and the two means needed for the x gradient
                let mut m1 = 0.0; // mean of dxhat
                let mut m2 = 0.0; // mean of dxhat * xhat
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for i in 0..d {
                    xhat[i] = (xs[i] - mean) * inv;
                    dxhat[i] = gs[i] * gamma.data()[i];
                    m1 += dxhat[i];
                    m2 += dxhat[i] * xhat[i];
                    dgamma[i] += gs[i] * xhat[i];
                    dbeta[i] += gs[i];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for i in 0..d {
                    dx[s * d + i] = inv * (dxhat[i] - m1 - xhat[i] * m2);
                }
            }
            if x.requires_grad() {
                x.accumulate(&dx);
            }
            if gamma.requires_grad() {
                gamma.accumulate(&dgamma);
            }
            if beta.requires_grad() {
                beta.accumulate(&dbeta);
            }
        }

        Op::Dropout { x, mask } => {
            if x.requires_grad() {
                let dx: Vec<f64> = grad.iter().zip(mask).map(|(g, m)| g * m).collect();
                x.accumulate(&dx);
            }
        }

        Op::Conv1d { x, w, bias, stride } => {
            let (b, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (cout, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let out_len = (len - k) / stride + 1;
            if x.requires_grad() {
                let mut dx = vec![0.0; x.numel()];
                for bi in 0..b {
                    for o in 0..cout {
                        let g = &grad[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                        for i in 0..cin {
                            let wrow = &w.data()[(o * cin + i) * k..(o * cin + i + 1) * k];
                            let dxrow = &mut dx[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                            for (t, &gv) in g.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let base = t * stride;
                                for (kk, &wv) in wrow.iter().enumerate() {
                                    dxrow[base + kk] += gv * wv;
                                }
                            }
                        }
                    }
                }
                x.accumulate(&dx);
            }
            if w.requires_grad() {
                let mut dw = vec![0.0; w.numel()];
                for bi in 0..b {
                    for o in 0..cout {
                        let g = &grad[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                        for i in 0..cin {
                            let xrow = &x.data()[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                            let dwrow = &mut dw[(o * cin + i) * k..(o * cin + i + 1) * k];
                            for (t, &gv) in g.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let base = t * stride;
                                for (kk, dv) in dwrow.iter_mut().enumerate() {
                                    *dv += gv * xrow[base + kk];
                                }
                            }
                        }
                    }
                }
                w.accumulate(&dw);
            }
            if bias.requires_grad() {
                let mut db = vec![0.0; cout];
                for bi in 0..b {
                    for o in 0..cout {
                        db[o] += grad
                            [(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len]
                            .iter()
                            .sum::<f64>();
                    }
                }
                bias.accumulate(&db);
            }
        }

        Op::MaxPool1d { x, argmax, .. } => {
            if x.requires_grad() {
                let mut dx = vec![0.0; x.numel()];
                for (&src, &g) in argmax.iter().zip(grad) {
                    dx[src] += g;
                }
                x.accumulate(&dx);
            }
        }

        Op::MeanAll(a) => {
            if a.requires_grad() {
                let g = grad[0] / a.numel() as f64;
                a.accumulate(&vec![g; a.numel()]);
            }
        }

        Op::SumAll(a) => {
            if a.requires_grad() {
                a.accumulate(&vec![grad[0]; a.numel()]);
            }
        }

        Op::WeightedBce { p, y, w_pos, w_neg } => {
            if p.requires_grad() {
                let n = y.len() as f64;
                let g = grad[0];
                let dp: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&pi, &yi)| {
                        let mut d = 0.0;
                        // zero once the log argument hits its clamp
                        if yi == 1.0 && pi > BCE_CLAMP {
                            d -= w_pos / pi;
                        }
                        if yi == 0.0 && 1.0 - pi > BCE_CLAMP {
                            d += w_neg / (1.0 - pi);
                        }
                        g * d / n
                    })
                    .collect();
                p.accumulate(&dp);
            }
        }
    }
}
