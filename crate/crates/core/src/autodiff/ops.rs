//! Forward definitions and reverse rules for every tape primitive.

use super::kernels::{col2im, gemm, im2col, ColGeom};
use super::tape::{Node, Op, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stride and zero padding of a 2-D convolution, as (height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dOpts {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dOpts {
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }
}

pub const L2_NORM_EPS: f64 = 1e-12;
pub const DISTANCE_FLOOR: f64 = 1e-12;
pub const BCE_EPS: f64 = 1e-7;

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::shape(op, format!("incompatible shapes {shapes:?}"))
}

fn any_grad(tape: &Tape, vars: &[Var]) -> bool {
    vars.iter().any(|&v| tape.requires_grad(v))
}

impl Tape {
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, &[ta.shape(), tb.shape()]));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok((out, any_grad(self, &[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        let rg = self.requires_grad(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Expands size-1 dimensions of `a` to `shape`. Ranks must agree.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if src.ndim() != shape.len()
            || src
                .shape()
                .iter()
                .zip(shape)
                .any(|(&s, &d)| s != d && s != 1)
        {
            return Err(shape_err("broadcast_to", &[src.shape(), shape]));
        }
        let map = broadcast_map(src.shape(), shape);
        let data = map.iter().map(|&i| src.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::BroadcastTo(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", &[ta.shape(), tb.shape()]));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut c, 0.0);
        let rg = any_grad(self, &[a, b]);
        Ok(self.push(Tensor::new([m, n], c)?, Op::MatMul(a, b), rg))
    }

    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let bad = || shape_err("conv2d", &[tx.shape(), tw.shape()]);
        if tx.ndim() != 4 || tw.ndim() != 4 || tx.shape()[1] != tw.shape()[1] {
            return Err(bad());
        }
        let [n, cin, h, wd] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [cout, _, kh, kw] = [tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]];
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.padding;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(bad());
        }
        let geom = ColGeom {
            channels: cin,
            height: h,
            width: wd,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            out_h: (h + 2 * ph - kh) / sh + 1,
            out_w: (wd + 2 * pw - kw) / sw + 1,
        };
        let bias = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [cout] {
                    return Err(shape_err("conv2d bias", &[tb.shape(), &[cout]]));
                }
                Some(tb.data())
            }
            None => None,
        };
        let (kdim, p) = (geom.rows(), geom.cols());
        let mut out = vec![0.0; n * cout * p];
        let mut col = vec![0.0; kdim * p];
        for s in 0..n {
            im2col(&tx.data()[s * geom.image_len()..(s + 1) * geom.image_len()], &geom, &mut col);
            let dst = &mut out[s * cout * p..(s + 1) * cout * p];
            if let Some(bias) = bias {
                for (c, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(bias[c]);
                }
            }
            gemm(cout, kdim, p, tw.data(), false, &col, false, dst, 1.0);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = any_grad(self, &inputs);
        let out = Tensor::new([n, cout, geom.out_h, geom.out_w], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Fractionally-strided convolution. `x: [N, Cin, H, W]`,
    /// `w: [Cin, Cout, kh, kw]`; output side is `(H - 1) * s - 2p + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        opts: Conv2dOpts,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let bad = || shape_err("conv_transpose2d", &[tx.shape(), tw.shape()]);
        if tx.ndim() != 4 || tw.ndim() != 4 || tx.shape()[1] != tw.shape()[0] {
            return Err(bad());
        }
        let [n, cin, h, wd] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [_, cout, kh, kw] = [tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]];
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.padding;
        if sh == 0 || sw == 0 || h == 0 || wd == 0 {
            return Err(bad());
        }
        let oh = ((h - 1) * sh + kh).checked_sub(2 * ph).ok_or_else(bad)?;
        let ow = ((wd - 1) * sw + kw).checked_sub(2 * pw).ok_or_else(bad)?;
        let geom = ColGeom {
            channels: cout,
            height: oh,
            width: ow,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            out_h: h,
            out_w: wd,
        };
        if (oh + 2 * ph - kh) / sh + 1 != h || (ow + 2 * pw - kw) / sw + 1 != wd {
            return Err(bad());
        }
        let bias = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [cout] {
                    return Err(shape_err("conv_transpose2d bias", &[tb.shape(), &[cout]]));
                }
                Some(tb.data())
            }
            None => None,
        };
        let (kdim, p) = (geom.rows(), geom.cols());
        let img = geom.image_len();
        let mut out = vec![0.0; n * img];
        let mut col = vec![0.0; kdim * p];
        for s in 0..n {
            gemm(kdim, cin, p, tw.data(), true, &tx.data()[s * cin * p..(s + 1) * cin * p], false, &mut col, 0.0);
            let dst = &mut out[s * img..(s + 1) * img];
            col2im(&col, &geom, dst);
            if let Some(bias) = bias {
                for (c, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[c]);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = any_grad(self, &inputs);
        let out = Tensor::new([n, cout, oh, ow], out)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// `x: [N, Cin, L]`, `w: [Cout, Cin, k]`, expressed as a 2-D
    /// convolution over a unit-height image.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 {
            return Err(shape_err("conv1d", &[&sx, &sw]));
        }
        let x4 = self.reshape(x, &[sx[0], sx[1], 1, sx[2]])?;
        let w4 = self.reshape(w, &[sw[0], sw[1], 1, sw[2]])?;
        let opts = Conv2dOpts {
            stride: (1, stride),
            padding: (0, padding),
        };
        let y = self.conv2d(x4, w4, b, opts)?;
        let sy = self.shape(y).to_vec();
        self.reshape(y, &[sy[0], sy[1], sy[3]])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.requires_grad(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log1p(a), f64::ln_1p)
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.ndim() < 2 || tg.shape() != [tx.shape()[1]] || tb.shape() != tg.shape() {
            return Err(shape_err("batchnorm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let n = tx.shape()[0];
        let c = tx.shape()[1];
        let spatial = tx.shape()[2..].iter().product();
        Ok((n, c, spatial))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, spatial) = self.bn_layout(x, gamma, beta)?;
        let tx = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                for i in base..base + spatial {
                    let h = (tx.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = any_grad(self, &[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Batch normalization with statistics of the current batch over all
    /// axes but 1. Returns the output with the batch mean and the unbiased
    /// batch variance for running-statistic updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, spatial) = self.bn_layout(x, gamma, beta)?;
        let m = (n * spatial) as f64;
        if n * spatial < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm in training mode needs more than one value per channel".into(),
            ));
        }
        let data = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|s| {
                let base = (s * c + ch) * spatial;
                data[base..base + spatial].iter()
            });
            let mu = vals.clone().sum::<f64>() / m;
            let v = vals.map(|&x| (x - mu) * (x - mu)).sum::<f64>() / m;
            mean[ch] = mu;
            var[ch] = v;
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        let unbiased = var.iter().map(|v| v * m / (m - 1.0)).collect();
        Ok((y, mean, unbiased))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("running statistics for {} channels, input has {c}", running_mean.len()),
            ));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    /// Max pooling over `k x k` windows with stride `stride`, no padding.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 4 || k == 0 || stride == 0 || tx.shape()[2] < k || tx.shape()[3] < k {
            return Err(shape_err("maxpool2d", &[tx.shape()]));
        }
        let [n, c, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * stride + dy) * w + ox * stride + dx;
                            if tx.data()[i] > tx.data()[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(tx.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Maximum over all axes after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() < 3 || tx.numel() == 0 {
            return Err(shape_err("global_max_pool", &[tx.shape()]));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let spatial = tx.numel() / (n * c);
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let seg = &tx.data()[plane * spatial..(plane + 1) * spatial];
            let mut best = 0;
            for (i, &v) in seg.iter().enumerate() {
                if v > seg[best] {
                    best = i;
                }
            }
            out.push(seg[best]);
            argmax.push(plane * spatial + best);
        }
        let out = Tensor::new([n, c], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Mean over all axes after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() < 3 || tx.numel() == 0 {
            return Err(shape_err("global_avg_pool", &[tx.shape()]));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let spatial = tx.numel() / (n * c);
        let out = tx
            .data()
            .chunks(spatial)
            .map(|seg| seg.iter().sum::<f64>() / spatial as f64)
            .collect();
        let out = Tensor::new([n, c], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// Scales each row (last axis) to unit L2 norm; the norm carries a
    /// `1e-12` floor inside the square root.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or_else(|| shape_err("l2_normalize", &[tx.shape()]))?;
        if d == 0 {
            return Err(shape_err("l2_normalize", &[tx.shape()]));
        }
        let mut out = Vec::with_capacity(tx.numel());
        let mut norms = Vec::with_capacity(tx.numel() / d);
        for row in tx.data().chunks(d) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + L2_NORM_EPS).sqrt();
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(shape_err("concat", &[&first]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                return Err(shape_err("concat", &shapes));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = any_grad(self, inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(shape_err("sum_axis", &[t.shape()]));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &t.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    /// Rows of `x` along axis 0.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 || indices.iter().any(|&i| i >= t.shape()[0]) {
            return Err(Error::shape(
                "index_select",
                format!("indices {indices:?} out of range for shape {:?}", t.shape()),
            ));
        }
        let row = t.numel() / t.shape()[0];
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise Euclidean distance `[N, D] x [N, D] -> [N]`. The gradient
    /// is taken as zero where `|a - b|^2 <= 1e-12`, so coincident rows
    /// never produce a non-finite derivative.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.ndim() != 2 {
            return Err(shape_err("row_distance", &[ta.shape(), tb.shape()]));
        }
        let d = ta.shape()[1];
        let dists: Vec<f64> = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(x, y)| {
                let sq: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
                sq.sqrt()
            })
            .collect();
        let out = Tensor::new([ta.shape()[0]], dists.clone())?;
        let rg = any_grad(self, &[a, b]);
        Ok(self.push(out, Op::RowDistance { a, b, dists }, rg))
    }

    /// Mean binary cross-entropy of `pred` against a fixed 0/1 target,
    /// with predictions clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() || tp.numel() == 0 {
            return Err(shape_err("bce", &[tp.shape(), target.shape()]));
        }
        let n = tp.numel() as f64;
        let loss = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.requires_grad(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// For every output element, the flat index of its source element.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total: usize = dst.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < dst[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn acc_into(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.numel();
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    dst.iter_mut().zip(src).for_each(|(d, v)| *d += s * v);
}

/// Propagates the output gradient `g` of `node` into its inputs.
pub(crate) fn backward_node(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            acc_into(nodes, grads, *a, |d| add_scaled(d, g, 1.0));
            acc_into(nodes, grads, *b, |d| add_scaled(d, g, 1.0));
        }
        Op::Sub(a, b) => {
            acc_into(nodes, grads, *a, |d| add_scaled(d, g, 1.0));
            acc_into(nodes, grads, *b, |d| add_scaled(d, g, -1.0));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            acc_into(nodes, grads, *a, |d| {
                d.iter_mut().zip(g).zip(vb).for_each(|((d, g), y)| *d += g * y)
            });
            acc_into(nodes, grads, *b, |d| {
                d.iter_mut().zip(g).zip(va).for_each(|((d, g), x)| *d += g * x)
            });
        }
        Op::Scale(a, s) => acc_into(nodes, grads, *a, |d| add_scaled(d, g, *s)),
        Op::BroadcastTo(a) => {
            let map = broadcast_map(val(*a).shape(), node.value.shape());
            acc_into(nodes, grads, *a, |d| {
                for (&i, gv) in map.iter().zip(g) {
                    d[i] += gv;
                }
            });
        }
        Op::Reshape(a) => acc_into(nodes, grads, *a, |d| add_scaled(d, g, 1.0)),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            acc_into(nodes, grads, *a, |d| gemm(m, n, k, g, false, tb.data(), true, d, 1.0));
            acc_into(nodes, grads, *b, |d| gemm(k, m, n, ta.data(), true, g, false, d, 1.0));
        }
        Op::Conv2d { x, w, b, geom } => {
            let (tx, tw) = (val(*x), val(*w));
            let n = tx.shape()[0];
            let cout = tw.shape()[0];
            let (kdim, p) = (geom.rows(), geom.cols());
            let img = geom.image_len();
            if let Some(b) = b {
                acc_into(nodes, grads, *b, |d| {
                    for s in 0..n {
                        for (c, chunk) in g[s * cout * p..(s + 1) * cout * p].chunks(p).enumerate() {
                            d[c] += chunk.iter().sum::<f64>();
                        }
                    }
                });
            }
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            let mut col = vec![0.0; kdim * p];
            let mut dw = vec![0.0; if need_w { tw.numel() } else { 0 }];
            let mut dx = vec![0.0; if need_x { tx.numel() } else { 0 }];
            for s in 0..n {
                let gs = &g[s * cout * p..(s + 1) * cout * p];
                if need_w {
                    im2col(&tx.data()[s * img..(s + 1) * img], geom, &mut col);
                    gemm(cout, p, kdim, gs, false, &col, true, &mut dw, 1.0);
                }
                if need_x {
                    gemm(kdim, cout, p, tw.data(), true, gs, false, &mut col, 0.0);
                    col2im(&col, geom, &mut dx[s * img..(s + 1) * img]);
                }
            }
            if need_w {
                acc_into(nodes, grads, *w, |d| add_scaled(d, &dw, 1.0));
            }
            if need_x {
                acc_into(nodes, grads, *x, |d| add_scaled(d, &dx, 1.0));
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let (tx, tw) = (val(*x), val(*w));
            let (n, cin) = (tx.shape()[0], tx.shape()[1]);
            let (kdim, p) = (geom.rows(), geom.cols());
            let img = geom.image_len();
            let plane = geom.height * geom.width;
            if let Some(b) = b {
                acc_into(nodes, grads, *b, |d| {
                    for s in 0..n {
                        for (c, chunk) in g[s * img..(s + 1) * img].chunks(plane).enumerate() {
                            d[c] += chunk.iter().sum::<f64>();
                        }
                    }
                });
            }
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            let mut col = vec![0.0; kdim * p];
            let mut dw = vec![0.0; if need_w { tw.numel() } else { 0 }];
            let mut dx = vec![0.0; if need_x { tx.numel() } else { 0 }];
            for s in 0..n {
                if !(need_w || need_x) {
                    break;
                }
                im2col(&g[s * img..(s + 1) * img], geom, &mut col);
                let xs = &tx.data()[s * cin * p..(s + 1) * cin * p];
                if need_x {
                    gemm(cin, kdim, p, tw.data(), false, &col, false, &mut dx[s * cin * p..(s + 1) * cin * p], 0.0);
                }
                if need_w {
                    gemm(cin, p, kdim, xs, false, &col, true, &mut dw, 1.0);
                }
            }
            if need_w {
                acc_into(nodes, grads, *w, |d| add_scaled(d, &dw, 1.0));
            }
            if need_x {
                acc_into(nodes, grads, *x, |d| add_scaled(d, &dx, 1.0));
            }
        }
        Op::Relu(a) => {
            let va = val(*a).data();
            acc_into(nodes, grads, *a, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            acc_into(nodes, grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            });
        }
        Op::Log1p(a) => {
            let va = val(*a).data();
            acc_into(nodes, grads, *a, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                    *d += g / (1.0 + x);
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let tx = val(*x);
            let (n, c) = (tx.shape()[0], tx.shape()[1]);
            let spatial = tx.numel() / (n * c);
            let gam = val(*gamma).data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * spatial;
                    for i in base..base + spatial {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            acc_into(nodes, grads, *gamma, |d| add_scaled(d, &sum_gx, 1.0));
            acc_into(nodes, grads, *beta, |d| add_scaled(d, &sum_g, 1.0));
            let m = (n * spatial) as f64;
            acc_into(nodes, grads, *x, |d| {
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        let k = gam[ch] * inv_std[ch];
                        for i in base..base + spatial {
                            d[i] += if *batch_stats {
                                k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
            });
        }
        Op::MaxPool { x, argmax } => {
            acc_into(nodes, grads, *x, |d| {
                for (&i, gv) in argmax.iter().zip(g) {
                    d[i] += gv;
                }
            });
        }
        Op::GlobalAvgPool(x) => {
            let tx = val(*x);
            let spatial = tx.numel() / g.len();
            acc_into(nodes, grads, *x, |d| {
                for (seg, gv) in d.chunks_mut(spatial).zip(g) {
                    seg.iter_mut().for_each(|v| *v += gv / spatial as f64);
                }
            });
        }
        Op::L2Normalize { x, norms } => {
            let y = node.value.data();
            let dim = y.len() / norms.len();
            acc_into(nodes, grads, *x, |d| {
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * dim..(r + 1) * dim;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in d[span].iter_mut().zip(yr).zip(gr) {
                        *dv += (gv - yv * dot) / norm;
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let chunk = val(v).shape()[*axis] * inner;
                acc_into(nodes, grads, v, |d| {
                    for o in 0..outer {
                        add_scaled(
                            &mut d[o * chunk..(o + 1) * chunk],
                            &g[o * total + offset..o * total + offset + chunk],
                            1.0,
                        );
                    }
                });
                offset += chunk;
            }
        }
        Op::Sum(x) => acc_into(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(x) => {
            let n = val(*x).numel() as f64;
            acc_into(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0] / n));
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
            acc_into(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for a in 0..len {
                        add_scaled(
                            &mut d[(o * len + a) * inner..(o * len + a + 1) * inner],
                            &g[o * inner..(o + 1) * inner],
                            1.0,
                        );
                    }
                }
            });
        }
        Op::IndexSelect { x, indices } => {
            let row = g.len() / indices.len().max(1);
            acc_into(nodes, grads, *x, |d| {
                for (k, &i) in indices.iter().enumerate() {
                    add_scaled(&mut d[i * row..(i + 1) * row], &g[k * row..(k + 1) * row], 1.0);
                }
            });
        }
        Op::RowDistance { a, b, dists } => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let dim = va.len() / dists.len();
            let mut da = vec![0.0; va.len()];
            for (r, &dist) in dists.iter().enumerate() {
                let sq: f64 = (r * dim..(r + 1) * dim).map(|i| (va[i] - vb[i]).powi(2)).sum();
                if sq <= DISTANCE_FLOOR {
                    continue;
                }
                for i in r * dim..(r + 1) * dim {
                    da[i] = g[r] * (va[i] - vb[i]) / dist;
                }
            }
            acc_into(nodes, grads, *a, |d| add_scaled(d, &da, 1.0));
            acc_into(nodes, grads, *b, |d| add_scaled(d, &da, -1.0));
        }
        Op::Bce { pred, target } => {
            let vp = val(*pred).data();
            let n = vp.len() as f64;
            acc_into(nodes, grads, *pred, |d| {
                for ((dv, &p), &t) in d.iter_mut().zip(vp).zip(target) {
                    if p > BCE_EPS && p < 1.0 - BCE_EPS {
                        *dv += g[0] * (p - t) / (p * (1.0 - p)) / n;
                    }
                }
            });
        }
    }
}
