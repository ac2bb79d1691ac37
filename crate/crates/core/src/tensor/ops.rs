//! Forward and backward kernels on plain [`Tensor`]s.
//!
//! These are the pure building blocks used by [`Tape`](super::Tape); they can
//! also be called directly for inference without recording anything.

use rand::Rng;

use super::{Tensor, PROB_EPS};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(Error::shape(op, format!("expected rank 4, got {s:?}"))),
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    match t.shape() {
        &[a, b] => Ok([a, b]),
        s => Err(Error::shape(op, format!("expected rank 2, got {s:?}"))),
    }
}

fn check_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<([usize; 4], [usize; 4])> {
    let x = dims4(input, "conv2d")?;
    let k = dims4(kernel, "conv2d")?;
    if k[0] % 2 == 0 || k[1] % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel extents must be odd, got {}x{}", k[0], k[1])));
    }
    if k[2] != x[3] {
        return Err(Error::shape("conv2d", format!("input has {} channels but kernel expects {}", x[3], k[2])));
    }
    if bias.shape() != [k[3]] {
        return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{}]", bias.shape(), k[3])));
    }
    Ok((x, k))
}

/// Stride-1 convolution with "same" zero padding.
///
/// `input` is `[N,H,W,Cin]`, `kernel` is `[Kh,Kw,Cin,Cout]`, `bias` is `[Cout]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ([n, h, w, cin], [kh, kw, _, cout]) = check_conv(input, kernel, bias)?;
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = input.data();
    let ks = kernel.data();
    let mut out = vec![0.0; n * h * w * cout];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let o = ((b * h + y) * w + x) * cout;
                let acc = &mut out[o..o + cout];
                acc.copy_from_slice(bias.data());
                for dy in 0..kh {
                    let iy = y + dy;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    let iy = iy - ph;
                    for dx in 0..kw {
                        let ix = x + dx;
                        if ix < pw || ix - pw >= w {
                            continue;
                        }
                        let ix = ix - pw;
                        let xi = ((b * h + iy) * w + ix) * cin;
                        let kbase = (dy * kw + dx) * cin * cout;
                        for ci in 0..cin {
                            let v = xs[xi + ci];
                            let krow = &ks[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += v * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, h, w, cout], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, h, w, cin] = dims4(input, "conv2d_backward")?;
    let [kh, kw, _, cout] = dims4(kernel, "conv2d_backward")?;
    if grad_out.shape() != [n, h, w, cout] {
        return Err(Error::shape("conv2d_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = input.data();
    let ks = kernel.data();
    let gs = grad_out.data();
    let mut gx = vec![0.0; xs.len()];
    let mut gk = vec![0.0; ks.len()];
    let mut gb = vec![0.0; cout];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let o = ((b * h + y) * w + x) * cout;
                let g = &gs[o..o + cout];
                for (acc, &v) in gb.iter_mut().zip(g) {
                    *acc += v;
                }
                for dy in 0..kh {
                    let iy = y + dy;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    let iy = iy - ph;
                    for dx in 0..kw {
                        let ix = x + dx;
                        if ix < pw || ix - pw >= w {
                            continue;
                        }
                        let ix = ix - pw;
                        let xi = ((b * h + iy) * w + ix) * cin;
                        let kbase = (dy * kw + dx) * cin * cout;
                        for ci in 0..cin {
                            let v = xs[xi + ci];
                            let kr = kbase + ci * cout;
                            let krow = &ks[kr..kr + cout];
                            let mut dot = 0.0;
                            for (&kv, &gv) in krow.iter().zip(g) {
                                dot += kv * gv;
                            }
                            gx[xi + ci] += dot;
                            for (acc, &gv) in gk[kr..kr + cout].iter_mut().zip(g) {
                                *acc += v * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(input.shape(), gx)?, Tensor::new(kernel.shape(), gk)?, Tensor::new([cout], gb)?))
}

/// 2x2 max pooling with stride 2.
///
/// Odd extents are handled by replicating the last row/column, which is the
/// same as clipping the window to the image. Returns the pooled tensor and,
/// for every output cell, the flat input index that won (first maximum in
/// row-major window order).
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, h, w, c] = dims4(input, "maxpool2")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let xs = input.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let mut best_idx = usize::MAX;
                    let mut best = f64::NEG_INFINITY;
                    for iy in (2 * y)..(2 * y + 2).min(h) {
                        for ix in (2 * x)..(2 * x + 2).min(w) {
                            let idx = ((b * h + iy) * w + ix) * c + ch;
                            if best_idx == usize::MAX || xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::new([n, oh, ow, c], out)?, argmax))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let len: usize = input_shape.iter().product();
    let mut gx = vec![0.0; len];
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gx[idx] += g;
    }
    Tensor::new(input_shape, gx)
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

/// Softmax over the last axis, with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let w = *x.shape().last().expect("tensor has rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(w) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor { shape: x.shape().to_vec(), data: out }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { shape: x.shape().to_vec(), data: x.data().iter().map(|&v| f(v)).collect() }
}

/// Affine map `x·W + b` for `x: [N,Din]`, `W: [Din,Dout]`, `b: [Dout]`.
pub fn dense(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, din] = dims2(x, "dense")?;
    let [wdin, dout] = dims2(weight, "dense")?;
    if wdin != din {
        return Err(Error::shape("dense", format!("input width {din}, weight expects {wdin}")));
    }
    if bias.shape() != [dout] {
        return Err(Error::shape("dense", format!("bias shape {:?}, expected [{dout}]", bias.shape())));
    }
    let ws = weight.data();
    let mut out = Vec::with_capacity(n * dout);
    for row in x.data().chunks(din) {
        let mut acc = bias.data().to_vec();
        for (i, &xi) in row.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (a, &wv) in acc.iter_mut().zip(&ws[i * dout..(i + 1) * dout]) {
                *a += xi * wv;
            }
        }
        out.extend(acc);
    }
    Tensor::new([n, dout], out)
}

pub fn dense_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, din] = dims2(x, "dense_backward")?;
    let [_, dout] = dims2(weight, "dense_backward")?;
    if grad_out.shape() != [n, dout] {
        return Err(Error::shape("dense_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    let ws = weight.data();
    let mut gx = vec![0.0; n * din];
    let mut gw = vec![0.0; din * dout];
    let mut gb = vec![0.0; dout];
    for b in 0..n {
        let g = &grad_out.data()[b * dout..(b + 1) * dout];
        for (acc, &v) in gb.iter_mut().zip(g) {
            *acc += v;
        }
        let xrow = &x.data()[b * din..(b + 1) * din];
        for i in 0..din {
            let wrow = &ws[i * dout..(i + 1) * dout];
            gx[b * din + i] = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
            let xi = xrow[i];
            if xi != 0.0 {
                for (acc, &gv) in gw[i * dout..(i + 1) * dout].iter_mut().zip(g) {
                    *acc += xi * gv;
                }
            }
        }
    }
    Ok((Tensor::new([n, din], gx)?, Tensor::new([din, dout], gw)?, Tensor::new([dout], gb)?))
}

/// Per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// Exponential moving update `running = m·running + (1−m)·batch`.
    pub fn update(&mut self, batch: &ChannelStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

fn check_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let c = *x.shape().last().unwrap_or(&0);
    if x.rank() < 2 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm",
            format!("input {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    Ok(c)
}

/// Batch statistics over every axis but the last (biased variance).
pub fn batch_stats(x: &Tensor) -> Result<ChannelStats> {
    let c = *x.shape().last().unwrap_or(&0);
    let count = x.len() / c.max(1);
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "train-mode batchnorm needs at least 2 elements per channel, got {count}"
        )));
    }
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= count as f64);
    Ok(ChannelStats { mean, var })
}

/// Normalizes `x` with the given statistics and applies the affine `gamma`, `beta`.
pub fn batchnorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let c = check_bn(x, gamma, beta)?;
    let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        for ch in 0..c {
            row[ch] = gamma.data()[ch] * (row[ch] - stats.mean[ch]) * inv[ch] + beta.data()[ch];
        }
    }
    Tensor::new(x.shape(), out)
}

/// Backward of train-mode batch norm (statistics depend on the input).
pub fn batchnorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &ChannelStats,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c = gamma.len();
    let count = (x.len() / c) as f64;
    let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for (xr, gr) in x.data().chunks(c).zip(grad_out.data().chunks(c)) {
        for ch in 0..c {
            let xhat = (xr[ch] - stats.mean[ch]) * inv[ch];
            sum_g[ch] += gr[ch];
            sum_gx[ch] += gr[ch] * xhat;
        }
    }
    let mut gx = vec![0.0; x.len()];
    for ((xr, gr), out) in x.data().chunks(c).zip(grad_out.data().chunks(c)).zip(gx.chunks_mut(c)) {
        for ch in 0..c {
            let xhat = (xr[ch] - stats.mean[ch]) * inv[ch];
            out[ch] = gamma.data()[ch] * inv[ch] / count * (count * gr[ch] - sum_g[ch] - xhat * sum_gx[ch]);
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new([c], sum_gx)?, Tensor::new([c], sum_g)?))
}

/// Backward of infer-mode batch norm (statistics are constants).
pub fn batchnorm_backward_frozen(
    x: &Tensor,
    gamma: &Tensor,
    stats: &ChannelStats,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c = gamma.len();
    let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ((xr, gr), out) in x.data().chunks(c).zip(grad_out.data().chunks(c)).zip(gx.chunks_mut(c)) {
        for ch in 0..c {
            let xhat = (xr[ch] - stats.mean[ch]) * inv[ch];
            gg[ch] += gr[ch] * xhat;
            gb[ch] += gr[ch];
            out[ch] = gr[ch] * gamma.data()[ch] * inv[ch];
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new([c], gg)?, Tensor::new([c], gb)?))
}

/// Inverted-dropout mask: each entry is 0 or `1/(1−rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1]")));
    }
    if rate >= 1.0 {
        return Err(Error::InvalidArgument("dropout rate must be < 1 in train mode".into()));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let scale = 1.0 / (1.0 - rate);
    Ok((0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale }).collect())
}

/// Concatenates two rank-2 tensors along the last axis.
pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [na, da] = dims2(a, "concat")?;
    let [nb, db] = dims2(b, "concat")?;
    if na != nb {
        return Err(Error::shape("concat", format!("leading extents {na} vs {nb}")));
    }
    let mut out = Vec::with_capacity(na * (da + db));
    for i in 0..na {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Tensor::new([na, da + db], out)
}

pub fn concat_backward(da: usize, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let [n, d] = dims2(grad_out, "concat_backward")?;
    let db = d - da;
    let mut ga = Vec::with_capacity(n * da);
    let mut gb = Vec::with_capacity(n * db);
    for row in grad_out.data().chunks(d) {
        ga.extend_from_slice(&row[..da]);
        gb.extend_from_slice(&row[da..]);
    }
    Ok((Tensor::new([n, da], ga)?, Tensor::new([n, db], gb)?))
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn clamp_slope(p: f64) -> f64 {
    if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        1.0
    } else {
        0.0
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean binary cross-entropy over every entry (herbs and batch).
pub fn bce_mean(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    check_same("bce", probs, labels)?;
    let total: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &g)| {
            let c = clamp_prob(p);
            -g * c.ln() - (1.0 - g) * (1.0 - c).ln()
        })
        .sum();
    Ok(total / probs.len() as f64)
}

pub fn bce_mean_backward(probs: &Tensor, labels: &Tensor) -> Tensor {
    let scale = 1.0 / probs.len() as f64;
    let data = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &g)| {
            let c = clamp_prob(p);
            (-g / c + (1.0 - g) / (1.0 - c)) * clamp_slope(p) * scale
        })
        .collect();
    Tensor { shape: probs.shape().to_vec(), data }
}

fn check_kl_target(target: &Tensor) -> Result<()> {
    if let Some(bad) = target.data().iter().find(|&&g| g <= 0.0 || !g.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "topic ground truth entries must be strictly positive, found {bad}"
        )));
    }
    Ok(())
}

/// Batch mean of `(1/m)·Σ_k p_k·ln(p_k/g_k)` for rows of `probs` and `target`.
pub fn kl_mean(probs: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("kl", probs, target)?;
    check_kl_target(target)?;
    let m = *probs.shape().last().unwrap();
    let rows = probs.len() / m;
    let total: f64 = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &g)| if p == 0.0 { 0.0 } else { p * (clamp_prob(p) / g).ln() })
        .sum();
    Ok(total / (m * rows) as f64)
}

pub fn kl_mean_backward(probs: &Tensor, target: &Tensor) -> Tensor {
    let m = *probs.shape().last().unwrap();
    let scale = 1.0 / probs.len() as f64;
    debug_assert_eq!(probs.len() % m, 0);
    let data = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &g)| {
            let c = clamp_prob(p);
            ((c / g).ln() + p * clamp_slope(p) / c) * scale
        })
        .collect();
    Tensor { shape: probs.shape().to_vec(), data }
}
