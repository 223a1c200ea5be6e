//! Forward and backward kernels. Tensors are NHWC; convolution kernels are
//! `Kh×Kw×Cin×Cout`. Every kernel runs with a fixed sequential reduction
//! order, so results are bitwise reproducible.

use std::cell::Cell;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential moving average.
pub const BN_MOMENTUM: f64 = 0.9;
/// Lower clamp on probabilities inside the log of the cross-entropy loss.
pub const PROB_FLOOR: f64 = 1e-12;

thread_local! {
    static FLIPPED_CONV_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Fault injection for the gradient checker's negative control.
#[doc(hidden)]
pub mod fault {
    use super::FLIPPED_CONV_BACKWARD;

    /// Runs `f` with a deliberately wrong input gradient in `conv2d`: the
    /// kernel taps are mirrored when propagating to the input.
    pub fn with_flipped_conv_backward<R>(f: impl FnOnce() -> R) -> R {
        let previous = FLIPPED_CONV_BACKWARD.with(|c| c.replace(true));
        let out = f();
        FLIPPED_CONV_BACKWARD.with(|c| c.set(previous));
        out
    }
}

fn conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<([usize; 4], [usize; 4])> {
    let xd = x.dims4()?;
    let kd = match kernel.shape() {
        &[kh, kw, ci, co] => [kh, kw, ci, co],
        other => {
            return Err(Error::Shape(format!(
                "conv2d kernel must be Kh×Kw×Cin×Cout, got {other:?}"
            )))
        }
    };
    if xd[3] != kd[2] {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input {:?} vs kernel {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    if kd[0] % 2 == 0 || kd[1] % 2 == 0 {
        return Err(Error::Shape(format!(
            "conv2d kernel extents must be odd, got {:?}",
            kernel.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [kd[3]] {
            return Err(Error::Shape(format!(
                "conv2d bias {:?} does not match kernel {:?}",
                b.shape(),
                kernel.shape()
            )));
        }
    }
    Ok((xd, kd))
}

/// Stride-1 convolution (cross-correlation) with zero "same" padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let ([b, h, w, cin], [kh, kw, _, cout]) = conv_shapes(x, kernel, bias)?;
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = x.data();
    let ks = kernel.data();
    let mut out = vec![T::zero(); b * h * w * cout];
    for n in 0..b {
        for oy in 0..h {
            for ox in 0..w {
                let o = ((n * h + oy) * w + ox) * cout;
                let acc = &mut out[o..o + cout];
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias.data());
                }
                for ky in 0..kh {
                    let Some(iy) = (oy + ky).checked_sub(ph).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(ix) = (ox + kx).checked_sub(pw).filter(|&v| v < w) else {
                            continue;
                        };
                        let xi = ((n * h + iy) * w + ix) * cin;
                        let kb = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xs[xi + ci];
                            let row = &ks[kb + ci * cout..kb + (ci + 1) * cout];
                            for (a, &kv) in acc.iter_mut().zip(row) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::new(&[b, h, w, cout], out)?;
    out.debug_assert_finite("conv2d");
    Ok(out)
}

pub struct ConvGrads<T> {
    /// Absent when the caller did not request the input gradient.
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let ([b, h, w, cin], [kh, kw, _, cout]) = conv_shapes(x, kernel, None)?;
    if grad_out.shape() != [b, h, w, cout] {
        return Err(Error::Shape(format!(
            "conv2d upstream gradient {:?} does not match output {:?}",
            grad_out.shape(),
            [b, h, w, cout]
        )));
    }
    let flipped = FLIPPED_CONV_BACKWARD.with(Cell::get);
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = x.data();
    let ks = kernel.data();
    let gs = grad_out.data();
    let mut dx = vec![T::zero(); if need_input { xs.len() } else { 0 }];
    let mut dk = vec![T::zero(); ks.len()];
    let mut db = vec![T::zero(); cout];
    for n in 0..b {
        for oy in 0..h {
            for ox in 0..w {
                let o = ((n * h + oy) * w + ox) * cout;
                let g = &gs[o..o + cout];
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
                for ky in 0..kh {
                    let Some(iy) = (oy + ky).checked_sub(ph).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(ix) = (ox + kx).checked_sub(pw).filter(|&v| v < w) else {
                            continue;
                        };
                        let xi = ((n * h + iy) * w + ix) * cin;
                        let kb = (ky * kw + kx) * cin * cout;
                        let kb_input = if flipped {
                            ((kh - 1 - ky) * kw + (kw - 1 - kx)) * cin * cout
                        } else {
                            kb
                        };
                        for ci in 0..cin {
                            if need_input {
                                let krow =
                                    &ks[kb_input + ci * cout..kb_input + (ci + 1) * cout];
                                let mut s = T::zero();
                                for (&kv, &gv) in krow.iter().zip(g) {
                                    s += kv * gv;
                                }
                                dx[xi + ci] += s;
                            }
                            let xv = xs[xi + ci];
                            let drow = &mut dk[kb + ci * cout..kb + (ci + 1) * cout];
                            for (d, &gv) in drow.iter_mut().zip(g) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(x.shape(), dx)?)
        } else {
            None
        },
        kernel: Tensor::new(kernel.shape(), dk)?,
        bias: Tensor::new(&[cout], db)?,
    })
}

/// Rows and channels of a channels-last tensor viewed as `N×C`.
fn rows_channels<T: Scalar>(x: &Tensor<T>) -> (usize, usize) {
    let c = *x.shape().last().expect("tensors have at least one extent");
    (x.len() / c, c)
}

fn check_affine<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let (_, c) = rows_channels(x);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batch_norm affine parameters {:?}/{:?} do not match input {:?}",
            gamma.shape(),
            beta.shape(),
            x.shape()
        )));
    }
    Ok(c)
}

/// Output and saved intermediates of a batch-norm forward pass.
pub struct BnForward<T> {
    pub output: Tensor<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    /// Per-channel batch mean and (biased) variance; empty in inference mode.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Normalizes with per-channel batch statistics over all leading positions.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<BnForward<T>> {
    let c = check_affine(x, gamma, beta)?;
    let (n, _) = rows_channels(x);
    if n < 2 {
        return Err(Error::Shape(format!(
            "batch_norm in train mode needs more than one value per channel, input {:?}",
            x.shape()
        )));
    }
    let xs = x.data();
    let count = T::from_usize(n).unwrap();
    let mut mean = vec![T::zero(); c];
    for row in xs.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![T::zero(); c];
    for row in xs.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= count);
    let mut out = normalize(x, gamma, beta, &mean, &var);
    out.batch_mean = mean;
    out.batch_var = var;
    Ok(out)
}

/// Normalizes with supplied (running) statistics.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
) -> Result<BnForward<T>> {
    let c = check_affine(x, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::Shape(format!(
            "batch_norm running statistics have {} channels, input has {c}",
            mean.len()
        )));
    }
    Ok(normalize(x, gamma, beta, mean, var))
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
) -> BnForward<T> {
    let eps = T::from_f64_lossy(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let c = mean.len();
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        for ch in 0..c {
            let xh = (row[ch] - mean[ch]) * inv_std[ch];
            normalized.push(xh);
            out.push(gamma.data()[ch] * xh + beta.data()[ch]);
        }
    }
    let output = Tensor::new(x.shape(), out).expect("same length as input");
    output.debug_assert_finite("batch_norm");
    BnForward {
        output,
        normalized,
        inv_std,
        batch_mean: Vec::new(),
        batch_var: Vec::new(),
    }
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward of batch norm. In train mode the batch statistics depend on the
/// input; in inference mode they are constants.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    normalized: &[T],
    inv_std: &[T],
    gamma: &Tensor<T>,
    train: bool,
) -> Result<BnGrads<T>> {
    let (n, c) = rows_channels(grad_out);
    if normalized.len() != grad_out.len() || inv_std.len() != c || gamma.len() != c {
        return Err(Error::Shape(format!(
            "batch_norm backward mismatch for upstream {:?}",
            grad_out.shape()
        )));
    }
    let gs = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (g_row, xh_row) in gs.chunks_exact(c).zip(normalized.chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] += g_row[ch] * xh_row[ch];
            dbeta[ch] += g_row[ch];
        }
    }
    let gam = gamma.data();
    let mut dx = Vec::with_capacity(gs.len());
    if train {
        let count = T::from_usize(n).unwrap();
        // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
        for (g_row, xh_row) in gs.chunks_exact(c).zip(normalized.chunks_exact(c)) {
            for ch in 0..c {
                let dxhat = g_row[ch] * gam[ch];
                let v = (count * dxhat - gam[ch] * dbeta[ch] - xh_row[ch] * gam[ch] * dgamma[ch])
                    * inv_std[ch]
                    / count;
                dx.push(v);
            }
        }
    } else {
        for g_row in gs.chunks_exact(c) {
            for ch in 0..c {
                dx.push(g_row[ch] * gam[ch] * inv_std[ch]);
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(grad_out.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Mean over the spatial positions of a `B×H×W×C` tensor, giving `B×C`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, h, w, c] = x.dims4()?;
    let area = T::from_usize(h * w).unwrap();
    let mut out = vec![T::zero(); b * c];
    for (n, sample) in x.data().chunks_exact(h * w * c).enumerate() {
        let acc = &mut out[n * c..(n + 1) * c];
        for px in sample.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= area);
    }
    Tensor::new(&[b, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[b, h, w, c] = input_shape else {
        return Err(Error::Shape(format!(
            "pool input must be 4-d, got {input_shape:?}"
        )));
    };
    if grad_out.shape() != [b, c] {
        return Err(Error::Shape(format!(
            "pool upstream gradient {:?} does not match {:?}",
            grad_out.shape(),
            [b, c]
        )));
    }
    let area = T::from_usize(h * w).unwrap();
    let mut dx = Vec::with_capacity(b * h * w * c);
    for n in 0..b {
        let g = &grad_out.data()[n * c..(n + 1) * c];
        for _ in 0..h * w {
            dx.extend(g.iter().map(|&v| v / area));
        }
    }
    Tensor::new(input_shape, dx)
}

fn dense_shapes<T: Scalar>(
    v: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let [rows, din] = v.dims2()?;
    let [wdin, dout] = weight.dims2()?;
    if din != wdin || bias.shape() != [dout] {
        return Err(Error::Shape(format!(
            "dense mismatch: input {:?}, weight {:?}, bias {:?}",
            v.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    Ok((rows, din, dout))
}

/// `y = vW + b` for `v: B×Din`, `W: Din×Dout`.
pub fn dense<T: Scalar>(v: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, din, dout) = dense_shapes(v, weight, bias)?;
    let ws = weight.data();
    let mut out = Vec::with_capacity(rows * dout);
    for row in v.data().chunks_exact(din) {
        let start = out.len();
        out.extend_from_slice(bias.data());
        let acc = &mut out[start..];
        for (i, &xv) in row.iter().enumerate() {
            for (a, &wv) in acc.iter_mut().zip(&ws[i * dout..(i + 1) * dout]) {
                *a += xv * wv;
            }
        }
    }
    let out = Tensor::new(&[rows, dout], out)?;
    out.debug_assert_finite("dense");
    Ok(out)
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    v: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let [rows, din] = v.dims2()?;
    let [_, dout] = weight.dims2()?;
    if grad_out.shape() != [rows, dout] {
        return Err(Error::Shape(format!(
            "dense upstream gradient {:?} does not match {:?}",
            grad_out.shape(),
            [rows, dout]
        )));
    }
    let ws = weight.data();
    let mut dv = vec![T::zero(); rows * din];
    let mut dw = vec![T::zero(); din * dout];
    let mut db = vec![T::zero(); dout];
    for r in 0..rows {
        let g = &grad_out.data()[r * dout..(r + 1) * dout];
        let x = &v.data()[r * din..(r + 1) * din];
        for (d, &gv) in db.iter_mut().zip(g) {
            *d += gv;
        }
        for i in 0..din {
            let wrow = &ws[i * dout..(i + 1) * dout];
            let mut s = T::zero();
            for (&wv, &gv) in wrow.iter().zip(g) {
                s += wv * gv;
            }
            dv[r * din + i] = s;
            let drow = &mut dw[i * dout..(i + 1) * dout];
            for (d, &gv) in drow.iter_mut().zip(g) {
                *d += x[i] * gv;
            }
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(v.shape(), dv)?,
        weight: Tensor::new(weight.shape(), dw)?,
        bias: Tensor::new(&[dout], db)?,
    })
}

/// Row-wise softmax of `B×K` logits, computed after subtracting the row max.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = logits.dims2()?;
    if k < 2 {
        return Err(Error::Shape(format!(
            "softmax needs at least two classes, got {:?}",
            logits.shape()
        )));
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let probs = &mut out[start..];
        let total: T = probs.iter().copied().sum();
        probs.iter_mut().for_each(|p| *p /= total);
    }
    Tensor::new(logits.shape(), out)
}

fn check_labels(labels: &[usize], rows: usize, k: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    match labels.iter().position(|&l| l >= k) {
        Some(index) => Err(Error::LabelOutOfRange {
            index,
            label: labels[index],
            num_classes: k,
        }),
        None => Ok(()),
    }
}

/// Mean of `-ln p[label]` over the batch, with `p` clamped below at 1e-12.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let [rows, k] = probs.dims2()?;
    check_labels(labels, rows, k)?;
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let total: T = probs
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &l)| -row[l].max(floor).ln())
        .sum();
    Ok(total / T::from_usize(rows).unwrap())
}

/// Gradient of the mean cross-entropy with respect to the logits: `(p − onehot)/B`.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let [rows, k] = probs.dims2()?;
    check_labels(labels, rows, k)?;
    let count = T::from_usize(rows).unwrap();
    let mut grad = probs.data().to_vec();
    for (row, &l) in grad.chunks_exact_mut(k).zip(labels) {
        row[l] -= T::one();
        row.iter_mut().for_each(|g| *g /= count);
    }
    Tensor::new(probs.shape(), grad)
}
