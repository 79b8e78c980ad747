//! Forward and reverse passes for the two fixed architectures.

use rayon::prelude::*;

use super::model::{Model, ModelKind, ParamVector};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const EVAL_CHUNK: usize = 256;

/// `c[m,n] (+)= a * b` where `a` is `m x k` and `b` is `k x n`, both given by
/// (row stride, col stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the stride pairs describe in-bounds views of `a` (m x k) and
    // `b` (k x n), and `c` holds m * n contiguous row-major elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x[m,k] * w[n,k]^T`
fn matmul_xwt(x: &[f32], w: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, x, (k, 1), w, (1, k), &mut c, false);
    c
}

/// `g[m,n] * w[n,k]`
fn matmul_gw(g: &[f32], w: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * k];
    gemm(m, n, k, g, (n, 1), w, (k, 1), &mut c, false);
    c
}

/// `g[m,n]^T * x[m,k]` written into `out` (`n x k`).
fn matmul_gtx(g: &[f32], x: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    gemm(n, m, k, g, (1, n), x, (k, 1), out, false);
}

fn add_bias(z: &mut [f32], bias: &[f32]) {
    for row in z.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn relu_inplace(z: &mut [f32]) {
    for v in z {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn column_sums(g: &[f32], cols: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; cols];
    for row in g.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
}

/// Gradient through ReLU, using the post-activation output as the mask.
fn relu_backward(g: &mut [f32], activated: &[f32]) {
    for (gv, &a) in g.iter_mut().zip(activated) {
        if a <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// 3x3, stride 1, zero padding 1. Columns ordered (ky, kx, c).
fn im2col(x: &[f32], b: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let k = 9 * c;
    let mut cols = vec![0.0; b * h * w * k];
    for n in 0..b {
        let img = &x[n * h * w * c..(n + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let row = &mut cols[((n * h + y) * w + xx) * k..][..k];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((iy as usize) * w + ix as usize) * c;
                        let dst = (ky * 3 + kx) * c;
                        row[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], b: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let k = 9 * c;
    let mut x = vec![0.0; b * h * w * c];
    for n in 0..b {
        let img = &mut x[n * h * w * c..(n + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let row = &cols[((n * h + y) * w + xx) * k..][..k];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((iy as usize) * w + ix as usize) * c;
                        let src = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            img[dst + ch] += row[src + ch];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2x2 max-pool, stride 2 (trailing odd row/column dropped). Ties go to the
/// first element in (dy, dx) scan order.
fn maxpool(a: &[f32], b: usize, h: usize, w: usize, c: usize) -> (Vec<f32>, Vec<u32>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = vec![0.0; b * ph * pw * c];
    let mut arg = vec![0u32; b * ph * pw * c];
    for n in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((n * h + 2 * py + dy) * w + 2 * px + dx) * c + ch;
                            if a[idx] > best {
                                best = a[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((n * ph + py) * pw + px) * c + ch;
                    out[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
    }
    (out, arg)
}

enum Cache {
    Mlp {
        /// Layer inputs: the batch, then each hidden post-activation.
        inputs: Vec<Vec<f32>>,
    },
    Cnn {
        cols1: Vec<f32>,
        a1: Vec<f32>,
        cols2: Vec<f32>,
        a2: Vec<f32>,
        pooled: Vec<f32>,
        argmax: Vec<u32>,
    },
}

fn check_batch(model: &Model, batch: &Tensor) -> Result<usize> {
    let [h, w, c] = model.spec().input_shape;
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != [h, w, c] {
        let mut expected = vec![shape.first().copied().unwrap_or(1)];
        expected.extend([h, w, c]);
        return Err(Error::Shape {
            expected,
            actual: shape.to_vec(),
        });
    }
    Ok(shape[0])
}

fn forward_cached(model: &Model, x: &[f32], b: usize, keep: bool) -> (Vec<f32>, Option<Cache>) {
    let spec = model.spec();
    let layout = model.layout();
    let params = model.params();
    let k_out = spec.num_classes;
    match spec.kind {
        ModelKind::Mlp => {
            let n_layers = spec.widths.len() + 1;
            let mut inputs: Vec<Vec<f32>> = Vec::with_capacity(n_layers);
            let mut current = x.to_vec();
            let mut fan_in = spec.input_len();
            for l in 0..n_layers {
                let w = layout.entries()[2 * l].range();
                let bias = layout.entries()[2 * l + 1].range();
                let out = if l + 1 == n_layers {
                    k_out
                } else {
                    spec.widths[l]
                };
                let mut z = matmul_xwt(&current, &params[w], b, fan_in, out);
                add_bias(&mut z, &params[bias]);
                if l + 1 < n_layers {
                    relu_inplace(&mut z);
                }
                let prev = std::mem::replace(&mut current, z);
                if keep {
                    inputs.push(prev);
                }
                fan_in = out;
            }
            (current, keep.then_some(Cache::Mlp { inputs }))
        }
        ModelKind::SmallCnn => {
            let [h, w, c] = spec.input_shape;
            let (c1, c2) = (spec.widths[0], spec.widths[1]);
            let e = layout.entries();
            let cols1 = im2col(x, b, h, w, c);
            let mut a1 = matmul_xwt(&cols1, &params[e[0].range()], b * h * w, 9 * c, c1);
            add_bias(&mut a1, &params[e[1].range()]);
            relu_inplace(&mut a1);
            let cols2 = im2col(&a1, b, h, w, c1);
            let mut a2 = matmul_xwt(&cols2, &params[e[2].range()], b * h * w, 9 * c1, c2);
            add_bias(&mut a2, &params[e[3].range()]);
            relu_inplace(&mut a2);
            let (pooled, argmax) = maxpool(&a2, b, h, w, c2);
            let p = spec.pooled_len();
            let mut logits = matmul_xwt(&pooled, &params[e[4].range()], b, p, k_out);
            add_bias(&mut logits, &params[e[5].range()]);
            let cache = keep.then_some(Cache::Cnn {
                cols1,
                a1,
                cols2,
                a2,
                pooled,
                argmax,
            });
            (logits, cache)
        }
    }
}

/// Reverse pass. `dlogits` is `b x K`. Returns parameter gradients (unless
/// `want_params` is false) and optionally the input gradient.
fn backward(
    model: &Model,
    cache: Cache,
    dlogits: Vec<f32>,
    b: usize,
    want_params: bool,
    want_input: bool,
) -> (Option<ParamVector>, Option<Vec<f32>>) {
    let spec = model.spec();
    let layout = model.layout();
    let params = model.params();
    let mut grads = want_params.then(|| ParamVector::zeros(model.num_params()));
    let k_out = spec.num_classes;
    match cache {
        Cache::Mlp { inputs } => {
            let n_layers = inputs.len();
            let mut g = dlogits;
            let mut out = k_out;
            let mut dx = None;
            for l in (0..n_layers).rev() {
                let w = layout.entries()[2 * l].range();
                let bias = layout.entries()[2 * l + 1].range();
                let fan_in = if l == 0 {
                    spec.input_len()
                } else {
                    spec.widths[l - 1]
                };
                if let Some(gr) = grads.as_mut() {
                    matmul_gtx(&g, &inputs[l], b, out, fan_in, &mut gr.0[w.clone()]);
                    column_sums(&g, out, &mut gr.0[bias]);
                }
                if l > 0 || want_input {
                    let mut gi = matmul_gw(&g, &params[w], b, out, fan_in);
                    if l > 0 {
                        relu_backward(&mut gi, &inputs[l]);
                        g = gi;
                    } else {
                        dx = Some(gi);
                    }
                }
                out = fan_in;
            }
            (grads, dx)
        }
        Cache::Cnn {
            cols1,
            a1,
            cols2,
            a2,
            pooled,
            argmax,
        } => {
            let [h, w, c] = spec.input_shape;
            let (c1, c2) = (spec.widths[0], spec.widths[1]);
            let e = layout.entries();
            let p = spec.pooled_len();
            let hw = b * h * w;
            if let Some(gr) = grads.as_mut() {
                matmul_gtx(&dlogits, &pooled, b, k_out, p, &mut gr.0[e[4].range()]);
                column_sums(&dlogits, k_out, &mut gr.0[e[5].range()]);
            }
            let dpooled = matmul_gw(&dlogits, &params[e[4].range()], b, k_out, p);
            let mut da2 = vec![0.0; a2.len()];
            for (gv, &idx) in dpooled.iter().zip(&argmax) {
                da2[idx as usize] += gv;
            }
            relu_backward(&mut da2, &a2);
            if let Some(gr) = grads.as_mut() {
                matmul_gtx(&da2, &cols2, hw, c2, 9 * c1, &mut gr.0[e[2].range()]);
                column_sums(&da2, c2, &mut gr.0[e[3].range()]);
            }
            let dcols2 = matmul_gw(&da2, &params[e[2].range()], hw, c2, 9 * c1);
            let mut da1 = col2im(&dcols2, b, h, w, c1);
            relu_backward(&mut da1, &a1);
            if let Some(gr) = grads.as_mut() {
                matmul_gtx(&da1, &cols1, hw, c1, 9 * c, &mut gr.0[e[0].range()]);
                column_sums(&da1, c1, &mut gr.0[e[1].range()]);
            }
            let dx = want_input.then(|| {
                let dcols1 = matmul_gw(&da1, &params[e[0].range()], hw, c1, 9 * c);
                col2im(&dcols1, b, h, w, c)
            });
            (grads, dx)
        }
    }
}

/// Softmax cross-entropy in f64. Returns the summed loss and
/// `scale * (softmax - onehot)`.
fn softmax_xent(logits: &[f32], k: usize, labels: &[usize], scale: f64) -> (f64, Vec<f32>) {
    let mut total = 0.0;
    let mut dlogits = vec![0.0f32; logits.len()];
    for ((row, d), &y) in logits
        .chunks_exact(k)
        .zip(dlogits.chunks_exact_mut(k))
        .zip(labels)
    {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let sum: f64 = row.iter().map(|&v| (f64::from(v) - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - f64::from(row[y]);
        for (j, (dv, &v)) in d.iter_mut().zip(row).enumerate() {
            let p = (f64::from(v) - lse).exp();
            let t = if j == y { 1.0 } else { 0.0 };
            *dv = ((p - t) * scale) as f32;
        }
    }
    (total, dlogits)
}

fn per_sample_xent(logits: &[f32], k: usize, labels: &[usize]) -> Vec<f64> {
    logits
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
            let sum: f64 = row.iter().map(|&v| (f64::from(v) - max).exp()).sum();
            max + sum.ln() - f64::from(row[y])
        })
        .collect()
}

fn check_labels(model: &Model, labels: &[usize], b: usize) -> Result<()> {
    if labels.len() != b {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let k = model.spec().num_classes;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

fn diverged(loss: f64) -> Error {
    Error::Diverged {
        phase: "loss evaluation".into(),
        epoch: 0,
        step: 0,
        loss,
    }
}

/// Logits for a `[B, H, W, C]` batch.
pub fn forward(model: &Model, batch: &Tensor) -> Result<Tensor> {
    let b = check_batch(model, batch)?;
    let k = model.spec().num_classes;
    let rows = batch.row_len();
    let chunks: Vec<Vec<f32>> = batch
        .data()
        .par_chunks(EVAL_CHUNK * rows)
        .map(|x| forward_cached(model, x, x.len() / rows, false).0)
        .collect();
    Tensor::new(vec![b, k], chunks.concat())
}

/// Mean cross-entropy over the batch and its gradient w.r.t. every parameter.
pub fn loss_and_grads(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<(f64, ParamVector)> {
    let b = check_batch(model, batch)?;
    check_labels(model, labels, b)?;
    let (logits, cache) = forward_cached(model, batch.data(), b, true);
    let k = model.spec().num_classes;
    let (sum, dlogits) = softmax_xent(&logits, k, labels, 1.0 / b as f64);
    let loss = sum / b as f64;
    if !loss.is_finite() {
        return Err(diverged(loss));
    }
    let (grads, _) = backward(model, cache.expect("cache kept"), dlogits, b, true, false);
    Ok((loss, grads.expect("param grads requested")))
}

/// Mean cross-entropy without gradients.
pub fn loss(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(per_sample_losses(model, batch, labels)?.iter().sum::<f64>() / labels.len() as f64)
}

pub fn per_sample_losses(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let logits = forward(model, batch)?;
    check_labels(model, labels, logits.rows())?;
    Ok(per_sample_xent(logits.data(), model.spec().num_classes, labels))
}

/// Gradient of the cross-entropy at `x` (shape `[H, W, C]` or `[1, H, W, C]`)
/// with respect to the input pixels.
pub fn input_gradient(model: &Model, x: &Tensor, label: usize) -> Result<Tensor> {
    let [h, w, c] = model.spec().input_shape;
    let batch = if x.shape().len() == 3 {
        Tensor::new(vec![1, h, w, c], x.data().to_vec())?
    } else {
        x.clone()
    };
    if batch.rows() != 1 {
        return Err(Error::invalid("input_gradient takes a single sample"));
    }
    let g = input_gradients(model, &batch, &[label])?;
    Tensor::new(x.shape().to_vec(), g.into_data())
}

/// Per-sample input gradients: row `i` is d loss_i / d x_i.
pub fn input_gradients(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let b = check_batch(model, batch)?;
    check_labels(model, labels, b)?;
    let k = model.spec().num_classes;
    let rows = batch.row_len();
    let parts: Vec<Result<Vec<f32>>> = batch
        .data()
        .par_chunks(EVAL_CHUNK * rows)
        .zip(labels.par_chunks(EVAL_CHUNK))
        .map(|(x, y)| {
            let n = y.len();
            let (logits, cache) = forward_cached(model, x, n, true);
            let (sum, dlogits) = softmax_xent(&logits, k, y, 1.0);
            if !sum.is_finite() {
                return Err(diverged(sum));
            }
            let (_, dx) = backward(model, cache.expect("cache kept"), dlogits, n, false, true);
            Ok(dx.expect("input grad requested"))
        })
        .collect();
    let mut data = Vec::with_capacity(batch.len());
    for p in parts {
        data.extend(p?);
    }
    Tensor::new(batch.shape().to_vec(), data)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict_batch(model: &Model, batch: &Tensor) -> Result<Vec<usize>> {
    let logits = forward(model, batch)?;
    Ok(logits
        .data()
        .chunks_exact(model.spec().num_classes)
        .map(argmax)
        .collect())
}

/// Predicted class for one sample (`[H, W, C]` or `[1, H, W, C]`).
pub fn predict(model: &Model, x: &Tensor) -> Result<usize> {
    let [h, w, c] = model.spec().input_shape;
    let batch = Tensor::new(vec![1, h, w, c], x.data().to_vec())?;
    Ok(predict_batch(model, &batch)?[0])
}

/// Fraction of samples whose prediction equals the label.
pub fn accuracy(model: &Model, samples: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("accuracy over an empty dataset"));
    }
    let preds = predict_batch(model, samples)?;
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} samples",
            labels.len(),
            preds.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}
