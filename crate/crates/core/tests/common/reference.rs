//! Naive f64 re-implementation of both architectures, written from the
//! parameter layout only. Used as the finite-difference oracle.

use wmlab::nn::{Model, ModelKind, ModelSpec};

fn dense(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let fan_in = x.len();
    (0..out)
        .map(|j| b[j] + (0..fan_in).map(|i| w[j * fan_in + i] * x[i]).sum::<f64>())
        .collect()
}

fn conv3x3(x: &[f64], h: usize, w: usize, cin: usize, k: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            for o in 0..cout {
                let mut acc = b[o];
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let iy = y as i64 + ky - 1;
                        let ix = xx as i64 + kx - 1;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for c in 0..cin {
                            let kv = k[((o * 3 + ky as usize) * 3 + kx as usize) * cin + c];
                            acc += kv * x[((iy as usize) * w + ix as usize) * cin + c];
                        }
                    }
                }
                out[(y * w + xx) * cout + o] = acc;
            }
        }
    }
    out
}

/// Activation pattern of one evaluation: ReLU signs and pool winners. A
/// central difference is only meaningful when both stencil points share it.
pub type Pattern = Vec<u32>;

fn relu(v: Vec<f64>, pattern: &mut Pattern) -> Vec<f64> {
    pattern.extend(v.iter().map(|&z| u32::from(z > 0.0)));
    v.into_iter().map(|z| z.max(0.0)).collect()
}

pub fn logits(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    logits_with_pattern(spec, params, x).0
}

pub fn logits_with_pattern(spec: &ModelSpec, params: &[f64], x: &[f64]) -> (Vec<f64>, Pattern) {
    let mut pattern = Pattern::new();
    let mut offset = 0;
    let mut take = |n: usize| {
        let s = &params[offset..offset + n];
        offset += n;
        s.to_vec()
    };
    match spec.kind {
        ModelKind::Mlp => {
            let mut a = x.to_vec();
            let mut widths = spec.widths.clone();
            widths.push(spec.num_classes);
            let last = widths.len() - 1;
            for (l, &out) in widths.iter().enumerate() {
                let w = take(out * a.len());
                let b = take(out);
                let z = dense(&a, &w, &b, out);
                a = if l == last { z } else { relu(z, &mut pattern) };
            }
            (a, pattern)
        }
        ModelKind::SmallCnn => {
            let [h, w, c] = spec.input_shape;
            let (c1, c2) = (spec.widths[0], spec.widths[1]);
            let k1 = take(c1 * 9 * c);
            let b1 = take(c1);
            let k2 = take(c2 * 9 * c1);
            let b2 = take(c2);
            let a1 = relu(conv3x3(x, h, w, c, &k1, &b1, c1), &mut pattern);
            let a2 = relu(conv3x3(&a1, h, w, c1, &k2, &b2, c2), &mut pattern);
            let (ph, pw) = (h / 2, w / 2);
            let mut pooled = vec![0.0; ph * pw * c2];
            for py in 0..ph {
                for px in 0..pw {
                    for ch in 0..c2 {
                        let mut m = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = a2[((2 * py + dy) * w + 2 * px + dx) * c2 + ch];
                                if v > m {
                                    m = v;
                                    arg = dy * 2 + dx;
                                }
                            }
                        }
                        pattern.push(arg as u32);
                        pooled[(py * pw + px) * c2 + ch] = m;
                    }
                }
            }
            let wf = take(spec.num_classes * pooled.len());
            let bf = take(spec.num_classes);
            (dense(&pooled, &wf, &bf, spec.num_classes), pattern)
        }
    }
}

pub fn xent(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// Mean cross-entropy over samples given as flat rows, plus the
/// concatenated activation pattern.
pub fn mean_loss(spec: &ModelSpec, params: &[f64], xs: &[Vec<f64>], ys: &[usize]) -> (f64, Pattern) {
    let mut total = 0.0;
    let mut pattern = Pattern::new();
    for (x, &y) in xs.iter().zip(ys) {
        let (l, p) = logits_with_pattern(spec, params, x);
        total += xent(&l, y);
        pattern.extend(p);
    }
    (total / xs.len() as f64, pattern)
}

pub fn params_f64(model: &Model) -> Vec<f64> {
    model.params().iter().map(|&v| f64::from(v)).collect()
}

/// Central difference of the mean loss with respect to parameter `i`, or
/// `None` when the stencil straddles a ReLU/max-pool kink.
pub fn fd_param(spec: &ModelSpec, params: &[f64], xs: &[Vec<f64>], ys: &[usize], i: usize, h: f64) -> Option<f64> {
    let mut p = params.to_vec();
    p[i] = params[i] + h;
    let (up, pu) = mean_loss(spec, &p, xs, ys);
    p[i] = params[i] - h;
    let (down, pd) = mean_loss(spec, &p, xs, ys);
    (pu == pd).then(|| (up - down) / (2.0 * h))
}

/// Central difference of one sample's loss with respect to pixel `j`, or
/// `None` when the stencil straddles a kink.
pub fn fd_input(spec: &ModelSpec, params: &[f64], x: &[f64], y: usize, j: usize, h: f64) -> Option<f64> {
    let mut v = x.to_vec();
    v[j] = x[j] + h;
    let (lu, pu) = logits_with_pattern(spec, params, &v);
    v[j] = x[j] - h;
    let (ld, pd) = logits_with_pattern(spec, params, &v);
    (pu == pd).then(|| (xent(&lu, y) - xent(&ld, y)) / (2.0 * h))
}

/// Draws indices until `count` smooth stencils have been checked; returns the
/// worst relative error and the number of redraws.
pub fn worst_error<R: FnMut() -> usize>(
    count: usize,
    mut draw: R,
    analytic: impl Fn(usize) -> f64,
    oracle: impl Fn(usize) -> Option<f64>,
) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut redraws = 0;
    while checked < count {
        let i = draw();
        match oracle(i) {
            Some(fd) => {
                worst = worst.max(rel_err(analytic(i), fd));
                checked += 1;
            }
            None => {
                redraws += 1;
                assert!(redraws < 10 * count, "too many non-smooth stencils");
            }
        }
    }
    (worst, redraws)
}

pub fn rel_err(analytic: f64, oracle: f64) -> f64 {
    (analytic - oracle).abs() / analytic.abs().max(1e-6)
}
