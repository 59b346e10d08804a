//! Straight-line reference implementations used to cross-check the tape ops,
//! the attention blocks, the losses and the metrics. Everything here is plain
//! loops over row-major `f64` slices and shares no code with the fast paths.

use crate::metrics::ClassMask;
use crate::tensor::Tensor;

/// `a[m×k] · b[k×n]` by triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    assert_eq!(b.shape()[0], k, "inner dims");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out).expect("shape")
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    Tensor::from_fn(&[n, m], |i| a.at(&[i % m, i / m]))
}

/// `exp(x_i) / Σ exp(x_j)`, computed directly.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        out.extend(softmax(&x.data()[r * n..(r + 1) * n]));
    }
    Tensor::new(&[m, n], out).expect("shape")
}

/// Softmax over the leading (class) axis of `[Z×…]`.
pub fn softmax_classes(x: &Tensor) -> Tensor {
    let z = x.shape()[0];
    let plane = x.len() / z;
    let mut out = vec![0.0; x.len()];
    for p in 0..plane {
        let col: Vec<f64> = (0..z).map(|c| x.data()[c * plane + p]).collect();
        for (c, v) in softmax(&col).into_iter().enumerate() {
            out[c * plane + p] = v;
        }
    }
    Tensor::new(x.shape(), out).expect("shape")
}

/// Zero-padded (`k/2`) strided cross-correlation, `input[C×H×W]`,
/// `weight[O×C×k×k]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, k) = (weight.shape()[0], weight.shape()[2]);
    let pad = (k / 2) as isize;
    let h_out = (h + 2 * (k / 2) - k) / stride + 1;
    let w_out = (w + 2 * (k / 2) - k) / stride + 1;
    let mut out = vec![0.0; c_out * h_out * w_out];
    for o in 0..c_out {
        for y in 0..h_out {
            for x in 0..w_out {
                let mut s = bias.map_or(0.0, |b| b.data()[o]);
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad;
                            let ix = (x * stride + kx) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += weight.at(&[o, c, ky, kx])
                                * input.at(&[c, iy as usize, ix as usize]);
                        }
                    }
                }
                out[(o * h_out + y) * w_out + x] = s;
            }
        }
    }
    Tensor::new(&[c_out, h_out, w_out], out).expect("shape")
}

/// Source coordinate of output index `dst` under half-pixel-centre sampling,
/// clamped into the input.
pub fn source_coord(dst: usize, input: usize, output: usize) -> f64 {
    let s = (dst as f64 + 0.5) * input as f64 / output as f64 - 0.5;
    s.max(0.0).min((input - 1) as f64)
}

/// Bilinear resize of `[C×h×w]` by evaluating the sampling formula per pixel.
pub fn bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for oy in 0..out_h {
            let sy = source_coord(oy, h, out_h);
            let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
            let y1 = (y0 + 1).min(h - 1);
            for ox in 0..out_w {
                let sx = source_coord(ox, w, out_w);
                let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
                let x1 = (x0 + 1).min(w - 1);
                let v = (1.0 - fy) * (1.0 - fx) * x.at(&[ch, y0, x0])
                    + (1.0 - fy) * fx * x.at(&[ch, y0, x1])
                    + fy * (1.0 - fx) * x.at(&[ch, y1, x0])
                    + fy * fx * x.at(&[ch, y1, x1]);
                out[(ch * out_h + oy) * out_w + ox] = v;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("shape")
}

/// Two-pass mean and (population) variance.
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Row-wise layer normalization of a 2-D tensor.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; m * d];
    for r in 0..m {
        let row = &x.data()[r * d..(r + 1) * d];
        let (mean, var) = mean_var(row);
        for j in 0..d {
            out[r * d + j] =
                (row[j] - mean) / (var + eps).sqrt() * gamma.data()[j] + beta.data()[j];
        }
    }
    Tensor::new(&[m, d], out).expect("shape")
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn add_row_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let n = x.shape()[1];
    Tensor::from_fn(x.shape(), |i| x.data()[i] + b.data()[i % n])
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
}

/// Single-head attention with explicit `q`, `k`, `v`: returns `(out, logits)`.
pub fn cross_attention(
    query: &Tensor,
    tokens: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    d_model: usize,
) -> (Tensor, Tensor) {
    let q = matmul(query, w_q);
    let k = matmul(tokens, w_k);
    let v = matmul(tokens, w_v);
    let (z, s, dh) = (q.shape()[0], k.shape()[0], q.shape()[1]);
    let scale = (d_model as f64).sqrt();
    let mut logits = vec![0.0; z * s];
    for i in 0..z {
        for j in 0..s {
            let mut dot = 0.0;
            for p in 0..dh {
                dot += q.at(&[i, p]) * k.at(&[j, p]);
            }
            logits[i * s + j] = dot / scale;
        }
    }
    let logits = Tensor::new(&[z, s], logits).expect("shape");
    let attn = softmax_rows(&logits);
    (matmul(&attn, &v), logits)
}

/// Weights of one attention head.
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// Heads run separately, outputs concatenated column-wise, then `·W_O`.
pub fn multi_head(
    query: &Tensor,
    tokens: &Tensor,
    heads: &[HeadWeights],
    w_o: &Tensor,
) -> (Tensor, Vec<Tensor>) {
    let d = query.shape()[1];
    let z = query.shape()[0];
    let mut cat = vec![0.0; z * d];
    let mut logits = Vec::new();
    let mut col = 0;
    for h in heads {
        let (o, l) = cross_attention(query, tokens, &h.w_q, &h.w_k, &h.w_v, d);
        let dh = o.shape()[1];
        for i in 0..z {
            for j in 0..dh {
                cat[i * d + col + j] = o.at(&[i, j]);
            }
        }
        col += dh;
        logits.push(l);
    }
    let cat = Tensor::new(&[z, d], cat).expect("shape");
    (matmul(&cat, w_o), logits)
}

/// Elementwise mean of equally shaped tensors.
pub fn mean_of(ts: &[Tensor]) -> Tensor {
    let n = ts.len() as f64;
    Tensor::from_fn(ts[0].shape(), |i| {
        ts.iter().map(|t| t.data()[i]).sum::<f64>() / n
    })
}

/// All weights of one proxy-update block.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub norm_q: (Tensor, Tensor),
    pub norm_t: (Tensor, Tensor),
    pub heads: Vec<HeadWeights>,
    pub w_o: Tensor,
    pub norm_mlp: (Tensor, Tensor),
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub reduce: Option<(Tensor, Tensor)>,
}

/// Proxy update composed step by step; returns `(updated, next, head logits)`.
pub fn proxy_update(
    proxy: &Tensor,
    tokens: &Tensor,
    wts: &BlockWeights,
    eps: f64,
) -> (Tensor, Tensor, Vec<Tensor>) {
    let qn = layer_norm(proxy, &wts.norm_q.0, &wts.norm_q.1, eps);
    let tn = layer_norm(tokens, &wts.norm_t.0, &wts.norm_t.1, eps);
    let (attended, logits) = multi_head(&qn, &tn, &wts.heads, &wts.w_o);
    let q_hat = add(&attended, proxy);
    let hn = layer_norm(&q_hat, &wts.norm_mlp.0, &wts.norm_mlp.1, eps);
    let hidden = add_row_bias(&matmul(&hn, &wts.w1), &wts.b1).map(gelu);
    let mlp = add_row_bias(&matmul(&hidden, &wts.w2), &wts.b2);
    let updated = add(&mlp, &q_hat);
    let next = match &wts.reduce {
        Some((w, b)) => add_row_bias(&matmul(&updated, w), b),
        None => updated.clone(),
    };
    (updated, next, logits)
}

/// `mean_c 1 − (2Σpt + ε)/(Σp + Σt + ε)`.
pub fn soft_dice(probs: &Tensor, target: &Tensor, eps: f64) -> f64 {
    let z = probs.shape()[0];
    let plane = probs.len() / z;
    let mut loss = 0.0;
    for c in 0..z {
        let (mut i, mut sp, mut st) = (0.0, 0.0, 0.0);
        for p in 0..plane {
            let (a, b) = (probs.data()[c * plane + p], target.data()[c * plane + p]);
            i += a * b;
            sp += a;
            st += b;
        }
        loss += 1.0 - (2.0 * i + eps) / (sp + st + eps);
    }
    loss / z as f64
}

/// Pixel-mean `log Σ exp(x) − x[target]`.
pub fn cross_entropy(logits: &Tensor, targets: &[u8]) -> f64 {
    let z = logits.shape()[0];
    let plane = logits.len() / z;
    let mut total = 0.0;
    for (p, &t) in targets.iter().enumerate() {
        let lse = (0..z)
            .map(|c| logits.data()[c * plane + p].exp())
            .sum::<f64>()
            .ln();
        total += lse - logits.data()[t as usize * plane + p];
    }
    total / plane as f64
}

pub fn mean_squared_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// DSC by direct counting.
pub fn dsc(pred: &ClassMask, gt: &ClassMask) -> f64 {
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

fn boundary(m: &ClassMask) -> Vec<(i64, i64)> {
    let on = |y: i64, x: i64| {
        y >= 0
            && x >= 0
            && y < m.h as i64
            && x < m.w as i64
            && m.data[y as usize * m.w + x as usize]
    };
    let mut out = Vec::new();
    for y in 0..m.h as i64 {
        for x in 0..m.w as i64 {
            if on(y, x)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dy, dx)| !on(y + dy, x + dx))
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// HD95 from all pairwise boundary distances.
pub fn hd95(pred: &ClassMask, gt: &ClassMask) -> f64 {
    let (bp, bg) = (boundary(pred), boundary(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => {
            let (a, b) = ((pred.h - 1) as f64, (pred.w - 1) as f64);
            return (a * a + b * b).sqrt();
        }
        _ => {}
    }
    let nearest = |from: &[(i64, i64)], to: &[(i64, i64)]| -> Vec<i64> {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| (y - v).pow(2) + (x - u).pow(2))
                    .min()
                    .expect("non-empty")
            })
            .collect()
    };
    let mut all = nearest(&bp, &bg);
    all.extend(nearest(&bg, &bp));
    all.sort_unstable();
    let rank = (all.len() * 95).div_ceil(100);
    (all[rank - 1] as f64).sqrt()
}

/// Boundary size, exposed so fuzzers can filter mask families.
pub fn boundary_len(m: &ClassMask) -> usize {
    boundary(m).len()
}
