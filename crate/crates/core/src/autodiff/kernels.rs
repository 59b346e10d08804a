//! Raw numeric kernels shared by the forward and backward passes.

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                y[at(j)] /= total;
            }
        }
    }
    y
}

/// `dx = y ⊙ (g − Σ_axis g⊙y)`.
pub(crate) fn softmax_backward(
    y: &[f64],
    g: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    dx
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Geometry of a zero-padded square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out,
            w_out,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1×1 stride-1 convolution reads the input directly as its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// Unfolds `input[c_in×h×w]` into a `(c_in·k·k) × (h_out·w_out)` matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &input[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut out[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Two-tap linear interpolation weights for one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

/// Half-pixel-centre sampling: `src = (dst + 0.5)·(in/out) − 0.5`, clamped to
/// `[0, in − 1]`.
pub(crate) fn interp_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub(crate) struct UpsamplePlan {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub rows: Vec<Tap>,
    pub cols: Vec<Tap>,
}

impl UpsamplePlan {
    pub fn new(channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            channels,
            h,
            w,
            rows: interp_taps(h, out_h),
            cols: interp_taps(w, out_w),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut out = vec![0.0; self.channels * oh * ow];
        for c in 0..self.channels {
            let src = &x[c * self.h * self.w..][..self.h * self.w];
            let dst = &mut out[c * oh * ow..][..oh * ow];
            for (oy, r) in self.rows.iter().enumerate() {
                let top = &src[r.lo * self.w..][..self.w];
                let bot = &src[r.hi * self.w..][..self.w];
                for (ox, t) in self.cols.iter().enumerate() {
                    let upper = t.w_lo * top[t.lo] + t.w_hi * top[t.hi];
                    let lower = t.w_lo * bot[t.lo] + t.w_hi * bot[t.hi];
                    dst[oy * ow + ox] = r.w_lo * upper + r.w_hi * lower;
                }
            }
        }
        out
    }

    pub fn backward(&self, g: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.rows.len(), self.cols.len());
        let mut dx = vec![0.0; self.channels * self.h * self.w];
        for c in 0..self.channels {
            let src = &g[c * oh * ow..][..oh * ow];
            let dst = &mut dx[c * self.h * self.w..][..self.h * self.w];
            for (oy, r) in self.rows.iter().enumerate() {
                for (ox, t) in self.cols.iter().enumerate() {
                    let v = src[oy * ow + ox];
                    dst[r.lo * self.w + t.lo] += v * r.w_lo * t.w_lo;
                    dst[r.lo * self.w + t.hi] += v * r.w_lo * t.w_hi;
                    dst[r.hi * self.w + t.lo] += v * r.w_hi * t.w_lo;
                    dst[r.hi * self.w + t.hi] += v * r.w_hi * t.w_hi;
                }
            }
        }
        dx
    }
}

/// Normalizes `x` in groups of `len` contiguous values. Returns
/// `(x_hat, 1/σ per group)`.
pub(crate) fn normalize_groups(x: &[f64], len: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let groups = x.len() / len;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(groups);
    for gi in 0..groups {
        let row = &x[gi * len..(gi + 1) * len];
        let mean = row.iter().sum::<f64>() / len as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (dst, v) in xhat[gi * len..(gi + 1) * len].iter_mut().zip(row) {
            *dst = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Given `dxhat` per group, returns `dx` for the normalization step.
pub(crate) fn normalize_groups_backward(
    xhat: &[f64],
    rstd: &[f64],
    dxhat: &[f64],
    len: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; xhat.len()];
    let n = len as f64;
    for (gi, r) in rstd.iter().enumerate() {
        let range = gi * len..(gi + 1) * len;
        let xh = &xhat[range.clone()];
        let dh = &dxhat[range.clone()];
        let mean_dh = dh.iter().sum::<f64>() / n;
        let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((dst, a), b) in dx[range].iter_mut().zip(dh).zip(xh) {
            *dst = r * (a - mean_dh - b * mean_dh_xh);
        }
    }
    dx
}
