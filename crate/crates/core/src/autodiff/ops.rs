use super::kernels::{self, ConvGeom, UpsamplePlan};
use super::{Op, Tape, Var};
use crate::error::{dim_err, IclError, Result};
use crate::linalg::{gemm, Layout};
use crate::tensor::Tensor;

/// Variance floor of the normalization layers.
pub const LN_EPS: f64 = 1e-5;

pub(crate) const DICE_EPS: f64 = 1e-5;

/// Backward rule of a user-defined op: `(grad_out, inputs, output) -> grad per input`.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + Send + Sync>;

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!(
                    "operands have shapes {:?} and {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.record(v, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.record(v, &[a, b], Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.record(v, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.record(v, &[a], Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.record(v, &[a], Op::AddScalar(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.record(v, &[a], Op::Reshape(a)))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(dim_err("transpose", format!("expected 2-D, got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        let x = self.val(a);
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = x[i * c + j];
            }
        }
        let v = Tensor::new(&[c, r], d)?;
        Ok(self.record(v, &[a], Op::Transpose(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut d = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.val(a),
            Layout::Normal,
            self.val(b),
            Layout::Normal,
            &mut d,
            false,
        );
        let v = Tensor::new(&[m, n], d)?;
        Ok(self.record(v, &[a, b], Op::MatMul(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.record(v, &[a], Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::gelu);
        self.record(v, &[a], Op::Gelu(a))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(IclError::Argument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (o, l, i) = kernels::axis_split(&shape, axis);
        let v = Tensor::new(&shape, kernels::softmax_forward(self.val(x), o, l, i))?;
        Ok(self.record(v, &[x], Op::Softmax { x, axis }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let v = Tensor::scalar(self.value(a).sum() / n);
        self.record(v, &[a], Op::Mean(a))
    }

    /// Arithmetic mean of same-shaped tensors.
    pub fn average(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| IclError::Argument("average of zero tensors".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, 1.0 / vars.len() as f64))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(dim_err(
                "add_row_bias",
                format!("bias {sb:?} does not match rows of {sx:?}"),
            ));
        }
        let n = sx[1];
        let b = self.val(bias).to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (r, bi) in row.iter_mut().zip(&b) {
                *r += bi;
            }
        }
        Ok(self.record(v, &[x, bias], Op::AddRowBias(x, bias)))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(IclError::Argument("concat of zero tensors".into()));
        };
        let rows = self.shape(first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(dim_err(
                    "concat_cols",
                    format!("part {s:?} does not have {rows} rows"),
                ));
            }
            total += s[1];
        }
        let mut d = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let w = self.shape(p)[1];
            let src = self.val(p);
            for r in 0..rows {
                d[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let v = Tensor::new(&[rows, total], d)?;
        Ok(self.record(v, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Zero-padded cross-correlation of `input[c_in×h×w]` with
    /// `weight[c_out×c_in×k×k]`, padding `k/2`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 3 || sw.len() != 4 {
            return Err(dim_err(
                "conv2d",
                format!("expected input c×h×w and weight o×i×k×k, got {si:?} and {sw:?}"),
            ));
        }
        if sw[1] != si[0] {
            return Err(dim_err(
                "conv2d",
                format!(
                    "weight expects {} input channels, input {si:?} has {}",
                    sw[1], si[0]
                ),
            ));
        }
        let k = sw[2];
        if sw[3] != k || k % 2 == 0 || stride == 0 {
            return Err(IclError::Argument(format!(
                "conv2d needs an odd square kernel and positive stride, got {sw:?} stride {stride}"
            )));
        }
        let c_out = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(dim_err(
                    "conv2d",
                    format!(
                        "bias {:?} does not match {c_out} output channels",
                        self.shape(b)
                    ),
                ));
            }
        }
        let geom = ConvGeom::new(si[0], si[1], si[2], k, stride);
        let cols = (!geom.is_pointwise()).then(|| kernels::im2col(self.val(input), &geom));
        let p = geom.positions();
        let mut out = vec![0.0; c_out * p];
        {
            let colref: &[f64] = cols.as_deref().unwrap_or_else(|| self.val(input));
            gemm(
                c_out,
                geom.patch_len(),
                p,
                self.val(weight),
                Layout::Normal,
                colref,
                Layout::Normal,
                &mut out,
                false,
            );
        }
        if let Some(b) = bias {
            for (row, bi) in out.chunks_mut(p).zip(self.val(b)) {
                row.iter_mut().for_each(|x| *x += bi);
            }
        }
        let v = Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.record(
            v,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Bilinear resize of `x[c×h×w]` with half-pixel centres (align-corners off).
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err(
                "bilinear_upsample",
                format!("expected c×h×w, got {s:?}"),
            ));
        }
        if out_h == 0 || out_w == 0 {
            return Err(IclError::Argument(
                "upsample output size must be positive".into(),
            ));
        }
        if out_h < s[1] || out_w < s[2] {
            return Err(IclError::Argument(format!(
                "upsample target {out_h}×{out_w} smaller than input {}×{}",
                s[1], s[2]
            )));
        }
        let plan = UpsamplePlan::new(s[0], s[1], s[2], out_h, out_w);
        let v = Tensor::new(&[s[0], out_h, out_w], plan.forward(self.val(x)))?;
        Ok(self.record(v, &[x], Op::Upsample { x, plan }))
    }

    /// Normalizes each row over the last dimension, then applies
    /// `gamma[d]`, `beta[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} do not match last dim {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (xhat, rstd) = kernels::normalize_groups(self.val(x), d, LN_EPS);
        let (gv, bv) = (self.val(gamma), self.val(beta));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| xh * gv[i % d] + bv[i % d])
            .collect();
        let v = Tensor::new(&s, out)?;
        Ok(self.record(
            v,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Single-group normalization of `x[c×h×w]` over all its entries, with
    /// per-channel `gamma[c]`, `beta[c]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(gamma) != [s[0]] || self.shape(beta) != [s[0]] {
            return Err(dim_err(
                "group_norm",
                format!("input {s:?} with affine {:?}", self.shape(gamma)),
            ));
        }
        let n = self.val(x).len();
        let plane = n / s[0];
        let (xhat, rstd) = kernels::normalize_groups(self.val(x), n, LN_EPS);
        let (gv, bv) = (self.val(gamma), self.val(beta));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| xh * gv[i / plane] + bv[i / plane])
            .collect();
        let v = Tensor::new(&s, out)?;
        Ok(self.record(
            v,
            &[x, gamma, beta],
            Op::GroupNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd: rstd[0],
            },
        ))
    }

    /// Mean over pixels of `−log softmax(logits)[target]`, class axis first.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let z = s[0];
        let pixels: usize = s[1..].iter().product();
        if s.len() < 2 || targets.len() != pixels {
            return Err(dim_err(
                "cross_entropy",
                format!("logits {s:?} against {} targets", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t as usize >= z) {
            return Err(IclError::Data(format!(
                "target class {bad} outside [0, {z})"
            )));
        }
        let probs = kernels::softmax_forward(self.val(logits), 1, z, pixels);
        let x = self.val(logits);
        let mut total = 0.0;
        for (px, &t) in targets.iter().enumerate() {
            let max = (0..z)
                .map(|c| x[c * pixels + px])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..z)
                    .map(|c| (x[c * pixels + px] - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - x[t as usize * pixels + px];
        }
        let v = Tensor::scalar(total / pixels as f64);
        Ok(self.record(
            v,
            &[logits],
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Class-mean soft Dice loss `mean_c 1 − (2Σpt + ε)/(Σp + Σt + ε)` over
    /// `[Z×…]` maps. Both operands may carry gradient.
    pub fn soft_dice(&mut self, probs: Var, target: Var) -> Result<Var> {
        self.same_shape("soft_dice", probs, target)?;
        let z = self.shape(probs)[0];
        let plane = self.val(probs).len() / z;
        let (p, t) = (self.val(probs), self.val(target));
        let mut inter = Vec::with_capacity(z);
        let mut denom = Vec::with_capacity(z);
        let mut loss = 0.0;
        for c in 0..z {
            let r = c * plane..(c + 1) * plane;
            let i: f64 = p[r.clone()]
                .iter()
                .zip(&t[r.clone()])
                .map(|(a, b)| a * b)
                .sum();
            let s = p[r.clone()].iter().sum::<f64>() + t[r].iter().sum::<f64>() + DICE_EPS;
            loss += 1.0 - (2.0 * i + DICE_EPS) / s;
            inter.push(i);
            denom.push(s);
        }
        let v = Tensor::scalar(loss / z as f64);
        Ok(self.record(
            v,
            &[probs, target],
            Op::SoftDice {
                probs,
                target,
                inter,
                denom,
            },
        ))
    }

    /// Records an op with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.record(
            value,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }
}
