//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends one node to the [`Tape`]. Nodes are
//! addressed by [`Var`] handles. [`Tape::backward`] walks the tape once in
//! reverse execution order and returns the gradients as a separate
//! [`Gradients`] value, so the same tape can be differentiated from several
//! roots.

mod kernels;
mod ops;

pub use ops::{CustomBackward, LN_EPS};

pub(crate) use kernels::ConvGeom;

use crate::error::{IclError, Result};
use crate::linalg::{gemm, Layout};
use crate::tensor::Tensor;
use kernels::UpsamplePlan;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    AddRowBias(Var, Var),
    ConcatCols(Vec<Var>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Upsample {
        x: Var,
        plan: UpsamplePlan,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: f64,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<u8>,
    },
    SoftDice {
        probs: Var,
        target: Var,
        inter: Vec<f64>,
        denom: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Values produced by `detach`, in call order.
    detached: Vec<Tensor>,
    /// When set, the k-th `detach` returns `replay[k]` instead of the
    /// current value of its input.
    replay: Option<Vec<Tensor>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when no gradient reached it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// Number of recorded operations whose backward rule ran.
    pub fn ops_visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Stop-gradient copy of `var`. Nothing upstream of `var` receives
    /// gradient through the returned handle.
    pub fn detach(&mut self, var: Var) -> Var {
        let k = self.detached.len();
        let value = match &self.replay {
            Some(r) if r.get(k).is_some_and(|t| t.shape() == self.shape(var)) => r[k].clone(),
            _ => self.nodes[var.0].value.clone(),
        };
        self.detached.push(value.clone());
        self.constant(value)
    }

    /// Tape whose `detach` calls return the given values in order, so a
    /// function can be re-evaluated with its stop-gradient inputs frozen.
    pub fn replaying(detached: Vec<Tensor>) -> Self {
        Self {
            replay: Some(detached),
            ..Self::default()
        }
    }

    /// Values produced by `detach` so far, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, requires_grad, op)
    }

    /// Backpropagates from the one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(IclError::Argument(format!(
                "backward root must hold one element, has shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !matches!(node.op, Op::Leaf) {
                visited += 1;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape(), data).expect("grad matches shape")
                })
            })
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        var: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let len = self.nodes[var.0].value.len();
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn val(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Transpose(a) => {
                let shape = self.shape(*a);
                let (r, c) = (shape[0], shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.val(*a), self.val(*b));
                self.accumulate_with(grads, *a, |da| {
                    gemm(m, n, k, g, Layout::Normal, bv, Layout::Transposed, da, true)
                });
                self.accumulate_with(grads, *b, |db| {
                    gemm(k, m, n, av, Layout::Transposed, g, Layout::Normal, db, true)
                });
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(self.val(*a))
                    .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = g
                    .iter()
                    .zip(self.val(*a))
                    .map(|(gi, x)| gi * kernels::gelu_grad(*x))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax { x, axis } => {
                let (o, l, i) = kernels::axis_split(self.shape(*x), *axis);
                self.accumulate(grads, *x, kernels::softmax_backward(out, g, o, l, i));
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                let n = self.val(*b).len();
                self.accumulate_with(grads, *b, |db| {
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    self.accumulate_with(grads, *p, |dp| {
                        for r in 0..rows {
                            for c in 0..w {
                                dp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let c_out = self.shape(*weight)[0];
                let p = geom.positions();
                let kk = geom.patch_len();
                let cols: &[f64] = match cols {
                    Some(c) => c,
                    None => self.val(*input),
                };
                self.accumulate_with(grads, *weight, |dw| {
                    gemm(
                        c_out,
                        p,
                        kk,
                        g,
                        Layout::Normal,
                        cols,
                        Layout::Transposed,
                        dw,
                        true,
                    )
                });
                if let Some(b) = bias {
                    self.accumulate_with(grads, *b, |db| {
                        for (d, row) in db.iter_mut().zip(g.chunks(p)) {
                            *d += row.iter().sum::<f64>();
                        }
                    });
                }
                if self.requires_grad(*input) {
                    let wv = self.val(*weight);
                    let mut dcols = vec![0.0; kk * p];
                    gemm(
                        kk,
                        c_out,
                        p,
                        wv,
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        &mut dcols,
                        false,
                    );
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        kernels::col2im(&dcols, geom)
                    };
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::Upsample { x, plan } => self.accumulate(grads, *x, plan.backward(g)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.val(*gamma).len();
                let gv = self.val(*gamma);
                self.accumulate_with(grads, *gamma, |dg| {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                });
                self.accumulate_with(grads, *beta, |db| {
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                });
                if self.requires_grad(*x) {
                    let dxhat: Vec<f64> =
                        g.iter().enumerate().map(|(i, gi)| gi * gv[i % d]).collect();
                    self.accumulate(
                        grads,
                        *x,
                        kernels::normalize_groups_backward(xhat, rstd, &dxhat, d),
                    );
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.val(*gamma).len();
                let plane = xhat.len() / c;
                let gv = self.val(*gamma);
                self.accumulate_with(grads, *gamma, |dg| {
                    for (d, (gc, xc)) in dg.iter_mut().zip(g.chunks(plane).zip(xhat.chunks(plane)))
                    {
                        *d += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                self.accumulate_with(grads, *beta, |db| {
                    for ch in 0..c {
                        db[ch] += g[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                    }
                });
                if self.requires_grad(*x) {
                    let dxhat: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * gv[i / plane])
                        .collect();
                    self.accumulate(
                        grads,
                        *x,
                        kernels::normalize_groups_backward(xhat, &[*rstd], &dxhat, xhat.len()),
                    );
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let pixels = targets.len();
                let scale = g[0] / pixels as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (px, &t) in targets.iter().enumerate() {
                    d[t as usize * pixels + px] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::SoftDice {
                probs,
                target,
                inter,
                denom,
            } => {
                let z = inter.len();
                let plane = self.val(*probs).len() / z;
                let scale = g[0] / z as f64;
                // loss_c = 1 − (2I + ε)/S, with S = ΣP + ΣT + ε.
                let partial = |other: &[f64]| -> Vec<f64> {
                    let mut d = vec![0.0; other.len()];
                    for c in 0..z {
                        let (num, s) = (2.0 * inter[c] + ops::DICE_EPS, denom[c]);
                        for i in c * plane..(c + 1) * plane {
                            d[i] = -scale * (2.0 * other[i] * s - num) / (s * s);
                        }
                    }
                    d
                };
                if self.requires_grad(*probs) {
                    self.accumulate(grads, *probs, partial(self.val(*target)));
                }
                if self.requires_grad(*target) {
                    self.accumulate(grads, *target, partial(self.val(*probs)));
                }
            }
            Op::Custom { inputs, backward } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let contributions = backward(&gt, &ins, &node.value);
                for (v, c) in inputs.iter().zip(contributions) {
                    self.accumulate(grads, *v, c.into_data());
                }
            }
        }
    }
}
