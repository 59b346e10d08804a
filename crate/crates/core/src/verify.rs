//! Self-check suite: forward ops, attention and losses against the loop
//! oracles, finite-difference gradient checks, stop-gradient probes, metric
//! fuzzing and trainer/checkpoint plumbing. Each group yields named checks
//! with a pass/fail verdict.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cross_attention, extract_attention_map, MapReader, MultiHeadCrossAttention, ProxyBlock, Stream,
    Tokens,
};
use crate::autodiff::{Tape, Var, LN_EPS};
use crate::backbone::{tokenize, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{decode_sample, encode_sample, generate_sample, rng_for, Batch, PhantomConfig};
use crate::error::{IclError, Result};
use crate::gradcheck::{grad_check, grad_check_at};
use crate::heads::SegHead;
use crate::losses::{self, LossTerms, LossWeights};
use crate::metrics::{dsc, evaluate_volume, hd95, ClassMask};
use crate::model::{IclModel, TrainMode};
use crate::oracle;
use crate::params::{Bindings, ParamStore};
use crate::tensor::{LabelMap, Tensor};
use crate::trainer::{poly_lr, train_step_with_lr, TrainConfig, TrainState};

/// Knobs of a suite run.
#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    /// Random seeds per gradient case.
    pub grad_seeds: u64,
    /// Mask pairs drawn by the metric fuzzer.
    pub metric_pairs: usize,
    /// Test fixture: replace softmax with a copy whose backward has its sign
    /// flipped. The gradient group must then fail.
    pub flip_softmax_backward: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            grad_seeds: 20,
            metric_pairs: 600,
            flip_softmax_backward: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub const GROUPS: [&str; 8] = [
    "ops",
    "gradients",
    "attention",
    "detach",
    "losses",
    "metrics",
    "trainer",
    "data",
];

pub fn run_group(name: &str, opts: &SuiteOptions) -> Result<GroupReport> {
    let start = Instant::now();
    let (name, checks) = match name {
        "ops" => ("ops", ops_group()?),
        "gradients" => ("gradients", gradient_group(opts)?),
        "attention" => ("attention", attention_group()?),
        "detach" => ("detach", detach_group()?),
        "losses" => ("losses", loss_group()?),
        "metrics" => ("metrics", metric_group(opts)?),
        "trainer" => ("trainer", trainer_group()?),
        "data" => ("data", data_group()?),
        other => return Err(IclError::Argument(format!("unknown check group {other}"))),
    };
    Ok(GroupReport {
        name,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all(opts: &SuiteOptions) -> Result<Vec<GroupReport>> {
    GROUPS.iter().map(|g| run_group(g, opts)).collect()
}

fn within(name: impl Into<String>, err: f64, tol: f64) -> Check {
    Check {
        name: name.into(),
        passed: err.is_finite() && err <= tol,
        detail: format!("error {err:.3e}, tolerance {tol:.0e}"),
    }
}

fn holds(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed: ok,
        detail: detail.into(),
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> LabelMap {
    LabelMap::new(
        h,
        w,
        (0..h * w)
            .map(|_| rng.gen_range(0..classes) as u8)
            .collect(),
    )
    .expect("sizes match")
}

// ---------------------------------------------------------------- ops

fn ops_group() -> Result<Vec<Check>> {
    let mut rng = rng_for(0x0905, 0);
    let mut out = Vec::new();

    let (a, b) = (rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 2]));
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let m = t.matmul(va, vb)?;
    out.push(within(
        "matmul 3×4·4×2",
        t.value(m).max_abs_diff(&oracle::matmul(&a, &b)),
        1e-12,
    ));

    let x = rand_t(&mut rng, &[1, 7]);
    let vx = t.constant(x.clone());
    let s = t.softmax(vx, 1)?;
    out.push(within(
        "softmax length 7",
        t.value(s).max_abs_diff(&oracle::softmax_rows(&x)),
        1e-12,
    ));

    let (inp, w, bias) = (
        rand_t(&mut rng, &[2, 5, 5]),
        rand_t(&mut rng, &[3, 2, 3, 3]),
        rand_t(&mut rng, &[3]),
    );
    let (vi, vw, vbias) = (
        t.constant(inp.clone()),
        t.constant(w.clone()),
        t.constant(bias.clone()),
    );
    for stride in [1, 2] {
        let c = t.conv2d(vi, vw, Some(vbias), stride)?;
        let want = oracle::conv2d(&inp, &w, Some(&bias), stride);
        out.push(within(
            format!("conv2d 3×3 stride {stride}"),
            t.value(c).max_abs_diff(&want),
            1e-12,
        ));
    }
    let w1 = rand_t(&mut rng, &[4, 2, 1, 1]);
    let vw1 = t.constant(w1.clone());
    let c = t.conv2d(vi, vw1, None, 1)?;
    out.push(within(
        "conv2d 1×1",
        t.value(c).max_abs_diff(&oracle::conv2d(&inp, &w1, None, 1)),
        1e-12,
    ));

    let small = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0])?;
    let vs = t.constant(small.clone());
    let up = t.bilinear_upsample(vs, 4, 4)?;
    out.push(within(
        "bilinear 2×2→4×4",
        t.value(up).max_abs_diff(&oracle::bilinear(&small, 4, 4)),
        1e-12,
    ));
    let odd = rand_t(&mut rng, &[2, 3, 5]);
    let vo = t.constant(odd.clone());
    let up = t.bilinear_upsample(vo, 7, 11)?;
    out.push(within(
        "bilinear 3×5→7×11",
        t.value(up).max_abs_diff(&oracle::bilinear(&odd, 7, 11)),
        1e-12,
    ));

    let row = rand_t(&mut rng, &[1, 9]).map(|v| 3.0 * v + 1.0);
    let (g, be) = (Tensor::filled(&[9], 1.0), Tensor::zeros(&[9]));
    let (vr, vg, vbe) = (t.constant(row.clone()), t.constant(g), t.constant(be));
    let ln = t.layer_norm(vr, vg, vbe)?;
    let normed = t.value(ln).data();
    let (mean, var) = oracle::mean_var(normed);
    let (m0, v0) = oracle::mean_var(row.data());
    let expect_var = v0 / (v0 + LN_EPS);
    out.push(within("layer_norm output mean", mean.abs(), 1e-10));
    out.push(within(
        "layer_norm output variance",
        (var - expect_var).abs(),
        1e-10,
    ));
    let direct: f64 = normed
        .iter()
        .zip(row.data())
        .map(|(n, r)| (n - (r - m0) / (v0 + LN_EPS).sqrt()).abs())
        .fold(0.0, f64::max);
    out.push(within("layer_norm vs two-pass statistics", direct, 1e-10));
    Ok(out)
}

// ---------------------------------------------------------------- gradients

/// Softmax along `axis` as a custom op whose backward rule is negated.
fn flipped_softmax(tape: &mut Tape, x: Var, axis: usize) -> Result<Var> {
    let mut scratch = Tape::new();
    let c = scratch.constant(tape.value(x).clone());
    let y = scratch.softmax(c, axis)?;
    let value = scratch.value(y).clone();
    let shape = value.shape().to_vec();
    let backward = Box::new(move |g: &Tensor, _inputs: &[&Tensor], y: &Tensor| {
        let (outer, n, inner) = split(&shape, axis);
        let mut dx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let dot: f64 = (0..n).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                for k in 0..n {
                    dx[idx(k)] = -(y.data()[idx(k)] * (g.data()[idx(k)] - dot));
                }
            }
        }
        vec![Tensor::new(y.shape(), dx).expect("shape")]
    });
    Ok(tape.custom(&[x], value, backward))
}

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_op(tape: &mut Tape, x: Var, axis: usize, flip: bool) -> Result<Var> {
    if flip {
        flipped_softmax(tape, x, axis)
    } else {
        tape.softmax(x, axis)
    }
}

/// Grad-checks `Σ R ⊙ f(inputs)` for a fixed random `R`.
fn probe_check<F>(seed: u64, inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let out = f(&mut t, &vars)?;
    let weights = Tensor::uniform(t.shape(out), 1.0, &mut rng_for(seed, 0x9E));
    grad_check(
        |tape, v| {
            let o = f(tape, v)?;
            let r = tape.constant(weights.clone());
            let p = tape.mul(o, r)?;
            Ok(tape.sum(p))
        },
        inputs,
    )
}

/// Values pushed at least 0.1 away from zero, so ReLU kinks stay out of
/// finite-difference reach.
fn off_zero(t: Tensor) -> Tensor {
    t.map(|v| v.signum() * (0.1 + v.abs()))
}

type GradCase = (&'static str, f64, fn(u64, bool) -> Result<f64>);

fn gradient_cases() -> Vec<GradCase> {
    vec![
        ("add", 1e-4, |s, _| {
            let mut r = rng_for(s, 1);
            probe_check(
                s,
                &[rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])],
                |t, v| t.add(v[0], v[1]),
            )
        }),
        ("sub", 1e-4, |s, _| {
            let mut r = rng_for(s, 2);
            probe_check(
                s,
                &[rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])],
                |t, v| t.sub(v[0], v[1]),
            )
        }),
        ("mul", 1e-4, |s, _| {
            let mut r = rng_for(s, 3);
            probe_check(
                s,
                &[rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])],
                |t, v| t.mul(v[0], v[1]),
            )
        }),
        ("scale and shift", 1e-4, |s, _| {
            let mut r = rng_for(s, 4);
            probe_check(s, &[rand_t(&mut r, &[4])], |t, v| {
                let x = t.scale(v[0], -1.7);
                Ok(t.add_scalar(x, 0.3))
            })
        }),
        ("reshape and transpose", 1e-4, |s, _| {
            let mut r = rng_for(s, 5);
            probe_check(s, &[rand_t(&mut r, &[2, 3])], |t, v| {
                let x = t.reshape(v[0], &[3, 2])?;
                t.transpose(x)
            })
        }),
        ("matmul", 1e-4, |s, _| {
            let mut r = rng_for(s, 6);
            probe_check(
                s,
                &[rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4, 2])],
                |t, v| t.matmul(v[0], v[1]),
            )
        }),
        ("relu", 1e-4, |s, _| {
            let mut r = rng_for(s, 7);
            probe_check(s, &[off_zero(rand_t(&mut r, &[3, 3]))], |t, v| {
                Ok(t.relu(v[0]))
            })
        }),
        ("gelu", 1e-4, |s, _| {
            let mut r = rng_for(s, 8);
            probe_check(s, &[rand_t(&mut r, &[3, 3]).map(|x| 3.0 * x)], |t, v| {
                Ok(t.gelu(v[0]))
            })
        }),
        ("softmax over rows", 1e-4, |s, flip| {
            let mut r = rng_for(s, 9);
            probe_check(s, &[rand_t(&mut r, &[2, 5])], move |t, v| {
                softmax_op(t, v[0], 1, flip)
            })
        }),
        ("softmax over classes", 1e-4, |s, flip| {
            let mut r = rng_for(s, 10);
            probe_check(s, &[rand_t(&mut r, &[3, 2, 2])], move |t, v| {
                softmax_op(t, v[0], 0, flip)
            })
        }),
        ("sum and mean", 1e-4, |s, _| {
            let mut r = rng_for(s, 11);
            grad_check(
                |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    let a = t.sum(sq);
                    let b = t.mean(v[0]);
                    let b = t.scale(b, 3.0);
                    t.add(a, b)
                },
                &[rand_t(&mut r, &[2, 3])],
            )
        }),
        ("average", 1e-4, |s, _| {
            let mut r = rng_for(s, 12);
            let xs: Vec<Tensor> = (0..3).map(|_| rand_t(&mut r, &[2, 2])).collect();
            probe_check(s, &xs, |t, v| t.average(v))
        }),
        ("add_row_bias", 1e-4, |s, _| {
            let mut r = rng_for(s, 13);
            probe_check(
                s,
                &[rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4])],
                |t, v| t.add_row_bias(v[0], v[1]),
            )
        }),
        ("concat_cols", 1e-4, |s, _| {
            let mut r = rng_for(s, 14);
            probe_check(
                s,
                &[rand_t(&mut r, &[2, 2]), rand_t(&mut r, &[2, 3])],
                |t, v| t.concat_cols(v),
            )
        }),
        ("conv2d 3×3 stride 1 with bias", 1e-4, |s, _| {
            let mut r = rng_for(s, 15);
            let xs = [
                rand_t(&mut r, &[2, 5, 5]),
                rand_t(&mut r, &[3, 2, 3, 3]),
                rand_t(&mut r, &[3]),
            ];
            probe_check(s, &xs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1))
        }),
        ("conv2d 3×3 stride 2", 1e-4, |s, _| {
            let mut r = rng_for(s, 16);
            let xs = [rand_t(&mut r, &[2, 6, 6]), rand_t(&mut r, &[2, 2, 3, 3])];
            probe_check(s, &xs, |t, v| t.conv2d(v[0], v[1], None, 2))
        }),
        ("conv2d 1×1", 1e-4, |s, _| {
            let mut r = rng_for(s, 17);
            let xs = [
                rand_t(&mut r, &[3, 4, 4]),
                rand_t(&mut r, &[2, 3, 1, 1]),
                rand_t(&mut r, &[2]),
            ];
            probe_check(s, &xs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1))
        }),
        ("bilinear upsample", 1e-4, |s, _| {
            let mut r = rng_for(s, 18);
            probe_check(s, &[rand_t(&mut r, &[2, 3, 3])], |t, v| {
                t.bilinear_upsample(v[0], 5, 7)
            })
        }),
        ("layer_norm", 1e-4, |s, _| {
            let mut r = rng_for(s, 19);
            let xs = [
                rand_t(&mut r, &[3, 5]),
                rand_t(&mut r, &[5]),
                rand_t(&mut r, &[5]),
            ];
            probe_check(s, &xs, |t, v| t.layer_norm(v[0], v[1], v[2]))
        }),
        ("group_norm", 1e-4, |s, _| {
            let mut r = rng_for(s, 20);
            let xs = [
                rand_t(&mut r, &[2, 3, 3]),
                rand_t(&mut r, &[2]),
                rand_t(&mut r, &[2]),
            ];
            probe_check(s, &xs, |t, v| t.group_norm(v[0], v[1], v[2]))
        }),
        ("cross-entropy of softmax", 1e-6, |s, _| {
            let mut r = rng_for(s, 21);
            let y = labels(&mut r, 4, 4, 3);
            grad_check(
                move |t, v| t.cross_entropy(v[0], &y.data),
                &[rand_t(&mut r, &[3, 4, 4])],
            )
        }),
        ("soft dice, both operands", 1e-4, |s, _| {
            let mut r = rng_for(s, 22);
            let xs = [
                rand_t(&mut r, &[3, 4, 4]).map(|v| 0.5 + 0.5 * v),
                rand_t(&mut r, &[3, 4, 4]).map(|v| 0.5 + 0.5 * v),
            ];
            grad_check(|t, v| t.soft_dice(v[0], v[1]), &xs)
        }),
        ("cross_attention", 1e-4, |s, flip| {
            let mut r = rng_for(s, 23);
            let xs = [
                rand_t(&mut r, &[3, 4]),
                rand_t(&mut r, &[5, 4]),
                rand_t(&mut r, &[4, 2]),
                rand_t(&mut r, &[4, 2]),
                rand_t(&mut r, &[4, 2]),
            ];
            probe_check(s, &xs, move |t, v| {
                if flip {
                    // Same graph as `cross_attention`, with the flipped softmax.
                    let q = t.matmul(v[0], v[2])?;
                    let k = t.matmul(v[1], v[3])?;
                    let kt = t.transpose(k)?;
                    let l = t.matmul(q, kt)?;
                    let l = t.scale(l, 0.5);
                    let a = flipped_softmax(t, l, 1)?;
                    let val = t.matmul(v[1], v[4])?;
                    t.matmul(a, val)
                } else {
                    Ok(cross_attention(t, v[0], v[1], v[2], v[3], v[4], 4)?.0)
                }
            })
        }),
        ("proxy_update", 1e-4, |s, _| {
            let mut r = rng_for(s, 24);
            let mut store = ParamStore::new();
            let block = ProxyBlock::init(&mut store, "p", 4, 2, true, &mut r)?;
            randomize_norms(&mut store, &mut r);
            let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
            inputs.push(rand_t(&mut r, &[3, 4]));
            inputs.push(rand_t(&mut r, &[6, 4]));
            let n = store.len();
            probe_check(s, &inputs, move |t, v| {
                let b = Bindings::from_vars(v[..n].to_vec());
                let up = block.update(
                    t,
                    &b,
                    v[n],
                    Tokens {
                        var: v[n + 1],
                        h: 2,
                        w: 3,
                    },
                )?;
                let a = t.reshape(up.map, &[3, 6])?;
                let joined = t.concat_cols(&[up.next, a])?;
                Ok(joined)
            })
        }),
        ("L_seg", 1e-4, |s, flip| {
            let mut r = rng_for(s, 25);
            let y = labels(&mut r, 6, 6, 3);
            grad_check(
                move |t, v| {
                    if flip {
                        let p = flipped_softmax(t, v[0], 0)?;
                        let target = t.constant(y.one_hot(3)?);
                        let d = t.soft_dice(p, target)?;
                        let ce = t.cross_entropy(v[0], &y.data)?;
                        t.add(d, ce)
                    } else {
                        losses::loss_seg(t, v[0], &y)
                    }
                },
                &[rand_t(&mut r, &[3, 6, 6])],
            )
        }),
        ("L_spa", 1e-4, |s, _| {
            let mut r = rng_for(s, 26);
            let y = labels(&mut r, 8, 8, 3);
            let xs = [
                rand_t(&mut r, &[3, 2, 2]),
                rand_t(&mut r, &[3, 4, 4]),
                rand_t(&mut r, &[3, 8, 8]),
            ];
            grad_check(move |t, v| losses::loss_spa(t, v, &y), &xs)
        }),
        ("L_usc", 1e-4, |s, _| {
            let mut r = rng_for(s, 27);
            let xs = [
                rand_t(&mut r, &[3, 2, 2]),
                rand_t(&mut r, &[3, 4, 4]),
                rand_t(&mut r, &[3, 8, 8]),
                rand_t(&mut r, &[3, 8, 8]),
            ];
            grad_check(|t, v| losses::loss_usc(t, &v[..3], v[3]), &xs)
        }),
        ("L_con", 1e-4, |s, _| {
            let mut r = rng_for(s, 28);
            let xs: Vec<Tensor> = [2, 4, 8, 2, 4, 8]
                .iter()
                .map(|&n| rand_t(&mut r, &[3, n, n]))
                .collect();
            grad_check(|t, v| losses::loss_con(t, &v[..3], &v[3..]), &xs)
        }),
        ("L_total on a 16×16 model", 1e-4, |s, _| {
            total_loss_check(s)
        }),
    ]
}

fn randomize_norms(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).ends_with(".gamma") || store.name(id).ends_with(".beta"))
        .collect();
    for id in ids {
        let shift = if store.name(id).ends_with(".gamma") {
            1.0
        } else {
            0.0
        };
        let t = store.get_mut(id);
        for v in t.data_mut() {
            *v = shift + 0.5 * rng.gen_range(-1.0..1.0);
        }
    }
}

/// Miniature model: 16×16 images, three classes, width 4, two heads.
pub fn mini_config() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        classes: 3,
        base_width: 4,
        heads: 2,
    }
}

fn mini_batch(rng: &mut ChaCha8Rng, config: &ModelConfig) -> Batch {
    let (h, w) = (config.height, config.width);
    Batch {
        labeled: vec![(rand_t(rng, &[1, h, w]), labels(rng, h, w, config.classes))],
        unlabeled: vec![rand_t(rng, &[1, h, w])],
    }
}

fn total_loss_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 29);
    let config = mini_config();
    let mut store = ParamStore::new();
    let model = IclModel::init(&mut store, config, &mut rng)?;
    randomize_norms(&mut store, &mut rng);
    let batch = mini_batch(&mut rng, &config);
    let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    // Ten coordinates from each of the three parameter groups.
    let mut coords = Vec::new();
    for prefix in ["backbone.", "sspa.", "uscl."] {
        let ids: Vec<usize> = store
            .ids()
            .filter(|&id| store.name(id).starts_with(prefix))
            .map(|id| id.index())
            .collect();
        for _ in 0..10 {
            let i = *ids.choose(&mut rng).expect("group has parameters");
            coords.push((i, rng.gen_range(0..inputs[i].len())));
        }
    }
    grad_check_at(
        |t, v| {
            let b = Bindings::from_vars(v.to_vec());
            Ok(model
                .step_graph(t, &b, &batch, TrainMode::Icl, LossWeights::default())?
                .loss)
        },
        &inputs,
        &coords,
    )
}

fn gradient_group(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, tol, case) in gradient_cases() {
        let mut worst = 0f64;
        for seed in 0..opts.grad_seeds {
            worst = worst.max(case(seed, opts.flip_softmax_backward)?);
        }
        out.push(within(
            format!("{name} ({} seeds)", opts.grad_seeds),
            worst,
            tol,
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------- attention

fn head_weights(store: &ParamStore, mca: &MultiHeadCrossAttention) -> Vec<oracle::HeadWeights> {
    (0..mca.heads())
        .map(|h| oracle::HeadWeights {
            w_q: store.get(mca.qk.w_q[h]).clone(),
            w_k: store.get(mca.qk.w_k[h]).clone(),
            w_v: store.get(mca.w_v[h]).clone(),
        })
        .collect()
}

fn block_weights(store: &ParamStore, block: &ProxyBlock) -> oracle::BlockWeights {
    let g = |id| store.get(id).clone();
    oracle::BlockWeights {
        norm_q: (g(block.norm_q.gamma), g(block.norm_q.beta)),
        norm_t: (g(block.norm_t.gamma), g(block.norm_t.beta)),
        heads: head_weights(store, &block.mca),
        w_o: g(block.mca.w_o),
        norm_mlp: (g(block.norm_mlp.gamma), g(block.norm_mlp.beta)),
        w1: g(block.mlp.w1),
        b1: g(block.mlp.b1),
        w2: g(block.mlp.w2),
        b2: g(block.mlp.b2),
        reduce: block.reduce.map(|r| (g(r.w), g(r.b))),
    }
}

fn max_diff_all(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max)
}

fn attention_group() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut worst_ca = 0f64;
    let mut worst_mca = 0f64;
    let mut worst_update = 0f64;
    let mut worst_rows = 0f64;
    let mut worst_map = 0f64;
    for seed in 0..10 {
        let mut rng = rng_for(seed, 0xA77);
        let (z, s, d) = (
            rng.gen_range(1..=3),
            rng.gen_range(1..=6),
            [4, 6, 8][seed as usize % 3],
        );

        // Single head.
        let xs = [
            rand_t(&mut rng, &[z, d]),
            rand_t(&mut rng, &[s, d]),
            rand_t(&mut rng, &[d, d]),
            rand_t(&mut rng, &[d, d]),
            rand_t(&mut rng, &[d, d]),
        ];
        let mut t = Tape::new();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let (o, l) = cross_attention(&mut t, v[0], v[1], v[2], v[3], v[4], d)?;
        let (wo, wl) = oracle::cross_attention(&xs[0], &xs[1], &xs[2], &xs[3], &xs[4], d);
        worst_ca = worst_ca
            .max(t.value(o).max_abs_diff(&wo))
            .max(t.value(l).max_abs_diff(&wl));
        let a = t.softmax(l, 1)?;
        for r in 0..z {
            let sum: f64 = t.value(a).data()[r * s..(r + 1) * s].iter().sum();
            worst_rows = worst_rows.max((sum - 1.0).abs());
        }

        // Multi-head and the full update block.
        let mut store = ParamStore::new();
        let block = ProxyBlock::init(&mut store, "p", d, 2, seed % 2 == 0, &mut rng)?;
        randomize_norms(&mut store, &mut rng);
        let b = store.bind_frozen(&mut t);
        let (mo, ml) = block.mca.forward(&mut t, &b, v[0], v[1])?;
        let (wmo, wml) = oracle::multi_head(
            &xs[0],
            &xs[1],
            &head_weights(&store, &block.mca),
            store.get(block.mca.w_o),
        );
        let got_l: Vec<Tensor> = ml.iter().map(|&x| t.value(x).clone()).collect();
        worst_mca = worst_mca
            .max(t.value(mo).max_abs_diff(&wmo))
            .max(max_diff_all(&got_l, &wml));

        let (gh, gw) = grid_for(s);
        let up = block.update(
            &mut t,
            &b,
            v[0],
            Tokens {
                var: v[1],
                h: gh,
                w: gw,
            },
        )?;
        let (wu, wn, wlog) =
            oracle::proxy_update(&xs[0], &xs[1], &block_weights(&store, &block), LN_EPS);
        let map_want = oracle::mean_of(&wlog).reshape(&[z, gh, gw])?;
        worst_update = worst_update
            .max(t.value(up.updated).max_abs_diff(&wu))
            .max(t.value(up.next).max_abs_diff(&wn))
            .max(t.value(up.map).max_abs_diff(&map_want));

        let three: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, &[z, s])).collect();
        let vars: Vec<Var> = three.iter().map(|x| t.constant(x.clone())).collect();
        let m = extract_attention_map(&mut t, &vars, gh, gw)?;
        worst_map = worst_map.max(
            t.value(m)
                .max_abs_diff(&oracle::mean_of(&three).reshape(&[z, gh, gw])?),
        );
    }
    out.push(within("cross_attention vs loop oracle", worst_ca, 1e-12));
    out.push(within("attention rows sum to one", worst_rows, 1e-9));
    out.push(within(
        "multi-head attention vs loop oracle",
        worst_mca,
        1e-12,
    ));
    out.push(within(
        "proxy update vs composed oracle",
        worst_update,
        1e-10,
    ));
    out.push(within(
        "three-head map is the mean of logits",
        worst_map,
        1e-12,
    ));

    let mut rng = rng_for(1, 0xA78);
    let mut t = Tape::new();
    let (q, tok) = (rand_t(&mut rng, &[2, 4]), rand_t(&mut rng, &[3, 4]));
    let (wk, wv) = (rand_t(&mut rng, &[4, 4]), rand_t(&mut rng, &[4, 4]));
    let vs: Vec<Var> = [
        q.clone(),
        tok.clone(),
        Tensor::zeros(&[4, 4]),
        wk.clone(),
        wv.clone(),
    ]
    .into_iter()
    .map(|x| t.constant(x))
    .collect();
    let (o, _) = cross_attention(&mut t, vs[0], vs[1], vs[2], vs[3], vs[4], 4)?;
    let v = oracle::matmul(&tok, &wv);
    let col_mean = Tensor::from_fn(&[2, 4], |i| {
        (0..3).map(|r| v.at(&[r, i % 4])).sum::<f64>() / 3.0
    });
    out.push(within(
        "zero query weights attend uniformly",
        t.value(o).max_abs_diff(&col_mean),
        1e-12,
    ));

    let single = t.constant(Tensor::new(&[1, 4], tok.data()[..4].to_vec())?);
    let (o, _) = cross_attention(&mut t, vs[0], single, vs[3], vs[3], vs[4], 4)?;
    let v_row = oracle::matmul(&Tensor::new(&[1, 4], tok.data()[..4].to_vec())?, &wv);
    let want = Tensor::from_fn(&[2, 4], |i| v_row.data()[i % 4]);
    out.push(within(
        "single token returns its value row",
        t.value(o).max_abs_diff(&want),
        1e-12,
    ));

    // One head with W_O = I reduces to plain cross-attention.
    let mut store = ParamStore::new();
    let mca = MultiHeadCrossAttention::init(&mut store, "m", 4, 1, &mut rng)?;
    *store.get_mut(mca.w_o) = Tensor::eye(4);
    let b = store.bind_frozen(&mut t);
    let (mo, _) = mca.forward(&mut t, &b, vs[0], vs[1])?;
    let (co, _) = cross_attention(
        &mut t,
        vs[0],
        vs[1],
        b.var(mca.qk.w_q[0]),
        b.var(mca.qk.w_k[0]),
        b.var(mca.w_v[0]),
        4,
    )?;
    out.push(within(
        "one head with identity output equals CA",
        t.value(mo).max_abs_diff(t.value(co)),
        1e-12,
    ));

    // Zeroed attention output and MLP tail leave only the reduction of Q.
    let mut store = ParamStore::new();
    let block = ProxyBlock::init(&mut store, "p", 4, 2, true, &mut rng)?;
    randomize_norms(&mut store, &mut rng);
    for id in [block.mca.w_o, block.mlp.w2, block.mlp.b2] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let b = store.bind_frozen(&mut t);
    let up = block.update(
        &mut t,
        &b,
        vs[0],
        Tokens {
            var: vs[1],
            h: 1,
            w: 3,
        },
    )?;
    let r = block.reduce.expect("reducing block");
    let want = oracle::matmul(&q, store.get(r.w));
    let want = Tensor::from_fn(want.shape(), |i| {
        want.data()[i] + store.get(r.b).data()[i % 2]
    });
    out.push(within(
        "residual paths carry the proxy through",
        t.value(up.next).max_abs_diff(&want),
        1e-12,
    ));

    let ll = rand_t(&mut rng, &[2, 6]);
    let neg = ll.map(|x| -x);
    let (a, b2) = (t.constant(ll), t.constant(neg));
    let m = extract_attention_map(&mut t, &[a, b2], 2, 3)?;
    out.push(within(
        "opposite heads cancel",
        t.value(m).max_abs_diff(&Tensor::zeros(&[2, 2, 3])),
        0.0,
    ));

    out.push(uscl_composition_check()?);
    Ok(out)
}

fn grid_for(s: usize) -> (usize, usize) {
    match s {
        4 => (2, 2),
        6 => (2, 3),
        n => (1, n),
    }
}

/// USCL map for one scale against tokenize → norms → per-head logits → mean →
/// 3×3 seg conv, all from the oracles.
fn uscl_composition_check() -> Result<Check> {
    let mut rng = rng_for(2, 0xA79);
    let (z, d, h, w) = (3, 4, 2, 3);
    let mut store = ParamStore::new();
    let reader = MapReader::init(&mut store, "u", d, 2, &mut rng)?;
    let head = SegHead::init(&mut store, "s", z, &mut rng)?;
    randomize_norms(&mut store, &mut rng);
    *store.get_mut(head.b) = rand_t(&mut rng, &[z]);
    let feat = rand_t(&mut rng, &[d, h, w]);
    let proxy = rand_t(&mut rng, &[z, d]);

    let mut t = Tape::new();
    let b = store.bind_frozen(&mut t);
    let f = t.constant(feat.clone());
    let q = t.constant(proxy.clone());
    let tokens = tokenize(&mut t, f)?;
    let map = reader.map(&mut t, &b, q, tokens)?;
    let g = head.forward(&mut t, &b, map)?;

    let tok = Tensor::from_fn(&[h * w, d], |i| feat.data()[(i % d) * h * w + i / d]);
    let qn = oracle::layer_norm(
        &proxy,
        store.get(reader.norm_q.gamma),
        store.get(reader.norm_q.beta),
        LN_EPS,
    );
    let tn = oracle::layer_norm(
        &tok,
        store.get(reader.norm_t.gamma),
        store.get(reader.norm_t.beta),
        LN_EPS,
    );
    let logits: Vec<Tensor> = (0..2)
        .map(|k| {
            let qh = oracle::matmul(&qn, store.get(reader.qk.w_q[k]));
            let kh = oracle::matmul(&tn, store.get(reader.qk.w_k[k]));
            oracle::matmul(&qh, &oracle::transpose(&kh)).map(|x| x / (d as f64).sqrt())
        })
        .collect();
    let a = oracle::mean_of(&logits).reshape(&[z, h, w])?;
    let want = oracle::conv2d(&a, store.get(head.w), Some(store.get(head.b)), 1);
    Ok(within(
        "guided map vs composed oracle",
        t.value(g).max_abs_diff(&want),
        1e-10,
    ))
}

// ---------------------------------------------------------------- detach

fn is_zero_or_absent(g: Option<&Tensor>) -> bool {
    g.is_none_or(|t| t.data().iter().all(|&v| v == 0.0))
}

fn detach_group() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let config = mini_config();
    let mut unlabeled_zero = true;
    let mut labeled_nonzero = true;
    let mut usc_zero = true;
    let mut con_zero = true;
    for seed in 0..5 {
        let mut rng = rng_for(seed, 0xDE7);
        let mut store = ParamStore::new();
        let model = IclModel::init(&mut store, config, &mut rng)?;
        let batch = mini_batch(&mut rng, &config);

        for stream in [Stream::Labeled, Stream::Unlabeled] {
            let mut t = Tape::new();
            let b = store.bind(&mut t);
            let x = t.constant(batch.unlabeled[0].clone());
            let feats = model.backbone.forward(&mut t, &b, x)?.feats;
            let s = model.sspa.forward_stream(&mut t, &b, &feats, stream)?;
            let mut parts = Vec::new();
            for &v in s.seg.iter().chain(&s.maps).chain(&s.proxies) {
                parts.push(t.sum(v));
            }
            let root = t.average(&parts)?;
            let g = t.backward(root)?;
            let q0 = g.get(b.var(model.sspa.chain.q0));
            match stream {
                Stream::Unlabeled => unlabeled_zero &= is_zero_or_absent(q0),
                Stream::Labeled => labeled_nonzero &= !is_zero_or_absent(q0),
            }
        }

        // L_usc alone: the backbone head only feeds p^u, which is detached.
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let x = t.constant(batch.unlabeled[0].clone());
        let bo = model.backbone.forward(&mut t, &b, x)?;
        let proxies = fixed_proxies(&mut t, &mut rng, &config);
        let g_u = model.uscl.forward(&mut t, &b, &bo.feats, &proxies)?;
        let usc = losses::loss_usc(&mut t, &g_u.guided, bo.logits)?;
        let g = t.backward(usc)?;
        usc_zero &= is_zero_or_absent(g.get(bo.logits))
            && is_zero_or_absent(g.get(b.var(model.backbone.head_w)))
            && is_zero_or_absent(g.get(b.var(model.backbone.head_b)));

        // L_con alone: SSPA's seg heads only feed M^u, which is detached.
        let m_u = model
            .sspa
            .forward_stream(&mut t, &b, &bo.feats, Stream::Unlabeled)?;
        let con = losses::loss_con(&mut t, &g_u.guided, &m_u.seg)?;
        let g = t.backward(con)?;
        con_zero &= m_u.seg.iter().all(|&m| is_zero_or_absent(g.get(m)))
            && model.sspa.heads.iter().all(|h| {
                is_zero_or_absent(g.get(b.var(h.w))) && is_zero_or_absent(g.get(b.var(h.b)))
            })
            && is_zero_or_absent(g.get(b.var(model.sspa.chain.q0)));
    }
    out.push(holds(
        "unlabeled-stream outputs give zero gradient on Q0",
        unlabeled_zero,
        "5 seeds",
    ));
    out.push(holds(
        "labeled-stream outputs give non-zero gradient on Q0",
        labeled_nonzero,
        "5 seeds",
    ));
    out.push(holds(
        "L_usc sends nothing through p^u",
        usc_zero,
        "5 seeds",
    ));
    out.push(holds(
        "L_con sends nothing through M^u",
        con_zero,
        "5 seeds",
    ));

    // The cut is exact: a detached copy carries the value but no gradient.
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[2], vec![1.5, -2.0])?);
    let d = t.detach(x);
    let y = t.mul(d, x)?;
    let y = t.sum(y);
    let g = t.backward(y)?;
    out.push(holds(
        "detach blocks exactly one path",
        g.get(x).map(|g| g.data().to_vec()) == Some(vec![1.5, -2.0]),
        "d(sum(sg(x)·x))/dx = x",
    ));
    Ok(out)
}

fn fixed_proxies(t: &mut Tape, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Vec<Var> {
    crate::attention::scale_dims(config.base_width)
        .iter()
        .map(|&d| t.constant(rand_t(rng, &[config.classes, d])))
        .collect()
}

// ---------------------------------------------------------------- losses

fn loss_group() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = rng_for(0x1055, 0);
    let dice_eps = 1e-5;

    let logits = rand_t(&mut rng, &[4, 3, 3]).map(|v| 4.0 * v);
    let y = labels(&mut rng, 3, 3, 4);
    let mut t = Tape::new();
    let vl = t.constant(logits.clone());
    let ce = losses::cross_entropy(&mut t, vl, &y)?;
    out.push(within(
        "cross-entropy 4×3×3 vs log-sum-exp",
        (t.value(ce).item() - oracle::cross_entropy(&logits, &y.data)).abs(),
        1e-10,
    ));

    let seg = losses::loss_seg(&mut t, vl, &y)?;
    let want = oracle::soft_dice(&oracle::softmax_classes(&logits), &y.one_hot(4)?, dice_eps)
        + oracle::cross_entropy(&logits, &y.data);
    out.push(within(
        "L_seg vs dice + CE",
        (t.value(seg).item() - want).abs(),
        1e-10,
    ));

    let y8 = labels(&mut rng, 8, 8, 3);
    let maps: Vec<Tensor> = [2, 4, 8]
        .iter()
        .map(|&n| rand_t(&mut rng, &[3, n, n]))
        .collect();
    let vm: Vec<Var> = maps.iter().map(|m| t.constant(m.clone())).collect();
    let spa = losses::loss_spa(&mut t, &vm, &y8)?;
    let want = maps
        .iter()
        .map(|m| {
            let up = if m.shape()[1] == 8 {
                m.clone()
            } else {
                oracle::bilinear(m, 8, 8)
            };
            oracle::soft_dice(
                &oracle::softmax_classes(&up),
                &y8.one_hot(3).expect("labels"),
                dice_eps,
            ) + oracle::cross_entropy(&up, &y8.data)
        })
        .sum::<f64>()
        / 3.0;
    out.push(within(
        "L_spa vs per-scale dice + CE",
        (t.value(spa).item() - want).abs(),
        1e-10,
    ));

    let pred = rand_t(&mut rng, &[3, 8, 8]);
    let vp = t.constant(pred.clone());
    let usc = losses::loss_usc(&mut t, &vm, vp)?;
    let target = oracle::softmax_classes(&pred);
    let want = maps
        .iter()
        .map(|m| {
            let up = if m.shape()[1] == 8 {
                m.clone()
            } else {
                oracle::bilinear(m, 8, 8)
            };
            oracle::soft_dice(&oracle::softmax_classes(&up), &target, dice_eps)
        })
        .sum::<f64>()
        / 3.0;
    out.push(within(
        "L_usc vs oracle",
        (t.value(usc).item() - want).abs(),
        1e-10,
    ));

    // Equal distributions leave the soft-target dice self-value.
    let same = losses::loss_usc(&mut t, &[vp], vp)?;
    let self_value = oracle::soft_dice(&target, &target, dice_eps);
    out.push(within(
        "L_usc on equal maps is the dice self-value",
        (t.value(same).item() - self_value).abs(),
        1e-12,
    ));

    let others: Vec<Tensor> = [2, 4, 8]
        .iter()
        .map(|&n| rand_t(&mut rng, &[3, n, n]))
        .collect();
    let vo: Vec<Var> = others.iter().map(|m| t.constant(m.clone())).collect();
    let con = losses::loss_con(&mut t, &vm, &vo)?;
    let want = maps
        .iter()
        .zip(&others)
        .map(|(g, m)| {
            oracle::mean_squared_diff(&oracle::softmax_classes(g), &oracle::softmax_classes(m))
        })
        .sum::<f64>()
        / 3.0;
    out.push(within(
        "L_con vs elementwise oracle",
        (t.value(con).item() - want).abs(),
        1e-12,
    ));

    let weights = LossWeights::new(0.7, 13.0)?;
    let terms = LossTerms {
        seg: Some(seg),
        spa: Some(spa),
        usc: Some(usc),
        con: Some(con),
    };
    let (total, report) = losses::loss_total(&mut t, &terms, weights)?;
    let want = t.value(seg).item()
        + t.value(spa).item()
        + 0.7 * t.value(usc).item()
        + 13.0 * t.value(con).item();
    out.push(within(
        "L_total recomposes from its terms",
        (t.value(total).item() - want)
            .abs()
            .max((report.total - want).abs()),
        1e-9,
    ));
    Ok(out)
}

// ---------------------------------------------------------------- metrics

/// Small random mask: a few scattered pixels, a rectangle, or empty.
fn fuzz_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ClassMask {
    let mut data = vec![false; h * w];
    match rng.gen_range(0..6) {
        0 => {}
        1 | 2 => {
            for _ in 0..rng.gen_range(1..=6) {
                data[rng.gen_range(0..h * w)] = true;
            }
        }
        3 | 4 => {
            let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let (y1, x1) = (
                rng.gen_range(y0..h.min(y0 + 4)),
                rng.gen_range(x0..w.min(x0 + 4)),
            );
            for y in y0..=y1 {
                for x in x0..=x1 {
                    data[y * w + x] = true;
                }
            }
        }
        _ => {
            for _ in 0..2 {
                let (y, x) = (rng.gen_range(0..h - 1), rng.gen_range(0..w - 1));
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    data[(y + dy) * w + x + dx] = true;
                }
            }
        }
    }
    ClassMask::new(h, w, data).expect("sizes match")
}

fn metric_group(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = rng_for(0x3E7, 0);
    let (mut pairs, mut dsc_bad, mut hd_bad) = (0usize, 0usize, 0usize);
    while pairs < opts.metric_pairs {
        let (h, w) = (rng.gen_range(3..=10), rng.gen_range(3..=10));
        let (a, b) = (fuzz_mask(&mut rng, h, w), fuzz_mask(&mut rng, h, w));
        if oracle::boundary_len(&a) > 12 || oracle::boundary_len(&b) > 12 {
            continue;
        }
        pairs += 1;
        dsc_bad += (dsc(&a, &b)? != oracle::dsc(&a, &b)) as usize;
        hd_bad += (hd95(&a, &b)? != oracle::hd95(&a, &b)) as usize;
    }
    out.push(holds(
        format!("DSC equals brute force on {pairs} pairs"),
        dsc_bad == 0,
        format!("{dsc_bad} mismatches"),
    ));
    out.push(holds(
        format!("HD95 equals brute force on {pairs} pairs"),
        hd_bad == 0,
        format!("{hd_bad} mismatches"),
    ));

    let a = ClassMask::new(10, 10, (0..100).map(|i| i == 11).collect())?;
    let b = ClassMask::new(10, 10, (0..100).map(|i| i == 45).collect())?;
    out.push(within(
        "single pixels at offset (3,4)",
        (hd95(&a, &b)? - 5.0).abs(),
        0.0,
    ));

    // Volume evaluation against per-class brute force.
    let (classes, n, h, w) = (4, 5, 12, 12);
    let preds: Vec<LabelMap> = (0..n)
        .map(|_| blobby_labels(&mut rng, h, w, classes))
        .collect();
    let gts: Vec<LabelMap> = (0..n)
        .map(|_| blobby_labels(&mut rng, h, w, classes))
        .collect();
    let got = evaluate_volume(&preds, &gts, classes)?;
    let mut worst = 0f64;
    let mut means = (0.0, 0.0);
    for c in 1..classes as u8 {
        let (mut d, mut hd) = (0.0, 0.0);
        for (p, g) in preds.iter().zip(&gts) {
            let (pm, gm) = (ClassMask::from_labels(p, c), ClassMask::from_labels(g, c));
            d += oracle::dsc(&pm, &gm);
            hd += oracle::hd95(&pm, &gm);
        }
        let (d, hd) = (d / n as f64, hd / n as f64);
        let m = got.per_class[c as usize - 1];
        worst = worst.max((m.dsc - d).abs()).max((m.hd95 - hd).abs());
        means.0 += d / (classes - 1) as f64;
        means.1 += hd / (classes - 1) as f64;
    }
    worst = worst
        .max((got.mean_dsc - means.0).abs())
        .max((got.mean_hd95 - means.1).abs());
    out.push(within(
        "evaluate_volume vs per-class brute force",
        worst,
        1e-9,
    ));

    let perfect = evaluate_volume(&gts, &gts, classes)?;
    out.push(holds(
        "ground truth scored against itself",
        perfect.mean_dsc == 1.0 && perfect.mean_hd95 == 0.0,
        format!("DSC {} HD95 {}", perfect.mean_dsc, perfect.mean_hd95),
    ));
    Ok(out)
}

fn blobby_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> LabelMap {
    let mut data = vec![0u8; h * w];
    for c in 1..classes as u8 {
        let (cy, cx, r) = (
            rng.gen_range(0..h) as f64,
            rng.gen_range(0..w) as f64,
            rng.gen_range(1.0..4.0),
        );
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                    data[y * w + x] = c;
                }
            }
        }
    }
    LabelMap::new(h, w, data).expect("sizes match")
}

// ---------------------------------------------------------------- trainer

fn trainer_group() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let cfg = TrainConfig::default();
    out.push(within(
        "poly lr at half way",
        (poly_lr(cfg.max_iters / 2, &cfg)? - 0.01 * 0.5f64.powf(0.9)).abs(),
        1e-15,
    ));

    // Two SGD steps on the miniature model against a hand-rolled update,
    // probed on ten parameter scalars.
    let config = mini_config();
    let mut rng = rng_for(0x5CD, 0);
    let mut state = TrainState::init(config, 7)?;
    let probe: Vec<(usize, usize)> = (0..10)
        .map(|_| {
            let i = rng.gen_range(0..state.store.len());
            (i, rng.gen_range(0..state.velocity[i].len()))
        })
        .collect();
    let mut velocity = vec![0.0; probe.len()];
    let mut worst = 0f64;
    for step in 0..2 {
        let batch = mini_batch(&mut rng, &config);
        let grads = {
            let mut t = Tape::new();
            let b = state.store.bind(&mut t);
            let g = state
                .model
                .step_graph(&mut t, &b, &batch, TrainMode::Icl, cfg.weights())?;
            let grads = t.backward(g.loss)?;
            b.collect(&state.store, &grads)
        };
        let before = state.store.clone();
        let lr = 0.01 / (step + 1) as f64;
        train_step_with_lr(&mut state, &batch, &cfg, TrainMode::Icl, lr)?;
        for (k, &(i, j)) in probe.iter().enumerate() {
            let id = before.ids().nth(i).expect("index in range");
            let w = before.get(id).data()[j];
            velocity[k] = cfg.momentum * velocity[k] + grads[i].data()[j] + cfg.weight_decay * w;
            let want = w - lr * velocity[k];
            worst = worst.max((state.store.get(id).data()[j] - want).abs());
        }
    }
    out.push(within("SGD step vs hand-rolled update", worst, 1e-10));

    let before = state.store.clone();
    let batch = mini_batch(&mut rng, &config);
    let mut frozen = state.clone();
    train_step_with_lr(&mut frozen, &batch, &cfg, TrainMode::Icl, 0.0)?;
    out.push(holds(
        "zero learning rate leaves parameters bitwise unchanged",
        frozen.store == before,
        "",
    ));

    // Ten-scalar checkpoint against a hand-written byte layout.
    let mut c = Checkpoint::new();
    let values: Vec<f64> = (0..10).map(|i| i as f64 * 0.25 - 1.0).collect();
    c.push("probe", Tensor::new(&[2, 5], values.clone())?);
    let mut want = b"ICLC".to_vec();
    want.extend_from_slice(&1u32.to_le_bytes());
    want.extend_from_slice(&1u64.to_le_bytes());
    want.extend_from_slice(&5u32.to_le_bytes());
    want.extend_from_slice(b"probe");
    want.extend_from_slice(&2u32.to_le_bytes());
    want.extend_from_slice(&2u64.to_le_bytes());
    want.extend_from_slice(&5u64.to_le_bytes());
    want.push(1);
    for v in &values {
        want.extend_from_slice(&v.to_le_bytes());
    }
    out.push(holds(
        "checkpoint byte layout",
        c.encode() == want,
        format!("{} bytes", want.len()),
    ));

    let bytes = state.to_checkpoint().encode();
    let again = TrainState::from_checkpoint(&Checkpoint::decode(&bytes)?)?
        .to_checkpoint()
        .encode();
    out.push(holds(
        "checkpoint save→load→save",
        bytes == again,
        format!("{} bytes", bytes.len()),
    ));
    Ok(out)
}

// ---------------------------------------------------------------- data

fn data_group() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let cfg = PhantomConfig::default();
    let a = generate_sample(11, &cfg)?;
    let b = generate_sample(11, &cfg)?;
    out.push(holds(
        "same seed, same sample",
        a.image == b.image && a.mask == b.mask,
        "",
    ));
    let bytes = encode_sample(&a.image, &a.mask, cfg.classes)?;
    let (img, mask, classes) = decode_sample(&bytes)?;
    out.push(holds(
        "sample file round trip",
        mask == a.mask
            && img == a.image
            && classes == cfg.classes
            && encode_sample(&img, &mask, classes)? == bytes,
        format!("{} bytes", bytes.len()),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flipped_softmax_negates_the_gradient() {
        let x = Tensor::new(&[1, 3], vec![0.1, -0.4, 0.9]).unwrap();
        let w = Tensor::new(&[1, 3], vec![1.0, 2.0, -1.0]).unwrap();
        let grad = |flip: bool| {
            let mut t = Tape::new();
            let v = t.param(x.clone());
            let s = softmax_op(&mut t, v, 1, flip).unwrap();
            let c = t.constant(w.clone());
            let p = t.mul(s, c).unwrap();
            let l = t.sum(p);
            t.backward(l).unwrap().get(v).unwrap().clone()
        };
        let (g, f) = (grad(false), grad(true));
        for (a, b) in g.data().iter().zip(f.data()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn unknown_group_is_an_argument_error() {
        assert!(matches!(
            run_group("nope", &SuiteOptions::default()),
            Err(IclError::Argument(_))
        ));
    }
}
