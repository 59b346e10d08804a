//! Proxy cross-attention: class proxies attend over feature tokens.
//!
//! Queries are the `Z` per-class proxy rows, keys and values are spatial
//! tokens. Each head produces `Z×S` logits `q·kᵀ/√d`, where `d` is the block's
//! model width (not the per-head width). Head logits averaged over heads and
//! reshaped onto the token grid form the attention map of a scale.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, IclError, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Spatial tokens `[(h·w)×c]` together with the grid they came from.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

/// Which data stream a proxy chain runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Gradients may reach the initial proxy.
    Labeled,
    /// The initial proxy enters detached.
    Unlabeled,
}

fn uniform_param<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<ParamId> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.add(name, Tensor::uniform(shape, bound, rng))
}

/// Learnable affine of a normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::filled(&[dim], 1.0))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn load(store: &ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.expect(&format!("{prefix}.gamma"), &[dim])?,
            beta: store.expect(&format!("{prefix}.beta"), &[dim])?,
        })
    }

    pub fn layer_norm(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, b.var(self.gamma), b.var(self.beta))
    }
}

/// Single-head cross-attention. Returns `(softmax(q·kᵀ/√d)·v, q·kᵀ/√d)`.
pub fn cross_attention(
    tape: &mut Tape,
    query: Var,
    tokens: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    d_model: usize,
) -> Result<(Var, Var)> {
    let logits = attention_logits(tape, query, tokens, w_q, w_k, d_model)?;
    let v = tape
        .matmul(tokens, w_v)
        .map_err(|e| rename(e, "values (tokens·W_V)"))?;
    let weights = tape.softmax(logits, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, logits))
}

fn attention_logits(
    tape: &mut Tape,
    query: Var,
    tokens: Var,
    w_q: Var,
    w_k: Var,
    d_model: usize,
) -> Result<Var> {
    if tape.shape(query).len() != 2 || tape.shape(tokens).len() != 2 {
        return Err(dim_err(
            "cross_attention",
            format!(
                "query {:?} and tokens {:?} must both be 2-D",
                tape.shape(query),
                tape.shape(tokens)
            ),
        ));
    }
    if tape.shape(query)[1] != tape.shape(tokens)[1] {
        return Err(dim_err(
            "cross_attention",
            format!(
                "query width {} differs from token width {}",
                tape.shape(query)[1],
                tape.shape(tokens)[1]
            ),
        ));
    }
    let q = tape
        .matmul(query, w_q)
        .map_err(|e| rename(e, "query (Q·W_Q)"))?;
    let k = tape
        .matmul(tokens, w_k)
        .map_err(|e| rename(e, "keys (tokens·W_K)"))?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    Ok(tape.scale(scores, 1.0 / (d_model as f64).sqrt()))
}

fn rename(e: IclError, operand: &str) -> IclError {
    match e {
        IclError::Dimension { op, detail } => IclError::Dimension {
            op,
            detail: format!("{operand}: {detail}"),
        },
        other => other,
    }
}

/// Per-head query/key projections: everything needed for attention logits.
#[derive(Clone, Debug)]
pub struct QueryKeyHeads {
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub d_model: usize,
}

impl QueryKeyHeads {
    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads()
    }

    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(d_model, heads)?;
        let dh = d_model / heads;
        let mut w_q = Vec::with_capacity(heads);
        let mut w_k = Vec::with_capacity(heads);
        for h in 0..heads {
            w_q.push(uniform_param(
                store,
                format!("{prefix}.head{h}.w_q"),
                &[d_model, dh],
                d_model,
                rng,
            )?);
            w_k.push(uniform_param(
                store,
                format!("{prefix}.head{h}.w_k"),
                &[d_model, dh],
                d_model,
                rng,
            )?);
        }
        Ok(Self { w_q, w_k, d_model })
    }

    fn load(store: &ParamStore, prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        check_heads(d_model, heads)?;
        let dh = d_model / heads;
        let w_q = (0..heads)
            .map(|h| store.expect(&format!("{prefix}.head{h}.w_q"), &[d_model, dh]))
            .collect::<Result<_>>()?;
        let w_k = (0..heads)
            .map(|h| store.expect(&format!("{prefix}.head{h}.w_k"), &[d_model, dh]))
            .collect::<Result<_>>()?;
        Ok(Self { w_q, w_k, d_model })
    }

    /// Logits of every head, each `[Z×S]`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        query: Var,
        tokens: Var,
    ) -> Result<Vec<Var>> {
        (0..self.heads())
            .map(|h| {
                attention_logits(
                    tape,
                    query,
                    tokens,
                    b.var(self.w_q[h]),
                    b.var(self.w_k[h]),
                    self.d_model,
                )
            })
            .collect()
    }
}

fn check_heads(d_model: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(IclError::Config(format!(
            "model width {d_model} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// `N` independent cross-attention heads, concatenated and projected by `W_O`.
#[derive(Clone, Debug)]
pub struct MultiHeadCrossAttention {
    pub qk: QueryKeyHeads,
    pub w_v: Vec<ParamId>,
    pub w_o: ParamId,
}

impl MultiHeadCrossAttention {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let qk = QueryKeyHeads::init(store, prefix, d_model, heads, rng)?;
        let dh = d_model / heads;
        let w_v = (0..heads)
            .map(|h| {
                uniform_param(
                    store,
                    format!("{prefix}.head{h}.w_v"),
                    &[d_model, dh],
                    d_model,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let w_o = uniform_param(
            store,
            format!("{prefix}.w_o"),
            &[d_model, d_model],
            d_model,
            rng,
        )?;
        Ok(Self { qk, w_v, w_o })
    }

    pub fn load(store: &ParamStore, prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        let qk = QueryKeyHeads::load(store, prefix, d_model, heads)?;
        let dh = d_model / heads;
        let w_v = (0..heads)
            .map(|h| store.expect(&format!("{prefix}.head{h}.w_v"), &[d_model, dh]))
            .collect::<Result<_>>()?;
        let w_o = store.expect(&format!("{prefix}.w_o"), &[d_model, d_model])?;
        Ok(Self { qk, w_v, w_o })
    }

    pub fn heads(&self) -> usize {
        self.qk.heads()
    }

    pub fn d_model(&self) -> usize {
        self.qk.d_model
    }

    /// Returns `(concat(heads)·W_O, per-head logits)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        query: Var,
        tokens: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let mut outs = Vec::with_capacity(self.heads());
        let mut logits = Vec::with_capacity(self.heads());
        for h in 0..self.heads() {
            let (o, l) = cross_attention(
                tape,
                query,
                tokens,
                b.var(self.qk.w_q[h]),
                b.var(self.qk.w_k[h]),
                b.var(self.w_v[h]),
                self.d_model(),
            )?;
            outs.push(o);
            logits.push(l);
        }
        let cat = tape.concat_cols(&outs)?;
        Ok((tape.matmul(cat, b.var(self.w_o))?, logits))
    }
}

/// Mean over heads of the `[Z×S]` logits, reshaped to `[Z×h×w]`.
pub fn extract_attention_map(
    tape: &mut Tape,
    per_head_logits: &[Var],
    h: usize,
    w: usize,
) -> Result<Var> {
    let Some(&first) = per_head_logits.first() else {
        return Err(IclError::Argument("no attention heads".into()));
    };
    let shape = tape.shape(first).to_vec();
    if per_head_logits
        .iter()
        .any(|&l| tape.shape(l) != shape.as_slice())
    {
        return Err(dim_err(
            "extract_attention_map",
            "heads have unequal logit shapes",
        ));
    }
    if shape.len() != 2 || shape[1] != h * w {
        return Err(dim_err(
            "extract_attention_map",
            format!("logits {shape:?} do not cover a {h}×{w} grid"),
        ));
    }
    let mean = tape.average(per_head_logits)?;
    tape.reshape(mean, &[shape[0], h, w])
}

/// Two-layer perceptron `d → 2d → d` with GELU.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: uniform_param(store, format!("{prefix}.w1"), &[d, 2 * d], d, rng)?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[2 * d]))?,
            w2: uniform_param(store, format!("{prefix}.w2"), &[2 * d, d], 2 * d, rng)?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]))?,
        })
    }

    fn load(store: &ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            w1: store.expect(&format!("{prefix}.w1"), &[d, 2 * d])?,
            b1: store.expect(&format!("{prefix}.b1"), &[2 * d])?,
            w2: store.expect(&format!("{prefix}.w2"), &[2 * d, d])?,
            b2: store.expect(&format!("{prefix}.b2"), &[d])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = tape.matmul(x, b.var(self.w1))?;
        let h = tape.add_row_bias(h, b.var(self.b1))?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, b.var(self.w2))?;
        tape.add_row_bias(o, b.var(self.b2))
    }
}

/// 1×1 channel reduction applied to proxy rows: `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Reduce {
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameters of one proxy-update block.
#[derive(Clone, Debug)]
pub struct ProxyBlock {
    pub norm_q: NormParams,
    pub norm_t: NormParams,
    pub mca: MultiHeadCrossAttention,
    pub norm_mlp: NormParams,
    pub mlp: Mlp,
    /// `None` at the last scale, where the proxy width is kept.
    pub reduce: Option<Reduce>,
}

/// Result of one proxy update.
#[derive(Clone, Debug)]
pub struct ProxyUpdate {
    /// `MLP(Norm(Q̂)) + Q̂`, width `d`.
    pub updated: Var,
    /// Reduced proxy fed to the next scale.
    pub next: Var,
    /// Per-head `[Z×S]` logits.
    pub head_logits: Vec<Var>,
    /// `[Z×h×w]` attention map.
    pub map: Var,
}

impl ProxyBlock {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        reduce: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let norm_q = NormParams::init(store, &format!("{prefix}.norm_q"), d)?;
        let norm_t = NormParams::init(store, &format!("{prefix}.norm_t"), d)?;
        let mca = MultiHeadCrossAttention::init(store, &format!("{prefix}.mca"), d, heads, rng)?;
        let norm_mlp = NormParams::init(store, &format!("{prefix}.norm_mlp"), d)?;
        let mlp = Mlp::init(store, &format!("{prefix}.mlp"), d, rng)?;
        let reduce = if reduce {
            check_even(d)?;
            Some(Reduce {
                w: uniform_param(store, format!("{prefix}.reduce.w"), &[d, d / 2], d, rng)?,
                b: store.add(format!("{prefix}.reduce.b"), Tensor::zeros(&[d / 2]))?,
            })
        } else {
            None
        };
        Ok(Self {
            norm_q,
            norm_t,
            mca,
            norm_mlp,
            mlp,
            reduce,
        })
    }

    pub fn load(
        store: &ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        reduce: bool,
    ) -> Result<Self> {
        let reduce = if reduce {
            check_even(d)?;
            Some(Reduce {
                w: store.expect(&format!("{prefix}.reduce.w"), &[d, d / 2])?,
                b: store.expect(&format!("{prefix}.reduce.b"), &[d / 2])?,
            })
        } else {
            None
        };
        Ok(Self {
            norm_q: NormParams::load(store, &format!("{prefix}.norm_q"), d)?,
            norm_t: NormParams::load(store, &format!("{prefix}.norm_t"), d)?,
            mca: MultiHeadCrossAttention::load(store, &format!("{prefix}.mca"), d, heads)?,
            norm_mlp: NormParams::load(store, &format!("{prefix}.norm_mlp"), d)?,
            mlp: Mlp::load(store, &format!("{prefix}.mlp"), d)?,
            reduce,
        })
    }

    pub fn d_model(&self) -> usize {
        self.mca.d_model()
    }

    /// Width of the proxy handed to the next scale.
    pub fn out_dim(&self) -> usize {
        if self.reduce.is_some() {
            self.d_model() / 2
        } else {
            self.d_model()
        }
    }

    /// `Q̂ = MCA(Norm(Q), Norm(T)) + Q`, then `Reduce(MLP(Norm(Q̂)) + Q̂)`.
    pub fn update(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        proxy: Var,
        tokens: Tokens,
    ) -> Result<ProxyUpdate> {
        let d = self.d_model();
        for (what, v) in [("proxy", proxy), ("tokens", tokens.var)] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != d {
                return Err(dim_err(
                    "proxy_update",
                    format!("{what} has shape {s:?}, block width is {d}"),
                ));
            }
        }
        let qn = self.norm_q.layer_norm(tape, b, proxy)?;
        let tn = self.norm_t.layer_norm(tape, b, tokens.var)?;
        let (attended, head_logits) = self.mca.forward(tape, b, qn, tn)?;
        let q_hat = tape.add(attended, proxy)?;
        let hn = self.norm_mlp.layer_norm(tape, b, q_hat)?;
        let m = self.mlp.forward(tape, b, hn)?;
        let updated = tape.add(m, q_hat)?;
        let next = match &self.reduce {
            Some(r) => {
                let x = tape.matmul(updated, b.var(r.w))?;
                tape.add_row_bias(x, b.var(r.b))?
            }
            None => updated,
        };
        let map = extract_attention_map(tape, &head_logits, tokens.h, tokens.w)?;
        Ok(ProxyUpdate {
            updated,
            next,
            head_logits,
            map,
        })
    }
}

fn check_even(d: usize) -> Result<()> {
    if !d.is_multiple_of(2) {
        return Err(IclError::Config(format!(
            "cannot halve odd proxy width {d}"
        )));
    }
    Ok(())
}

/// Outputs of a proxy chain, one entry per scale.
#[derive(Clone, Debug)]
pub struct ChainOutput {
    /// Updated proxies `Q_λ` before channel reduction (widths `4C, 2C, C`).
    pub proxies: Vec<Var>,
    /// Attention maps `A_λ`, `[Z×h_λ×w_λ]`.
    pub maps: Vec<Var>,
}

/// The initial proxy `Q0 [Z×4C]` and the three proxy-update blocks.
#[derive(Clone, Debug)]
pub struct ProxyChain {
    pub q0: ParamId,
    pub blocks: Vec<ProxyBlock>,
}

/// Proxy widths per scale for base width `c`.
pub fn scale_dims(c: usize) -> [usize; 3] {
    [4 * c, 2 * c, c]
}

impl ProxyChain {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        classes: usize,
        base_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = scale_dims(base_width);
        let q0 = store.add(
            format!("{prefix}.q0"),
            Tensor::normal(&[classes, dims[0]], 0.02, rng),
        )?;
        let blocks = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                ProxyBlock::init(
                    store,
                    &format!("{prefix}.block{}", i + 1),
                    d,
                    heads,
                    i + 1 < dims.len(),
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { q0, blocks })
    }

    pub fn load(
        store: &ParamStore,
        prefix: &str,
        classes: usize,
        base_width: usize,
        heads: usize,
    ) -> Result<Self> {
        let dims = scale_dims(base_width);
        let q0 = store.expect(&format!("{prefix}.q0"), &[classes, dims[0]])?;
        let blocks = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                ProxyBlock::load(
                    store,
                    &format!("{prefix}.block{}", i + 1),
                    d,
                    heads,
                    i + 1 < dims.len(),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { q0, blocks })
    }

    /// Runs the blocks in sequence over per-scale tokens.
    pub fn run(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        tokens: &[Tokens],
        stream: Stream,
    ) -> Result<ChainOutput> {
        if tokens.len() != self.blocks.len() {
            return Err(IclError::Config(format!(
                "proxy chain has {} scales, got {} token sets",
                self.blocks.len(),
                tokens.len()
            )));
        }
        let mut proxy = match stream {
            Stream::Labeled => b.var(self.q0),
            Stream::Unlabeled => tape.detach(b.var(self.q0)),
        };
        let mut proxies = Vec::with_capacity(tokens.len());
        let mut maps = Vec::with_capacity(tokens.len());
        for (block, &t) in self.blocks.iter().zip(tokens) {
            let up = block.update(tape, b, proxy, t)?;
            proxies.push(up.updated);
            maps.push(up.map);
            proxy = up.next;
        }
        Ok(ChainOutput { proxies, maps })
    }
}

/// Query/key heads used to read attention maps for a given proxy, without
/// updating it.
#[derive(Clone, Debug)]
pub struct MapReader {
    pub norm_q: NormParams,
    pub norm_t: NormParams,
    pub qk: QueryKeyHeads,
}

impl MapReader {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_q: NormParams::init(store, &format!("{prefix}.norm_q"), d)?,
            norm_t: NormParams::init(store, &format!("{prefix}.norm_t"), d)?,
            qk: QueryKeyHeads::init(store, &format!("{prefix}.mca"), d, heads, rng)?,
        })
    }

    pub fn load(store: &ParamStore, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm_q: NormParams::load(store, &format!("{prefix}.norm_q"), d)?,
            norm_t: NormParams::load(store, &format!("{prefix}.norm_t"), d)?,
            qk: QueryKeyHeads::load(store, &format!("{prefix}.mca"), d, heads)?,
        })
    }

    /// `[Z×h×w]` attention map of `proxy` over `tokens`.
    pub fn map(&self, tape: &mut Tape, b: &Bindings, proxy: Var, tokens: Tokens) -> Result<Var> {
        let qn = self.norm_q.layer_norm(tape, b, proxy)?;
        let tn = self.norm_t.layer_norm(tape, b, tokens.var)?;
        let logits = self.qk.logits(tape, b, qn, tn)?;
        extract_attention_map(tape, &logits, tokens.h, tokens.w)
    }
}
