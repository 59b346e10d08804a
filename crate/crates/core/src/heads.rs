//! Training-only heads: the supervised proxy adaptor (SSPA) and the
//! unsupervised consistent learner (USCL).

use rand::Rng;

use crate::attention::{scale_dims, MapReader, ProxyChain, Stream};
use crate::autodiff::{Tape, Var};
use crate::backbone::{tokenize, MultiScaleFeatures};
use crate::error::{dim_err, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const SSPA_PREFIX: &str = "sspa";
pub const USCL_PREFIX: &str = "uscl";

/// 3×3 zero-padded conv `Z → Z` with bias, applied to an attention map.
#[derive(Clone, Copy, Debug)]
pub struct SegHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl SegHead {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / ((classes * 9) as f64).sqrt();
        Ok(Self {
            w: store.add(
                format!("{prefix}.w"),
                Tensor::uniform(&[classes, classes, 3, 3], bound, rng),
            )?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[classes]))?,
        })
    }

    pub fn load(store: &ParamStore, prefix: &str, classes: usize) -> Result<Self> {
        Ok(Self {
            w: store.expect(&format!("{prefix}.w"), &[classes, classes, 3, 3])?,
            b: store.expect(&format!("{prefix}.b"), &[classes])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, map: Var) -> Result<Var> {
        tape.conv2d(map, b.var(self.w), Some(b.var(self.b)), 1)
    }
}

/// Per-scale results of one SSPA stream.
#[derive(Clone, Debug)]
pub struct StreamOutput {
    /// Segmentation logits `M_λ`.
    pub seg: Vec<Var>,
    /// Attention maps `A_λ`.
    pub maps: Vec<Var>,
    /// Updated proxies `Q_λ` (widths `4C, 2C, C`).
    pub proxies: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SspaOutput {
    pub labeled: StreamOutput,
    pub unlabeled: StreamOutput,
}

/// Supervised semantic proxy adaptor.
#[derive(Clone, Debug)]
pub struct Sspa {
    pub chain: ProxyChain,
    pub heads: Vec<SegHead>,
}

impl Sspa {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        classes: usize,
        base_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let chain = ProxyChain::init(store, SSPA_PREFIX, classes, base_width, heads, rng)?;
        let seg = (1..=3)
            .map(|s| SegHead::init(store, &format!("{SSPA_PREFIX}.seg{s}"), classes, rng))
            .collect::<Result<_>>()?;
        Ok(Self { chain, heads: seg })
    }

    pub fn load(
        store: &ParamStore,
        classes: usize,
        base_width: usize,
        heads: usize,
    ) -> Result<Self> {
        let chain = ProxyChain::load(store, SSPA_PREFIX, classes, base_width, heads)?;
        let seg = (1..=3)
            .map(|s| SegHead::load(store, &format!("{SSPA_PREFIX}.seg{s}"), classes))
            .collect::<Result<_>>()?;
        Ok(Self { chain, heads: seg })
    }

    /// One stream: tokenize each scale, run the proxy chain, apply seg heads.
    pub fn forward_stream(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        feats: &MultiScaleFeatures,
        stream: Stream,
    ) -> Result<StreamOutput> {
        let tokens = feats
            .scales()
            .iter()
            .map(|&f| tokenize(tape, f))
            .collect::<Result<Vec<_>>>()?;
        let chain = self.chain.run(tape, b, &tokens, stream)?;
        let seg = self
            .heads
            .iter()
            .zip(&chain.maps)
            .map(|(h, &m)| h.forward(tape, b, m))
            .collect::<Result<_>>()?;
        Ok(StreamOutput {
            seg,
            maps: chain.maps,
            proxies: chain.proxies,
        })
    }

    /// Labeled stream (proxy gradients allowed) and unlabeled stream (initial
    /// proxy detached).
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        feats_l: &MultiScaleFeatures,
        feats_u: &MultiScaleFeatures,
    ) -> Result<SspaOutput> {
        Ok(SspaOutput {
            labeled: self.forward_stream(tape, b, feats_l, Stream::Labeled)?,
            unlabeled: self.forward_stream(tape, b, feats_u, Stream::Unlabeled)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct UsclOutput {
    /// Guided segmentation logits `G_λ`.
    pub guided: Vec<Var>,
    pub maps: Vec<Var>,
}

/// Unsupervised semantic consistent learner: reads attention maps of the
/// SSPA-updated proxies over unlabeled tokens, one independent block per scale.
#[derive(Clone, Debug)]
pub struct Uscl {
    pub readers: Vec<MapReader>,
    pub heads: Vec<SegHead>,
}

impl Uscl {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        classes: usize,
        base_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut readers = Vec::new();
        let mut seg = Vec::new();
        for (i, d) in scale_dims(base_width).into_iter().enumerate() {
            readers.push(MapReader::init(
                store,
                &format!("{USCL_PREFIX}.block{}", i + 1),
                d,
                heads,
                rng,
            )?);
            seg.push(SegHead::init(
                store,
                &format!("{USCL_PREFIX}.seg{}", i + 1),
                classes,
                rng,
            )?);
        }
        Ok(Self {
            readers,
            heads: seg,
        })
    }

    pub fn load(
        store: &ParamStore,
        classes: usize,
        base_width: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut readers = Vec::new();
        let mut seg = Vec::new();
        for (i, d) in scale_dims(base_width).into_iter().enumerate() {
            readers.push(MapReader::load(
                store,
                &format!("{USCL_PREFIX}.block{}", i + 1),
                d,
                heads,
            )?);
            seg.push(SegHead::load(
                store,
                &format!("{USCL_PREFIX}.seg{}", i + 1),
                classes,
            )?);
        }
        Ok(Self {
            readers,
            heads: seg,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        feats_u: &MultiScaleFeatures,
        proxies: &[Var],
    ) -> Result<UsclOutput> {
        if proxies.len() != self.readers.len() {
            return Err(dim_err(
                "uscl",
                format!(
                    "expected {} proxies, got {}",
                    self.readers.len(),
                    proxies.len()
                ),
            ));
        }
        let mut guided = Vec::with_capacity(proxies.len());
        let mut maps = Vec::with_capacity(proxies.len());
        for ((reader, head), (&f, &q)) in self
            .readers
            .iter()
            .zip(&self.heads)
            .zip(feats_u.scales().iter().zip(proxies))
        {
            let tokens = tokenize(tape, f)?;
            let map = reader.map(tape, b, q, tokens)?;
            guided.push(head.forward(tape, b, map)?);
            maps.push(map);
        }
        Ok(UsclOutput { guided, maps })
    }
}
