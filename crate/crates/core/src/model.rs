//! Full training model: backbone plus the two training-only heads.

use rand::Rng;

use crate::attention::Stream;
use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, ModelConfig};
use crate::data::Batch;
use crate::error::Result;
use crate::heads::{Sspa, Uscl};
use crate::losses::{self, LossReport, LossTerms, LossWeights};
use crate::params::{Bindings, ParamStore};

/// Which objective terms a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// All four terms, labeled and unlabeled data.
    Icl,
    /// `L_seg` on labeled data only.
    SupervisedOnly,
    /// `L_seg + L_spa` on labeled data only.
    SupervisedSspa,
}

impl TrainMode {
    pub fn uses_unlabeled(self) -> bool {
        self == TrainMode::Icl
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            TrainMode::Icl,
            TrainMode::SupervisedOnly,
            TrainMode::SupervisedSspa,
        ]
        .into_iter()
        .find(|m| m.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Icl => "icl",
            TrainMode::SupervisedOnly => "supervised",
            TrainMode::SupervisedSspa => "supervised_sspa",
        }
    }
}

#[derive(Clone, Debug)]
pub struct IclModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub sspa: Sspa,
    pub uscl: Uscl,
}

/// A forward pass over one batch, with the loss graph on the tape.
pub struct StepGraph {
    pub loss: Var,
    pub report: LossReport,
}

impl IclModel {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::init(store, config, rng)?;
        let sspa = Sspa::init(store, config.classes, config.base_width, config.heads, rng)?;
        let uscl = Uscl::init(store, config.classes, config.base_width, config.heads, rng)?;
        Ok(Self {
            config,
            backbone,
            sspa,
            uscl,
        })
    }

    pub fn load(store: &ParamStore, config: ModelConfig) -> Result<Self> {
        Ok(Self {
            config,
            backbone: Backbone::load(store, config)?,
            sspa: Sspa::load(store, config.classes, config.base_width, config.heads)?,
            uscl: Uscl::load(store, config.classes, config.base_width, config.heads)?,
        })
    }

    /// Builds the loss for `batch`. Labeled proxies are averaged over the
    /// labeled half of the batch before the unsupervised learner reads them.
    pub fn step_graph(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        batch: &Batch,
        mode: TrainMode,
        weights: LossWeights,
    ) -> Result<StepGraph> {
        let mut seg_terms = Vec::new();
        let mut spa_terms = Vec::new();
        let mut labeled_proxies: Vec<Vec<Var>> = Vec::new();
        for (image, labels) in &batch.labeled {
            let x = tape.constant(image.clone());
            let out = self.backbone.forward(tape, b, x)?;
            seg_terms.push(losses::loss_seg(tape, out.logits, labels)?);
            if mode != TrainMode::SupervisedOnly {
                let s = self
                    .sspa
                    .forward_stream(tape, b, &out.feats, Stream::Labeled)?;
                spa_terms.push(losses::loss_spa(tape, &s.seg, labels)?);
                labeled_proxies.push(s.proxies);
            }
        }
        let mut terms = LossTerms {
            seg: Some(tape.average(&seg_terms)?),
            spa: if spa_terms.is_empty() {
                None
            } else {
                Some(tape.average(&spa_terms)?)
            },
            ..Default::default()
        };

        if mode.uses_unlabeled() && !batch.unlabeled.is_empty() {
            let proxies = (0..3)
                .map(|s| {
                    let per_image: Vec<Var> = labeled_proxies.iter().map(|p| p[s]).collect();
                    tape.average(&per_image)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut usc_terms = Vec::new();
            let mut con_terms = Vec::new();
            for image in &batch.unlabeled {
                let x = tape.constant(image.clone());
                let out = self.backbone.forward(tape, b, x)?;
                let m_u = self
                    .sspa
                    .forward_stream(tape, b, &out.feats, Stream::Unlabeled)?;
                let g_u = self.uscl.forward(tape, b, &out.feats, &proxies)?;
                usc_terms.push(losses::loss_usc(tape, &g_u.guided, out.logits)?);
                con_terms.push(losses::loss_con(tape, &g_u.guided, &m_u.seg)?);
            }
            terms.usc = Some(tape.average(&usc_terms)?);
            terms.con = Some(tape.average(&con_terms)?);
        }
        let (loss, report) = losses::loss_total(tape, &terms, weights)?;
        Ok(StepGraph { loss, report })
    }
}
