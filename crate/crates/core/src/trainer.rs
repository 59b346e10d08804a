//! SGD training with poly learning-rate decay, validation and best-model
//! tracking.

use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::backbone::{Backbone, ModelConfig, PREFIX as BACKBONE_PREFIX};
use crate::checkpoint::Checkpoint;
use crate::data::{rng_for, Batch, BatchSampler, DatasetSplit, SegSample};
use crate::error::{IclError, Result};
use crate::losses::{LossReport, LossWeights};
use crate::metrics::{evaluate_volume, VolumeMetrics};
use crate::model::{IclModel, TrainMode};
use crate::params::ParamStore;
use crate::tensor::{LabelMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iters: u64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub val_every: u64,
    pub alpha: f64,
    pub beta: f64,
    pub master_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_iters: 2000,
            poly_power: 0.9,
            batch_size: 4,
            val_every: 100,
            alpha: 1.0,
            beta: 50.0,
            master_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0.is_nan() || self.lr0 <= 0.0 {
            return Err(IclError::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.max_iters < 1 {
            return Err(IclError::Config("max_iters must be at least 1".into()));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(IclError::Config(format!(
                "batch_size {} must be even",
                self.batch_size
            )));
        }
        if self.val_every == 0 {
            return Err(IclError::Config("val_every must be positive".into()));
        }
        LossWeights::new(self.alpha, self.beta)?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

/// `lr0 · (1 − iter/max_iters)^power`.
pub fn poly_lr(iter: u64, config: &TrainConfig) -> Result<f64> {
    if iter > config.max_iters {
        return Err(IclError::Argument(format!(
            "iteration {iter} beyond max_iters {}",
            config.max_iters
        )));
    }
    let frac = 1.0 - iter as f64 / config.max_iters as f64;
    Ok(config.lr0 * frac.powf(config.poly_power))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestRecord {
    pub mean_dsc: f64,
    pub iter: u64,
}

/// Parameters, optimizer buffers and progress of one run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub model: IclModel,
    pub velocity: Vec<Tensor>,
    pub iter: u64,
    pub best: Option<BestRecord>,
}

impl TrainState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, 0x1417);
        let model = IclModel::init(&mut store, config, &mut rng)?;
        let velocity = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Ok(Self {
            store,
            model,
            velocity,
            iter: 0,
            best: None,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let m = self.model.config;
        c.push(
            "meta.model",
            Tensor::new(
                &[5],
                vec![
                    m.height as f64,
                    m.width as f64,
                    m.classes as f64,
                    m.base_width as f64,
                    m.heads as f64,
                ],
            )
            .expect("five fields"),
        );
        c.push("meta.iter", Tensor::scalar(self.iter as f64));
        let (dsc, it) = self
            .best
            .map_or((-1.0, 0.0), |b| (b.mean_dsc, b.iter as f64));
        c.push(
            "meta.best",
            Tensor::new(&[2], vec![dsc, it]).expect("two fields"),
        );
        for (name, value) in self.store.iter() {
            c.push(name, value.clone());
        }
        for ((name, _), v) in self.store.iter().zip(&self.velocity) {
            c.push(format!("momentum.{name}"), v.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config = model_config_from(c)?;
        let template = Self::init(config, 0)?;
        let mut store = template.store.clone();
        let mut velocity = Vec::with_capacity(store.len());
        for id in template.store.ids() {
            let name = template.store.name(id).to_string();
            let value = c.require(&name)?;
            if value.shape() != store.get(id).shape() {
                return Err(IclError::Config(format!(
                    "checkpoint tensor {name} has shape {:?}",
                    value.shape()
                )));
            }
            *store.get_mut(id) = value;
            velocity.push(c.require(&format!("momentum.{name}"))?);
        }
        let model = IclModel::load(&store, config)?;
        let iter = c.require("meta.iter")?.item() as u64;
        let best = c.require("meta.best")?;
        let best = (best.data()[0] >= 0.0).then(|| BestRecord {
            mean_dsc: best.data()[0],
            iter: best.data()[1] as u64,
        });
        Ok(Self {
            store,
            model,
            velocity,
            iter,
            best,
        })
    }
}

pub fn model_config_from(c: &Checkpoint) -> Result<ModelConfig> {
    let m = c.require("meta.model")?;
    if m.len() != 5 {
        return Err(IclError::Config("meta.model must hold five values".into()));
    }
    let d = m.data();
    let config = ModelConfig {
        height: d[0] as usize,
        width: d[1] as usize,
        classes: d[2] as usize,
        base_width: d[3] as usize,
        heads: d[4] as usize,
    };
    config.validate()?;
    Ok(config)
}

/// Inference-only view of a checkpoint: the model config and the backbone
/// parameters. Nothing else in the file is read.
pub fn load_backbone(c: &Checkpoint) -> Result<(Backbone, ParamStore)> {
    let config = model_config_from(c)?;
    let mut store = ParamStore::new();
    for (name, data) in &c.entries {
        if name.starts_with(&format!("{BACKBONE_PREFIX}.")) {
            store.add(name.clone(), data.to_tensor()?)?;
        }
    }
    let backbone = Backbone::load(&store, config)?;
    Ok((backbone, store))
}

/// One optimization step at the current iteration's poly learning rate.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
    mode: TrainMode,
) -> Result<LossReport> {
    let lr = poly_lr(state.iter.min(config.max_iters), config)?;
    train_step_with_lr(state, batch, config, mode, lr)
}

/// Momentum SGD with coupled weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`. Parameters without a gradient
/// path are left untouched.
pub fn train_step_with_lr(
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
    mode: TrainMode,
    lr: f64,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bindings = state.store.bind(&mut tape);
    let graph = state
        .model
        .step_graph(&mut tape, &bindings, batch, mode, config.weights())?;
    if let Some((term, value)) = graph.report.first_non_finite() {
        return Err(IclError::Numeric(format!(
            "{term} is {value} at iteration {}",
            state.iter
        )));
    }
    let grads = tape.backward(graph.loss)?;
    let grads = bindings.collect_sparse(&state.store, &grads);
    let ids: Vec<_> = state.store.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        let Some(g) = g else { continue };
        let w = state.store.get_mut(id);
        let v = &mut state.velocity[id.index()];
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = config.momentum * *vi + gi + config.weight_decay * *wi;
            *wi -= lr * *vi;
        }
    }
    state.iter += 1;
    Ok(graph.report)
}

/// Backbone-only inference over `val`; parameters are not modified.
pub fn validate(state: &TrainState, val: &[SegSample]) -> Result<VolumeMetrics> {
    evaluate_backbone(&state.model.backbone, &state.store, val)
}

pub fn predict_labels(backbone: &Backbone, store: &ParamStore, image: &Tensor) -> Result<LabelMap> {
    LabelMap::argmax(&backbone.predict(store, image)?)
}

pub fn evaluate_backbone(
    backbone: &Backbone,
    store: &ParamStore,
    samples: &[SegSample],
) -> Result<VolumeMetrics> {
    let preds = samples
        .iter()
        .map(|s| predict_labels(backbone, store, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.mask.clone()).collect();
    evaluate_volume(&preds, &gts, backbone.config().classes)
}

/// `iter,class,dsc,hd95` rows for one evaluation: one per foreground class
/// then a `mean` row.
pub fn metric_rows(iter: u64, m: &VolumeMetrics) -> String {
    let mut s = String::new();
    for c in &m.per_class {
        writeln!(s, "{iter},{},{:.6},{:.6}", c.class, c.dsc, c.hd95).expect("write to string");
    }
    writeln!(s, "{iter},mean,{:.6},{:.6}", m.mean_dsc, m.mean_hd95).expect("write to string");
    s
}

pub const METRICS_HEADER: &str = "iter,class,dsc,hd95\n";

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub final_state: TrainState,
    pub best_state: TrainState,
    pub history: Vec<(u64, VolumeMetrics)>,
    pub losses: Vec<LossReport>,
    pub metrics_csv: String,
}

impl RunOutcome {
    pub fn best_mean_dsc(&self) -> f64 {
        self.best_state.best.map_or(0.0, |b| b.mean_dsc)
    }

    pub fn last_metrics(&self) -> Option<&VolumeMetrics> {
        self.history.last().map(|(_, m)| m)
    }
}

/// Trains from scratch, validating every `val_every` iterations and at the end.
pub fn run(
    model_config: ModelConfig,
    config: &TrainConfig,
    split: &DatasetSplit,
    mode: TrainMode,
    mut on_eval: impl FnMut(u64, &VolumeMetrics, &LossReport),
) -> Result<RunOutcome> {
    config.validate()?;
    let sampler = BatchSampler::new(config.master_seed, config.batch_size)?;
    let mut state = TrainState::init(model_config, config.master_seed)?;
    let mut best_state = state.clone();
    let mut history = Vec::new();
    let mut losses = Vec::with_capacity(config.max_iters as usize);
    let mut csv = String::from(METRICS_HEADER);
    while state.iter < config.max_iters {
        let step = state.iter;
        let batch = if mode.uses_unlabeled() {
            sampler.batch(split, step)?
        } else {
            sampler.labeled_only(split, step)?
        };
        let report = train_step(&mut state, &batch, config, mode)?;
        losses.push(report);
        if state.iter % config.val_every == 0 || state.iter == config.max_iters {
            let m = validate(&state, &split.val)?;
            csv.push_str(&metric_rows(state.iter, &m));
            on_eval(state.iter, &m, &report);
            if state.best.is_none_or(|b| m.mean_dsc > b.mean_dsc) {
                state.best = Some(BestRecord {
                    mean_dsc: m.mean_dsc,
                    iter: state.iter,
                });
                best_state = state.clone();
            }
            history.push((state.iter, m));
        }
    }
    Ok(RunOutcome {
        final_state: state,
        best_state,
        history,
        losses,
        metrics_csv: csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        let c = TrainConfig::default();
        assert_eq!(poly_lr(0, &c).unwrap(), 0.01);
        assert_eq!(poly_lr(c.max_iters, &c).unwrap(), 0.0);
        assert!((poly_lr(c.max_iters / 2, &c).unwrap() - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((poly_lr(1000, &c).unwrap() - 0.005359).abs() < 1e-6);
        assert!(poly_lr(c.max_iters + 1, &c).is_err());
    }

    #[test]
    fn poly_lr_is_non_increasing() {
        let c = TrainConfig {
            max_iters: 500,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..=500).map(|i| poly_lr(i, &c).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            lr0: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            max_iters: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
