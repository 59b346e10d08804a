//! Run configuration: a TOML file with `[model]`, `[train]` and `[data]`
//! sections, plus command-line overrides.
//!
//! ```toml
//! [model]
//! height = 64
//! width = 64
//! classes = 4        # including background
//! base_width = 8
//! heads = 4
//!
//! [train]
//! mode = "icl"       # icl | supervised | supervised_sspa
//! seed = 0
//! lr0 = 0.01
//! momentum = 0.9
//! weight_decay = 0.0001
//! max_iters = 2000
//! poly_power = 0.9
//! batch_size = 4
//! val_every = 100
//! alpha = 1.0
//! beta = 50.0
//!
//! [data]
//! n_labeled = 4
//! n_unlabeled = 60
//! n_val = 20
//! noise_std = 0.05
//! dir = "data"       # optional: read pools written by `gen-data`
//! ```
//!
//! Every key is optional; missing keys take the defaults above.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use icl_core::backbone::ModelConfig;
use icl_core::data::{PhantomConfig, SplitConfig};
use icl_core::model::TrainMode;
use icl_core::trainer::TrainConfig;
use toml::{Table, Value};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mode: TrainMode,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub noise_std: f64,
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let split = SplitConfig::default();
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mode: TrainMode::Icl,
            n_labeled: split.n_labeled,
            n_unlabeled: split.n_unlabeled,
            n_val: split.n_val,
            noise_std: PhantomConfig::default().noise_std,
            data_dir: None,
        }
    }
}

const MODEL_KEYS: [&str; 5] = ["height", "width", "classes", "base_width", "heads"];
const TRAIN_KEYS: [&str; 11] = [
    "mode",
    "seed",
    "lr0",
    "momentum",
    "weight_decay",
    "max_iters",
    "poly_power",
    "batch_size",
    "val_every",
    "alpha",
    "beta",
];
const DATA_KEYS: [&str; 5] = ["n_labeled", "n_unlabeled", "n_val", "noise_std", "dir"];

fn known(section: &str) -> Option<&'static [&'static str]> {
    match section {
        "model" => Some(&MODEL_KEYS),
        "train" => Some(&TRAIN_KEYS),
        "data" => Some(&DATA_KEYS),
        _ => None,
    }
}

fn as_usize(v: &Value, key: &str) -> Result<usize> {
    match v.as_integer() {
        Some(i) if i >= 0 => Ok(i as usize),
        _ => bail!("{key} must be a non-negative integer, got {v}"),
    }
}

fn as_f64(v: &Value, key: &str) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => bail!("{key} must be a number, got {v}"),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: Table = text.parse().context("config is not valid TOML")?;
        let mut unknown = Vec::new();
        for (section, body) in &table {
            match (known(section), body.as_table()) {
                (Some(keys), Some(t)) => {
                    unknown.extend(
                        t.keys()
                            .filter(|k| !keys.contains(&k.as_str()))
                            .map(|k| format!("{section}.{k}")),
                    );
                }
                _ => unknown.push(section.clone()),
            }
        }
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }

        let mut c = RunConfig::default();
        let empty = Table::new();
        let section = |name: &str| table.get(name).and_then(Value::as_table).unwrap_or(&empty);

        for (k, v) in section("model") {
            let n = as_usize(v, k)?;
            match k.as_str() {
                "height" => c.model.height = n,
                "width" => c.model.width = n,
                "classes" => c.model.classes = n,
                "base_width" => c.model.base_width = n,
                "heads" => c.model.heads = n,
                _ => unreachable!("keys checked above"),
            }
        }
        for (k, v) in section("train") {
            let t = &mut c.train;
            match k.as_str() {
                "mode" => {
                    let name = v.as_str().context("train.mode must be a string")?;
                    c.mode = TrainMode::from_name(name).with_context(|| {
                        format!(
                            "train.mode {name:?} is not one of icl, supervised, supervised_sspa"
                        )
                    })?;
                }
                "seed" => t.master_seed = as_usize(v, k)? as u64,
                "lr0" => t.lr0 = as_f64(v, k)?,
                "momentum" => t.momentum = as_f64(v, k)?,
                "weight_decay" => t.weight_decay = as_f64(v, k)?,
                "max_iters" => t.max_iters = as_usize(v, k)? as u64,
                "poly_power" => t.poly_power = as_f64(v, k)?,
                "batch_size" => t.batch_size = as_usize(v, k)?,
                "val_every" => t.val_every = as_usize(v, k)? as u64,
                "alpha" => t.alpha = as_f64(v, k)?,
                "beta" => t.beta = as_f64(v, k)?,
                _ => unreachable!("keys checked above"),
            }
        }
        for (k, v) in section("data") {
            match k.as_str() {
                "n_labeled" => c.n_labeled = as_usize(v, k)?,
                "n_unlabeled" => c.n_unlabeled = as_usize(v, k)?,
                "n_val" => c.n_val = as_usize(v, k)?,
                "noise_std" => c.noise_std = as_f64(v, k)?,
                "dir" => {
                    c.data_dir = Some(PathBuf::from(
                        v.as_str().context("data.dir must be a string")?,
                    ))
                }
                _ => unreachable!("keys checked above"),
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Labeled-only baseline: no unlabeled data, unsupervised weights zeroed.
    pub fn supervised_only(&mut self) {
        self.mode = TrainMode::SupervisedOnly;
        self.train.alpha = 0.0;
        self.train.beta = 0.0;
    }

    /// Labeled-only run that keeps the SSPA loss.
    pub fn supervised_sspa(&mut self) {
        self.mode = TrainMode::SupervisedSspa;
        self.train.alpha = 0.0;
        self.train.beta = 0.0;
    }

    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            master_seed: self.train.master_seed,
            n_labeled: self.n_labeled,
            n_unlabeled: self.n_unlabeled,
            n_val: self.n_val,
        }
    }

    pub fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            height: self.model.height,
            width: self.model.width,
            classes: self.model.classes,
            noise_std: self.noise_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.n_labeled == 0 || self.n_val == 0 {
            bail!("data.n_labeled and data.n_val must be positive");
        }
        if self.mode.uses_unlabeled() && self.n_unlabeled == 0 && self.data_dir.is_none() {
            bail!("mode icl needs unlabeled data (data.n_unlabeled is 0)");
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            bail!("data.noise_std must be non-negative");
        }
        Ok(())
    }

    /// Fully resolved config in the same format `parse` reads.
    pub fn to_toml(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "height = {}", m.height);
        let _ = writeln!(s, "width = {}", m.width);
        let _ = writeln!(s, "classes = {}", m.classes);
        let _ = writeln!(s, "base_width = {}", m.base_width);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "mode = \"{}\"", self.mode.name());
        let _ = writeln!(s, "seed = {}", t.master_seed);
        let _ = writeln!(s, "lr0 = {:?}", t.lr0);
        let _ = writeln!(s, "momentum = {:?}", t.momentum);
        let _ = writeln!(s, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(s, "max_iters = {}", t.max_iters);
        let _ = writeln!(s, "poly_power = {:?}", t.poly_power);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "val_every = {}", t.val_every);
        let _ = writeln!(s, "alpha = {:?}", t.alpha);
        let _ = writeln!(s, "beta = {:?}", t.beta);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "n_labeled = {}", self.n_labeled);
        let _ = writeln!(s, "n_unlabeled = {}", self.n_unlabeled);
        let _ = writeln!(s, "n_val = {}", self.n_val);
        let _ = writeln!(s, "noise_std = {:?}", self.noise_std);
        if let Some(d) = &self.data_dir {
            let _ = writeln!(s, "dir = {}", Value::String(d.display().to_string()));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = RunConfig::parse(
            "[model]\nheight = 32\ncolour = 1\n[train]\nlr = 0.1\n[extra]\nx = 1\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("model.colour"), "{err}");
        assert!(err.contains("train.lr"), "{err}");
        assert!(err.contains("extra"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::parse(
            "[train]\nmode = \"supervised_sspa\"\nbeta = 3\nseed = 9\n[data]\ndir = \"a b\"\n",
        )
        .unwrap();
        c.train.weight_decay = 1e-10;
        let again = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.mode, TrainMode::SupervisedSspa);
        assert_eq!(again.train.beta, 3.0);
    }

    #[test]
    fn supervised_only_zeroes_unsupervised_weights() {
        let mut c = RunConfig::default();
        c.supervised_only();
        assert_eq!((c.train.alpha, c.train.beta), (0.0, 0.0));
        assert!(!c.mode.uses_unlabeled());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("[train]\nmode = \"fancy\"\n").is_err());
        assert!(RunConfig::parse("[model]\nheight = -3\n").is_err());
        assert!(RunConfig::parse("[model]\nheight = 30\n")
            .unwrap()
            .validate()
            .is_err());
    }
}
