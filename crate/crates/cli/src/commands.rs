use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use icl_core::checkpoint::Checkpoint;
use icl_core::data::{
    make_split, read_sample, write_sample, DatasetSplit, SegSample, UnlabeledSample,
};
use icl_core::metrics::{evaluate_cases, evaluate_volume};
use icl_core::tensor::LabelMap;
use icl_core::trainer::{self, load_backbone, metric_rows, predict_labels, METRICS_HEADER};
use icl_core::verify::{self, SuiteOptions};

use crate::config::RunConfig;

pub const SAMPLE_EXT: &str = "icls";

/// `--out`, else `$ICL_OUT_DIR/<default_leaf>`, else `runs/<default_leaf>`.
pub fn resolve_out(out: Option<PathBuf>, default_leaf: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        let root =
            std::env::var_os("ICL_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(default_leaf)
    })
}

fn write_pool<'a>(
    dir: &Path,
    samples: impl Iterator<Item = (&'a icl_core::Tensor, Option<&'a LabelMap>)>,
    classes: usize,
) -> Result<usize> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut n = 0;
    for (i, (image, mask)) in samples.enumerate() {
        let shape = image.shape();
        let zeros = LabelMap::new(shape[1], shape[2], vec![0; shape[1] * shape[2]])?;
        let path = dir.join(format!("{i:04}.{SAMPLE_EXT}"));
        write_sample(&path, image, mask.unwrap_or(&zeros), classes)
            .with_context(|| format!("writing {}", path.display()))?;
        n += 1;
    }
    Ok(n)
}

/// Writes `labeled/`, `unlabeled/` (all-zero masks) and `val/` sample files,
/// the same pools `train` draws for this config when `data.dir` is unset.
pub fn gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    config.model.validate()?;
    let split = make_split(&config.split(), &config.phantom())?;
    let classes = config.model.classes;
    let l = write_pool(
        &out.join("labeled"),
        split.labeled.iter().map(|s| (&s.image, Some(&s.mask))),
        classes,
    )?;
    let u = write_pool(
        &out.join("unlabeled"),
        split.unlabeled.iter().map(|s| (&s.image, None)),
        classes,
    )?;
    let v = write_pool(
        &out.join("val"),
        split.val.iter().map(|s| (&s.image, Some(&s.mask))),
        classes,
    )?;
    println!(
        "labeled {l}, unlabeled {u}, val {v} samples in {}",
        out.display()
    );
    Ok(())
}

/// Sample files of `dir`, sorted by name.
fn sample_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == SAMPLE_EXT));
    files.sort();
    Ok(files)
}

fn read_labeled(dir: &Path, classes: usize) -> Result<Vec<SegSample>> {
    sample_files(dir)?
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (image, mask, z) =
                read_sample(p).with_context(|| format!("reading {}", p.display()))?;
            ensure!(
                z == classes,
                "{} has {z} classes, expected {classes}",
                p.display()
            );
            Ok(SegSample {
                image,
                mask,
                seed: i as u64,
            })
        })
        .collect()
}

fn load_split(config: &RunConfig) -> Result<DatasetSplit> {
    let Some(dir) = &config.data_dir else {
        return Ok(make_split(&config.split(), &config.phantom())?);
    };
    let classes = config.model.classes;
    let labeled = read_labeled(&dir.join("labeled"), classes)?;
    let val = read_labeled(&dir.join("val"), classes)?;
    let unlabeled = if config.mode.uses_unlabeled() {
        read_labeled(&dir.join("unlabeled"), classes)?
            .into_iter()
            .map(|s| UnlabeledSample {
                image: s.image,
                seed: s.seed,
            })
            .collect()
    } else {
        Vec::new()
    };
    ensure!(
        !labeled.is_empty() && !val.is_empty(),
        "{} has an empty labeled or val pool",
        dir.display()
    );
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        val,
    })
}

/// Trains and writes `config.resolved`, `metrics.csv`, `best.iclc` and
/// `final.iclc` under `out`.
pub fn train(config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.resolved"), config.to_toml())?;
    let split = load_split(config)?;
    eprintln!(
        "training {} for {} iterations on {} labeled / {} unlabeled, validating on {}",
        config.mode.name(),
        config.train.max_iters,
        split.labeled.len(),
        split.unlabeled.len(),
        split.val.len()
    );
    let outcome = trainer::run(
        config.model,
        &config.train,
        &split,
        config.mode,
        |iter, m, loss| {
            eprintln!(
                "iter {iter:>6}  loss {:.4}  val dsc {:.4}  hd95 {:.2}",
                loss.total, m.mean_dsc, m.mean_hd95
            );
        },
    )?;
    fs::write(out.join("metrics.csv"), &outcome.metrics_csv)?;
    outcome
        .best_state
        .to_checkpoint()
        .save(&out.join("best.iclc"))?;
    outcome
        .final_state
        .to_checkpoint()
        .save(&out.join("final.iclc"))?;
    let best = outcome.best_state.best.expect("at least one validation");
    println!(
        "best mean DSC {:.4} at iteration {}; artifacts in {}",
        best.mean_dsc,
        best.iter,
        out.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub oracle: bool,
}

/// Summary of one evaluation, also written to `metrics.csv` and
/// `plot_data.csv`.
pub struct EvalOutput {
    pub metrics_csv: String,
    pub plot_csv: String,
}

/// Backbone-only evaluation of a checkpoint over the samples in `data`
/// (its `val/` subdirectory when present).
pub fn eval(args: &EvalArgs) -> Result<EvalOutput> {
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let (backbone, store) = load_backbone(&ckpt)?;
    let classes = backbone.config().classes;
    let iter = ckpt
        .get("meta.iter")
        .map_or(Ok(0.0), |t| t.to_tensor().map(|t| t.item()))? as u64;
    let dir = if args.data.join("val").is_dir() {
        args.data.join("val")
    } else {
        args.data.clone()
    };
    let samples = read_labeled(&dir, classes)?;
    if samples.is_empty() {
        bail!("no .{SAMPLE_EXT} files in {}", dir.display());
    }
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.mask.clone()).collect();
    let preds: Vec<LabelMap> = if args.oracle {
        gts.clone()
    } else {
        samples
            .iter()
            .map(|s| predict_labels(&backbone, &store, &s.image))
            .collect::<icl_core::Result<_>>()?
    };
    let volume = evaluate_volume(&preds, &gts, classes)?;
    let metrics_csv = format!("{METRICS_HEADER}{}", metric_rows(iter, &volume));
    let mut plot_csv = String::from("case,class,metric,value\n");
    for (case, per_class) in evaluate_cases(&preds, &gts, classes)?.iter().enumerate() {
        for m in per_class {
            let _ = writeln!(plot_csv, "{case},{},dsc,{:.6}", m.class, m.dsc);
            let _ = writeln!(plot_csv, "{case},{},hd95,{:.6}", m.class, m.hd95);
        }
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("metrics.csv"), &metrics_csv)?;
    fs::write(args.out.join("plot_data.csv"), &plot_csv)?;
    println!(
        "{} cases: mean DSC {:.4}, mean HD95 {:.3}",
        samples.len(),
        volume.mean_dsc,
        volume.mean_hd95
    );
    Ok(EvalOutput {
        metrics_csv,
        plot_csv,
    })
}

/// Runs the check groups, printing one line per group and the failing
/// checks. Returns whether everything passed.
pub fn verify(groups: &[String], opts: &SuiteOptions) -> Result<bool> {
    let names: Vec<&str> = if groups.is_empty() {
        verify::GROUPS.to_vec()
    } else {
        groups.iter().map(String::as_str).collect()
    };
    let mut all = true;
    for name in names {
        let report = verify::run_group(name, opts)?;
        let ok = report.passed();
        all &= ok;
        println!(
            "{} {:<10} {} checks, {:.1}s",
            if ok { "pass" } else { "FAIL" },
            report.name,
            report.checks.len(),
            report.seconds
        );
        for c in report.failures() {
            println!("    failed: {} ({})", c.name, c.detail);
        }
    }
    Ok(all)
}
