//! Acceptance suite. Every criterion runs in one test so the timed ones do
//! not compete for the CPU with each other; each prints a single
//! `criterion N: PASS|FAIL ...` line.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use icl_cli::commands::{self, EvalArgs};
use icl_cli::config::RunConfig;
use icl_core::backbone::{ModelConfig, PREFIX as BACKBONE_PREFIX};
use icl_core::checkpoint::{Checkpoint, TensorData};
use icl_core::data::{make_split, PhantomConfig, SplitConfig};
use icl_core::model::TrainMode;
use icl_core::tensor::Tensor;
use icl_core::trainer::{self, TrainConfig};
use icl_core::verify::{self, SuiteOptions};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Written straight to stderr so the line shows up without `--nocapture`.
fn report(n: usize, title: &str, o: &Outcome) {
    let line = format!(
        "criterion {n}: {} {title}: {}\n",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn group(name: &str, opts: &SuiteOptions) -> (bool, String, f64) {
    let r = verify::run_group(name, opts).expect("group runs");
    let failed: Vec<String> = r
        .failures()
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect();
    let detail = if failed.is_empty() {
        format!("{} checks", r.checks.len())
    } else {
        format!(
            "{} of {} checks failed: {}",
            failed.len(),
            r.checks.len(),
            failed.join("; ")
        )
    };
    (r.passed(), detail, r.seconds)
}

fn gradients() -> Outcome {
    let opts = SuiteOptions::default();
    assert!(opts.grad_seeds >= 20);
    let (ok, detail, secs) = group("gradients", &opts);
    outcome(
        ok && secs < 120.0,
        format!(
            "{detail}, {} seeds each, {secs:.1}s (limit 120s)",
            opts.grad_seeds
        ),
    )
}

fn attention() -> Outcome {
    let (ok, detail, _) = group("attention", &SuiteOptions::default());
    outcome(ok, detail)
}

fn detach() -> Outcome {
    let (ok, detail, _) = group("detach", &SuiteOptions::default());
    outcome(ok, detail)
}

fn metric_oracles() -> Outcome {
    let opts = SuiteOptions::default();
    assert!(opts.metric_pairs >= 500);
    let (ok, detail, _) = group("metrics", &opts);
    outcome(
        ok,
        format!("{detail}, {} fuzzed mask pairs", opts.metric_pairs),
    )
}

fn ssl_improvement() -> Outcome {
    let start = Instant::now();
    let arms = [
        TrainMode::SupervisedOnly,
        TrainMode::SupervisedSspa,
        TrainMode::Icl,
    ];
    let mut sums = [0.0; 3];
    let mut per_seed = Vec::new();
    for seed in 0..3u64 {
        let split_config = SplitConfig {
            master_seed: seed,
            ..Default::default()
        };
        assert_eq!((split_config.n_labeled, split_config.n_unlabeled), (4, 60));
        let split = make_split(&split_config, &PhantomConfig::default()).expect("split");
        let mut row = Vec::new();
        for (i, mode) in arms.into_iter().enumerate() {
            let mut cfg = TrainConfig {
                master_seed: seed,
                ..Default::default()
            };
            if !mode.uses_unlabeled() {
                cfg.alpha = 0.0;
                cfg.beta = 0.0;
            }
            let out = trainer::run(ModelConfig::default(), &cfg, &split, mode, |_, _, _| {})
                .expect("training");
            let dsc = 100.0 * out.best_mean_dsc();
            sums[i] += dsc;
            row.push(format!("{} {dsc:.2}", mode.name()));
        }
        per_seed.push(format!("seed {seed}: {}", row.join(", ")));
    }
    let [sup, sspa, icl] = sums.map(|s| s / 3.0);
    let secs = start.elapsed().as_secs_f64();
    let passed = icl >= sup + 2.0 && sspa >= sup - 0.5 && secs < 900.0;
    outcome(
        passed,
        format!(
            "mean DSC supervised {sup:.2}, supervised+SSPA {sspa:.2}, ICL {icl:.2} \
             (need ICL >= {:.2}, SSPA >= {:.2}), {secs:.0}s (limit 900s) [{}]",
            sup + 2.0,
            sup - 0.5,
            per_seed.join("; ")
        ),
    )
}

fn icl_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icl"))
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "[model]\nheight = 32\nwidth = 32\nbase_width = 4\nheads = 2\n\
         [train]\nseed = 5\nmax_iters = 12\nval_every = 4\n\
         [data]\nn_labeled = 2\nn_unlabeled = 4\nn_val = 3\n",
    )
    .unwrap();
    path
}

fn determinism(dir: &Path) -> Outcome {
    let config = small_config(dir);
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        let status = icl_bin()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .expect("spawn icl");
        if !status.status.success() {
            return outcome(
                false,
                format!("train failed: {}", String::from_utf8_lossy(&status.stderr)),
            );
        }
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    let rows = String::from_utf8_lossy(&csvs[0]).lines().count() - 1;
    outcome(
        csvs[0] == csvs[1] && rows > 0,
        format!(
            "two runs, {rows} metric rows, identical bytes: {}",
            csvs[0] == csvs[1]
        ),
    )
}

fn inference_purity(dir: &Path) -> Outcome {
    let data = dir.join("data");
    let config = RunConfig::load(&dir.join("small.toml")).unwrap();
    commands::gen_data(&config, &data).unwrap();
    // `determinism` ran first and left a full ICL checkpoint behind.
    let full = Checkpoint::load(&dir.join("a").join("final.iclc")).unwrap();
    let is_backbone =
        |n: &str| n.starts_with(&format!("{BACKBONE_PREFIX}.")) || n.starts_with("meta.");
    let n_aux = full.entries.iter().filter(|(n, _)| !is_backbone(n)).count();

    let stripped = Checkpoint {
        entries: full
            .entries
            .iter()
            .filter(|(n, _)| is_backbone(n))
            .cloned()
            .collect(),
    };
    let shift = |c: &Checkpoint, touch: &dyn Fn(&str) -> bool| Checkpoint {
        entries: c
            .entries
            .iter()
            .map(|(n, t)| {
                let t = if touch(n) {
                    let v = t.to_tensor().unwrap();
                    TensorData::F64(
                        Tensor::new(v.shape(), v.data().iter().map(|x| x * -3.0 + 0.7).collect())
                            .unwrap(),
                    )
                } else {
                    t.clone()
                };
                (n.clone(), t)
            })
            .collect(),
    };
    let perturbed = shift(&full, &|n| !is_backbone(n));
    let control = shift(&full, &|n| n == format!("{BACKBONE_PREFIX}.head.w"));

    let eval = |c: &Checkpoint, tag: &str| {
        let path = dir.join(format!("{tag}.iclc"));
        c.save(&path).unwrap();
        commands::eval(&EvalArgs {
            checkpoint: path,
            data: data.clone(),
            out: dir.join(format!("eval-{tag}")),
            oracle: false,
        })
        .map(|o| (o.metrics_csv, o.plot_csv))
    };
    let base = eval(&full, "full").unwrap();
    let same_stripped = eval(&stripped, "stripped")
        .map(|o| o == base)
        .unwrap_or(false);
    let same_perturbed = eval(&perturbed, "perturbed")
        .map(|o| o == base)
        .unwrap_or(false);
    // A backbone change has to show up, or the comparison proves nothing.
    let control_differs = control.entries != full.entries
        && eval(&control, "control")
            .map(|o| o != base)
            .unwrap_or(false);
    outcome(
        same_stripped && same_perturbed && control_differs && n_aux > 0,
        format!(
            "{n_aux} non-backbone tensors; stripped identical: {same_stripped}, \
             perturbed identical: {same_perturbed}, backbone perturbation changes output: {control_differs}"
        ),
    )
}

fn checkpoint_round_trip(dir: &Path) -> Outcome {
    let first = std::fs::read(dir.join("a").join("best.iclc")).unwrap();
    let decoded = Checkpoint::decode(&first).unwrap();
    let state = trainer::TrainState::from_checkpoint(&decoded).unwrap();
    let second = state.to_checkpoint().encode();
    let identical = first == second;

    let mut bad_magic = first.clone();
    bad_magic[0] ^= 0xFF;
    let mut bad_version = first.clone();
    bad_version[4] = 0xEE;
    let mut bad_count = first.clone();
    bad_count[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    let rejected = [bad_magic, bad_version, bad_count, first[..6].to_vec()]
        .iter()
        .all(|b| Checkpoint::decode(b).is_err());
    outcome(
        identical && rejected,
        format!(
            "{} bytes, save-load-save identical: {identical}; corrupted headers rejected: {rejected}",
            first.len()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let tmp = std::env::temp_dir().join(format!("icl-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&tmp).unwrap();

    let mut all = true;
    let mut check = |n: usize, title: &str, o: Outcome| {
        report(n, title, &o);
        all &= o.passed;
    };
    check(1, "gradient suite", gradients());
    check(2, "attention oracles", attention());
    check(3, "stop-gradient probes", detach());
    check(4, "metric oracles", metric_oracles());
    check(5, "semi-supervised improvement", ssl_improvement());
    check(6, "determinism", determinism(&tmp));
    check(7, "inference-path purity", inference_purity(&tmp));
    check(8, "checkpoint round trip", checkpoint_round_trip(&tmp));

    let _ = std::fs::remove_dir_all(&tmp);
    assert!(
        all,
        "at least one acceptance criterion failed; see the criterion lines above"
    );
}
