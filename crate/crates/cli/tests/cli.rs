use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icl_cli::config::RunConfig;
use icl_core::data::{make_split, read_sample};

fn icl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl"))
        .args(args)
        .output()
        .expect("spawn icl")
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("icl-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const SMALL: &str = "[model]\nheight = 32\nwidth = 32\nbase_width = 4\nheads = 2\n\
                     [train]\nseed = 3\nmax_iters = 6\nval_every = 3\n\
                     [data]\nn_labeled = 2\nn_unlabeled = 3\nn_val = 2\n";

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for pool in ["labeled", "unlabeled", "val"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(pool))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for p in names {
            out.push((
                format!("{pool}/{}", p.file_name().unwrap().to_string_lossy()),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out
}

#[test]
fn gen_data_is_deterministic_and_matches_the_in_memory_split() {
    let dir = scratch("gen");
    let config = write_config(&dir, SMALL);
    for out in ["a", "b"] {
        let o = icl(&["gen-data", "--config", &config, "--out", s(&dir.join(out))]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (tree(&dir.join("a")), tree(&dir.join("b")));
    assert_eq!(a.len(), 2 + 3 + 2);
    assert_eq!(a, b);

    let rc = RunConfig::parse(SMALL).unwrap();
    let split = make_split(&rc.split(), &rc.phantom()).unwrap();
    for (i, sample) in split.labeled.iter().enumerate() {
        let (image, mask, classes) =
            read_sample(&dir.join(format!("a/labeled/{i:04}.icls"))).unwrap();
        assert_eq!(image, sample.image);
        assert_eq!(mask, sample.mask);
        assert_eq!(classes, rc.model.classes);
    }
    let (image, mask, _) = read_sample(&dir.join("a/unlabeled/0000.icls")).unwrap();
    assert_eq!(image, split.unlabeled[0].image);
    assert!(mask.data.iter().all(|&c| c == 0));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn training_from_written_pools_matches_training_from_memory() {
    let dir = scratch("pools");
    let config = write_config(&dir, SMALL);
    assert!(icl(&[
        "gen-data",
        "--config",
        &config,
        "--out",
        s(&dir.join("data"))
    ])
    .status
    .success());
    let from_files_path = dir.join("files.toml");
    fs::write(
        &from_files_path,
        format!("{SMALL}dir = {:?}\n", s(&dir.join("data"))),
    )
    .unwrap();

    let o = icl(&["train", "--config", &config, "--out", s(&dir.join("mem"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = icl(&[
        "train",
        "--config",
        s(&from_files_path),
        "--out",
        s(&dir.join("files")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mem = fs::read_to_string(dir.join("mem/metrics.csv")).unwrap();
    assert_eq!(
        mem,
        fs::read_to_string(dir.join("files/metrics.csv")).unwrap()
    );
    assert!(mem.starts_with("iter,class,dsc,hd95\n"));
    // Two validations, three foreground classes plus the mean each.
    assert_eq!(mem.lines().count(), 1 + 2 * 4);
    for f in ["config.resolved", "best.iclc", "final.iclc"] {
        assert!(dir.join("mem").join(f).is_file(), "missing {f}");
    }

    // Evaluating the final checkpoint reproduces the last validation block.
    let o = icl(&[
        "eval",
        "--checkpoint",
        s(&dir.join("mem/final.iclc")),
        "--data",
        s(&dir.join("data")),
        "--out",
        s(&dir.join("eval")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = fs::read_to_string(dir.join("eval/metrics.csv")).unwrap();
    let last: Vec<&str> = mem.lines().skip(1 + 4).collect();
    assert_eq!(eval.lines().skip(1).collect::<Vec<_>>(), last);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn gen_data_defaults_give_the_standard_pools() {
    let dir = scratch("defaults");
    let o = Command::new(env!("CARGO_BIN_EXE_icl"))
        .arg("gen-data")
        .env("ICL_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let count = |pool: &str| fs::read_dir(dir.join("data").join(pool)).unwrap().count();
    assert_eq!(
        (count("labeled"), count("unlabeled"), count("val")),
        (4, 60, 20)
    );
    assert!(String::from_utf8_lossy(&o.stdout).contains("labeled 4, unlabeled 60, val 20"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn supervised_flag_is_reflected_in_the_resolved_config() {
    let dir = scratch("sup");
    let config = write_config(&dir, SMALL);
    let out = dir.join("run");
    let o = icl(&[
        "train",
        "--config",
        &config,
        "--supervised-only",
        "--max-iters",
        "3",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = RunConfig::load(&out.join("config.resolved")).unwrap();
    assert_eq!(resolved.mode.name(), "supervised");
    assert_eq!(
        (
            resolved.train.alpha,
            resolved.train.beta,
            resolved.train.max_iters
        ),
        (0.0, 0.0, 3)
    );
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = scratch("badkey");
    let config = write_config(&dir, "[train]\nlearning_rate = 0.1\n");
    let o = icl(&["train", "--config", &config, "--out", s(&dir.join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown config keys: train.learning_rate"));
    assert!(!dir.join("x").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn oracle_eval_scores_perfectly() {
    let dir = scratch("eval");
    let config = write_config(&dir, SMALL);
    assert!(icl(&[
        "gen-data",
        "--config",
        &config,
        "--out",
        s(&dir.join("data"))
    ])
    .status
    .success());
    let o = icl(&[
        "train",
        "--config",
        &config,
        "--max-iters",
        "3",
        "--out",
        s(&dir.join("run")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = icl(&[
        "eval",
        "--checkpoint",
        s(&dir.join("run/final.iclc")),
        "--data",
        s(&dir.join("data")),
        "--out",
        s(&dir.join("eval")),
        "--oracle",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(dir.join("eval/metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(
        rows,
        [
            "3,1,1.000000,0.000000",
            "3,2,1.000000,0.000000",
            "3,3,1.000000,0.000000",
            "3,mean,1.000000,0.000000"
        ]
    );
    let plot = fs::read_to_string(dir.join("eval/plot_data.csv")).unwrap();
    assert!(plot.starts_with("case,class,metric,value\n"));
    // Two cases, three classes, two metrics.
    assert_eq!(plot.lines().count(), 1 + 2 * 3 * 2);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn eval_rejects_a_corrupted_checkpoint() {
    let dir = scratch("corrupt");
    fs::write(dir.join("bad.iclc"), b"ICLX\x01\x00\x00\x00").unwrap();
    let o = icl(&[
        "eval",
        "--checkpoint",
        s(&dir.join("bad.iclc")),
        "--data",
        s(&dir),
        "--out",
        s(&dir.join("e")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn verify_exit_codes_follow_the_verdict() {
    let o = icl(&["verify", "--group", "attention", "--group", "losses"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(
        out.lines().filter(|l| l.starts_with("pass")).count(),
        2,
        "{out}"
    );

    let o = icl(&[
        "verify",
        "--group",
        "gradients",
        "--grad-seeds",
        "2",
        "--inject-softmax-flip",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.starts_with("FAIL gradients"), "{out}");
    assert!(out.contains("failed:"), "{out}");

    let o = icl(&["verify", "--group", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}
