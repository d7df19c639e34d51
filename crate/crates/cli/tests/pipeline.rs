//! End-to-end runs of the `dto` command surface on a tiny corpus and model.

use std::fs;
use std::path::{Path, PathBuf};

use dto_cli::checkpoint::sha256_hex;
use dto_cli::report::{read_trajectory, SweepRow};
use dto_cli::run_command;
use dto_core::DeltaAnnotation;

const TINY: &str = r#"{
  "model": {"context": 32, "d_model": 16, "layers": 1, "heads": 2, "d_ff": 32, "init_scale": 0.05},
  "train": {"epochs": 3, "lr": 0.003},
  "unlearn": {"epochs": 2, "lr": 0.001, "batch_size": 4},
  "eval": {"max_retain": 12, "max_general": 12, "max_decode": 12}
}"#;

fn run(args: &[&str]) -> i32 {
    run_command(std::iter::once("dto").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Pipeline {
    corpus: PathBuf,
    orig: PathBuf,
    rt: PathBuf,
    unlearned: PathBuf,
    annotations: PathBuf,
    eval: PathBuf,
    sweep: PathBuf,
}

fn pipeline(root: &Path) -> Pipeline {
    let config = root.join("run.json");
    fs::write(&config, TINY).unwrap();
    let p = Pipeline {
        corpus: root.join("corpus"),
        orig: root.join("ckpt/orig.dtock"),
        rt: root.join("ckpt/rt.dtock"),
        unlearned: root.join("runs/k0.2/unlearned.dtock"),
        annotations: root.join("delta.jsonl"),
        eval: root.join("eval.json"),
        sweep: root.join("sweep.csv"),
    };
    let gen = [
        "gen-corpus", "--seed", "7", "--authors", "10", "--qa-per-author", "4", "--general", "12",
        "--forget-frac", "0.1", "--out", s(&p.corpus),
    ];
    assert_eq!(run(&gen), 0);
    let c = s(&config);
    assert_eq!(run(&["train", "--corpus", s(&p.corpus), "--config", c, "--out", s(&p.orig)]), 0);
    assert_eq!(
        run(&["train", "--corpus", s(&p.corpus), "--config", c, "--exclude-forget", "--out", s(&p.rt)]),
        0
    );
    let before = sha256_hex(&fs::read(&p.orig).unwrap());
    let unlearn = [
        "unlearn", "--ckpt", s(&p.orig), "--corpus", s(&p.corpus), "--config", c, "--k", "0.2",
        "--suffix-ratio", "0.25", "--retrained", s(&p.rt), "--out", s(&p.unlearned),
    ];
    assert_eq!(run(&unlearn), 0);
    assert_eq!(sha256_hex(&fs::read(&p.orig).unwrap()), before, "unlearn touched its input");
    let table = root.join("delta.txt");
    let delta = [
        "delta", "--ckpt", s(&p.orig), "--corpus", s(&p.corpus), "--k", "0.2", "--suffix-ratio",
        "0.25", "--out", s(&p.annotations), "--table", s(&table),
    ];
    assert_eq!(run(&delta), 0);
    let eval = [
        "eval", "--ckpt", s(&p.unlearned), "--retrained", s(&p.rt), "--corpus", s(&p.corpus),
        "--config", c, "--out", s(&p.eval),
    ];
    assert_eq!(run(&eval), 0);
    assert_eq!(run(&["report", "--runs", s(&root.join("runs")), "--out", s(&p.sweep)]), 0);
    p
}

fn artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let p = pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    assert_eq!(fa.len(), fb.len());
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }

    let run_dir = p.unlearned.parent().unwrap();
    for f in ["trajectory.csv", "config.json", "annotations.jsonl", "projection_audit.csv"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let trajectory = read_trajectory(&run_dir.join("trajectory.csv")).unwrap();
    assert_eq!(trajectory.len(), 3);
    assert!(trajectory.iter().all(|r| r.forget_quality.is_some()));

    let anns: Vec<DeltaAnnotation> = fs::read_to_string(&p.annotations)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(anns.len(), 4);
    assert!(anns.iter().all(|a| !a.targets.is_empty()));
    assert!(fs::read_to_string(a.path().join("delta.txt")).unwrap().contains('*'));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&p.eval).unwrap()).unwrap();
    assert!(report["forget_quality"].is_number());
    let csv = fs::read_to_string(p.eval.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let mut rdr = csv::Reader::from_path(&p.sweep).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        &header[..6],
        ["k", "suffix_ratio", "epoch", "forget_quality", "model_utility", "forget_rouge"]
    );
    let rows: Vec<SweepRow> = rdr.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), [0, 1, 2]);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["gen-corpus", "--bogus", "1", "--out", "x"]), 2);
    assert_eq!(run(&["train", "--corpus", "x"]), 2);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn pipeline_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    assert_eq!(run(&["gen-corpus", "--authors", "3", "--out", s(&corpus)]), 1);
    assert_eq!(run(&["gen-corpus", "--authors", "10", "--qa-per-author", "2", "--general", "4", "--out", s(&corpus)]), 0);

    let bad_config = root.join("bad.json");
    fs::write(&bad_config, r#"{"train": {"lr": 0.01, "momentum": 0.9}}"#).unwrap();
    let ckpt = root.join("m.dtock");
    assert_eq!(
        run(&["train", "--corpus", s(&corpus), "--config", s(&bad_config), "--out", s(&ckpt)]),
        1
    );
    assert!(!ckpt.exists());

    let bogus = root.join("bogus.dtock");
    fs::write(&bogus, b"XXXXXXXXjunk").unwrap();
    assert_eq!(run(&["eval", "--ckpt", s(&bogus), "--retrained", s(&bogus), "--corpus", s(&corpus), "--out", s(&root.join("e.json"))]), 1);

    // a checkpoint trained on another corpus is rejected by vocabulary hash
    let config = root.join("tiny.json");
    fs::write(&config, TINY).unwrap();
    assert_eq!(run(&["train", "--corpus", s(&corpus), "--config", s(&config), "--epochs", "1", "--out", s(&ckpt)]), 0);
    let other = root.join("other");
    assert_eq!(run(&["gen-corpus", "--seed", "8", "--authors", "10", "--qa-per-author", "2", "--general", "4", "--out", s(&other)]), 0);
    assert_eq!(run(&["delta", "--ckpt", s(&ckpt), "--corpus", s(&other), "--out", s(&root.join("d.jsonl"))]), 1);

    // forget quality without a retrained model is an explicit failure
    assert_eq!(run(&["eval", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--out", s(&root.join("e.json"))]), 1);

    let empty = root.join("empty_runs");
    fs::create_dir(&empty).unwrap();
    assert_eq!(run(&["report", "--runs", s(&empty), "--out", s(&root.join("sweep.csv"))]), 1);
}

#[test]
fn report_skips_broken_runs_and_separates_k() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let trajectory = "epoch,unlearn_loss,kl_loss,grad_cosine,forget_rouge,forget_quality,model_utility\n\
                      0,0.1,0.0,,1.0,0.001,0.5\n1,2.0,0.01,0.3,0.4,0.2,0.45\n";
    for (name, k) in [("b", 0.3), ("a", 0.1)] {
        let d = runs.join(name);
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("trajectory.csv"), trajectory).unwrap();
        fs::write(d.join("config.json"), format!(r#"{{"unlearn": {{"k": {k}}}}}"#)).unwrap();
    }
    fs::create_dir_all(runs.join("broken")).unwrap();
    let out = dir.path().join("sweep.csv");
    assert_eq!(run(&["report", "--runs", s(&runs), "--out", s(&out)]), 0);
    let rows: Vec<SweepRow> = csv::Reader::from_path(&out)
        .unwrap()
        .deserialize()
        .map(Result::unwrap)
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), [0.1, 0.1, 0.3, 0.3]);
    assert_eq!(rows[2].run, "b");
}
