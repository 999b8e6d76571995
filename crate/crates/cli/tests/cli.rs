use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ltdarts::nas::{ExportFormat, Genotype};
use ltdarts::train::{mode_controlled_keys, RunHistory};

const TINY: &[&str] = &[
    "data.base_count=60",
    "data.size=6",
    "data.test_per_class=10",
    "model.width=3",
    "model.layers=2",
    "model.nodes=4",
    "train.epochs=3",
    "train.batch_size=8",
];

fn ltdarts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltdarts"))
        .args(args)
        .env_remove("LTDARTS_DATA_DIR")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ltdarts(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ltdarts(args).status.code().unwrap()
}

fn tiny_args<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    for kv in TINY {
        v.extend(["--set", kv]);
    }
    v.extend_from_slice(extra);
    v
}

fn train_tiny(out: &Path, extra: &[&str]) -> String {
    let dir = out.to_str().unwrap();
    let mut args = tiny_args("train", &["--out", dir]);
    args.extend_from_slice(extra);
    ok(&args)
}

fn kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn dry_run_modes_differ_only_in_mode_keys() {
    let a = kv(&ok(&["train", "--dry-run", "--mode", "darts-only"]));
    let b = kv(&ok(&["train", "--dry-run", "--mode", "hls"]));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    let mut allowed = mode_controlled_keys();
    allowed.push("run.mode");
    let differing: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
    assert!(!differing.is_empty());
    for k in differing {
        assert!(allowed.contains(&k.as_str()), "{k} differs");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(
        code(&["export-arch", "--checkpoint", "x", "--format", "svg"]),
        2
    );
    assert_eq!(code(&["train", "--dry-run", "--set", "novalue"]), 2);
    assert_eq!(code(&["train", "--dry-run", "--mode", "bogus"]), 2);
    assert_eq!(
        code(&["sweep-mu", "--checkpoint", "x", "--grid", "1:0:0.1"]),
        2
    );
    let bad = ltdarts(&[
        "train",
        "--dry-run",
        "--set",
        "train.epochs=0",
        "--set",
        "data.split=2",
    ]);
    assert_eq!(bad.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(
        msg.contains("train.epochs") && msg.contains("data.split"),
        "{msg}"
    );
}

#[test]
fn runtime_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none");
    let missing = missing.to_str().unwrap();
    assert_eq!(
        code(&["make-longtail", "--input", missing, "--out", missing]),
        1
    );
    assert_eq!(code(&["export-arch", "--checkpoint", missing]), 1);
}

#[test]
fn make_longtail_is_byte_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, ratio: &str, seed: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "make-longtail",
            "--input",
            "synthetic:10,50,4",
            "--imbalance-ratio",
            ratio,
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        (
            fs::read(out.join("manifest.json")).unwrap(),
            fs::read_to_string(out.join("summary.csv")).unwrap(),
        )
    };
    let (m1, s1) = run("a", "10", "4");
    let (m2, s2) = run("b", "10", "4");
    assert_eq!(m1, m2);
    assert_eq!(s1, s2);
    assert!(s1.starts_with("# config-hash: "));
    let retained: Vec<usize> = csv_rows(&s1)
        .iter()
        .map(|r| r[2].parse().unwrap())
        .collect();
    assert_eq!(retained[0], 50);
    assert_eq!(retained[9], 5);
    assert!(retained.windows(2).all(|w| w[0] >= w[1]));

    let (_, flat) = run("c", "1", "4");
    assert!(csv_rows(&flat).iter().all(|r| r[2] == "50"));
    let (m3, _) = run("d", "10", "5");
    assert_ne!(m1, m3);
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    train_tiny(&a, &[]);
    train_tiny(&b, &[]);
    for f in [
        "history.csv",
        "history.json",
        "genotypes.jsonl",
        "checkpoint.bin",
        "config.txt",
        "manifest.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(csv.starts_with("# config-hash: "));
    assert_eq!(csv_rows(&csv).len(), 3);
    assert_eq!(
        fs::read_to_string(a.join("genotypes.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    // A second run into a finished directory must not clobber it.
    let dir = a.to_str().unwrap();
    assert_eq!(code(&tiny_args("train", &["--out", dir])), 1);
}

#[test]
fn interrupted_run_resumes_to_the_same_history() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    train_tiny(&full, &[]);
    train_tiny(&part, &["--stop-after", "1"]);
    let partial = fs::read_to_string(part.join("history.csv")).unwrap();
    assert_eq!(csv_rows(&partial).len(), 1);
    train_tiny(&part, &["--resume"]);
    assert_eq!(
        fs::read(full.join("history.csv")).unwrap(),
        fs::read(part.join("history.csv")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("checkpoint.bin")).unwrap(),
        fs::read(part.join("checkpoint.bin")).unwrap()
    );
    let fresh = tmp.path().join("fresh");
    assert_eq!(
        code(&tiny_args(
            "train",
            &["--out", fresh.to_str().unwrap(), "--resume"]
        )),
        2
    );
}

#[test]
fn sweep_eval_and_export_agree_with_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    train_tiny(&run, &[]);
    let ckpt = run.join("checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();
    let sweep = tmp.path().join("sweep.csv");
    let stdout = ok(&[
        "sweep-mu",
        "--checkpoint",
        ckpt,
        "--grid",
        "0:1:0.1",
        "--out",
        sweep.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&sweep).unwrap();
    assert!(text.starts_with("# config-hash: "));
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("mu,accuracy,acc_class0"));
    let rows = csv_rows(&text);
    assert_eq!(rows.len(), 11);
    let accs: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let best = accs.iter().cloned().fold(f64::MIN, f64::max);
    let argmax = rows[accs.iter().position(|&a| a == best).unwrap()][0].clone();
    assert!(
        stdout.contains(&format!("argmax mu: {argmax} ")),
        "{stdout}"
    );

    let eval = ok(&["eval", "--checkpoint", ckpt, "--mu", "0"]);
    let acc0: f64 = eval
        .lines()
        .find_map(|l| l.strip_prefix("accuracy: "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(acc0, accs[0]);
    let per0 = eval
        .lines()
        .find_map(|l| l.strip_prefix("per-class: "))
        .unwrap();
    assert_eq!(per0, rows[0][2..].join(","));

    let history =
        RunHistory::from_json(&fs::read_to_string(run.join("history.json")).unwrap()).unwrap();
    let genotype = &history.last().unwrap().genotype;
    let json = ok(&["export-arch", "--checkpoint", ckpt, "--format", "json"]);
    assert_eq!(Genotype::from_json(&json).unwrap(), *genotype);
    let dot = tmp.path().join("arch.dot");
    ok(&[
        "export-arch",
        "--checkpoint",
        ckpt,
        "--format",
        "dot",
        "--out",
        dot.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read_to_string(dot).unwrap(),
        genotype.export(ExportFormat::Dot)
    );
}

#[test]
fn untrained_model_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("frozen");
    let dir = run.to_str().unwrap();
    let mut args = tiny_args("train", &["--out", dir]);
    args.extend([
        "--set",
        "train.lr=0",
        "--set",
        "arch.lr=0",
        "--set",
        "train.epochs=1",
    ]);
    ok(&args);
    let csv = ok(&[
        "sweep-mu",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
    ]);
    for row in csv_rows(&csv) {
        let acc: f64 = row[1].parse().unwrap();
        assert!(
            (acc - 1.0 / 3.0).abs() <= 0.25,
            "mu {} accuracy {acc}",
            row[0]
        );
    }
}

#[test]
fn probe_reports_linearity_and_clone_head_invariance() {
    let tmp = tempfile::tempdir().unwrap();
    let plain = tmp.path().join("plain.csv");
    let cloned = tmp.path().join("cloned.csv");
    ok(&tiny_args(
        "probe-theorem1",
        &["--out", plain.to_str().unwrap()],
    ));
    ok(&tiny_args(
        "probe-theorem1",
        &[
            "--clone-heads",
            "--mu-list",
            "0,0.3,0.7,1",
            "--out",
            cloned.to_str().unwrap(),
        ],
    ));

    let header = |text: &str, key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("# {key}: ")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let plain = fs::read_to_string(plain).unwrap();
    assert!(plain.starts_with("# config-hash: "));
    assert!(header(&plain, "max-linearity-residual") < 1e-10);
    assert!(header(&plain, "backbone-norm-ratio") >= 1.0);
    let rows = csv_rows(&plain);
    assert_eq!(rows.len(), 5 * 6);
    for r in &rows {
        assert!(r[4].parse::<f64>().unwrap() < 1e-10, "{r:?}");
    }

    let cloned = fs::read_to_string(cloned).unwrap();
    assert!(header(&cloned, "backbone-mu-spread") < 1e-10);
    let norms: Vec<f64> = csv_rows(&cloned)
        .iter()
        .filter(|r| r[1] == "backbone-weight")
        .map(|r| r[3].parse().unwrap())
        .collect();
    assert_eq!(norms.len(), 4);
    for n in &norms {
        assert!((n - norms[0]).abs() < 1e-10);
    }
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seed", "2"]);
    let line = out
        .lines()
        .find(|l| l.starts_with("max rel err: "))
        .unwrap();
    let err: f64 = line["max rel err: ".len()..]
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4, "{line}");
    assert!(out.contains("supernet"));
}

#[test]
fn matrix_emits_six_rows_with_references() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m");
    let mut args = tiny_args(
        "matrix",
        &[
            "--seeds",
            "0,1",
            "--jobs",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    args.extend(["--set", "train.epochs=2"]);
    let table = ok(&args);
    assert!(table.contains("NOT reproduced"));
    let csv = fs::read_to_string(out.join("matrix.csv")).unwrap();
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 6);
    let refs: Vec<&str> = rows.iter().map(|r| r[8].as_str()).collect();
    assert_eq!(refs, ["64.56", "61.20", "52.14", "65.12", "61.85", "63.12"]);
    assert!(rows
        .iter()
        .all(|r| r[2] == "2" && r[9] == "NOT reproduced at desk scale"));
    assert!(out.join("hls-continuous/seed-1/history.csv").exists());
}
