//! End-to-end runs of the `amad` binary.

use std::path::Path;
use std::process::{Command, Output};

fn amad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amad"))
        .args(args)
        .env("AMAD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = amad(args);
    assert!(
        out.status.success(),
        "amad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const TINY: [&str; 12] = [
    "--set",
    "model.d_model=8",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.n_layers=1",
    "--set",
    "model.window_len=10",
    "--set",
    "train.max_epochs=2",
    "--set",
    "train.batch_size=8",
];

fn small_synth(dir: &Path, seed: &str) {
    ok(&[
        "synth", "--seed", seed, "--out", s(dir), "--train-len", "300", "--test-len", "200",
    ]);
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    small_synth(&a, "7");
    small_synth(&b, "7");
    small_synth(&c, "8");
    for f in ["train.csv", "test.csv", "anomalies.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    assert_ne!(read(&a.join("test.csv")), read(&c.join("test.csv")));
    let header = String::from_utf8(read(&a.join("test.csv"))).unwrap();
    assert!(header.lines().next().unwrap().ends_with(",label"));
}

#[test]
fn train_manifest_records_published_defaults() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--seed", "3", "--out", s(&data), "--train-len", "110", "--test-len", "20"]);
    let out = t.path().join("run");
    ok(&[
        "train",
        "--train",
        s(&data.join("train.csv")),
        "--seed",
        "1",
        "--out",
        s(&out),
        "--set",
        "train.max_epochs=1",
    ]);
    let manifest = String::from_utf8(read(&out.join("manifest.cfg"))).unwrap();
    for line in [
        "preset = published",
        "train.lambda = 3",
        "model.n_layers = 3",
        "model.n_heads = 8",
        "model.d_model = 512",
        "model.window_len = 100",
        "train.batch_size = 256",
        "seed = 1",
    ] {
        assert!(manifest.contains(&format!("{line}\n")), "missing {line:?} in\n{manifest}");
    }
    assert!(manifest.contains("artifact.checkpoint.amad.sha256 = "));
    let log = String::from_utf8(read(&out.join("train_log.csv"))).unwrap();
    assert!(log.starts_with("epoch,recon,cad_l1,contrastive,val_recon,lr\n"));
}

#[test]
fn rerunning_a_manifest_reproduces_outputs() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    small_synth(&data, "5");
    let first = t.path().join("first");
    let train_csv = data.join("train.csv");
    let mut args = vec![
        "train",
        "--preset",
        "desk",
        "--train",
        s(&train_csv),
        "--seed",
        "9",
        "--out",
        s(&first),
    ];
    args.extend(TINY);
    ok(&args);
    let second = t.path().join("second");
    ok(&[
        "train",
        "--config",
        s(&first.join("manifest.cfg")),
        "--out",
        s(&second),
    ]);
    for f in ["checkpoint.amad", "train_log.csv"] {
        assert_eq!(read(&first.join(f)), read(&second.join(f)), "{f}");
    }
}

#[test]
fn score_then_eval_emits_metrics() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    small_synth(&data, "2");
    let run = t.path().join("run");
    let train_csv = data.join("train.csv");
    let mut args = vec![
        "train",
        "--preset",
        "desk",
        "--train",
        s(&train_csv),
        "--seed",
        "4",
        "--out",
        s(&run),
    ];
    args.extend(TINY);
    ok(&args);
    let scored = t.path().join("scored");
    let stdout = ok(&[
        "score",
        "--checkpoint",
        s(&run.join("checkpoint.amad")),
        "--series",
        s(&data.join("test.csv")),
        "--train",
        s(&data.join("train.csv")),
        "--ar",
        "2",
        "--out",
        s(&scored),
    ]);
    assert!(stdout.contains("threshold"));
    let trace = String::from_utf8(read(&scored.join("scores.csv"))).unwrap();
    assert!(trace.starts_with("timestamp,score,flag_raw,flag_adjusted,gt\n"));
    assert_eq!(trace.lines().count(), 201);
    let eval = String::from_utf8(read(&scored.join("eval.csv"))).unwrap();
    assert!(eval.starts_with("mode,P,R,F1,TP,FP,FN\n"));

    let table = ok(&["eval", "--scores", s(&scored.join("scores.csv"))]);
    assert_eq!(table.replace("\r\n", "\n"), eval);
}

#[test]
fn eval_of_perfect_flags_is_one() {
    let t = tempfile::tempdir().unwrap();
    let trace = t.path().join("scores.csv");
    std::fs::write(
        &trace,
        "timestamp,score,flag_raw,flag_adjusted,gt\n0,0.1,0,0,0\n1,0.9,1,1,1\n2,0.8,1,1,1\n3,0.2,0,0,0\n",
    )
    .unwrap();
    let table = ok(&["eval", "--scores", s(&trace), "--out", s(&t.path().join("e"))]);
    assert!(table.contains("raw,1,1,1,2,0,0"), "{table}");
    assert!(table.contains("adjusted,1,1,1,2,0,0"), "{table}");
}

#[test]
fn binary_series_train_like_csv() {
    let t = tempfile::tempdir().unwrap();
    let (csv_dir, bin_dir) = (t.path().join("csv"), t.path().join("bin"));
    small_synth(&csv_dir, "6");
    ok(&[
        "synth", "--seed", "6", "--out", s(&bin_dir), "--train-len", "300", "--test-len", "200", "--binary",
    ]);
    let mut ckpts = Vec::new();
    for (name, file) in [("a", csv_dir.join("train.csv")), ("b", bin_dir.join("train.amad"))] {
        let out = t.path().join(name);
        let mut args = vec!["train", "--preset", "desk", "--train", s(&file), "--seed", "1", "--out", s(&out)];
        args.extend(TINY);
        ok(&args);
        ckpts.push(read(&out.join("checkpoint.amad")));
    }
    assert_eq!(ckpts[0], ckpts[1]);
}

#[test]
fn exit_codes() {
    assert_eq!(amad(&["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(amad(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(amad(&["--help"]).status.code(), Some(0));
    // Missing seed is a usage error.
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    small_synth(&data, "1");
    let out = amad(&["train", "--train", s(&data.join("train.csv")), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    // Missing and malformed data are data errors.
    let out = amad(&["train", "--train", "/no/such.csv", "--seed", "1", "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let bad = t.path().join("bad.csv");
    std::fs::write(&bad, "a,b\n1,2\n3,x\n").unwrap();
    let out = amad(&["train", "--train", s(&bad), "--seed", "1", "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    // Invalid hyperparameters are configuration errors.
    let out = amad(&[
        "train", "--train", s(&data.join("train.csv")), "--seed", "1", "--out", s(&t.path().join("o")),
        "--set", "train.lambda=-1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = amad(&["train", "--set", "no.such.key=1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn grid_writes_cells_and_marginals() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    small_synth(&data, "3");
    let out = t.path().join("grid");
    let (train_csv, test_csv) = (data.join("train.csv"), data.join("test.csv"));
    let mut args = vec![
        "grid",
        "--train",
        s(&train_csv),
        "--test",
        s(&test_csv),
        "--seed",
        "2",
        "--out",
        s(&out),
        "--alphas",
        "0.3,0.9",
        "--taus",
        "0.07",
        "--set",
        "train.max_epochs=1",
    ];
    args.extend(&TINY[..8]);
    ok(&args);
    let grid = String::from_utf8(read(&out.join("grid.csv"))).unwrap();
    assert_eq!(grid.lines().count(), 1 + 2 + 2 + 1);
    assert!(grid.starts_with("kind,alpha,tau,P,R,F1,error\n"));
}
