use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tpa_core::container::{read_container, write_container, TensorMap};

fn tpa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpa")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let out = tpa(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    for sub in ["afpe", "decompose", "synth", "train", "eval", "analyze", "gradcheck"] {
        assert_eq!(code(&tpa(&[sub, "--help"])), 0, "{sub} --help");
    }
}

#[test]
fn unknown_subcommand_exits_one() {
    let out = tpa(&["nonsense"]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());
}

#[test]
fn afpe_dump_writes_basis() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f");
    let out = tpa(&["afpe", "dump", "--seq-len", "30", "--td", "1", "--out", path(&f)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let map = read_container(&f).unwrap();
    let bases = &map["bases"];
    assert_eq!(bases.shape(), &[2, 30]);
    // k = 1: one full cycle over the window
    assert!((bases[[0, 15]] + 1.0).abs() < 1e-12);
    assert!((bases[[1, 15]]).abs() < 1e-12);
}

#[test]
fn afpe_dump_with_params_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p");
    let mut map = TensorMap::new();
    map.insert("hidden.w".into(), ndarray::ArrayD::zeros(ndarray::IxDyn(&[3, 2])));
    map.insert("hidden.b".into(), ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 3])));
    map.insert("output.w".into(), ndarray::ArrayD::zeros(ndarray::IxDyn(&[5, 3])));
    map.insert("output.b".into(), ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 5]), 2.0));
    write_container(&map, &params).unwrap();
    let f = dir.path().join("f");
    let out = tpa(&["afpe", "dump", "--seq-len", "6", "--td", "1", "--params", path(&params), "--out", path(&f)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = &read_container(&f).unwrap()["table"];
    assert_eq!(table.shape(), &[6, 5]);
    assert!(table.iter().all(|&v| v == 2.0));
}

#[test]
fn domain_and_io_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f");
    assert_eq!(code(&tpa(&["afpe", "dump", "--seq-len", "3", "--td", "5", "--out", path(&f)])), 1);
    let missing = dir.path().join("no/such/dir/f");
    assert_eq!(code(&tpa(&["afpe", "dump", "--seq-len", "3", "--td", "1", "--out", path(&missing)])), 2);
    assert_eq!(code(&tpa(&["analyze", "period", "--seq", path(&dir.path().join("absent"))])), 2);
}

#[test]
fn decompose_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x");
    let mut map = TensorMap::new();
    map.insert("a".into(), ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 9]), |i| (i[0] * 9 + i[1]) as f64 * 0.7 - 3.0));
    write_container(&map, &input).unwrap();
    let (t, s) = (dir.path().join("t"), dir.path().join("s"));
    let out = tpa(&["decompose", "--in", path(&input), "--window", "3", "--out-trend", path(&t), "--out-seasonal", path(&s)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (t, s) = (read_container(&t).unwrap(), read_container(&s).unwrap());
    let sum = &t["a"] + &s["a"];
    assert!(sum.iter().zip(map["a"].iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn synth_gen_then_period() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "noise=0\nparts=2\n").unwrap();
    let out = tpa(&["synth", "gen", "--ids", "2", "--seqs-per-id", "3", "--out", path(dir.path()), "--config", path(&cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 6);
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(f.len(), 5);
        let seq = dir.path().join(f[0]);
        assert!(seq.exists());
        let est = tpa(&["analyze", "period", "--seq", path(&seq)]);
        assert_eq!(code(&est), 0);
        assert_eq!(String::from_utf8_lossy(&est.stdout).trim(), f[4]);
    }
}

#[test]
fn train_eval_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.txt");
    fs::write(
        &cfg,
        "parts=2\ntam_layers=1\nchannels=8\nmetric_channels=8\nffn_inner=16\nsteps=5\ntrain_ids=4\ntest_ids=2\nviews=2\nwarmup_steps=1\n",
    )
    .unwrap();
    let out = tpa(&["train", "--config", path(&cfg), "--out", path(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.tnsc", "metrics.csv", "config.txt", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let model = run.join("checkpoint.tnsc");
    let out = tpa(&["eval", "--model", path(&model)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("rank-1"));

    let seqs = dir.path().join("seqs");
    assert_eq!(code(&tpa(&["synth", "gen", "--ids", "1", "--seqs-per-id", "1", "--out", path(&seqs), "--config", path(&cfg)])), 0);
    let prefix = dir.path().join("heat");
    for stage in ["pre", "post"] {
        let out = tpa(&[
            "analyze", "similarity", "--model", path(&model), "--seq", path(&seqs.join("seq_0000_000.tnsc")), "--out", path(&prefix), "--stage", stage,
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let pgm = fs::read(dir.path().join("heat.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n90 90\n255\n"));
        assert_eq!(fs::read_to_string(dir.path().join("heat.csv")).unwrap().lines().count(), 90);
    }
}

#[test]
fn gradcheck_passes() {
    let out = tpa(&["gradcheck", "--instances", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAILED"));
}
