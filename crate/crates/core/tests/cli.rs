use std::path::Path;
use std::process::{Command, Output};

fn exitnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exitnet"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = exitnet(dir, args);
    assert!(
        out.status.success(),
        "exitnet {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn gen_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    for name in ["a.beats", "b.beats"] {
        ok(d.path(), &["gen", "--per-class", "5", "--seed", "3", "--out", name]);
    }
    let a = std::fs::read(d.path().join("a.beats")).unwrap();
    assert_eq!(a, std::fs::read(d.path().join("b.beats")).unwrap());
    ok(d.path(), &["gen", "--per-class", "5", "--seed", "4", "--out", "c.beats"]);
    assert_ne!(a, std::fs::read(d.path().join("c.beats")).unwrap());
}

#[test]
fn train_sweep_and_partition_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen", "--per-class", "6", "--seed", "1", "--out", "b.beats"]);
    ok(p, &["train", "--beats", "b.beats", "--epochs", "1", "--batch-size", "8", "--seed", "1", "--out", "m.dcn"]);

    let history = std::fs::read_to_string(p.join("m.history.csv")).unwrap();
    let header = history.lines().next().unwrap();
    assert!(header.starts_with("epoch,train_acc_exit1,val_acc_exit1"), "{header}");
    assert!(header.ends_with("joint_loss"), "{header}");
    assert_eq!(history.lines().count(), 2);

    ok(p, &["sweep", "--model", "m.json", "--beats", "b.beats", "--thresholds", "0:1:0.01", "--out", "s.csv"]);
    let mut rd = csv::Reader::from_path(p.join("s.csv")).unwrap();
    assert_eq!(rd.records().count(), 101);

    ok(p, &["partition", "--placement", "2", "--roles", "edge,cloud", "--seed", "1", "--out-dir", "part"]);
    let out = ok(p, &["verify", "--plan", "part/partition.plan.json", "--count", "50"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS") && !text.contains("FAIL"), "{text}");
}

#[test]
fn config_errors_name_the_line() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.toml"), "seed = 1\n[data]\nper_clas = 3\n").unwrap();
    let out = exitnet(d.path(), &["gen", "--config", "bad.toml", "--out", "x.beats"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(!d.path().join("x.beats").exists());

    std::fs::write(d.path().join("zero.toml"), "[train]\nepochs = 0\n").unwrap();
    ok(d.path(), &["gen", "--per-class", "2", "--out", "b.beats"]);
    let out = exitnet(d.path(), &["train", "--config", "zero.toml", "--beats", "b.beats", "--out", "m.dcn"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["gen"], &["sweep", "--model", "m.json"], &["gen", "--per-class", "many", "--out", "x"]] {
        assert_eq!(exitnet(d.path(), args).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(exitnet(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn partition_over_budget_fails() {
    let d = tempfile::tempdir().unwrap();
    let out = exitnet(
        d.path(),
        &["partition", "--placement", "2", "--roles", "edge,cloud", "--budget", "1", "--out-dir", "part"],
    );
    assert_eq!(out.status.code(), Some(1));
}
