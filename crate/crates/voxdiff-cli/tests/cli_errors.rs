//! Black-box checks of the command-line surface: error classes, exit codes,
//! and deterministic phantom output.

use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxdiff"))
        .args(args)
        .output()
        .expect("spawn voxdiff")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn bad_extents_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "phantom",
        "--out",
        dir.path().to_str().unwrap(),
        "--extents",
        "16x16",
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error: usage:"), "{}", stderr(&out));
}

#[test]
fn missing_manifest_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("manifest"), "{}", stderr(&out));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.vxdf");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = run(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        dir.path().join("missing.vxvol").to_str().unwrap(),
        "--out",
        dir.path().join("out.vxvol").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).starts_with("error: checkpoint:"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn evaluate_rejects_mismatched_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "phantom",
        "--out",
        dir.path().to_str().unwrap(),
        "--count",
        "1",
        "--extents",
        "16x16x4",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let a = dir.path().join("pair_000_mr.vxvol");
    let b = dir.path().join("pair_000_ct.vxvol");
    let out = run(&[
        "evaluate",
        "--generated",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--reference",
        a.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error: usage:"), "{}", stderr(&out));
}

#[test]
fn phantom_is_seed_deterministic() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    for d in [&d1, &d2] {
        let out = run(&[
            "phantom",
            "--out",
            d.path().to_str().unwrap(),
            "--count",
            "1",
            "--extents",
            "16x16x4",
            "--seed",
            "9",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for name in ["pair_000_mr.vxvol", "pair_000_ct.vxvol", "manifest.tsv"] {
        let a = std::fs::read(d1.path().join(name)).unwrap();
        let b = std::fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical seeds");
    }
}
