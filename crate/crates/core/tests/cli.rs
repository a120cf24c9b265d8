use std::path::Path;
use std::process::{Command, Output};

use locaug::read_tensor;

fn locaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locaug")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = locaug(args);
    assert!(
        out.status.success(),
        "locaug {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn model_hash(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("model_hash="))
        .expect("model hash printed")
        .to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_replay_eval_augment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run1 = tmp.path().join("run1");
    let run2 = tmp.path().join("run2");
    ok(&[
        "gen-data", "--kind", "circle", "--size", "16x16", "--radius", "4", "--count", "4", "--val-count", "2",
        "--out", p(&data),
    ]);
    assert!(data.join("train.txt").exists() && data.join("val.txt").exists());

    let first = ok(&[
        "train", "--data", p(&data), "--val-list", "val.txt", "--variant", "rgb+coord", "--depth", "1", "--widths",
        "4", "--epochs", "2", "--lr", "0.01", "--out", p(&run1),
    ]);
    for f in ["model.lnet", "optim.lopt", "checkpoint.lnet", "checkpoint.lopt", "best.lnet", "manifest.txt"] {
        assert!(run1.join(f).exists(), "{f} missing");
    }
    let manifest = std::fs::read_to_string(run1.join("manifest.txt")).unwrap();
    assert!(manifest.contains("variant=rgb+coord"));
    assert!(manifest.contains("epoch.2.train_loss="));
    assert!(manifest.contains(&format!("run.model_hash={}", model_hash(&first))));

    let replay = ok(&["train", "--config", p(&run1.join("manifest.txt")), "--out", p(&run2)]);
    assert_eq!(model_hash(&first), model_hash(&replay));

    let eval = ok(&[
        "eval", "--model", p(&run1.join("model.lnet")), "--data", p(&data), "--list", "val.txt", "--kv", "--out",
        p(&run1),
    ]);
    assert!(eval.lines().any(|l| l.starts_with("f_beta=")));
    assert!(run1.join("eval_manifest.txt").exists());

    let t = tmp.path().join("x.laug");
    ok(&[
        "augment", "--input", p(&data.join("images/circle_00000.ppm")), "--variant", "rgb+dist+coord", "--output",
        p(&t),
    ]);
    let x = read_tensor(&std::fs::read(&t).unwrap()).unwrap();
    assert_eq!(x.shape(), &[1, 6, 16, 16]);

    let loc = tmp.path().join("loc.laug");
    ok(&["augment", "--height", "5", "--width", "7", "--variant", "rgb+dist+coord", "--norm", "symmetric", "--out", p(&loc)]);
    let x = read_tensor(&std::fs::read(&loc).unwrap()).unwrap();
    assert_eq!(x.shape()[x.shape().len() - 3..], [3, 5, 7]);
}

#[test]
fn errors_are_one_machine_readable_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = locaug(&["train", "--variant", "rgb+hue", "--out", p(tmp.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error kind=config "), "{err}");

    let data = tmp.path().join("d");
    ok(&["gen-data", "--kind", "circle", "--size", "16x16", "--radius", "4", "--count", "4", "--out", p(&data)]);
    let out = locaug(&[
        "train", "--data", p(&data), "--depth", "1", "--widths", "4", "--lr", "1e200", "--epochs", "5", "--out", p(&tmp.path().join("r")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error kind=non_finite_loss "), "{err}");
    assert!(last.contains("step"));

    let out = locaug(&["eval", "--model", p(&tmp.path().join("missing.lnet")), "--data", p(&data)]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error kind=io "));
}

#[test]
fn gradcheck_subcommand_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--instances", "2", "--out", p(tmp.path())]);
    assert!(out.lines().skip(1).all(|l| l.ends_with("PASS")));
}
