//! The `tqt` binary end to end: a float graph taken through transform,
//! quantize, calibrate, lower, infer and bitexact, plus error reporting.

use std::path::Path;
use std::process::{Command, Output};

use tqt_core::io::{read_tensor, write_tensor};
use tqt_core::{Rng, Tensor64};
use tqt_harness::desk::desk_cnn;

fn tqt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tqt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tqt(args);
    assert!(
        out.status.success(),
        "tqt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn float_graph_to_integer_inference() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    desk_cnn(&mut Rng::new(3)).save(d("float")).unwrap();

    let ir = ok(&["transform", "--graph", p(&d("float")), "--out", p(&d("opt"))]);
    assert!(!ir.contains("batch_norm") && !ir.contains("avg_pool"));
    ok(&["quantize", "--graph", p(&d("opt")), "--precision", "int4", "--out", p(&d("q"))]);
    ok(&["calibrate", "--graph", p(&d("q")), "--mode", "static", "--out", p(&d("cal"))]);
    let report = std::fs::read_to_string(d("cal").join("calibration.csv")).unwrap();
    assert!(report.starts_with("tensor,method,t,log2_t,b,signed"));
    assert!(report.lines().any(|l| l.contains(",max,") && l.ends_with(",4,true")));

    let lowered = ok(&["lower", "--graph", p(&d("cal")), "--out", p(&d("int"))]);
    assert!(!lowered.is_empty());
    let exact = ok(&["bitexact", "--graph", p(&d("cal")), "--trials", "5"]);
    assert!(exact.contains("0 mismatches"), "{exact}");

    let x: Tensor64 = Rng::new(4).normal_tensor(&[2, 32, 32, 3], 1.0);
    write_tensor(d("x.tqt"), &x).unwrap();
    ok(&["infer", "--graph", p(&d("int")), "--input", p(&d("x.tqt")), "--integer", "--out", p(&d("yi.tqt"))]);
    ok(&["infer", "--graph", p(&d("cal")), "--input", p(&d("x.tqt")), "--quantized", "--out", p(&d("yq.tqt"))]);
    let yi = read_tensor::<i32>(d("yi.tqt")).unwrap();
    let yq = read_tensor::<f64>(d("yq.tqt")).unwrap();
    assert_eq!(yi.shape(), &[2, 8]);
    // The emulated logits are the integers times one common power of two.
    let ratio: Vec<f64> = yq
        .data()
        .iter()
        .zip(yi.data())
        .filter(|(_, &k)| k != 0)
        .map(|(&v, &k)| v / k as f64)
        .collect();
    assert!(!ratio.is_empty());
    assert!(ratio.iter().all(|&r| r == ratio[0] && r.log2().fract() == 0.0));
}

#[test]
fn guidelines_and_gradcheck_report() {
    let g = ok(&["guidelines"]);
    assert!(g.contains("4,0.0354,0.3679,0.98571"));
    assert!(g.contains("8,0.0088,0.3679,0.99921"));
    let c = ok(&["gradcheck", "--points", "200"]);
    assert!(c.contains("points 200"));
}

#[test]
fn toy_writes_a_summary_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "toy", "--sigma", "1", "--optimizer", "log-adam,normed-log-sgd", "--steps", "300", "--out", p(dir.path()),
    ]);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(dir.path().join("log-adam_sigma1.csv").exists());
}

#[test]
fn failures_exit_nonzero_with_one_error_line() {
    let out = tqt(&["lower", "--graph", "/definitely/missing", "--out", "/tmp/unused"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error\tkind="), "{err}");

    let out = tqt(&["train", "--epochs", "9", "--out", "/tmp/unused"]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error\tkind=config\t"));
}
