use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use finelip::evalharness::EvalReport;
use finelip::io::Checkpoint;
use finelip::Matrix;

fn finelip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_finelip")).args(args).output().unwrap()
}

fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let corpus = path(dir, "c.flcp");
    let ck = path(dir, "m.flck");
    assert!(finelip(&["gen-data", "--seed", "4", "--pairs", "12", "--out", s(&corpus)]).status.success());
    let out = finelip(&["train", "--corpus", s(&corpus), "--out", s(&ck), "--seed", "2", "--epochs", "2", "--batch", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // one metrics line per epoch on stdout
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
    (corpus, ck)
}

#[test]
fn gradcheck_example_passes() {
    let out = finelip(&["gradcheck", "--d", "8", "--batch", "4", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-6);
    assert_eq!(v["pass"], true);
}

#[test]
fn stretch_pe_replaces_the_entry() {
    let dir = tempfile::tempdir().unwrap();
    let input = path(dir.path(), "pe.flck");
    let output = path(dir.path(), "pe248.flck");
    let table = Matrix::from_vec(77, 2, (0..154).map(|k| k as f32 as f64 * 0.5).collect()).unwrap();
    let mut ck = Checkpoint::new();
    ck.push("pos", table.clone());
    ck.save(&input).unwrap();

    let out = finelip(&["stretch-pe", "--input", s(&input), "--out", s(&output)]);
    assert_eq!(out.status.code(), Some(0));
    let got = Checkpoint::load(&output).unwrap();
    let m = got.require("pos").unwrap();
    assert_eq!(m.shape(), (248, 2));
    assert_eq!(m.slice_rows(0, 20).unwrap(), table.slice_rows(0, 20).unwrap());
}

#[test]
fn stretch_pe_needs_an_entry_name_when_ambiguous() {
    let dir = tempfile::tempdir().unwrap();
    let input = path(dir.path(), "two.flck");
    let mut ck = Checkpoint::new();
    ck.push("a", Matrix::zeros(30, 2));
    ck.push("b", Matrix::zeros(30, 2));
    ck.save(&input).unwrap();
    let output = path(dir.path(), "out.flck");
    assert_eq!(finelip(&["stretch-pe", "--input", s(&input), "--out", s(&output)]).status.code(), Some(1));
    assert!(!output.exists());
    let out = finelip(&["stretch-pe", "--input", s(&input), "--out", s(&output), "--entry", "b"]);
    assert_eq!(out.status.code(), Some(0));
    let got = Checkpoint::load(&output).unwrap();
    assert_eq!(got.require("a").unwrap().rows(), 30);
    assert_eq!(got.require("b").unwrap().rows(), 20 + 10 * 4);
}

#[test]
fn eval_report_on_stdout_parses() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, ck) = trained(dir.path());
    let out = finelip(&["eval", "--checkpoint", s(&ck), "--corpus", s(&corpus), "--lambda", "0.3"]);
    assert_eq!(out.status.code(), Some(0));
    let report = EvalReport::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(report.n_pairs, 12);
    assert_eq!(report.config.lambda, 0.3);
}

#[test]
fn score_pair_combines_fine_and_coarse() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, ck) = trained(dir.path());
    let out = finelip(&[
        "score-pair", "--checkpoint", s(&ck), "--corpus", s(&corpus), "--image", "3", "--text", "5", "--lambda", "0.25",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let (f, c, m) = (v["fine"].as_f64().unwrap(), v["coarse"].as_f64().unwrap(), v["combined"].as_f64().unwrap());
    assert!(f.abs() <= 2.0 + 1e-12 && c.abs() <= 1.0 + 1e-12);
    assert!((m - (0.25 * f / 2.0 + 0.75 * c)).abs() < 1e-12);

    let bad = finelip(&["score-pair", "--checkpoint", s(&ck), "--corpus", s(&corpus), "--image", "12", "--text", "0"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn numeric_failure_exits_3() {
    // seed 1 lies about 5e-4 from a kink, inside a 1e-3 stencil
    let out = finelip(&["gradcheck", "--seed", "1", "--eps", "1e-3"]);
    assert_eq!(out.status.code(), Some(3));
}
