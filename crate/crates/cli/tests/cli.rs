use std::path::PathBuf;
use std::process::{Command, Output};

fn corpus(name: &str, file: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(name).join(file).display().to_string()
}

fn nogap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nogap")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn missing_file_is_an_input_error() {
    let o = nogap(&["analyze", "does-not-exist.prob"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn bad_radii_are_rejected() {
    let f = corpus("square", "function.pw");
    for bad in ["0.1,-1", "x", ""] {
        let o = nogap(&["pw1d", &f, "--radii", bad]);
        assert_eq!(o.status.code(), Some(1), "--radii {bad:?}");
    }
}

#[test]
fn square_reports_every_condition() {
    let o = nogap(&["pw1d", &corpus("square", "function.pw")]);
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for v in r["verdicts"].as_array().unwrap() {
        assert_eq!(v["status"], "holds", "{v}");
        assert!(v["tag"].as_str().is_some_and(|t| !t.is_empty()));
        assert!(v["certification"].is_string());
    }
    assert_eq!(r["qgc"]["verdict"]["modulus"], 2.0);
}

#[test]
fn reports_are_byte_identical_across_runs_and_threads() {
    let f = corpus("licq-nlp", "problem.txt");
    let base = ["analyze", f.as_str(), "--samples", "500", "--seed", "3"];
    let a = nogap(&base);
    let b = nogap(&base);
    let c = nogap(&[&base[..], &["--threads", "3"]].concat());
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
    let other = nogap(&["analyze", f.as_str(), "--samples", "500", "--seed", "4"]);
    assert_ne!(a.stdout, other.stdout);
}

#[test]
fn report_flag_writes_a_file() {
    let dir = std::env::temp_dir().join(format!("nogap-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let out = dir.join("report.json");
    let o = nogap(&["cq", &corpus("degenerate-nlp", "problem.txt"), "--report", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["cq"]["mfcq"], false);
    assert_eq!(r["cq"]["crcq"], false);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn timings_appear_only_on_request() {
    let f = corpus("dyadic-staircase", "function.pw");
    assert!(!stdout(&nogap(&["pw1d", &f])).contains("\"timings\""));
    assert!(stdout(&nogap(&["pw1d", &f, "--timings"])).contains("\"timings\""));
}
