//! Golden-file corpus: `corpus/<name>/{<input file>, expected.json}`.
//!
//! `expected.json` names the command, its options and a list of
//! expectations addressed by JSON pointer into the report:
//!
//! ```json
//! { "command": "analyze", "file": "problem.txt",
//!   "options": { "seed": 0, "tilt": true },
//!   "expectations": [
//!     { "path": "/cq/rcq", "equals": false, "basis": "reference" },
//!     { "path": "/sosc/predicted_modulus", "approx": 1.0, "tol": 0.01,
//!       "basis": "derived: reduced-Hessian eigenvalue" } ] }
//! ```
//!
//! `basis` is `reference` for verdicts known analytically for the instance and
//! `derived: <oracle>` for values computed independently.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::report::{self, Command, RunOptions, EXIT_OK};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{path}: {msg}")]
    Spec { path: String, msg: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryOptions {
    #[serde(default)]
    pub seed: u64,
    pub samples: Option<usize>,
    pub radii: Option<Vec<f64>>,
    pub tol: Option<f64>,
    #[serde(default)]
    pub tilt: bool,
    pub at: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub path: String,
    pub equals: Option<Value>,
    pub approx: Option<f64>,
    pub tol: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub basis: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntrySpec {
    pub command: String,
    pub file: String,
    pub options: Option<EntryOptions>,
    pub expectations: Vec<Expectation>,
}

#[derive(Debug, Clone)]
pub struct EntryResult {
    pub name: String,
    pub checked: usize,
    pub exit_code: i32,
    pub mismatches: Vec<String>,
}

impl EntryResult {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn as_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => match s.as_str() {
            "+inf" => Some(f64::INFINITY),
            "-inf" => Some(f64::NEG_INFINITY),
            _ => None,
        },
        _ => None,
    }
}

impl Expectation {
    fn validate(&self) -> Result<(), String> {
        let numeric = self.approx.is_some() || self.min.is_some() || self.max.is_some();
        if self.equals.is_some() == numeric {
            return Err(format!("{}: give exactly one of `equals` or a numeric bound", self.path));
        }
        if self.approx.is_some() != self.tol.is_some() {
            return Err(format!("{}: `approx` needs `tol`", self.path));
        }
        let derived = self.basis.strip_prefix("derived:").map(str::trim);
        if self.basis != "reference" && !derived.is_some_and(|o| !o.is_empty()) {
            return Err(format!("{}: basis must be `reference` or `derived: <oracle>`", self.path));
        }
        Ok(())
    }

    /// `None` when the report satisfies the expectation.
    pub fn check(&self, report: &Value) -> Option<String> {
        let Some(got) = report.pointer(&self.path) else {
            return Some(format!("{}: missing from report", self.path));
        };
        if let Some(want) = &self.equals {
            return (got != want).then(|| format!("{}: expected {want}, got {got}", self.path));
        }
        let Some(x) = as_number(got) else {
            return Some(format!("{}: expected a number, got {got}", self.path));
        };
        if let (Some(a), Some(t)) = (self.approx, self.tol) {
            if !((x - a).abs() <= t || x == a) {
                return Some(format!("{}: expected {a} ± {t}, got {x}", self.path));
            }
        }
        if let Some(lo) = self.min {
            if !(x >= lo) {
                return Some(format!("{}: expected >= {lo}, got {x}", self.path));
            }
        }
        if let Some(hi) = self.max {
            if !(x <= hi) {
                return Some(format!("{}: expected <= {hi}, got {x}", self.path));
            }
        }
        None
    }
}

pub fn load_entry(dir: &Path) -> Result<EntrySpec, CorpusError> {
    let path = dir.join("expected.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CorpusError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    let spec: EntrySpec = serde_json::from_str(&text)
        .map_err(|e| CorpusError::Spec { path: path.display().to_string(), msg: e.to_string() })?;
    for e in &spec.expectations {
        e.validate().map_err(|msg| CorpusError::Spec { path: path.display().to_string(), msg })?;
    }
    Ok(spec)
}

pub fn entries(root: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let rd = std::fs::read_dir(root).map_err(|e| CorpusError::Io { path: root.display().to_string(), msg: e.to_string() })?;
    let mut dirs: Vec<PathBuf> =
        rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("expected.json").is_file()).collect();
    dirs.sort();
    Ok(dirs)
}

/// Runs one entry and returns its report as JSON.
pub fn run_entry(dir: &Path, spec: &EntrySpec) -> Result<(Value, i32), CorpusError> {
    let o = spec.options.clone().unwrap_or(EntryOptions {
        seed: 0,
        samples: None,
        radii: None,
        tol: None,
        tilt: false,
        at: None,
    });
    let d = RunOptions::default();
    let opts = RunOptions {
        seed: o.seed,
        samples: o.samples.unwrap_or(d.samples),
        radii: o.radii,
        tol: o.tol.unwrap_or(d.tol),
        tilt: o.tilt,
        timings: false,
        at: o.at.unwrap_or(0.0),
    };
    let file = dir.join(&spec.file);
    let input_err = |e: report::InputError| CorpusError::Spec { path: file.display().to_string(), msg: e.to_string() };
    let (json, code) = match spec.command.as_str() {
        "pw1d" => {
            let out = report::run_pw1d_file(&file, &opts).map_err(input_err)?;
            (out.to_json(), out.exit_code)
        }
        c => {
            let cmd = match c {
                "analyze" => Command::Analyze,
                "cq" => Command::Cq,
                "qgc" => Command::Qgc,
                other => {
                    return Err(CorpusError::Spec { path: dir.display().to_string(), msg: format!("unknown command `{other}`") })
                }
            };
            let out = report::run_file(cmd, &file, &opts).map_err(input_err)?;
            (out.to_json(), out.exit_code)
        }
    };
    let value = serde_json::from_str(&json).expect("report is valid JSON");
    Ok((value, code))
}

pub fn run_corpus(root: &Path) -> Result<Vec<EntryResult>, CorpusError> {
    let dirs = entries(root)?;
    let specs: Vec<EntrySpec> = dirs.iter().map(|d| load_entry(d)).collect::<Result<_, _>>()?;
    dirs.par_iter()
        .zip(specs.par_iter())
        .map(|(dir, spec)| {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let (report, exit_code) = run_entry(dir, spec)?;
            let mut mismatches: Vec<String> = spec.expectations.iter().filter_map(|e| e.check(&report)).collect();
            if exit_code != EXIT_OK {
                mismatches.push(format!("exit code {exit_code}"));
            }
            Ok(EntryResult { name, checked: spec.expectations.len(), exit_code, mismatches })
        })
        .collect()
}

pub fn table(results: &[EntryResult]) -> String {
    let mut s = String::new();
    for r in results {
        let _ = writeln!(s, "{:<28} {:>3} checks  {}", r.name, r.checked, if r.passed() { "ok" } else { "FAIL" });
        for m in &r.mismatches {
            let _ = writeln!(s, "    {m}");
        }
    }
    let passed = results.iter().filter(|r| r.passed()).count();
    let _ = writeln!(s, "{passed}/{} entries passed", results.len());
    s
}
