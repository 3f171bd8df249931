//! Pipelines behind the command-line subcommands and their JSON reports.
//!
//! Every run is a pure function of (input text, options): no timestamps, no
//! thread-dependent reductions, so reports are byte-identical across runs.
//! Wall-clock timings are only included on request.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cq::{self, CqOptions, CqReport, ProbeVerdict};
use crate::kkt::{self, KktError, Stationarity};
use crate::oracle::{self, QgVerdict, QgcEstimate, TiltProbe};
use crate::problem::{Problem, FEASIBILITY_TOL};
use crate::pw1d::{Conditions, Interval, Piecewise1D, Qgc1d, SecondSubderivative, SubderivativeOptions};
use crate::sosc::{self, Certification, SoscOptions, SoscReport};

pub const TOOL: &str = "nogap";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Tilt probe geometry used by `analyze --tilt`.
pub const TILT_RADIUS: f64 = 0.1;
pub const TILT_BALL: f64 = 0.5;
pub const TILT_GRID: usize = 5;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Evaluate,
    Stationarity,
    Multipliers,
    Cq,
    Sosc,
    Oracle,
    Tilt,
    Conditions,
    Growth,
    Subderivative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Holds,
    Fails,
    Supported,
    Inconclusive,
    NotApplicable,
}

impl Status {
    fn of(b: bool) -> Status {
        if b {
            Status::Holds
        } else {
            Status::Fails
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// Decided by a finite computation (LP, eigenvalue, piece enumeration).
    Exact,
    /// Depends on a finite sample of points or directions.
    Sampled,
    /// Heuristic evidence only.
    Probe,
}

impl From<Certification> for Level {
    fn from(c: Certification) -> Level {
        match c {
            Certification::Exact => Level::Exact,
            Certification::Sampled => Level::Sampled,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: &'static str,
    pub status: Status,
    /// The condition, or the characterization the verdict relies on.
    pub tag: &'static str,
    pub certification: Level,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub samples: usize,
    /// `None`: module defaults (`auto` for piecewise functions).
    pub radii: Option<Vec<f64>>,
    pub tol: f64,
    pub tilt: bool,
    pub timings: bool,
    /// Reference point of `pw1d`.
    pub at: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            samples: 20_000,
            radii: None,
            tol: sosc::VERDICT_TOL,
            tilt: false,
            timings: false,
            at: 0.0,
        }
    }
}

/// Malformed or unreadable input (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(pub String);

#[derive(Debug, Clone)]
pub struct Outcome<R> {
    pub report: R,
    pub exit_code: i32,
}

impl<R: Serialize> Outcome<R> {
    pub fn to_json(&self) -> String {
        to_json(&self.report)
    }
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serialization");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Cq,
    Qgc,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Cq => "cq",
            Command::Qgc => "qgc",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiplierSummary {
    pub dim: usize,
    pub singleton: bool,
    pub polyhedral: bool,
    pub lambda0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub problem_digest: String,
    pub seed: u64,
    pub samples: usize,
    pub tol: f64,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub point: Vec<f64>,
    #[serde(serialize_with = "crate::num::ext")]
    pub objective_value: f64,
    pub stationarity: Option<Stationarity>,
    pub multipliers: Option<MultiplierSummary>,
    pub cq: Option<CqReport>,
    pub sosc: Option<SoscReport>,
    pub oracle: Option<QgcEstimate>,
    pub tilt: Option<TiltProbe>,
    pub verdicts: Vec<Verdict>,
    /// Cross-checks between analytic and sampled verdicts that disagree.
    pub consistency_warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Vec<(Stage, f64)>>,
}

impl AnalysisReport {
    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }
}

struct Clock {
    enabled: bool,
    laps: Vec<(Stage, f64)>,
}

impl Clock {
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        if self.enabled {
            self.laps.push((stage, t.elapsed().as_secs_f64()));
        }
        out
    }
}

pub fn load_problem(path: &Path) -> Result<Problem, InputError> {
    Problem::load(path).map_err(|e| InputError(e.to_string()))
}

pub fn run_file(cmd: Command, path: &Path, opts: &RunOptions) -> Result<Outcome<AnalysisReport>, InputError> {
    run_problem(cmd, &load_problem(path)?, opts)
}

pub fn run_problem(cmd: Command, p: &Problem, opts: &RunOptions) -> Result<Outcome<AnalysisReport>, InputError> {
    let xbar = p.require_point().map_err(|e| InputError(e.to_string()))?.clone();
    if xbar.len() != p.n() {
        return Err(InputError(format!("point has length {}, problem has {} variables", xbar.len(), p.n())));
    }
    let mut clock = Clock { enabled: opts.timings, laps: vec![] };
    let mut r = AnalysisReport {
        tool: TOOL,
        version: VERSION,
        command: cmd.name(),
        problem_digest: p.digest(),
        seed: opts.seed,
        samples: opts.samples,
        tol: opts.tol,
        failed_stage: None,
        error: None,
        point: xbar.iter().copied().collect(),
        objective_value: f64::NAN,
        stationarity: None,
        multipliers: None,
        cq: None,
        sosc: None,
        oracle: None,
        tilt: None,
        verdicts: vec![],
        consistency_warnings: vec![],
        timings: None,
    };
    let exit_code = pipeline(cmd, p, &xbar, opts, &mut r, &mut clock)?;
    if opts.timings {
        r.timings = Some(clock.laps);
    }
    Ok(Outcome { report: r, exit_code })
}

fn fail(r: &mut AnalysisReport, stage: Stage, msg: impl ToString) -> i32 {
    r.failed_stage = Some(stage);
    r.error = Some(msg.to_string());
    EXIT_NUMERIC
}

fn pipeline(
    cmd: Command,
    p: &Problem,
    xbar: &DVector<f64>,
    opts: &RunOptions,
    r: &mut AnalysisReport,
    clock: &mut Clock,
) -> Result<i32, InputError> {
    let pd = match clock.time(Stage::Evaluate, || p.evaluate(xbar)) {
        Ok(pd) => pd,
        Err(e) => return Ok(fail(r, Stage::Evaluate, e)),
    };
    r.objective_value = pd.objective.value;
    if pd.residual > FEASIBILITY_TOL {
        return Err(InputError(format!("point is infeasible (constraint residual {:e})", pd.residual)));
    }

    if cmd != Command::Qgc {
        let st = clock.time(Stage::Stationarity, || kkt::stationarity_check(&pd));
        r.verdicts.push(Verdict {
            name: "stationarity",
            status: Status::of(st.is_stationary),
            tag: "first-order: the gradient of g lies in -grad q^T N_Theta(q(x))",
            certification: Level::Exact,
        });
        r.stationarity = Some(st);

        let cq_opts = CqOptions { seed: opts.seed, ..CqOptions::default() };
        match clock.time(Stage::Cq, || cq::analyze(p, &pd, &cq_opts)) {
            Ok(c) => {
                push_cq_verdicts(&mut r.verdicts, &c, pd.has_soc());
                r.cq = Some(c);
            }
            Err(e) => return Ok(fail(r, Stage::Cq, e)),
        }
    }
    if cmd == Command::Cq {
        return Ok(EXIT_OK);
    }

    if cmd == Command::Analyze {
        match clock.time(Stage::Multipliers, || kkt::build_multiplier_set(&pd)) {
            Ok(ms) => {
                r.multipliers = Some(MultiplierSummary {
                    dim: ms.dim(),
                    singleton: ms.is_singleton(),
                    polyhedral: ms.is_polyhedral(),
                    lambda0: ms.lambda0.iter().copied().collect(),
                });
                let so = SoscOptions { samples: opts.samples, seed: opts.seed, force_sampled: false, tol: opts.tol };
                match clock.time(Stage::Sosc, || sosc::analyze(&pd, &ms, &so)) {
                    Ok(s) => {
                        push_sosc_verdicts(&mut r.verdicts, &s);
                        r.sosc = Some(s);
                    }
                    Err(e) => return Ok(fail(r, Stage::Sosc, e)),
                }
            }
            Err(KktError::EmptySet { .. }) => {
                // Not a KKT point: no second-order condition can hold.
                for name in ["sonc", "sosc", "strong_local_minimizer"] {
                    r.verdicts.push(Verdict {
                        name,
                        status: Status::Fails,
                        tag: "requires a nonempty multiplier set",
                        certification: Level::Exact,
                    });
                }
            }
            Err(e) => return Ok(fail(r, Stage::Multipliers, e)),
        }
    }

    let radii = opts.radii.clone().unwrap_or_else(|| oracle::DEFAULT_RADII.to_vec());
    let est = clock.time(Stage::Oracle, || oracle::estimate_qg_modulus(p, xbar, &radii, opts.samples, opts.seed));
    r.verdicts.push(Verdict {
        name: "quadratic_growth",
        status: match est.verdict {
            QgVerdict::Holds(_) => Status::Holds,
            QgVerdict::Fails => Status::Fails,
            QgVerdict::Inconclusive => Status::Inconclusive,
        },
        tag: "g(x) >= g(x_bar) + (kappa/2)|x - x_bar|^2 on feasible samples near x_bar",
        certification: Level::Sampled,
    });
    r.oracle = Some(est);

    if cmd == Command::Analyze && opts.tilt {
        let t = clock.time(Stage::Tilt, || oracle::tilt_probe(p, xbar, TILT_RADIUS, TILT_BALL, TILT_GRID, opts.seed));
        r.verdicts.push(Verdict {
            name: "tilt_stability",
            status: if t.evidence_against { Status::Fails } else { Status::Supported },
            tag: "tilted local minimizers single-valued and Lipschitz near x_bar",
            certification: Level::Probe,
        });
        r.tilt = Some(t);
    }
    r.consistency_warnings = consistency(r);
    Ok(EXIT_OK)
}

fn push_cq_verdicts(out: &mut Vec<Verdict>, c: &CqReport, has_soc: bool) {
    let opt = |v: Option<bool>| v.map(Status::of).unwrap_or(Status::NotApplicable);
    out.push(Verdict {
        name: "mfcq",
        status: opt(c.mfcq),
        tag: "MFCQ: a direction strictly decreasing every active inequality",
        certification: Level::Exact,
    });
    out.push(Verdict {
        name: "crcq",
        status: opt(c.crcq),
        tag: "CRCQ: constant rank of active gradient subsets near x_bar",
        certification: Level::Sampled,
    });
    out.push(Verdict {
        name: "rcq",
        status: Status::of(c.rcq),
        tag: "RCQ (dual form): N_Theta(q(x_bar)) meets ker grad q(x_bar)^T only at 0",
        certification: if has_soc { Level::Sampled } else { Level::Exact },
    });
    let mscq = match &c.mscq_probe {
        Some(m) if m.verdict == ProbeVerdict::Supported => Status::Supported,
        Some(_) => Status::Inconclusive,
        None => Status::NotApplicable,
    };
    out.push(Verdict {
        name: "mscq",
        status: mscq,
        tag: "MSCQ: metric subregularity of q(x) - Theta; standing assumption of the no-gap characterization",
        certification: Level::Probe,
    });
}

fn push_sosc_verdicts(out: &mut Vec<Verdict>, s: &SoscReport) {
    let level = Level::from(s.certification);
    out.push(Verdict {
        name: "sonc",
        status: Status::of(s.sonc_holds),
        tag: "second-order necessary: sup over multipliers of the Lagrangian form plus curvature >= 0 on the critical cone",
        certification: level,
    });
    out.push(Verdict {
        name: "sosc",
        status: Status::of(s.sosc_holds),
        tag: "second-order sufficient: the same form > 0 on the critical cone minus 0",
        certification: level,
    });
    out.push(Verdict {
        name: "strong_local_minimizer",
        status: Status::of(s.sosc_holds),
        tag: "no-gap characterization under MSCQ: strong local minimizer iff sosc, modulus = inf-max value",
        certification: level,
    });
}

fn consistency(r: &AnalysisReport) -> Vec<String> {
    let mut out = vec![];
    let (Some(s), Some(o)) = (&r.sosc, &r.oracle) else { return out };
    match o.verdict {
        QgVerdict::Holds(k) if !s.sonc_holds => {
            out.push(format!("sampled growth holds (kappa {k:e}) but the necessary condition fails"))
        }
        QgVerdict::Fails if s.sosc_holds => out.push("sufficient condition holds but sampled growth fails".into()),
        QgVerdict::Holds(k) if s.sosc_holds && s.predicted_modulus.is_finite() && k < s.predicted_modulus - 0.05 => {
            out.push(format!(
                "sampled modulus {k:e} below the predicted modulus {:e} (radii may be too large)",
                s.predicted_modulus
            ))
        }
        _ => {}
    }
    if let Some(c) = &r.cq {
        out.extend(c.warnings.iter().cloned());
    }
    out
}

// ---------------------------------------------------------------------------
// piecewise functions

#[derive(Debug, Clone, Serialize)]
pub struct SubdifferentialAt {
    pub x: f64,
    pub value: f64,
    pub subdifferential: Interval,
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionalSubderivative {
    pub w: f64,
    pub v: f64,
    pub result: SecondSubderivative,
}

#[derive(Debug, Clone, Serialize)]
pub struct Pw1dReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub function_digest: String,
    pub generator: Option<String>,
    pub x: f64,
    pub tol: f64,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub domain: (f64, f64),
    pub convex: bool,
    /// `∂_p f` at `x` and at the nearest breakpoints to its right.
    pub subdifferentials: Vec<SubdifferentialAt>,
    pub conditions: Option<Conditions>,
    pub qgc: Option<Qgc1d>,
    pub second_subderivative: Vec<DirectionalSubderivative>,
    pub verdicts: Vec<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Vec<(Stage, f64)>>,
}

impl Pw1dReport {
    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }
}

pub fn run_pw1d_file(path: &Path, opts: &RunOptions) -> Result<Outcome<Pw1dReport>, InputError> {
    let f = Piecewise1D::load(path).map_err(|e| InputError(e.to_string()))?;
    run_pw1d(&f, opts)
}

pub fn run_pw1d(f: &Piecewise1D, opts: &RunOptions) -> Result<Outcome<Pw1dReport>, InputError> {
    let x = opts.at;
    f.value(x).map_err(|e| InputError(e.to_string()))?;
    let mut clock = Clock { enabled: opts.timings, laps: vec![] };
    let digest: String = Sha256::digest(f.save().as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    let mut r = Pw1dReport {
        tool: TOOL,
        version: VERSION,
        command: "pw1d",
        function_digest: digest,
        generator: f.generator().map(|g| g.name()),
        x,
        tol: opts.tol,
        failed_stage: None,
        error: None,
        domain: f.domain(),
        convex: f.is_convex(),
        subdifferentials: vec![],
        conditions: None,
        qgc: None,
        second_subderivative: vec![],
        verdicts: vec![],
        timings: None,
    };
    let mut xs = vec![x];
    xs.extend(f.pieces().iter().map(|p| p.lo).filter(|&b| b > x).take(6));
    for &y in &xs {
        if let (Ok(value), Ok(s)) = (f.value(y), f.proximal_subdifferential(y)) {
            r.subdifferentials.push(SubdifferentialAt { x: y, value, subdifferential: s });
        }
    }

    let exit_code = 'run: {
        let c = match clock.time(Stage::Conditions, || {
            f.check_conditions(x, &crate::pw1d::DEFAULT_SCALES, opts.tol)
        }) {
            Ok(c) => c,
            Err(e) => {
                r.failed_stage = Some(Stage::Conditions);
                r.error = Some(e.to_string());
                break 'run EXIT_NUMERIC;
            }
        };
        for (name, b, tag) in [
            ("pd_34", c.pd_34, "<z, w> >= c|w|^2 on the graphical derivative of the subgradient map"),
            ("pd_36", c.pd_36, "<z, w> > 0 on the graphical derivative of the subgradient map, w != 0"),
            ("second_kind", c.second_kind, "every w admits z in D(∂f)(x|0)(w) with <z, w> >= kappa|w|^2"),
        ] {
            r.verdicts.push(Verdict { name, status: Status::of(b), tag, certification: Level::Sampled });
        }
        let stationary = c.stationary;
        r.conditions = Some(c);

        let radii = opts.radii.clone().unwrap_or_else(|| f.auto_radii());
        match clock.time(Stage::Growth, || f.estimate_qgc_1d(x, &radii)) {
            Ok(q) => {
                r.verdicts.push(Verdict {
                    name: "quadratic_growth",
                    status: match q.verdict {
                        QgVerdict::Holds(_) => Status::Holds,
                        QgVerdict::Fails => Status::Fails,
                        QgVerdict::Inconclusive => Status::Inconclusive,
                    },
                    tag: "f(y) >= f(x) + (kappa/2)|y - x|^2, infimum exact over the enumerated pieces",
                    certification: Level::Exact,
                });
                r.qgc = Some(q);
            }
            Err(e) => {
                r.failed_stage = Some(Stage::Growth);
                r.error = Some(e.to_string());
                break 'run EXIT_NUMERIC;
            }
        }

        if stationary {
            let so = SubderivativeOptions::default();
            for w in [1.0, -1.0] {
                match clock.time(Stage::Subderivative, || f.second_subderivative(x, 0.0, w, &so)) {
                    Ok(result) => r.second_subderivative.push(DirectionalSubderivative { w, v: 0.0, result }),
                    Err(e) => {
                        r.failed_stage = Some(Stage::Subderivative);
                        r.error = Some(e.to_string());
                        break 'run EXIT_NUMERIC;
                    }
                }
            }
        }
        EXIT_OK
    };
    if opts.timings {
        r.timings = Some(clock.laps);
    }
    Ok(Outcome { report: r, exit_code })
}
