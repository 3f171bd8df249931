//! Constraint qualifications: MFCQ (primal and dual LPs), CRCQ on a sampled
//! neighbourhood, the dual form of RCQ, and an empirical MSCQ probe.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::conic::{ConicOutcome, ConicProgram, SocRow};
use crate::descent::{self, Objective};
use crate::kkt::Layout;
use crate::linalg;
use crate::lp::{LinearProgram, LpOutcome, Relation};
use crate::problem::{PointData, Problem};
use crate::sampling;

pub const MFCQ_TOL: f64 = 1e-9;
pub const RCQ_TOL: f64 = 1e-7;
pub const MAX_CRCQ_ROWS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CqError {
    #[error("{found} active constraints exceed the CRCQ subset limit of {limit}")]
    TooManyActiveConstraints { found: usize, limit: usize },
}

/// `None` when the problem has SOC blocks (the check is stated for orthants).
pub fn check_mfcq(pd: &PointData) -> Option<bool> {
    if pd.has_soc() {
        return None;
    }
    let active = pd.active_orthant_rows();
    if active.is_empty() {
        return Some(true);
    }
    let n = pd.n();
    let j = pd.jacobian();
    // variables (d, s): maximize s, grad_i . d + s <= 0, |d| <= 1, s <= 1
    let mut lp = LinearProgram::new(n + 1);
    lp.objective[n] = 1.0;
    for &i in &active {
        let mut row: Vec<f64> = j.row(i).iter().copied().collect();
        row.push(1.0);
        lp.push(row, Relation::Le, 0.0);
    }
    for k in 0..n {
        lp.bound(k, -1.0, 1.0);
    }
    lp.bound(n, f64::NEG_INFINITY, 1.0);
    match lp.maximize() {
        LpOutcome::Optimal { value, .. } => Some(value > MFCQ_TOL),
        _ => Some(false),
    }
}

/// MFCQ via its alternative: holds iff `{lambda >= 0, sum = 1, sum lambda_i grad q_i = 0}` is empty.
pub fn mfcq_dual(pd: &PointData) -> Option<bool> {
    if pd.has_soc() {
        return None;
    }
    let active = pd.active_orthant_rows();
    if active.is_empty() {
        return Some(true);
    }
    let j = pd.jacobian();
    let k = active.len();
    let mut lp = LinearProgram::new(k);
    lp.nonneg = vec![true; k];
    lp.push(vec![1.0; k], Relation::Eq, 1.0);
    for c in 0..pd.n() {
        lp.push(active.iter().map(|&i| j[(i, c)]).collect(), Relation::Eq, 0.0);
    }
    Some(lp.maximize() == LpOutcome::Infeasible)
}

fn active_gradients(pd: &PointData, rows: &[usize]) -> DMatrix<f64> {
    let j = pd.jacobian();
    j.select_rows(rows.iter())
}

pub fn check_crcq(p: &Problem, pd: &PointData, radius: f64, samples: usize, seed: u64) -> Result<Option<bool>, CqError> {
    if pd.has_soc() {
        return Ok(None);
    }
    let active = pd.active_orthant_rows();
    if active.len() > MAX_CRCQ_ROWS {
        return Err(CqError::TooManyActiveConstraints { found: active.len(), limit: MAX_CRCQ_ROWS });
    }
    if active.is_empty() {
        return Ok(Some(true));
    }
    let base = active_gradients(pd, &active);
    let points = sampling::ball_points(&pd.x, radius, samples, seed);
    let grads: Vec<Option<DMatrix<f64>>> = points
        .par_iter()
        .map(|x| p.evaluate(x).ok().map(|q| active_gradients(&q, &active)))
        .collect();
    let k = active.len();
    for mask in 1u32..(1 << k) {
        let subset: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let r0 = linalg::rank(&base.select_rows(subset.iter()), linalg::RANK_RTOL);
        for g in grads.iter().flatten() {
            if linalg::rank(&g.select_rows(subset.iter()), linalg::RANK_RTOL) != r0 {
                return Ok(Some(false));
            }
        }
    }
    Ok(Some(true))
}

/// RCQ holds iff the only multiplier-like vector in `N_Theta(q(x)) ∩ ker grad q(x)^T` is 0.
pub fn check_rcq_dual(pd: &PointData) -> bool {
    let Ok(layout) = Layout::new(pd) else { return false };
    if layout.p() == 0 {
        return true;
    }
    let a = pd.jacobian().transpose() * &layout.embed;
    if layout.polar_soc.is_empty() {
        let p = layout.p();
        let mut lp = LinearProgram::new(p);
        lp.nonneg = vec![true; p];
        lp.push(vec![1.0; p], Relation::Eq, 1.0);
        for r in 0..a.nrows() {
            lp.push(a.row(r).iter().copied().collect(), Relation::Eq, 0.0);
        }
        return lp.maximize() == LpOutcome::Infeasible;
    }
    let z = linalg::null_space(&a, linalg::RANK_RTOL);
    let k = z.ncols();
    if k == 0 {
        return true;
    }
    // Grid over the unit sphere of the null space.
    let grid_hit = sampling::sphere_points(k, 10_000, 0)
        .iter()
        .any(|t| layout.violation(&(&z * t)) <= RCQ_TOL);
    if grid_hit {
        return false;
    }
    // Exact check: maximize <e, Z t> over the reduced cone, e strictly positive on it.
    let mut e = DVector::zeros(layout.p());
    for &i in &layout.nonneg {
        e[i] = 1.0;
    }
    for &(s, _) in &layout.polar_soc {
        e[s] = -1.0;
    }
    let obj = z.transpose() * &e;
    let mut prog = ConicProgram::new(obj.clone());
    prog.bound = 10.0;
    prog.linear.push((obj, 1.0));
    for &i in &layout.nonneg {
        prog.linear.push((-z.row(i).transpose(), 0.0));
    }
    for &(s, len) in &layout.polar_soc {
        prog.socs.push(SocRow { offset: DVector::zeros(len), lin: -z.rows(s, len).into_owned() });
    }
    match prog.maximize(Some(&DVector::zeros(k))) {
        ConicOutcome::Optimal { value, .. } => value <= RCQ_TOL,
        ConicOutcome::Unbounded { .. } => false,
        ConicOutcome::Infeasible => true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeVerdict {
    Supported,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct MscqProbe {
    pub radius: f64,
    #[serde(serialize_with = "crate::num::ext")]
    pub ratio_bound: f64,
    #[serde(serialize_with = "crate::num::ext")]
    pub ratio_bound_quarter: f64,
    pub samples: usize,
    /// Samples with a positive constraint residual, at both radii.
    pub informative_samples: usize,
    pub verdict: ProbeVerdict,
}

/// Estimated `d(x; Gamma)`: best of three local projections and `x_bar` itself.
pub fn distance_to_feasible(p: &Problem, x: &DVector<f64>, xbar: &DVector<f64>) -> f64 {
    let mut best = (x - xbar).norm();
    let mid = (x + xbar) * 0.5;
    for start in [x, &mid, xbar] {
        if let Some(s) = descent::minimize(p, Objective::Projection(x), start, None) {
            if s.residual <= 1e-9 {
                best = best.min(s.value.max(0.0).sqrt());
            }
        }
    }
    best
}

fn ratio_bound(p: &Problem, xbar: &DVector<f64>, radius: f64, samples: usize, seed: u64) -> (f64, usize) {
    let points = sampling::ball_points(xbar, radius, samples, seed);
    let ratios: Vec<Option<f64>> = points
        .par_iter()
        .map(|x| {
            let den = p.residual(x.as_slice()).ok()?;
            if den <= 1e-12 {
                return None;
            }
            Some(distance_to_feasible(p, x, xbar) / den)
        })
        .collect();
    let used = ratios.iter().flatten().count();
    (ratios.into_iter().flatten().fold(0.0, f64::max), used)
}

pub fn probe_mscq(p: &Problem, xbar: &DVector<f64>, radius: f64, samples: usize, seed: u64) -> MscqProbe {
    let (b1, n1) = ratio_bound(p, xbar, radius, samples, seed);
    let (b2, n2) = ratio_bound(p, xbar, radius / 4.0, samples, seed.wrapping_add(1));
    let stable = if b1.max(b2) <= 1e-12 { true } else { b1 <= 4.0 * b2 && b2 <= 4.0 * b1 };
    let supported = b1.is_finite() && b2.is_finite() && stable;
    MscqProbe {
        radius,
        ratio_bound: b1,
        ratio_bound_quarter: b2,
        samples,
        informative_samples: n1 + n2,
        verdict: if supported { ProbeVerdict::Supported } else { ProbeVerdict::Inconclusive },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CqReport {
    pub mfcq: Option<bool>,
    pub mfcq_dual: Option<bool>,
    pub crcq: Option<bool>,
    pub rcq: bool,
    pub mscq_probe: Option<MscqProbe>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CqOptions {
    pub crcq_radius: f64,
    pub crcq_samples: usize,
    pub mscq_radius: f64,
    pub mscq_samples: usize,
    pub seed: u64,
    pub probe_mscq: bool,
}

impl Default for CqOptions {
    fn default() -> Self {
        CqOptions { crcq_radius: 1e-2, crcq_samples: 64, mscq_radius: 0.1, mscq_samples: 500, seed: 0, probe_mscq: true }
    }
}

pub fn analyze(p: &Problem, pd: &PointData, opts: &CqOptions) -> Result<CqReport, CqError> {
    let mfcq = check_mfcq(pd);
    let dual = mfcq_dual(pd);
    let crcq = check_crcq(p, pd, opts.crcq_radius, opts.crcq_samples, opts.seed)?;
    let rcq = check_rcq_dual(pd);
    let mscq_probe = opts.probe_mscq.then(|| probe_mscq(p, &pd.x, opts.mscq_radius, opts.mscq_samples, opts.seed));
    let mut notes = vec!["MSCQ is assumed throughout; the probe is sampling evidence, not proof".to_string()];
    let mut warnings = vec![];
    if mfcq.is_some() {
        notes.push("for orthant blocks RCQ reduces to MFCQ".into());
    }
    if rcq {
        notes.push("RCQ implies MSCQ".into());
    }
    if crcq == Some(true) {
        notes.push("CRCQ implies MSCQ".into());
        notes.push("under CRCQ a strong local minimizer of an NLP is tilt-stable and conversely".into());
    }
    if mfcq != dual {
        warnings.push("primal and dual MFCQ tests disagree".into());
    }
    if let (Some(m), false) = (mfcq, mfcq == Some(rcq)) {
        warnings.push(format!("MFCQ ({m}) and dual RCQ ({rcq}) disagree on an orthant problem"));
    }
    if let Some(probe) = &mscq_probe {
        if (rcq || crcq == Some(true)) && probe.verdict == ProbeVerdict::Inconclusive {
            warnings.push("a qualification implying MSCQ holds but the MSCQ probe is inconclusive".into());
        }
    }
    Ok(CqReport { mfcq, mfcq_dual: dual, crcq, rcq, mscq_probe, notes, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOC_VERTEX: &str = "vars: x1 x2 x3\nobjective: 0.5*x1^2 + x2^2\nblock soc 3:\n  row: 2*x2^2\n  row: x2^2 - x3\n  row: x2^2 + x3\npoint: 0 0 0\n";
    const NO_MFCQ_CRCQ: &str = "vars: x1 x2 x3\nobjective: -x1 + 0.5*x2^2 + 0.5*x3^2\nblock orthant 3:\n  row: x1 - 0.5*x2^2\n  row: x1 - 0.5*x3^2\n  row: -x1 - 0.5*x2^2 - 0.5*x3^2\npoint: 0 0 0\n";
    const MFCQ_NOT_TILT: &str = "vars: x1 x2 x3\nobjective: -x1 + 0.5*x2^2\nblock orthant 2:\n  row: x1 - x2^4 + x3^2\n  row: x1\npoint: 0 0 0\n";

    fn load(text: &str) -> (Problem, PointData) {
        let p = Problem::parse(text).unwrap();
        let pd = p.evaluate(p.point.as_ref().unwrap()).unwrap();
        (p, pd)
    }

    #[test]
    fn mfcq_examples() {
        let (_, pd) = load(MFCQ_NOT_TILT);
        assert_eq!((check_mfcq(&pd), mfcq_dual(&pd)), (Some(true), Some(true)));
        let (_, pd) = load(NO_MFCQ_CRCQ);
        assert_eq!((check_mfcq(&pd), mfcq_dual(&pd)), (Some(false), Some(false)));
        let (_, pd) = load("vars: x1 x2\nobjective: 0\nblock orthant 1:\n  row: x1\npoint: 0 0\n");
        assert_eq!(check_mfcq(&pd), Some(true));
        let (_, pd) = load(SOC_VERTEX);
        assert_eq!(check_mfcq(&pd), None);
    }

    #[test]
    fn crcq_examples() {
        let (p, pd) = load(NO_MFCQ_CRCQ);
        assert_eq!(check_crcq(&p, &pd, 1e-2, 64, 0), Ok(Some(false)));
        let (p, pd) = load(MFCQ_NOT_TILT);
        assert_eq!(check_crcq(&p, &pd, 1e-2, 64, 0), Ok(Some(false)));
        let (p, pd) = load("vars: x1 x2\nobjective: 0\nblock orthant 2:\n  row: x1 + x2\n  row: 2*x1 + 2*x2\npoint: 0 0\n");
        assert_eq!(check_crcq(&p, &pd, 1e-2, 64, 0), Ok(Some(true)));
    }

    #[test]
    fn rcq_examples() {
        let (_, pd) = load(SOC_VERTEX);
        assert!(!check_rcq_dual(&pd));
        let (_, pd) = load(MFCQ_NOT_TILT);
        assert!(check_rcq_dual(&pd));
        let (_, pd) = load(NO_MFCQ_CRCQ);
        assert!(!check_rcq_dual(&pd));
        // Surjective Jacobian on a vertex block.
        let (_, pd) = load("vars: x1 x2 x3\nobjective: 0\nblock soc 3:\n  row: x1\n  row: x2\n  row: x3\npoint: 0 0 0\n");
        assert!(check_rcq_dual(&pd));
    }

    #[test]
    fn mscq_probe_examples() {
        let (p, pd) = load(SOC_VERTEX);
        let r = probe_mscq(&p, &pd.x, 0.1, 200, 0);
        assert_eq!(r.verdict, ProbeVerdict::Supported, "{r:?}");
        assert!(r.ratio_bound <= 2f64.sqrt() + 0.1, "{r:?}");
        let (p, pd) = load("vars: x1\nobjective: x1^2\npoint: 0\n");
        let r = probe_mscq(&p, &pd.x, 0.1, 50, 0);
        assert_eq!((r.ratio_bound, r.verdict), (0.0, ProbeVerdict::Supported));
    }
}
