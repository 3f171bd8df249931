//! Critical cone, the curvature functional `sigma`, and second-order
//! verdicts with the predicted quadratic-growth modulus.
//!
//! The critical cone used is the linearized one,
//! `{w : grad q(x) w in T_Theta(q(x))} ∩ {grad g(x)}^perp`, which is the
//! right object whenever MSCQ holds at the point.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cones::{self, ConeKind, Reduction};
use crate::conic::{ConicOutcome, ConicProgram, SocRow};
use crate::kkt::{LinMaxResult, MultiplierSet};
use crate::linalg;
use crate::problem::PointData;
use crate::sampling;

pub const VERDICT_TOL: f64 = 1e-7;
pub const MEMBERSHIP_TOL: f64 = 1e-9;
const ZERO_ROW: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SoscError {
    #[error("direction is not in the critical cone (violation {violation:e})")]
    NotInCriticalCone { violation: f64 },
    #[error("multiplier set is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Certification {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConeShape {
    Zero,
    Subspace,
    Polyhedral,
    Conic,
}

/// `K = {w : E w = 0, G w <= 0, A_k w in Q for each k}`, together with a
/// facially reduced description in coordinates `w = Z y`.
#[derive(Debug, Clone)]
pub struct CriticalCone {
    pub n: usize,
    pub equalities: Vec<DVector<f64>>,
    pub inequalities: Vec<DVector<f64>>,
    pub socs: Vec<DMatrix<f64>>,
    /// Orthonormal basis of the smallest subspace containing the cone.
    pub basis: DMatrix<f64>,
    red_ineq: Vec<DVector<f64>>,
    red_socs: Vec<DMatrix<f64>>,
}

fn nonzero(v: &DVector<f64>) -> bool {
    v.amax() > ZERO_ROW
}

fn soc_dist(s: &DVector<f64>) -> f64 {
    cones::distance(ConeKind::Soc(s.len()), s)
}

pub fn build_critical_cone(pd: &PointData) -> CriticalCone {
    let n = pd.n();
    let mut equalities = vec![];
    let mut inequalities = vec![];
    let mut socs = vec![];
    let grad = &pd.objective.gradient;
    if nonzero(grad) {
        equalities.push(grad.clone());
    }
    for b in &pd.blocks {
        match &b.reduction {
            Some(Reduction::Affine { active }) => {
                for &i in active {
                    inequalities.push(b.jacobian.row(i).transpose());
                }
            }
            Some(Reduction::SocVertex) => socs.push(b.jacobian.clone()),
            Some(red @ Reduction::SocBoundary { base, .. }) => {
                let row = (red.grad_h(base) * &b.jacobian).row(0).transpose();
                inequalities.push(row);
            }
            Some(Reduction::Inactive) | None => {}
        }
    }
    let mut k = CriticalCone {
        n,
        equalities,
        inequalities,
        socs,
        basis: DMatrix::identity(n, n),
        red_ineq: vec![],
        red_socs: vec![],
    };
    k.reduce();
    k
}

impl CriticalCone {
    /// Moves implicit equalities into the equality set until none are left,
    /// then expresses the remaining rows in subspace coordinates.
    fn reduce(&mut self) {
        let mut ineq: Vec<DVector<f64>> = self.inequalities.iter().filter(|r| nonzero(r)).cloned().collect();
        let mut socs: Vec<DMatrix<f64>> = self.socs.iter().filter(|a| a.amax() > ZERO_ROW).cloned().collect();
        let mut eq: Vec<DVector<f64>> = self.equalities.iter().filter(|r| nonzero(r)).cloned().collect();
        loop {
            let z = self.basis_for(&eq);
            let d = z.ncols();
            if d == 0 {
                ineq.clear();
                socs.clear();
                break;
            }
            let zi: Vec<DVector<f64>> = ineq.iter().map(|r| z.transpose() * r).collect();
            let zs: Vec<DMatrix<f64>> = socs.iter().map(|a| a * &z).collect();
            let program = |objective: DVector<f64>| {
                let mut p = ConicProgram::new(objective);
                p.bound = 1.0;
                for r in &zi {
                    if nonzero(r) {
                        p.linear.push((r.clone(), 0.0));
                    }
                }
                for a in &zs {
                    p.socs.push(SocRow { offset: DVector::zeros(a.nrows()), lin: a.clone() });
                }
                p
            };
            let is_implicit = |objective: DVector<f64>| -> bool {
                let scale = objective.norm();
                match program(objective).maximize(Some(&DVector::zeros(d))) {
                    ConicOutcome::Optimal { value, upper, .. } => value.max(upper) <= 1e-10 * scale,
                    ConicOutcome::Unbounded { .. } => false,
                    // Only 0 is feasible only if 0 alone; cannot happen since 0 is feasible.
                    ConicOutcome::Infeasible => true,
                }
            };
            let mut changed = false;
            let mut keep = vec![];
            for (r, zr) in ineq.iter().zip(&zi) {
                if !nonzero(zr) {
                    changed = true;
                    continue;
                }
                if is_implicit(-zr.clone()) {
                    eq.push(r.clone());
                    changed = true;
                } else {
                    keep.push(r.clone());
                }
            }
            ineq = keep;
            let mut keep = vec![];
            for (a, za) in socs.iter().zip(&zs) {
                if za.amax() <= ZERO_ROW {
                    changed = true;
                    continue;
                }
                let head = za.row(0).transpose();
                if !nonzero(&head) || is_implicit(head) {
                    for i in 0..a.nrows() {
                        eq.push(a.row(i).transpose());
                    }
                    changed = true;
                } else {
                    keep.push(a.clone());
                }
            }
            socs = keep;
            if !changed {
                break;
            }
        }
        self.basis = self.basis_for(&eq);
        let z = &self.basis;
        self.red_ineq = ineq.iter().map(|r| z.transpose() * r).filter(nonzero).collect();
        self.red_socs = socs.iter().map(|a| a * z).filter(|a| a.amax() > ZERO_ROW).collect();
    }

    fn basis_for(&self, eq: &[DVector<f64>]) -> DMatrix<f64> {
        if eq.is_empty() {
            return DMatrix::identity(self.n, self.n);
        }
        let rows: Vec<_> = eq.iter().map(|r| r.transpose()).collect();
        linalg::null_space(&DMatrix::from_rows(&rows), linalg::RANK_RTOL)
    }

    /// Dimension of the linear hull.
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn shape(&self) -> ConeShape {
        if self.dim() == 0 {
            ConeShape::Zero
        } else if !self.red_socs.is_empty() {
            ConeShape::Conic
        } else if !self.red_ineq.is_empty() {
            ConeShape::Polyhedral
        } else {
            ConeShape::Subspace
        }
    }

    pub fn is_subspace(&self) -> bool {
        matches!(self.shape(), ConeShape::Zero | ConeShape::Subspace)
    }

    /// Largest violation of the linearized constraints at `w`.
    pub fn violation(&self, w: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for r in &self.equalities {
            v = v.max(r.dot(w).abs());
        }
        for r in &self.inequalities {
            v = v.max(r.dot(w).max(0.0));
        }
        for a in &self.socs {
            v = v.max(soc_dist(&(a * w)));
        }
        v
    }

    pub fn contains(&self, w: &DVector<f64>, tol: f64) -> bool {
        self.violation(w) <= tol * (1.0 + w.norm())
    }

    /// Euclidean projection onto the cone.
    pub fn project(&self, w: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(self.n);
        }
        let y = self.basis.transpose() * w;
        &self.basis * self.project_reduced(&y)
    }

    fn project_reduced(&self, y: &DVector<f64>) -> DVector<f64> {
        if self.red_socs.is_empty() {
            if self.red_ineq.is_empty() {
                return y.clone();
            }
            // Moreau: y minus its projection onto the polar, the cone generated by the rows.
            let rows: Vec<_> = self.red_ineq.iter().map(|r| r.transpose()).collect();
            let g = DMatrix::from_rows(&rows);
            let mu = nnls(&g.transpose(), y);
            return y - g.transpose() * mu;
        }
        self.admm_projection(y)
    }

    fn admm_projection(&self, y: &DVector<f64>) -> DVector<f64> {
        let d = y.len();
        let mut blocks: Vec<ConeKind> = vec![];
        let mut rows: Vec<DVector<f64>> = vec![];
        if !self.red_ineq.is_empty() {
            blocks.push(ConeKind::Orthant(self.red_ineq.len()));
            rows.extend(self.red_ineq.iter().cloned());
        }
        for a in &self.red_socs {
            // Stored as `-A y in -Q`... keep the sign convention of the orthant block
            // by working with `s = M y` and projecting blockwise onto the constraint set.
            blocks.push(ConeKind::Soc(a.nrows()));
            rows.extend((0..a.nrows()).map(|i| a.row(i).transpose()));
        }
        let mt: Vec<_> = rows.iter().map(|r| r.transpose()).collect();
        let m = DMatrix::from_rows(&mt);
        let rho = 1.0;
        let lhs = DMatrix::identity(d, d) + m.transpose() * &m * rho;
        let chol = lhs.cholesky().expect("positive definite");
        let project_set = |s: &DVector<f64>| -> DVector<f64> {
            let mut out = s.clone();
            let mut off = 0;
            for &b in &blocks {
                let len = b.dim();
                let part = s.rows(off, len).into_owned();
                let p = match b {
                    ConeKind::Orthant(_) => cones::project(b, &part),
                    ConeKind::Soc(_) => cones::project_soc(&part),
                };
                out.rows_mut(off, len).copy_from(&p);
                off += len;
            }
            out
        };
        let mut x = y.clone();
        let mut s = project_set(&(&m * &x));
        let mut u = DVector::zeros(m.nrows());
        for _ in 0..20_000 {
            x = chol.solve(&(y + m.transpose() * (&s - &u) * rho));
            let mx = &m * &x;
            let s_new = project_set(&(&mx + &u));
            u += &mx - &s_new;
            let r = (&mx - &s_new).norm();
            let dual = (&s_new - &s).norm() * rho;
            s = s_new;
            if r <= 1e-13 * (1.0 + y.norm()) && dual <= 1e-13 * (1.0 + y.norm()) {
                break;
            }
        }
        x
    }
}

/// Lawson–Hanson nonnegative least squares `min |A x - b|, x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * (1.0 + linalg::spectral_norm(a)) * (1.0 + b.norm());
    for _ in 0..(3 * n + 10) {
        let w = a.transpose() * (b - a * &x);
        let cand = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = cand else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(idx.iter());
            let zs = linalg::lstsq(&sub, b);
            if zs.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = zs[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &i) in idx.iter().enumerate() {
                if zs[k] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - zs[k]));
                }
            }
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (zs[k] - x[i]);
                if x[i] <= 1e-15 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x
}

/// The curvature functional split into its `lambda`-independent part and
/// the coefficient vector of the `lambda`-linear part.
fn functional(pd: &PointData, w: &DVector<f64>) -> (f64, DVector<f64>) {
    let constant = w.dot(&(&pd.objective.hessian * w));
    let mut c = DVector::zeros(pd.m());
    for b in &pd.blocks {
        for (i, h) in b.hessians.iter().enumerate() {
            c[b.offset + i] = w.dot(&(h * w));
        }
        if let Some(red @ Reduction::SocBoundary { base, .. }) = &b.reduction {
            // lambda_B = mu * grad h; the extra curvature is mu * a' hess(h) a.
            let gh = red.grad_h(base).row(0).transpose();
            let a = &b.jacobian * w;
            let curv = a.dot(&(&red.hess_h(base)[0] * &a));
            let extra = &gh * (curv / gh.norm_squared());
            let mut blk = c.rows_mut(b.offset, b.cone.dim());
            blk += extra;
        }
    }
    (constant, c)
}

/// `w' hess_x L(x, lambda) w` plus the SOC-boundary curvature term, as a matrix.
pub fn lagrangian_hessian(pd: &PointData, lambda: &DVector<f64>) -> DMatrix<f64> {
    let mut h = pd.objective.hessian.clone();
    for b in &pd.blocks {
        for (i, hi) in b.hessians.iter().enumerate() {
            h += hi * lambda[b.offset + i];
        }
        if let Some(red @ Reduction::SocBoundary { base, .. }) = &b.reduction {
            let gh = red.grad_h(base).row(0).transpose();
            let mu = lambda.rows(b.offset, b.cone.dim()).dot(&gh) / gh.norm_squared();
            h += b.jacobian.transpose() * &red.hess_h(base)[0] * &b.jacobian * mu;
        }
    }
    (&h + h.transpose()) * 0.5
}

fn sigma_unchecked(pd: &PointData, ms: &MultiplierSet, w: &DVector<f64>) -> Result<(f64, Option<DVector<f64>>), SoscError> {
    let (constant, c) = functional(pd, w);
    match ms.maximize_linear(&c) {
        LinMaxResult::Bounded { value, argmax, .. } => Ok((constant + value, Some(argmax))),
        LinMaxResult::Unbounded { .. } => Ok((f64::INFINITY, None)),
        LinMaxResult::Empty => Err(SoscError::Empty),
    }
}

pub fn sigma(pd: &PointData, ms: &MultiplierSet, cone: &CriticalCone, w: &DVector<f64>) -> Result<f64, SoscError> {
    let violation = cone.violation(w);
    if violation > MEMBERSHIP_TOL * (1.0 + w.norm()) {
        return Err(SoscError::NotInCriticalCone { violation });
    }
    sigma_unchecked(pd, ms, w).map(|(v, _)| v)
}

#[derive(Debug, Clone, Serialize)]
pub struct SoscReport {
    pub sonc_holds: bool,
    pub sosc_holds: bool,
    #[serde(serialize_with = "crate::num::ext")]
    pub predicted_modulus: f64,
    /// Certified lower bound on the modulus (eigenvalue bound at a fixed multiplier).
    #[serde(serialize_with = "crate::num::ext")]
    pub lower_bound: f64,
    pub worst_direction: Option<Vec<f64>>,
    pub certification: Certification,
    pub cone_shape: ConeShape,
    pub cone_dim: usize,
    pub sample_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SoscOptions {
    pub samples: usize,
    pub seed: u64,
    pub force_sampled: bool,
    /// Threshold separating `sosc` (`> tol`) from `sonc` (`>= -tol`).
    pub tol: f64,
}

impl Default for SoscOptions {
    fn default() -> Self {
        SoscOptions { samples: 20_000, seed: 0, force_sampled: false, tol: VERDICT_TOL }
    }
}

fn verdicts(modulus: f64, tol: f64) -> (bool, bool) {
    (modulus >= -tol, modulus >= tol)
}

fn projected_min_eigen(z: &DMatrix<f64>, h: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let (v, y) = linalg::min_eigen(&(z.transpose() * h * z));
    (v, z * y)
}

pub fn analyze(pd: &PointData, ms: &MultiplierSet, opts: &SoscOptions) -> Result<SoscReport, SoscError> {
    let cone = build_critical_cone(pd);
    analyze_with_cone(pd, ms, &cone, opts)
}

pub fn analyze_with_cone(
    pd: &PointData,
    ms: &MultiplierSet,
    cone: &CriticalCone,
    opts: &SoscOptions,
) -> Result<SoscReport, SoscError> {
    let shape = cone.shape();
    let d = cone.dim();
    let base = |modulus: f64, lower: f64, worst: Option<DVector<f64>>, cert, count| {
        let (sonc, sosc) = verdicts(modulus, opts.tol);
        SoscReport {
            sonc_holds: sonc,
            sosc_holds: sosc,
            predicted_modulus: modulus,
            lower_bound: lower,
            worst_direction: worst.map(|w| w.iter().copied().collect()),
            certification: cert,
            cone_shape: shape,
            cone_dim: d,
            sample_count: count,
            seed: opts.seed,
        }
    };
    if d == 0 {
        return Ok(base(f64::INFINITY, f64::INFINITY, None, Certification::Exact, 0));
    }
    let z = &cone.basis;
    if cone.is_subspace() && ms.is_singleton() && !opts.force_sampled {
        let h = lagrangian_hessian(pd, &ms.lambda0);
        let (v, w) = projected_min_eigen(z, &h);
        return Ok(base(v, v, Some(w), Certification::Exact, 0));
    }

    let eval = |y: &DVector<f64>| -> Result<(f64, Option<DVector<f64>>), SoscError> {
        let w = z * y;
        sigma_unchecked(pd, ms, &w)
    };
    let raw = sampling::sphere_points(d, opts.samples.max(1), opts.seed);
    let candidates: Vec<DVector<f64>> = raw
        .into_iter()
        .filter_map(|y| {
            let p = cone.project_reduced(&y);
            let n = p.norm();
            (n >= 0.999).then(|| p / n)
        })
        .collect();
    let values: Vec<Result<f64, SoscError>> = candidates.par_iter().map(|y| eval(y).map(|(v, _)| v)).collect();
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(values.len());
    for (i, v) in values.into_iter().enumerate() {
        scored.push((i, v?));
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let polished: Vec<(DVector<f64>, f64)> = scored
        .iter()
        .take(10)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&&(i, v)| polish(cone, &eval, candidates[i].clone(), v))
        .collect();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for (y, v) in polished {
        if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
            best = Some((y, v));
        }
    }
    let count = candidates.len();
    let Some((y, modulus)) = best else {
        // No sample landed in a thin cone; fall back to the eigenvalue bound.
        let h = lagrangian_hessian(pd, &ms.lambda0);
        let (v, w) = projected_min_eigen(z, &h);
        return Ok(base(f64::INFINITY.min(v.max(f64::NEG_INFINITY)), v, Some(w), Certification::Sampled, 0));
    };
    // Any fixed multiplier gives sigma(w) >= w' hess L w on the whole span.
    let mut lower = f64::NEG_INFINITY;
    let mut multipliers = vec![ms.lambda0.clone()];
    if let Ok((_, Some(l))) = eval(&y) {
        multipliers.push(l);
    }
    for l in &multipliers {
        let (v, _) = projected_min_eigen(z, &lagrangian_hessian(pd, l));
        lower = lower.max(v);
    }
    let exact = !opts.force_sampled && modulus.is_finite() && modulus - lower <= 1e-9 * (1.0 + modulus.abs());
    let cert = if exact { Certification::Exact } else { Certification::Sampled };
    let modulus = if exact { lower.min(modulus) } else { modulus };
    Ok(base(modulus, lower, Some(z * y), cert, count))
}

/// Compass search on the sphere, re-projecting onto the cone after each move.
fn polish<F>(cone: &CriticalCone, eval: &F, start: DVector<f64>, value: f64) -> (DVector<f64>, f64)
where
    F: Fn(&DVector<f64>) -> Result<(f64, Option<DVector<f64>>), SoscError>,
{
    if !value.is_finite() {
        return (start, value);
    }
    let d = start.len();
    let (mut y, mut best) = (start, value);
    let mut step = 0.05;
    let mut halvings = 0;
    while halvings < 50 {
        let mut improved = false;
        for i in 0..d {
            for sgn in [1.0, -1.0] {
                let mut cand = y.clone();
                cand[i] += sgn * step;
                let p = cone.project_reduced(&cand);
                let n = p.norm();
                if n < 1e-12 {
                    continue;
                }
                let p = p / n;
                if let Ok((v, _)) = eval(&p) {
                    if v < best {
                        best = v;
                        y = p;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
            halvings += 1;
        }
    }
    (y, best)
}
