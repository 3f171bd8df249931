//! Stationarity and the Lagrange multiplier set
//! `Lambda = {lambda in N_Theta(q(x)) : grad g + grad q^T lambda = 0}`.
//!
//! Multipliers are handled in reduced coordinates `nu` with `lambda = E nu`:
//! one nonnegative coordinate per active orthant row, one per SOC block at a
//! nonzero boundary point (the normal ray), and a full block constrained to
//! `-Q` per SOC block at its vertex. Inactive rows carry no coordinate.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::cones::{self, ConeKind, Reduction};
use crate::conic::{ConicOutcome, ConicProgram, SocRow};
use crate::linalg;
use crate::lp::{LinearProgram, LpOutcome, Relation};
use crate::problem::PointData;

pub const STATIONARITY_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KktError {
    #[error("no multiplier satisfies stationarity (residual {residual:e})")]
    EmptySet { residual: f64 },
    #[error("point is infeasible (residual {residual:e})")]
    Infeasible { residual: f64 },
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    /// m x p embedding of reduced coordinates into multiplier space.
    pub(crate) embed: DMatrix<f64>,
    /// Coordinates constrained to be nonnegative.
    pub(crate) nonneg: Vec<usize>,
    /// (start, len) of coordinate blocks constrained to `-Q`.
    pub(crate) polar_soc: Vec<(usize, usize)>,
}

impl Layout {
    pub(crate) fn new(pd: &PointData) -> Result<Layout, KktError> {
        let m = pd.m();
        let mut cols: Vec<DVector<f64>> = vec![];
        let mut nonneg = vec![];
        let mut polar_soc = vec![];
        for b in &pd.blocks {
            let Some(red) = &b.reduction else {
                return Err(KktError::Infeasible { residual: pd.residual });
            };
            match red {
                Reduction::Inactive => {}
                Reduction::Affine { active } => {
                    for &i in active {
                        let mut e = DVector::zeros(m);
                        e[b.offset + i] = 1.0;
                        nonneg.push(cols.len());
                        cols.push(e);
                    }
                }
                Reduction::SocVertex => {
                    polar_soc.push((cols.len(), b.cone.dim()));
                    for i in 0..b.cone.dim() {
                        let mut e = DVector::zeros(m);
                        e[b.offset + i] = 1.0;
                        cols.push(e);
                    }
                }
                Reduction::SocBoundary { base, .. } => {
                    // Normal ray direction (-1, u), unit length.
                    let g = red.scaled(1.0).grad_h(base);
                    let g = g.row(0).transpose();
                    let g = &g / g.norm();
                    let mut e = DVector::zeros(m);
                    e.rows_mut(b.offset, b.cone.dim()).copy_from(&g);
                    nonneg.push(cols.len());
                    cols.push(e);
                }
            }
        }
        let embed = if cols.is_empty() { DMatrix::zeros(m, 0) } else { DMatrix::from_columns(&cols) };
        Ok(Layout { embed, nonneg, polar_soc })
    }

    pub(crate) fn p(&self) -> usize {
        self.embed.ncols()
    }

    fn project(&self, nu: &DVector<f64>) -> DVector<f64> {
        let mut out = nu.clone();
        for &i in &self.nonneg {
            out[i] = out[i].max(0.0);
        }
        for &(s, len) in &self.polar_soc {
            let blk = out.rows(s, len).into_owned();
            out.rows_mut(s, len).copy_from(&cones::project_polar(ConeKind::Soc(len), &blk));
        }
        out
    }

    pub(crate) fn violation(&self, nu: &DVector<f64>) -> f64 {
        (nu - self.project(nu)).norm()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Stationarity {
    pub is_stationary: bool,
    pub residual: f64,
    pub witness: Option<Vec<f64>>,
}

fn stationarity_residual(grad: &DVector<f64>, a: &DMatrix<f64>, nu: &DVector<f64>) -> f64 {
    if nu.is_empty() {
        grad.norm()
    } else {
        (grad + a * nu).norm()
    }
}

/// `min |grad g + A nu|` over the reduced multiplier cone: accelerated
/// projected gradient followed by an active-set least-squares polish.
fn min_residual(grad: &DVector<f64>, a: &DMatrix<f64>, layout: &Layout) -> DVector<f64> {
    let p = layout.p();
    if p == 0 {
        return DVector::zeros(0);
    }
    let lip = linalg::spectral_norm(a).powi(2);
    if lip == 0.0 {
        return DVector::zeros(p);
    }
    let f = |nu: &DVector<f64>| 0.5 * (grad + a * nu).norm_squared();
    let mut nu = layout.project(&linalg::lstsq(a, &-grad));
    let mut y = nu.clone();
    let mut t = 1.0f64;
    let mut fval = f(&nu);
    for _ in 0..20_000 {
        let gy = a.transpose() * (grad + a * &y);
        let next = layout.project(&(&y - gy / lip));
        let fnext = f(&next);
        if fnext > fval {
            // restart
            y = nu.clone();
            t = 1.0;
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &nu) * ((t - 1.0) / tn);
        let step = (&next - &nu).norm();
        nu = next;
        t = tn;
        fval = fnext;
        if step <= 1e-15 * (1.0 + nu.norm()) || fval.sqrt() <= 1e-15 * (1.0 + grad.norm()) {
            break;
        }
    }
    polish(grad, a, layout, nu)
}

fn polish(grad: &DVector<f64>, a: &DMatrix<f64>, layout: &Layout, start: DVector<f64>) -> DVector<f64> {
    let p = layout.p();
    let scale = 1.0 + start.amax();
    // Free directions in nu-space, one column each.
    let mut free: Vec<DVector<f64>> = vec![];
    let mut sign_cols: Vec<usize> = vec![];
    for &i in &layout.nonneg {
        if start[i] > 1e-10 * scale {
            let mut e = DVector::zeros(p);
            e[i] = 1.0;
            sign_cols.push(free.len());
            free.push(e);
        }
    }
    for &(s, len) in &layout.polar_soc {
        let blk = -start.rows(s, len).into_owned();
        let bn = blk.norm();
        if bn <= 1e-10 * scale {
            continue;
        }
        let tail = blk.rows(1, len - 1).norm();
        if blk[0] - tail > 1e-8 * bn {
            for i in 0..len {
                let mut e = DVector::zeros(p);
                e[s + i] = 1.0;
                free.push(e);
            }
        } else {
            let mut e = DVector::zeros(p);
            e.rows_mut(s, len).copy_from(&(-&blk / bn));
            sign_cols.push(free.len());
            free.push(e);
        }
    }
    let base_res = stationarity_residual(grad, a, &start);
    if free.is_empty() {
        return start;
    }
    let basis = DMatrix::from_columns(&free);
    let mut active: Vec<bool> = vec![true; free.len()];
    for _ in 0..=free.len() {
        let idx: Vec<usize> = (0..free.len()).filter(|&c| active[c]).collect();
        if idx.is_empty() {
            break;
        }
        let sub = DMatrix::from_columns(&idx.iter().map(|&c| basis.column(c).into_owned()).collect::<Vec<_>>());
        let theta = linalg::lstsq(&(a * &sub), &-grad);
        let cand = &sub * &theta;
        // Drop the most negative sign-constrained coordinate and retry.
        let mut worst: Option<(usize, f64)> = None;
        for (k, &c) in idx.iter().enumerate() {
            if sign_cols.contains(&c) && theta[k] < 0.0 && worst.is_none_or(|(_, w)| theta[k] < w) {
                worst = Some((c, theta[k]));
            }
        }
        if let Some((c, _)) = worst {
            active[c] = false;
            continue;
        }
        let in_cone = layout.violation(&cand) <= 1e-12 * (1.0 + cand.norm());
        if in_cone && stationarity_residual(grad, a, &cand) <= base_res {
            return cand;
        }
        break;
    }
    start
}

pub fn stationarity_check(pd: &PointData) -> Stationarity {
    let grad = &pd.objective.gradient;
    let Ok(layout) = Layout::new(pd) else {
        return Stationarity { is_stationary: false, residual: f64::INFINITY, witness: None };
    };
    let a = pd.jacobian().transpose() * &layout.embed;
    let nu = min_residual(grad, &a, &layout);
    let residual = stationarity_residual(grad, &a, &nu);
    let lambda = &layout.embed * &nu;
    Stationarity {
        is_stationary: residual <= STATIONARITY_TOL,
        residual,
        witness: Some(lambda.iter().copied().collect()),
    }
}

/// Affine parameterization `nu = nu0 + N t` of the multiplier set.
#[derive(Debug, Clone)]
pub struct MultiplierSet {
    layout: Layout,
    pub nu0: DVector<f64>,
    pub null_basis: DMatrix<f64>,
    pub lambda0: DVector<f64>,
    /// Columns span the affine directions in multiplier space.
    pub lambda_basis: DMatrix<f64>,
    /// Stationarity matrix `grad q^T E`.
    a: DMatrix<f64>,
    grad: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinMaxResult {
    Bounded { value: f64, argmax: DVector<f64>, cuts_exhausted: bool },
    Unbounded { direction: DVector<f64> },
    Empty,
}

impl LinMaxResult {
    /// `+inf` for unbounded, `None` for an empty set.
    pub fn value(&self) -> Option<f64> {
        match self {
            LinMaxResult::Bounded { value, .. } => Some(*value),
            LinMaxResult::Unbounded { .. } => Some(f64::INFINITY),
            LinMaxResult::Empty => None,
        }
    }
}

pub fn build_multiplier_set(pd: &PointData) -> Result<MultiplierSet, KktError> {
    let grad = pd.objective.gradient.clone();
    let layout = Layout::new(pd)?;
    let a = pd.jacobian().transpose() * &layout.embed;
    let witness = min_residual(&grad, &a, &layout);
    let residual = stationarity_residual(&grad, &a, &witness);
    if residual > STATIONARITY_TOL {
        return Err(KktError::EmptySet { residual });
    }
    let p = layout.p();
    let (nu0, null_basis) = if p == 0 {
        (DVector::zeros(0), DMatrix::zeros(0, 0))
    } else {
        let correction = linalg::lstsq(&a, &(&grad + &a * &witness));
        (&witness - correction, linalg::null_space(&a, linalg::RANK_RTOL))
    };
    let lambda0 = &layout.embed * &nu0;
    let lambda_basis = if p == 0 { DMatrix::zeros(pd.m(), 0) } else { &layout.embed * &null_basis };
    Ok(MultiplierSet { layout, nu0, null_basis, lambda0, lambda_basis, a, grad })
}

impl MultiplierSet {
    pub fn m(&self) -> usize {
        self.lambda0.len()
    }

    /// Dimension of the affine hull parameterization.
    pub fn dim(&self) -> usize {
        self.null_basis.ncols()
    }

    pub fn is_singleton(&self) -> bool {
        self.dim() == 0
    }

    pub fn is_polyhedral(&self) -> bool {
        self.layout.polar_soc.is_empty()
    }

    pub fn lambda_at(&self, t: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return self.lambda0.clone();
        }
        &self.lambda0 + &self.lambda_basis * t
    }

    fn nu_at(&self, t: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return self.nu0.clone();
        }
        &self.nu0 + &self.null_basis * t
    }

    /// Cone violation and stationarity residual of the member at `t`.
    pub fn check_member(&self, t: &DVector<f64>) -> (f64, f64) {
        let nu = self.nu_at(t);
        (self.layout.violation(&nu), stationarity_residual(&self.grad, &self.a, &nu))
    }

    fn conic_program(&self, c_t: DVector<f64>) -> ConicProgram {
        let k = self.dim();
        let mut prog = ConicProgram::new(c_t);
        for &i in &self.layout.nonneg {
            // -(nu0_i + N_i t) <= 0
            let row = -self.null_basis.row(i).transpose();
            prog.linear.push((row, self.nu0[i]));
        }
        for &(s, len) in &self.layout.polar_soc {
            prog.socs.push(SocRow {
                offset: -self.nu0.rows(s, len).into_owned(),
                lin: -self.null_basis.rows(s, len).into_owned(),
            });
        }
        debug_assert_eq!(prog.dim(), k);
        prog
    }

    pub fn maximize_linear(&self, c: &DVector<f64>) -> LinMaxResult {
        let c_nu = self.layout.embed.transpose() * c;
        let constant = c_nu.dot(&self.nu0);
        let k = self.dim();
        if k == 0 {
            return LinMaxResult::Bounded { value: constant, argmax: self.lambda0.clone(), cuts_exhausted: false };
        }
        let c_t = self.null_basis.transpose() * &c_nu;
        if c_t.amax() <= 1e-14 * (1.0 + c.amax()) {
            return LinMaxResult::Bounded { value: constant, argmax: self.lambda0.clone(), cuts_exhausted: false };
        }
        let prog = self.conic_program(c_t.clone());
        if self.is_polyhedral() {
            let mut lp = LinearProgram::new(k);
            lp.objective = c_t.iter().copied().collect();
            for (a, b) in &prog.linear {
                lp.push(a.iter().copied().collect(), Relation::Le, *b);
            }
            return match lp.maximize() {
                LpOutcome::Optimal { x, .. } => {
                    let t = DVector::from_vec(x);
                    LinMaxResult::Bounded {
                        value: constant + c_t.dot(&t),
                        argmax: self.lambda_at(&t),
                        cuts_exhausted: false,
                    }
                }
                LpOutcome::Unbounded { ray, .. } => {
                    let d = &self.lambda_basis * DVector::from_vec(ray);
                    LinMaxResult::Unbounded { direction: &d / d.norm() }
                }
                LpOutcome::Infeasible => LinMaxResult::Empty,
            };
        }
        match prog.maximize(Some(&DVector::zeros(k))) {
            ConicOutcome::Optimal { t, value, cuts_exhausted, .. } => {
                LinMaxResult::Bounded { value: constant + value, argmax: self.lambda_at(&t), cuts_exhausted }
            }
            ConicOutcome::Unbounded { direction } => {
                let d = &self.lambda_basis * direction;
                LinMaxResult::Unbounded { direction: &d / d.norm() }
            }
            ConicOutcome::Infeasible => LinMaxResult::Empty,
        }
    }

    /// Quasi-random members for the test suites: points `t` in a box,
    /// pulled into the set along the segment towards `t = 0`.
    pub fn sample_members(&self, count: usize, radius: f64, seed: u64) -> Vec<DVector<f64>> {
        let k = self.dim();
        if k == 0 {
            return vec![self.lambda0.clone(); count];
        }
        let prog = self.conic_program(DVector::zeros(k));
        let pts = crate::sampling::cube_points(k, count, seed);
        pts.into_iter()
            .map(|u| {
                let t = u.map(|v| radius * (2.0 * v - 1.0));
                let (mut lo, mut hi) = (0.0, 1.0);
                if prog.feasible(&t, 1e-12) {
                    lo = 1.0;
                } else {
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if prog.feasible(&(&t * mid), 1e-12) {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                }
                self.lambda_at(&(t * lo))
            })
            .collect()
    }
}
