//! Local solver for `min phi(y)` over `Gamma = {y : q(y) in Theta}`,
//! optionally intersected with a ball.
//!
//! Quadratic penalty continuation `phi + rho * dist^2(q(y), Theta)` with a
//! damped Newton method per stage, then a Gauss–Newton restoration that
//! drives the feasibility residual to round-off.

use nalgebra::{DMatrix, DVector};

use crate::cones;
use crate::problem::Problem;

pub const RESTORE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// `|y - x|^2`
    Projection(&'a DVector<f64>),
    /// `g(y) - <v, y>`
    Tilt(&'a DVector<f64>),
    /// `g(y) - <v, y> + (mu/2) |y - anchor|^2`
    AnchoredTilt { v: &'a DVector<f64>, anchor: &'a DVector<f64>, mu: f64 },
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub y: DVector<f64>,
    /// Distance of `q(y)` to `Theta`.
    pub residual: f64,
    /// `phi(y)`.
    pub value: f64,
}

struct Ball<'a> {
    center: &'a DVector<f64>,
    radius: f64,
}

impl Ball<'_> {
    fn project(&self, y: DVector<f64>) -> DVector<f64> {
        let d = &y - self.center;
        let n = d.norm();
        if n <= self.radius {
            y
        } else {
            self.center + d * (self.radius / n)
        }
    }
}

struct Model<'a> {
    p: &'a Problem,
    obj: Objective<'a>,
}

impl Model<'_> {
    fn phi(&self, y: &DVector<f64>) -> Option<f64> {
        match self.obj {
            Objective::Projection(x) => Some((y - x).norm_squared()),
            Objective::Tilt(v) => self.p.objective_value(y.as_slice()).ok().map(|g| g - v.dot(y)),
            Objective::AnchoredTilt { v, anchor, mu } => self
                .p
                .objective_value(y.as_slice())
                .ok()
                .map(|g| g - v.dot(y) + 0.5 * mu * (y - anchor).norm_squared()),
        }
    }

    fn merit(&self, y: &DVector<f64>, rho: f64) -> Option<f64> {
        let phi = self.phi(y)?;
        let r = self.p.residual(y.as_slice()).ok()?;
        let m = phi + rho * r * r;
        m.is_finite().then_some(m)
    }

    /// Gradient and Hessian of the merit function.
    fn derivatives(&self, y: &DVector<f64>, rho: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let n = y.len();
        let (mut g, mut h) = match self.obj {
            Objective::Projection(x) => ((y - x) * 2.0, DMatrix::identity(n, n) * 2.0),
            Objective::Tilt(v) => {
                let b = self.p.objective.eval_bundle(y.as_slice()).ok()?;
                (b.gradient - v, b.hessian)
            }
            Objective::AnchoredTilt { v, anchor, mu } => {
                let b = self.p.objective.eval_bundle(y.as_slice()).ok()?;
                (b.gradient - v + (y - anchor) * mu, b.hessian + DMatrix::identity(n, n) * mu)
            }
        };
        let pd = self.p.evaluate(y).ok()?;
        for b in &pd.blocks {
            let proj = cones::project(b.cone, &b.value);
            let r = &b.value - &proj;
            if r.amax() == 0.0 {
                continue;
            }
            let dp = cones::projection_jacobian(b.cone, &b.value);
            let m = b.cone.dim();
            let i_dp = DMatrix::identity(m, m) - dp;
            g += b.jacobian.transpose() * &r * (2.0 * rho);
            h += b.jacobian.transpose() * i_dp * &b.jacobian * (2.0 * rho);
            for (i, hi) in b.hessians.iter().enumerate() {
                if r[i] != 0.0 {
                    h += hi * (2.0 * rho * r[i]);
                }
            }
        }
        Some((g, (&h + h.transpose()) * 0.5))
    }
}

fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> DVector<f64> {
    let n = g.len();
    let scale = h.amax().max(1e-300);
    let mut shift = 0.0;
    for _ in 0..60 {
        let shifted = h + DMatrix::identity(n, n) * shift;
        if let Some(ch) = shifted.cholesky() {
            let d = ch.solve(&-g);
            if d.iter().all(|v| v.is_finite()) {
                return d;
            }
        }
        shift = if shift == 0.0 { 1e-10 * scale } else { shift * 10.0 };
    }
    -g / scale
}

fn stage(model: &Model, ball: Option<&Ball>, mut y: DVector<f64>, rho: f64, iters: usize) -> DVector<f64> {
    let Some(mut f) = model.merit(&y, rho) else { return y };
    for _ in 0..iters {
        let Some((g, h)) = model.derivatives(&y, rho) else { break };
        let gnorm = g.norm();
        if gnorm <= 1e-14 * (1.0 + f.abs()) {
            break;
        }
        let dir = newton_direction(&g, &h);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand = &y + &dir * t;
            if let Some(b) = ball {
                cand = b.project(cand);
            }
            let step = &cand - &y;
            if let Some(fc) = model.merit(&cand, rho) {
                let decrease = g.dot(&step);
                if fc <= f + 1e-4 * decrease.min(0.0) && fc <= f {
                    accepted = Some((cand, fc, step.norm()));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, fc, step)) = accepted else { break };
        let done = step <= 1e-15 * (1.0 + y.norm()) || f - fc <= 1e-16 * (1.0 + f.abs());
        y = cand;
        f = fc;
        if done {
            break;
        }
    }
    y
}

/// Gauss–Newton on the violated block normals, minimum-norm steps.
fn restore(p: &Problem, mut y: DVector<f64>) -> DVector<f64> {
    let Ok(mut res) = p.residual(y.as_slice()) else { return y };
    for _ in 0..50 {
        if res <= RESTORE_TOL {
            break;
        }
        let Ok(pd) = p.evaluate(&y) else { break };
        let mut rows: Vec<DVector<f64>> = vec![];
        let mut rhs: Vec<f64> = vec![];
        for b in &pd.blocks {
            let r = &b.value - cones::project(b.cone, &b.value);
            let rn = r.norm();
            if rn == 0.0 {
                continue;
            }
            match b.cone {
                cones::ConeKind::Orthant(_) => {
                    for i in 0..b.cone.dim() {
                        if r[i] > 0.0 {
                            rows.push(b.jacobian.row(i).transpose());
                            rhs.push(-r[i]);
                        }
                    }
                }
                cones::ConeKind::Soc(_) => {
                    let nrm = &r / rn;
                    rows.push(b.jacobian.transpose() * nrm);
                    rhs.push(-rn);
                }
            }
        }
        if rows.is_empty() {
            break;
        }
        let a = DMatrix::from_rows(&rows.iter().map(|r| r.transpose()).collect::<Vec<_>>());
        let delta = crate::linalg::lstsq(&a, &DVector::from_vec(rhs));
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = &y + &delta * t;
            if let Ok(rc) = p.residual(cand.as_slice()) {
                if rc < res {
                    y = cand;
                    res = rc;
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    y
}

/// Local minimization from `start`; `None` if the objective cannot be
/// evaluated at the start.
pub fn minimize(
    p: &Problem,
    obj: Objective,
    start: &DVector<f64>,
    ball: Option<(&DVector<f64>, f64)>,
) -> Option<Solution> {
    let model = Model { p, obj };
    let ball = ball.map(|(center, radius)| Ball { center, radius });
    let mut y = match &ball {
        Some(b) => b.project(start.clone()),
        None => start.clone(),
    };
    model.phi(&y)?;
    if !p.blocks.is_empty() || !matches!(obj, Objective::Projection(_)) {
        let stages: &[f64] = if p.blocks.is_empty() { &[0.0] } else { &[1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8, 1e9, 1e10] };
        for &rho in stages {
            y = stage(&model, ball.as_ref(), y, rho, 100);
        }
        if !p.blocks.is_empty() {
            y = restore(p, y);
        }
    }
    let residual = p.residual(y.as_slice()).ok()?;
    let value = model.phi(&y)?;
    Some(Solution { y, residual, value })
}
