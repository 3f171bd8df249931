//! Linear objectives over `{t : A t <= b, offset_k + L_k t in Q}` by Kelley
//! cutting planes: each LP relaxation point that leaves a cone is cut off by
//! the supporting hyperplane `<(-1, s_tail/|s_tail|), s> <= 0`.

use nalgebra::{DMatrix, DVector};

use crate::lp::{LinearProgram, LpOutcome, Relation};

#[derive(Debug, Clone)]
pub struct SocRow {
    pub offset: DVector<f64>,
    pub lin: DMatrix<f64>,
}

impl SocRow {
    fn at(&self, t: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.lin * t
    }
}

#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub objective: DVector<f64>,
    /// `a . t <= b`
    pub linear: Vec<(DVector<f64>, f64)>,
    pub socs: Vec<SocRow>,
    /// Half-width of the artificial box `|t_i| <= bound`.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConicOutcome {
    Optimal { t: DVector<f64>, value: f64, upper: f64, cuts_exhausted: bool },
    Unbounded { direction: DVector<f64> },
    Infeasible,
}

pub const MAX_CUTS: usize = 200;
pub const GAP_TOL: f64 = 1e-9;

fn soc_violation(s: &DVector<f64>) -> f64 {
    let tail = s.rows(1, s.len() - 1).norm();
    (tail - s[0]).max(0.0)
}

impl ConicProgram {
    pub fn new(objective: DVector<f64>) -> Self {
        ConicProgram { objective, linear: vec![], socs: vec![], bound: 1e6 }
    }

    pub fn dim(&self) -> usize {
        self.objective.len()
    }

    pub fn feasible(&self, t: &DVector<f64>, tol: f64) -> bool {
        self.linear.iter().all(|(a, b)| a.dot(t) <= b + tol * (1.0 + b.abs() + a.norm() * t.norm()))
            && self.socs.iter().all(|s| {
                let v = s.at(t);
                soc_violation(&v) <= tol * (1.0 + v.norm())
            })
    }

    /// `seed` must be feasible; it anchors the lower bound.
    pub fn maximize(&self, seed: Option<&DVector<f64>>) -> ConicOutcome {
        let k = self.dim();
        let mut lp = LinearProgram::new(k);
        lp.objective = self.objective.iter().copied().collect();
        for (a, b) in &self.linear {
            lp.push(a.iter().copied().collect(), Relation::Le, *b);
        }
        for i in 0..k {
            lp.bound(i, -self.bound, self.bound);
        }
        let feas_tol = 1e-10;
        let mut best: Option<(DVector<f64>, f64)> = seed.map(|s| (s.clone(), self.objective.dot(s)));
        let mut upper = f64::INFINITY;
        for _round in 0..=MAX_CUTS {
            let t = match lp.maximize() {
                LpOutcome::Optimal { x, .. } => DVector::from_vec(x),
                LpOutcome::Infeasible => return ConicOutcome::Infeasible,
                // The box rules this out; treat as numerical trouble.
                LpOutcome::Unbounded { .. } => return ConicOutcome::Infeasible,
            };
            upper = self.objective.dot(&t);
            let mut violated = false;
            for s in &self.socs {
                let v = s.at(&t);
                if soc_violation(&v) > feas_tol * (1.0 + v.norm()) {
                    violated = true;
                    let m = v.len();
                    let tail = v.rows(1, m - 1).norm();
                    let mut g = DVector::zeros(m);
                    g[0] = -1.0;
                    if tail > 0.0 {
                        for i in 1..m {
                            g[i] = v[i] / tail;
                        }
                    }
                    // g . (offset + lin t) <= 0
                    let a = s.lin.transpose() * &g;
                    lp.push(a.iter().copied().collect(), Relation::Le, -g.dot(&s.offset));
                }
            }
            if !violated {
                return self.finish(t.clone(), upper, upper, false);
            }
            if let Some(s0) = seed {
                // Largest feasible step from the seed towards the relaxation point.
                if self.feasible(&t, feas_tol) {
                    best = Some((t.clone(), upper));
                } else {
                    let (mut lo, mut hi) = (0.0, 1.0);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if self.feasible(&(s0 + (&t - s0) * mid), feas_tol) {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    let p = s0 + (&t - s0) * lo;
                    let val = self.objective.dot(&p);
                    if best.as_ref().is_none_or(|(_, bv)| val > *bv) {
                        best = Some((p, val));
                    }
                }
                let (_, lb) = best.as_ref().expect("seeded");
                if upper - lb <= GAP_TOL * (1.0 + upper.abs()) {
                    let (p, lb) = best.clone().expect("seeded");
                    return self.finish(p, lb, upper, false);
                }
            }
        }
        match best {
            Some((p, lb)) => self.finish(p, lb, upper, true),
            None => ConicOutcome::Infeasible,
        }
    }

    fn finish(&self, t: DVector<f64>, value: f64, upper: f64, cuts_exhausted: bool) -> ConicOutcome {
        // A maximizer pinned against the artificial box means the true
        // problem is unbounded in that direction.
        if t.amax() >= 0.5 * self.bound && value > 1e-6 * self.bound * self.objective.norm() {
            let n = t.norm();
            return ConicOutcome::Unbounded { direction: t / n };
        }
        ConicOutcome::Optimal { t, value, upper, cuts_exhausted }
    }
}
