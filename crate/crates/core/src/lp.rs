//! Dense two-phase tableau simplex with Bland's rule. Intended for the tiny
//! programs that arise here (a handful of variables and rows).

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub rel: Relation,
    pub rhs: f64,
}

/// `maximize c^T x` subject to linear rows; variables are free unless
/// flagged nonnegative.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub rows: Vec<Constraint>,
    pub nonneg: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    /// `ray` is a feasible direction along which the objective increases.
    Unbounded { x: Vec<f64>, ray: Vec<f64> },
    Infeasible,
}

const PIVOT_EPS: f64 = 1e-11;
const FEAS_EPS: f64 = 1e-9;

impl LinearProgram {
    pub fn new(n: usize) -> Self {
        LinearProgram { objective: vec![0.0; n], rows: vec![], nonneg: vec![false; n] }
    }

    pub fn n(&self) -> usize {
        self.objective.len()
    }

    pub fn push(&mut self, coeffs: Vec<f64>, rel: Relation, rhs: f64) {
        debug_assert_eq!(coeffs.len(), self.n());
        self.rows.push(Constraint { coeffs, rel, rhs });
    }

    pub fn bound(&mut self, var: usize, lo: f64, hi: f64) {
        let mut e = vec![0.0; self.n()];
        e[var] = 1.0;
        if lo.is_finite() {
            self.push(e.clone(), Relation::Ge, lo);
        }
        if hi.is_finite() {
            self.push(e, Relation::Le, hi);
        }
    }

    pub fn maximize(&self) -> LpOutcome {
        Tableau::build(self).solve(self)
    }
}

struct Tableau {
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    ncols: usize,
    art_start: usize,
    // structural column -> (variable, sign)
    map: Vec<(usize, f64)>,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Tableau {
        let mut map = vec![];
        for (j, &nn) in lp.nonneg.iter().enumerate() {
            map.push((j, 1.0));
            if !nn {
                map.push((j, -1.0));
            }
        }
        let n_struct = map.len();
        let rows: Vec<(Vec<f64>, Relation, f64)> = lp
            .rows
            .iter()
            .map(|r| {
                let mut c: Vec<f64> = map.iter().map(|&(j, s)| s * r.coeffs[j]).collect();
                let (mut rel, mut rhs) = (r.rel, r.rhs);
                if rhs < 0.0 {
                    c.iter_mut().for_each(|v| *v = -*v);
                    rhs = -rhs;
                    rel = match rel {
                        Relation::Le => Relation::Ge,
                        Relation::Ge => Relation::Le,
                        Relation::Eq => Relation::Eq,
                    };
                }
                (c, rel, rhs)
            })
            .collect();
        let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
        let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
        let art_start = n_struct + n_slack;
        let ncols = art_start + n_art;
        let mut t = vec![];
        let mut basis = vec![];
        let (mut s, mut a) = (n_struct, art_start);
        for (c, rel, rhs) in rows {
            let mut row = vec![0.0; ncols + 1];
            row[..n_struct].copy_from_slice(&c);
            row[ncols] = rhs;
            match rel {
                Relation::Le => {
                    row[s] = 1.0;
                    basis.push(s);
                    s += 1;
                }
                Relation::Ge => {
                    row[s] = -1.0;
                    s += 1;
                    row[a] = 1.0;
                    basis.push(a);
                    a += 1;
                }
                Relation::Eq => {
                    row[a] = 1.0;
                    basis.push(a);
                    a += 1;
                }
            }
            t.push(row);
        }
        Tableau { t, basis, ncols, art_start, map }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.t[r][c];
        for v in self.t[r].iter_mut() {
            *v /= p;
        }
        let prow = self.t[r].clone();
        for (i, row) in self.t.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
    }

    /// Runs simplex iterations for `cost` over columns `< limit`. Returns the
    /// entering column if unbounded.
    fn iterate(&mut self, cost: &[f64], limit: usize) -> Option<usize> {
        let rhs = self.ncols;
        for _ in 0..10_000 {
            // Bland: first column with positive reduced cost.
            let mut enter = None;
            for j in 0..limit {
                if self.basis.contains(&j) {
                    continue;
                }
                let d = cost[j] - self.basis.iter().zip(self.t.iter()).map(|(&b, row)| cost[b] * row[j]).sum::<f64>();
                if d > PIVOT_EPS * (1.0 + cost[j].abs()) {
                    enter = Some(j);
                    break;
                }
            }
            let Some(j) = enter else { return None };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.t.iter().enumerate() {
                if row[j] > PIVOT_EPS {
                    let ratio = row[rhs] / row[j];
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14 * (1.0 + lr.abs())
                                || (ratio <= lr + 1e-14 * (1.0 + lr.abs()) && self.basis[i] < self.basis[li])
                            {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            match leave {
                None => return Some(j),
                Some((i, _)) => self.pivot(i, j),
            }
        }
        None
    }

    fn column_values(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.ncols];
        for (i, &b) in self.basis.iter().enumerate() {
            v[b] = self.t[i][self.ncols];
        }
        v
    }

    fn to_vars(&self, cols: &[f64], n: usize) -> Vec<f64> {
        let mut x = vec![0.0; n];
        for (c, &(j, s)) in self.map.iter().enumerate() {
            x[j] += s * cols[c];
        }
        x
    }

    fn solve(mut self, lp: &LinearProgram) -> LpOutcome {
        let n = lp.n();
        // Phase 1: maximize -sum(artificials).
        if self.art_start < self.ncols {
            let mut cost = vec![0.0; self.ncols];
            cost[self.art_start..].iter_mut().for_each(|c| *c = -1.0);
            self.iterate(&cost, self.ncols);
            let infeas: f64 = self.column_values()[self.art_start..].iter().sum();
            let scale = 1.0 + lp.rows.iter().map(|r| r.rhs.abs()).fold(0.0, f64::max);
            if infeas > FEAS_EPS * scale {
                return LpOutcome::Infeasible;
            }
            // Drive artificials out of the basis; drop redundant rows.
            let mut i = 0;
            while i < self.t.len() {
                if self.basis[i] >= self.art_start {
                    let col = (0..self.art_start).find(|&j| self.t[i][j].abs() > 1e-9);
                    match col {
                        Some(j) => self.pivot(i, j),
                        None => {
                            self.t.remove(i);
                            self.basis.remove(i);
                            continue;
                        }
                    }
                }
                i += 1;
            }
        }
        let mut cost = vec![0.0; self.ncols];
        for (c, &(j, s)) in self.map.iter().enumerate() {
            cost[c] = s * lp.objective[j];
        }
        let limit = self.art_start;
        match self.iterate(&cost, limit) {
            Some(j) => {
                let cols = self.column_values();
                let x = self.to_vars(&cols, n);
                let mut dir = vec![0.0; self.ncols];
                dir[j] = 1.0;
                for (i, &b) in self.basis.iter().enumerate() {
                    dir[b] -= self.t[i][j];
                }
                let ray = self.to_vars(&dir, n);
                LpOutcome::Unbounded { x, ray }
            }
            None => {
                let cols = self.column_values();
                let x = self.to_vars(&cols, n);
                let value = x.iter().zip(lp.objective.iter()).map(|(a, b)| a * b).sum();
                LpOutcome::Optimal { x, value }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_maximum() {
        // max 3x + 5y, x <= 4, 2y <= 12, 3x + 2y <= 18, x,y >= 0 -> 36 at (2, 6)
        let mut lp = LinearProgram::new(2);
        lp.objective = vec![3.0, 5.0];
        lp.nonneg = vec![true, true];
        lp.push(vec![1.0, 0.0], Relation::Le, 4.0);
        lp.push(vec![0.0, 2.0], Relation::Le, 12.0);
        lp.push(vec![3.0, 2.0], Relation::Le, 18.0);
        match lp.maximize() {
            LpOutcome::Optimal { x, value } => {
                assert!((value - 36.0).abs() < 1e-12);
                assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 6.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn free_variables_equalities_and_infeasibility() {
        // max -x s.t. x >= -3, x + y = 1, y <= 10 -> x = -3, y = 4
        let mut lp = LinearProgram::new(2);
        lp.objective = vec![-1.0, 0.0];
        lp.push(vec![1.0, 0.0], Relation::Ge, -3.0);
        lp.push(vec![1.0, 1.0], Relation::Eq, 1.0);
        lp.push(vec![0.0, 1.0], Relation::Le, 10.0);
        match lp.maximize() {
            LpOutcome::Optimal { x, value } => {
                assert!((value - 3.0).abs() < 1e-12);
                assert!((x[1] - 4.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        let mut bad = LinearProgram::new(1);
        bad.push(vec![1.0], Relation::Ge, 2.0);
        bad.push(vec![1.0], Relation::Le, 1.0);
        assert_eq!(bad.maximize(), LpOutcome::Infeasible);
    }

    #[test]
    fn unbounded_ray() {
        // max x + y s.t. x - y <= 1, y >= 0 (x free)
        let mut lp = LinearProgram::new(2);
        lp.objective = vec![1.0, 1.0];
        lp.push(vec![1.0, -1.0], Relation::Le, 1.0);
        lp.push(vec![0.0, 1.0], Relation::Ge, 0.0);
        match lp.maximize() {
            LpOutcome::Unbounded { ray, .. } => {
                assert!(ray[0] + ray[1] > 0.0);
                assert!(ray[0] - ray[1] <= 1e-12);
                assert!(ray[1] >= -1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degenerate_cycling_instance() {
        // Beale's classic cycling example; Bland's rule must terminate.
        let mut lp = LinearProgram::new(4);
        lp.objective = vec![0.75, -150.0, 0.02, -6.0];
        lp.nonneg = vec![true; 4];
        lp.push(vec![0.25, -60.0, -0.04, 9.0], Relation::Le, 0.0);
        lp.push(vec![0.5, -90.0, -0.02, 3.0], Relation::Le, 0.0);
        lp.push(vec![0.0, 0.0, 1.0, 0.0], Relation::Le, 1.0);
        match lp.maximize() {
            LpOutcome::Optimal { value, .. } => assert!((value - 0.05).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }
}
