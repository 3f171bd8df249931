//! Nonpositive orthants and second-order cones: projection, membership,
//! tangent/normal cones and the canonical second-order reductions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

/// Membership slack used when nothing else is specified.
pub const MEMBERSHIP_TOL: f64 = 1e-9;
/// Threshold below which a constraint value counts as active.
pub const ACTIVITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ConeKind {
    /// `{s : s <= 0}` in R^m.
    Orthant(usize),
    /// `{s : s_1 >= |(s_2, .., s_m)|}`.
    Soc(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConeError {
    #[error("point is outside the cone (distance {distance:e})")]
    NotInCone { distance: f64 },
    #[error("vector has length {found}, cone has dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid cone dimension {0}")]
    BadDimension(usize),
}

impl ConeKind {
    pub fn dim(self) -> usize {
        match self {
            ConeKind::Orthant(m) | ConeKind::Soc(m) => m,
        }
    }

    pub fn validate(self) -> Result<(), ConeError> {
        match self {
            ConeKind::Orthant(m) if m >= 1 => Ok(()),
            ConeKind::Soc(m) if m >= 2 => Ok(()),
            _ => Err(ConeError::BadDimension(self.dim())),
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            ConeKind::Orthant(_) => "orthant",
            ConeKind::Soc(_) => "soc",
        }
    }

    fn check(self, y: &DVector<f64>) -> Result<(), ConeError> {
        if y.len() != self.dim() {
            return Err(ConeError::Dimension { expected: self.dim(), found: y.len() });
        }
        Ok(())
    }
}

fn tail_norm(y: &DVector<f64>) -> f64 {
    y.rows(1, y.len() - 1).norm()
}

/// Euclidean projection onto the second-order cone.
pub fn project_soc(y: &DVector<f64>) -> DVector<f64> {
    let s = tail_norm(y);
    let y1 = y[0];
    if s <= y1 {
        return y.clone();
    }
    if s <= -y1 {
        return DVector::zeros(y.len());
    }
    let a = 0.5 * (y1 + s);
    let mut out = DVector::zeros(y.len());
    out[0] = a;
    for i in 1..y.len() {
        out[i] = a * y[i] / s;
    }
    out
}

pub fn project(k: ConeKind, y: &DVector<f64>) -> DVector<f64> {
    match k {
        ConeKind::Orthant(_) => y.map(|v| v.min(0.0)),
        ConeKind::Soc(_) => project_soc(y),
    }
}

/// Projection onto the polar cone (nonnegative orthant, resp. `-Q`).
pub fn project_polar(k: ConeKind, y: &DVector<f64>) -> DVector<f64> {
    match k {
        ConeKind::Orthant(_) => y.map(|v| v.max(0.0)),
        ConeKind::Soc(_) => -project_soc(&-y),
    }
}

pub fn distance(k: ConeKind, y: &DVector<f64>) -> f64 {
    project_polar(k, y).norm()
}

pub fn contains(k: ConeKind, y: &DVector<f64>, tol: f64) -> bool {
    distance(k, y) <= tol
}

/// Derivative of the projection at `y` (an element of the generalized
/// Jacobian on the kink set). Used by the Newton-type local solver.
pub fn projection_jacobian(k: ConeKind, y: &DVector<f64>) -> DMatrix<f64> {
    let m = y.len();
    match k {
        ConeKind::Orthant(_) => DMatrix::from_diagonal(&y.map(|v| if v < 0.0 { 1.0 } else { 0.0 })),
        ConeKind::Soc(_) => {
            let s = tail_norm(y);
            let y1 = y[0];
            if s <= y1 {
                return DMatrix::identity(m, m);
            }
            if s <= -y1 {
                return DMatrix::zeros(m, m);
            }
            let u = y.rows(1, m - 1) / s;
            let mut j = DMatrix::zeros(m, m);
            j[(0, 0)] = 0.5;
            let r = y1 / s;
            for i in 1..m {
                j[(0, i)] = 0.5 * u[i - 1];
                j[(i, 0)] = 0.5 * u[i - 1];
                for l in 1..m {
                    let eye = if i == l { 1.0 + r } else { 0.0 };
                    j[(i, l)] = 0.5 * (eye - r * u[i - 1] * u[l - 1]);
                }
            }
            j
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SocFace {
    Vertex,
    Interior,
    Boundary,
}

fn soc_face(y: &DVector<f64>) -> SocFace {
    if y.norm() <= ACTIVITY_TOL {
        SocFace::Vertex
    } else if y[0] - tail_norm(y) > ACTIVITY_TOL {
        SocFace::Interior
    } else {
        SocFace::Boundary
    }
}

fn require_member(k: ConeKind, y: &DVector<f64>, tol: f64) -> Result<(), ConeError> {
    k.check(y)?;
    let d = distance(k, y);
    if d > tol.max(ACTIVITY_TOL) {
        return Err(ConeError::NotInCone { distance: d });
    }
    Ok(())
}

/// Is `v` in the normal cone to the block cone at `y`?
pub fn normal_cone_test(k: ConeKind, y: &DVector<f64>, v: &DVector<f64>, tol: f64) -> Result<bool, ConeError> {
    require_member(k, y, tol)?;
    k.check(v)?;
    Ok(match k {
        ConeKind::Orthant(_) => y.iter().zip(v.iter()).all(|(&yi, &vi)| {
            let active = yi >= -ACTIVITY_TOL;
            vi >= -tol && (active || vi.abs() <= tol)
        }),
        ConeKind::Soc(_) => match soc_face(y) {
            SocFace::Vertex => -v[0] >= tail_norm(v) - tol,
            SocFace::Interior => v.amax() <= tol,
            SocFace::Boundary => {
                let ray = boundary_normal_ray(y);
                let c = v.dot(&ray).max(0.0);
                (v - ray * c).norm() <= tol
            }
        },
    })
}

/// Is `w` in the tangent cone to the block cone at `y`?
pub fn tangent_cone_test(k: ConeKind, y: &DVector<f64>, w: &DVector<f64>, tol: f64) -> Result<bool, ConeError> {
    require_member(k, y, tol)?;
    k.check(w)?;
    Ok(match k {
        ConeKind::Orthant(_) => y.iter().zip(w.iter()).all(|(&yi, &wi)| yi < -ACTIVITY_TOL || wi <= tol),
        ConeKind::Soc(_) => match soc_face(y) {
            SocFace::Vertex => w[0] >= tail_norm(w) - tol,
            SocFace::Interior => true,
            SocFace::Boundary => soc_boundary_gradient(y, 1.0).dot(w) <= tol,
        },
    })
}

/// Unit generator of the normal ray at a nonzero boundary point: `(-1, u)/sqrt 2`.
fn boundary_normal_ray(y: &DVector<f64>) -> DVector<f64> {
    soc_boundary_gradient(y, 1.0) / std::f64::consts::SQRT_2
}

fn soc_boundary_gradient(y: &DVector<f64>, scale: f64) -> DVector<f64> {
    let m = y.len();
    let s = tail_norm(y);
    let mut g = DVector::zeros(m);
    g[0] = -scale;
    for i in 1..m {
        g[i] = scale * y[i] / s;
    }
    g
}

/// Local description of a block cone near a point as `{y : h(y) in C}`.
#[derive(Debug, Clone, PartialEq)]
pub enum Reduction {
    /// Interior point or inactive orthant block: no constraint near the point.
    Inactive,
    /// Orthant block; `h` selects the active rows and is linear.
    Affine { active: Vec<usize> },
    /// SOC at the origin; `h` is the identity and `C` the cone itself.
    SocVertex,
    /// SOC at a nonzero boundary point; `h(y) = scale * (|y_tail| - y_1)`, `C = R_-`.
    SocBoundary { base: DVector<f64>, scale: f64 },
}

impl Reduction {
    pub fn name(&self) -> &'static str {
        match self {
            Reduction::Inactive => "inactive",
            Reduction::Affine { .. } => "affine",
            Reduction::SocVertex => "soc-vertex",
            Reduction::SocBoundary { .. } => "soc-boundary",
        }
    }

    /// The same reduction with `h` multiplied by `factor` (still valid since
    /// `C = R_-` is a cone). Other cases are returned unchanged.
    pub fn scaled(&self, factor: f64) -> Reduction {
        match self {
            Reduction::SocBoundary { base, scale } => Reduction::SocBoundary { base: base.clone(), scale: scale * factor },
            other => other.clone(),
        }
    }

    pub fn target_dim(&self, m: usize) -> usize {
        match self {
            Reduction::Inactive => 0,
            Reduction::Affine { active } => active.len(),
            Reduction::SocVertex => m,
            Reduction::SocBoundary { .. } => 1,
        }
    }

    pub fn h(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            Reduction::Inactive => DVector::zeros(0),
            Reduction::Affine { active } => DVector::from_iterator(active.len(), active.iter().map(|&i| y[i])),
            Reduction::SocVertex => y.clone(),
            Reduction::SocBoundary { scale, .. } => DVector::from_element(1, scale * (tail_norm(y) - y[0])),
        }
    }

    /// Jacobian of `h` at `y` (rows = target dimension).
    pub fn grad_h(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let m = y.len();
        match self {
            Reduction::Inactive => DMatrix::zeros(0, m),
            Reduction::Affine { active } => {
                let mut j = DMatrix::zeros(active.len(), m);
                for (r, &i) in active.iter().enumerate() {
                    j[(r, i)] = 1.0;
                }
                j
            }
            Reduction::SocVertex => DMatrix::identity(m, m),
            Reduction::SocBoundary { scale, .. } => DMatrix::from_row_slice(1, m, soc_boundary_gradient(y, *scale).as_slice()),
        }
    }

    /// Hessians of the components of `h` at `y`.
    pub fn hess_h(&self, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let m = y.len();
        match self {
            Reduction::Inactive => vec![],
            Reduction::Affine { active } => vec![DMatrix::zeros(m, m); active.len()],
            Reduction::SocVertex => vec![DMatrix::zeros(m, m); m],
            Reduction::SocBoundary { scale, .. } => {
                let s = tail_norm(y);
                let mut h = DMatrix::zeros(m, m);
                for i in 1..m {
                    for j in 1..m {
                        let eye = if i == j { 1.0 } else { 0.0 };
                        h[(i, j)] = scale * (eye - y[i] * y[j] / (s * s)) / s;
                    }
                }
                vec![h]
            }
        }
    }
}

pub fn reduction_at(k: ConeKind, y: &DVector<f64>) -> Result<Reduction, ConeError> {
    require_member(k, y, MEMBERSHIP_TOL)?;
    Ok(match k {
        ConeKind::Orthant(_) => {
            let active: Vec<usize> = (0..y.len()).filter(|&i| y[i] >= -ACTIVITY_TOL).collect();
            if active.is_empty() {
                Reduction::Inactive
            } else {
                Reduction::Affine { active }
            }
        }
        ConeKind::Soc(_) => match soc_face(y) {
            SocFace::Vertex => Reduction::SocVertex,
            SocFace::Interior => Reduction::Inactive,
            SocFace::Boundary => Reduction::SocBoundary { base: y.clone(), scale: 1.0 },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project(ConeKind::Soc(3), &dv(&[-1.0, 0.0, 0.0])), dv(&[0.0, 0.0, 0.0]));
        assert_eq!(project(ConeKind::Soc(3), &dv(&[0.0, 1.0, 0.0])), dv(&[0.5, 0.5, 0.0]));
        assert_eq!(project(ConeKind::Orthant(2), &dv(&[3.0, -1.0])), dv(&[0.0, -1.0]));
    }

    #[test]
    fn normal_cone_examples() {
        let t = MEMBERSHIP_TOL;
        assert!(normal_cone_test(ConeKind::Soc(3), &dv(&[0.0, 0.0, 0.0]), &dv(&[-2.0, 1.0, 1.0]), t).unwrap());
        let y = dv(&[0.0, 0.0, -1.0]);
        assert!(normal_cone_test(ConeKind::Orthant(3), &y, &dv(&[1.0, 1.0, 0.0]), t).unwrap());
        assert!(!normal_cone_test(ConeKind::Orthant(3), &y, &dv(&[1.0, 1.0, 0.5]), t).unwrap());
        assert!(!normal_cone_test(ConeKind::Orthant(3), &y, &dv(&[-1.0, 1.0, 0.0]), t).unwrap());
        assert!(!normal_cone_test(ConeKind::Soc(3), &dv(&[2.0, 0.0, 1.0]), &dv(&[0.1, 0.0, 0.0]), t).unwrap());
        assert!(normal_cone_test(ConeKind::Soc(3), &dv(&[1.0, 1.0, 0.0]), &dv(&[-3.0, 3.0, 0.0]), t).unwrap());
        assert!(!normal_cone_test(ConeKind::Soc(3), &dv(&[1.0, 1.0, 0.0]), &dv(&[3.0, -3.0, 0.0]), t).unwrap());
        assert!(matches!(
            normal_cone_test(ConeKind::Soc(3), &dv(&[-1.0, 0.0, 0.0]), &dv(&[0.0, 0.0, 0.0]), t),
            Err(ConeError::NotInCone { .. })
        ));
    }

    #[test]
    fn reductions() {
        assert_eq!(reduction_at(ConeKind::Soc(3), &dv(&[0.0, 0.0, 0.0])).unwrap(), Reduction::SocVertex);
        let r = reduction_at(ConeKind::Orthant(3), &dv(&[0.0, -2.0, 0.0])).unwrap();
        assert_eq!(r, Reduction::Affine { active: vec![0, 2] });
        assert!(r.hess_h(&dv(&[0.0, -2.0, 0.0])).iter().all(|h| h.iter().all(|&v| v == 0.0)));
        assert_eq!(reduction_at(ConeKind::Orthant(2), &dv(&[-1.0, -2.0])).unwrap(), Reduction::Inactive);
        assert_eq!(reduction_at(ConeKind::Soc(3), &dv(&[2.0, 0.5, 0.0])).unwrap(), Reduction::Inactive);

        let y = dv(&[1.0, 1.0, 0.0]);
        let r = reduction_at(ConeKind::Soc(3), &y).unwrap();
        assert!(matches!(r, Reduction::SocBoundary { .. }));
        assert_eq!(r.h(&y)[0], 0.0);
        assert_eq!(r.grad_h(&y), DMatrix::from_row_slice(1, 3, &[-1.0, 1.0, 0.0]));
        assert_eq!(r.hess_h(&y)[0], DMatrix::from_diagonal(&dv(&[0.0, 0.0, 1.0])));
    }

    #[test]
    fn boundary_derivatives_match_differences() {
        let y = dv(&[1.3, 0.5, -1.2]);
        let r = Reduction::SocBoundary { base: y.clone(), scale: 1.0 };
        let g = r.grad_h(&y);
        let hs = &r.hess_h(&y)[0];
        let step = 1e-5;
        for i in 0..3 {
            let mut a = y.clone();
            let mut b = y.clone();
            a[i] += step;
            b[i] -= step;
            let fd = (r.h(&a)[0] - r.h(&b)[0]) / (2.0 * step);
            assert!((fd - g[(0, i)]).abs() < 1e-8);
            let dg = (r.grad_h(&a) - r.grad_h(&b)) / (2.0 * step);
            for j in 0..3 {
                assert!((dg[(0, j)] - hs[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_jacobian_matches_differences() {
        let k = ConeKind::Soc(4);
        let y = dv(&[0.3, 1.0, -0.4, 0.7]);
        let j = projection_jacobian(k, &y);
        let h = 1e-6;
        for c in 0..4 {
            let mut a = y.clone();
            let mut b = y.clone();
            a[c] += h;
            b[c] -= h;
            let d = (project(k, &a) - project(k, &b)) / (2.0 * h);
            for r in 0..4 {
                assert!((d[r] - j[(r, c)]).abs() < 1e-7);
            }
        }
    }

    fn vec_strategy(m: usize) -> impl Strategy<Value = DVector<f64>> {
        proptest::collection::vec(-10.0..10.0f64, m).prop_map(DVector::from_vec)
    }

    fn cone_strategy() -> impl Strategy<Value = ConeKind> {
        (1usize..6, any::<bool>()).prop_map(|(m, soc)| if soc { ConeKind::Soc(m + 1) } else { ConeKind::Orthant(m) })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn moreau_decomposition((k, y) in cone_strategy().prop_flat_map(|k| (Just(k), vec_strategy(k.dim())))) {
            let p = project(k, &y);
            let q = project_polar(k, &y);
            prop_assert!((&p + &q - &y).amax() <= 1e-12 * (1.0 + y.amax()));
            prop_assert!(p.dot(&q).abs() <= 1e-12 * (1.0 + y.norm_squared()));
            prop_assert!(contains(k, &p, 1e-12 * (1.0 + y.norm())));
        }

        #[test]
        fn projection_idempotent_and_nonexpansive(
            (k, y, z) in cone_strategy().prop_flat_map(|k| (Just(k), vec_strategy(k.dim()), vec_strategy(k.dim())))
        ) {
            let p = project(k, &y);
            prop_assert!((project(k, &p) - &p).amax() <= 1e-12 * (1.0 + p.amax()));
            prop_assert!((project(k, &y) - project(k, &z)).norm() <= (&y - &z).norm() * (1.0 + 1e-12) + 1e-15);
        }
    }

    // Draw a point of a prescribed face, then normal/tangent vectors by
    // projecting random vectors onto the respective cones.
    fn face_point(k: ConeKind, raw: &DVector<f64>, face: u8) -> DVector<f64> {
        match k {
            ConeKind::Orthant(_) => raw.map(|v| if v > 0.0 { 0.0 } else { v }),
            ConeKind::Soc(m) => match face % 3 {
                0 => DVector::zeros(m),
                1 => {
                    let mut y = raw.clone();
                    y[0] = tail_norm(raw) + 1.0;
                    y
                }
                _ => {
                    let mut y = raw.clone();
                    if tail_norm(raw) < 0.5 {
                        y[1] = 0.5;
                    }
                    y[0] = tail_norm(&y);
                    y
                }
            },
        }
    }

    fn normal_sample(k: ConeKind, y: &DVector<f64>, raw: &DVector<f64>) -> DVector<f64> {
        match k {
            ConeKind::Orthant(_) => DVector::from_iterator(
                y.len(),
                y.iter().zip(raw.iter()).map(|(&yi, &r)| if yi >= -ACTIVITY_TOL { r.abs() } else { 0.0 }),
            ),
            ConeKind::Soc(_) => match soc_face(y) {
                SocFace::Vertex => project_polar(k, raw),
                SocFace::Interior => DVector::zeros(y.len()),
                SocFace::Boundary => boundary_normal_ray(y) * raw[0].abs(),
            },
        }
    }

    fn tangent_sample(k: ConeKind, y: &DVector<f64>, raw: &DVector<f64>) -> DVector<f64> {
        match k {
            ConeKind::Orthant(_) => DVector::from_iterator(
                y.len(),
                y.iter().zip(raw.iter()).map(|(&yi, &r)| if yi >= -ACTIVITY_TOL { -r.abs() } else { r }),
            ),
            ConeKind::Soc(_) => match soc_face(y) {
                SocFace::Vertex => project(k, raw),
                SocFace::Interior => raw.clone(),
                SocFace::Boundary => {
                    let g = soc_boundary_gradient(y, 1.0);
                    let t = g.dot(raw);
                    if t > 0.0 {
                        raw - &g * (t / g.norm_squared())
                    } else {
                        raw.clone()
                    }
                }
            },
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn polarity(
            (k, raw, a, b, face) in cone_strategy().prop_flat_map(|k| {
                (Just(k), vec_strategy(k.dim()), vec_strategy(k.dim()), vec_strategy(k.dim()), any::<u8>())
            })
        ) {
            let y = face_point(k, &raw, face);
            let v = normal_sample(k, &y, &a);
            let w = tangent_sample(k, &y, &b);
            prop_assert!(normal_cone_test(k, &y, &v, 1e-9).unwrap());
            prop_assert!(tangent_cone_test(k, &y, &w, 1e-9).unwrap());
            prop_assert!(v.dot(&w) <= 1e-9 * (1.0 + v.norm() * w.norm()));
        }

        #[test]
        fn reduction_base_point(
            (k, raw, face) in cone_strategy().prop_flat_map(|k| (Just(k), vec_strategy(k.dim()), any::<u8>()))
        ) {
            let y = face_point(k, &raw, face);
            let r = reduction_at(k, &y).unwrap();
            let h = r.h(&y);
            prop_assert!(h.iter().all(|v| v.abs() <= 1e-12 * (1.0 + y.norm())));
            let j = r.grad_h(&y);
            if j.nrows() > 0 {
                let sv = j.clone().svd(false, false).singular_values;
                prop_assert!(sv.min() >= 1e-9);
            }
        }
    }
}
