//! Brute-force cross-checks: feasible sampling near the point, an empirical
//! quadratic-growth modulus, and a tilt-stability probe.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::descent::{self, Objective};
use crate::problem::Problem;
use crate::sampling;

pub const FEASIBLE_TOL: f64 = 1e-9;
pub const HOLD_THRESHOLD: f64 = 1e-4;
pub const FAIL_THRESHOLD: f64 = 1e-6;
/// Largest residual, relative to `|x - x_bar|^2`, of a point used in a growth ratio.
pub const RATIO_RESIDUAL: f64 = 1e-6;
pub const DEFAULT_RADII: [f64; 3] = [0.2, 0.05, 0.0125];

#[derive(Debug, Clone)]
pub struct FeasibleSample {
    pub points: Vec<DVector<f64>>,
    pub requested: usize,
    /// Fewer than half of the requested points reached the feasible set.
    pub inconclusive: bool,
}

pub fn sample_feasible(p: &Problem, center: &DVector<f64>, radius: f64, count: usize, seed: u64) -> FeasibleSample {
    let raw = sampling::ball_points(center, radius, count, seed);
    let points: Vec<DVector<f64>> = if p.blocks.is_empty() {
        raw
    } else {
        raw.par_iter()
            .map(|x| {
                let s = descent::minimize(p, Objective::Projection(x), x, None)?;
                (s.residual <= FEASIBLE_TOL).then_some(s.y)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };
    let inconclusive = 2 * points.len() < count;
    FeasibleSample { points, requested: count, inconclusive }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", content = "modulus", rename_all = "lowercase")]
pub enum QgVerdict {
    Holds(f64),
    Fails,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct QgcEstimate {
    pub radii: Vec<f64>,
    #[serde(serialize_with = "crate::num::ext_vec")]
    pub per_radius: Vec<f64>,
    pub sample_counts: Vec<usize>,
    pub verdict: QgVerdict,
    pub seed: u64,
}

/// `inf 2 (g(x) - g(x_bar)) / |x - x_bar|^2` over the given points.
///
/// Points whose residual is not small against `|x - x_bar|^2` are skipped:
/// a projection that stops just outside the feasible set, very close to
/// `x_bar`, can gain more objective from its infeasibility than the
/// quadratic term it is meant to measure.
pub fn empirical_modulus(p: &Problem, xbar: &DVector<f64>, gbar: f64, points: &[DVector<f64>]) -> f64 {
    points
        .iter()
        .filter_map(|x| {
            let d2 = (x - xbar).norm_squared();
            if d2 <= 1e-24 || p.residual(x.as_slice()).ok()? > RATIO_RESIDUAL * d2 {
                return None;
            }
            let g = p.objective_value(x.as_slice()).ok()?;
            Some(2.0 * (g - gbar) / d2)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Aitken extrapolation of the last three terms, when defined.
fn aitken(v: &[f64]) -> Option<f64> {
    let [a, b, c] = v[v.len() - 3..] else { return None };
    let den = c - 2.0 * b + a;
    (den.abs() > 1e-300).then(|| c - (c - b) * (c - b) / den)
}

pub fn qg_verdict(per_radius: &[f64]) -> QgVerdict {
    let Some(&last) = per_radius.last() else { return QgVerdict::Inconclusive };
    if !last.is_finite() {
        return QgVerdict::Inconclusive;
    }
    if last < FAIL_THRESHOLD {
        return QgVerdict::Fails;
    }
    if per_radius.len() >= 3 {
        let t = &per_radius[per_radius.len() - 3..];
        let decreasing = t[0] > t[1] && t[1] > t[2];
        if decreasing && aitken(per_radius).is_some_and(|lim| lim < 0.75 * last) {
            return QgVerdict::Fails;
        }
    }
    let min = per_radius.iter().copied().fold(f64::INFINITY, f64::min);
    let stable = per_radius.len() < 2 || last >= 0.5 * per_radius[per_radius.len() - 2];
    if min >= HOLD_THRESHOLD && stable {
        QgVerdict::Holds(min)
    } else {
        QgVerdict::Inconclusive
    }
}

pub fn estimate_qg_modulus(p: &Problem, xbar: &DVector<f64>, radii: &[f64], count: usize, seed: u64) -> QgcEstimate {
    let gbar = p.objective_value(xbar.as_slice()).unwrap_or(f64::NAN);
    let mut per_radius = vec![];
    let mut sample_counts = vec![];
    let mut any_inconclusive = false;
    for (i, &r) in radii.iter().enumerate() {
        let s = sample_feasible(p, xbar, r, count, seed.wrapping_add(i as u64));
        any_inconclusive |= s.inconclusive;
        per_radius.push(empirical_modulus(p, xbar, gbar, &s.points));
        sample_counts.push(s.points.len());
    }
    let verdict = if any_inconclusive || !gbar.is_finite() {
        // A failing sample is still a counterexample.
        if per_radius.iter().any(|&k| k < 0.0) {
            QgVerdict::Fails
        } else {
            QgVerdict::Inconclusive
        }
    } else {
        qg_verdict(&per_radius)
    };
    QgcEstimate { radii: radii.to_vec(), per_radius, sample_counts, verdict, seed }
}

#[derive(Debug, Clone, Serialize)]
pub struct TiltProbe {
    pub tilt_radius: f64,
    pub ball_radius: f64,
    pub grid: usize,
    pub single_valued: bool,
    #[serde(serialize_with = "crate::num::ext")]
    pub lipschitz_estimate: f64,
    /// Same probe at a quarter of the tilt radius.
    #[serde(serialize_with = "crate::num::ext")]
    pub lipschitz_estimate_quarter: f64,
    pub max_cluster_count: usize,
    pub evidence_against: bool,
}

struct TiltRun {
    single_valued: bool,
    lipschitz: f64,
    max_clusters: usize,
}

fn tilt_vectors(n: usize, radius: f64, grid: usize) -> Vec<DVector<f64>> {
    let grid = grid.max(2);
    let mut out = vec![DVector::zeros(n)];
    for axis in 0..n {
        for j in 0..grid {
            let t = -radius + 2.0 * radius * j as f64 / (grid - 1) as f64;
            if t.abs() < 1e-15 * radius {
                continue;
            }
            let mut v = DVector::zeros(n);
            v[axis] = t;
            out.push(v);
        }
    }
    out
}

/// Weight of the proximal anchor that makes each start select the nearest
/// point of a flat solution set instead of an arbitrary one.
const ANCHOR_WEIGHT: f64 = 1e-8;

/// Local minimizers of the tilted problem, clustered.
fn solution_clusters(p: &Problem, xbar: &DVector<f64>, v: &DVector<f64>, ball: f64, starts: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let sols: Vec<(DVector<f64>, f64)> = starts
        .iter()
        .filter_map(|s| {
            let obj = Objective::AnchoredTilt { v, anchor: s, mu: ANCHOR_WEIGHT };
            descent::minimize(p, obj, s, Some((xbar, ball)))
        })
        .filter(|s| s.residual <= FEASIBLE_TOL)
        .filter_map(|s| {
            let value = p.objective_value(s.y.as_slice()).ok()? - v.dot(&s.y);
            value.is_finite().then_some((s.y, value))
        })
        .collect();
    let Some(best) = sols.iter().map(|s| s.1).reduce(f64::min) else { return vec![] };
    let mut clusters: Vec<DVector<f64>> = vec![];
    for (y, val) in sols {
        if val > best + 1e-8 * (1.0 + best.abs()) {
            continue;
        }
        if !clusters.iter().any(|c| (c - &y).norm() <= 1e-5) {
            clusters.push(y);
        }
    }
    clusters
}

fn tilt_run(p: &Problem, xbar: &DVector<f64>, tilt_radius: f64, ball: f64, grid: usize, seed: u64) -> TiltRun {
    let n = xbar.len();
    let vs = tilt_vectors(n, tilt_radius, grid);
    let mut starts = vec![xbar.clone()];
    starts.extend(sampling::ball_points(xbar, ball, 9, seed));
    let clusters: Vec<Vec<DVector<f64>>> = vs.par_iter().map(|v| solution_clusters(p, xbar, v, ball, &starts)).collect();
    let max_clusters = clusters.iter().map(|c| c.len()).max().unwrap_or(0);
    let single_valued = clusters.iter().all(|c| c.len() == 1);
    let lipschitz = if !single_valued {
        f64::INFINITY
    } else {
        let mut l: f64 = 0.0;
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                let dv = (&vs[i] - &vs[j]).norm();
                l = l.max((&clusters[i][0] - &clusters[j][0]).norm() / dv);
            }
        }
        l
    };
    TiltRun { single_valued, lipschitz, max_clusters }
}

pub fn tilt_probe(p: &Problem, xbar: &DVector<f64>, tilt_radius: f64, ball_radius: f64, grid: usize, seed: u64) -> TiltProbe {
    let a = tilt_run(p, xbar, tilt_radius, ball_radius, grid, seed);
    let b = tilt_run(p, xbar, tilt_radius / 4.0, ball_radius, grid, seed);
    let single_valued = a.single_valued && b.single_valued;
    let diverging = a.lipschitz.is_finite() && b.lipschitz > 2.0 * a.lipschitz.max(1e-12);
    TiltProbe {
        tilt_radius,
        ball_radius,
        grid,
        single_valued,
        lipschitz_estimate: a.lipschitz,
        lipschitz_estimate_quarter: b.lipschitz,
        max_cluster_count: a.max_clusters.max(b.max_clusters),
        evidence_against: !single_valued || diverging,
    }
}
