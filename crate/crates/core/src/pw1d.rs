//! Univariate piecewise-quadratic functions and their variational data.
//!
//! A function is a sorted list of closed pieces `a + b x + c x^2` on the real
//! line, lower semicontinuous at breakpoints (value = min of the one-sided
//! limits), optionally with an accumulation point at `0` whose neighbourhood
//! `(-g, g)` is summarized by a tail rule instead of being enumerated.
//!
//! All piece values are stored as the excess over a constant `base`, so the
//! deep levels of the factorial staircase keep their relative precision.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::oracle::{qg_verdict, QgVerdict};

/// Deepest factorial level generated for the `example31` staircase.
pub const EXAMPLE31_CUTOFF: usize = 12;
/// Deepest dyadic level generated for the binary staircases.
pub const STAIRCASE_CUTOFF: usize = 40;
/// Generators are represented on `[-10, 10]`.
pub const GENERATOR_EXTENT: f64 = 10.0;
pub const DEFAULT_SCALES: [f64; 8] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];
pub const DEFAULT_TANGENT_TOL: f64 = 1e-3;
/// `z` grid of `check_conditions`: `[-4, 4]` in steps of `0.01`.
pub const Z_GRID_HALF_WIDTH: f64 = 4.0;
pub const Z_GRID_STEP: f64 = 0.01;
/// Vertical graph segments (kinks, jumps, domain ends) are clipped here.
const KINK_CLIP: f64 = 1e6;
/// Ratios this close to zero at the accumulation point count as zero.
const SNAP: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum Pw1dError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("x = {0} is outside the represented domain")]
    OutsideDomain(f64),
    #[error("invalid function: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "param", rename_all = "kebab-case")]
pub enum Generator {
    /// Factorial staircase: slope `alpha_{n+1}` on `[alpha_{n+1}, alpha_n]`,
    /// `alpha_n = 1/(n+1)!`, continuous and convex.
    FactorialStaircase,
    /// Dyadic staircase with ramp ends at `3/4` of each level.
    DyadicStaircase,
    /// Dyadic staircase: on `[2^-(n+1), 2^-n)` a ramp up to `c 2^-n`, then flat.
    BinaryStaircase(f64),
}

impl Generator {
    pub fn name(&self) -> String {
        match self {
            Generator::FactorialStaircase => "example31".into(),
            Generator::DyadicStaircase => "example33".into(),
            Generator::BinaryStaircase(c) => format!("binary-staircase({c})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub lo: f64,
    pub hi: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Piece {
    pub fn value(&self, x: f64) -> f64 {
        self.a + x * (self.b + self.c * x)
    }

    pub fn slope(&self, x: f64) -> f64 {
        self.b + 2.0 * self.c * x
    }

    fn mirrored(&self) -> Piece {
        Piece { lo: -self.hi, hi: -self.lo, a: self.a, b: -self.b, c: self.c }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Generated(Generator),
    Explicit { breakpoints: Vec<f64>, coeffs: Vec<[f64; 3]>, even: bool },
}

#[derive(Debug, Clone)]
pub struct Piecewise1D {
    pieces: Vec<Piece>,
    base: f64,
    /// Excess value at the accumulation point `0`, if there is one.
    accumulation: Option<f64>,
    /// Half-width of the unrepresented gap around the accumulation point.
    gap: f64,
    /// `inf 2 e(x)/x^2` over the gap (tail rule).
    gap_ratio_inf: f64,
    source: Source,
}

/// Closed interval of reals; empty when `lo > hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    #[serde(serialize_with = "crate::num::ext")]
    pub lo: f64,
    #[serde(serialize_with = "crate::num::ext")]
    pub hi: f64,
}

impl Interval {
    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn empty() -> Self {
        Interval { lo: f64::INFINITY, hi: f64::NEG_INFINITY }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Whether the one-sided limit `limit` attaches continuously to `fx`.
fn continuous(limit: f64, fx: f64, x: f64) -> bool {
    (limit - fx).abs() <= 1e-12 * (x.abs() + limit.abs() + fx.abs())
}

impl Piecewise1D {
    pub fn from_pieces(breakpoints: Vec<f64>, coeffs: Vec<[f64; 3]>, even: bool) -> Result<Self, Pw1dError> {
        if breakpoints.len() < 2 {
            return Err(Pw1dError::Invalid("need at least two breakpoints".into()));
        }
        if breakpoints.iter().any(|b| !b.is_finite()) || breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Pw1dError::Invalid("breakpoints must be finite and strictly increasing".into()));
        }
        if coeffs.len() != breakpoints.len() - 1 {
            return Err(Pw1dError::Invalid(format!(
                "{} breakpoints need {} pieces, got {}",
                breakpoints.len(),
                breakpoints.len() - 1,
                coeffs.len()
            )));
        }
        if coeffs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Pw1dError::Invalid("coefficients must be finite".into()));
        }
        if even && breakpoints[0] != 0.0 {
            return Err(Pw1dError::Invalid("an even function must start at breakpoint 0".into()));
        }
        let right: Vec<Piece> = breakpoints
            .windows(2)
            .zip(&coeffs)
            .map(|(w, k)| Piece { lo: w[0], hi: w[1], a: k[0], b: k[1], c: k[2] })
            .collect();
        let pieces = if even { with_mirror(right) } else { right };
        Ok(Piecewise1D {
            pieces,
            base: 0.0,
            accumulation: None,
            gap: 0.0,
            gap_ratio_inf: f64::INFINITY,
            source: Source::Explicit { breakpoints, coeffs, even },
        })
    }

    pub fn generate(g: Generator) -> Result<Self, Pw1dError> {
        match g {
            Generator::FactorialStaircase => Ok(factorial_staircase()),
            Generator::DyadicStaircase => staircase(0.75, g),
            Generator::BinaryStaircase(c) => staircase(c, g),
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, Pw1dError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| Pw1dError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Pw1dError> {
        let err = |line: usize, msg: &str| Pw1dError::Parse { line, msg: msg.to_string() };
        let mut header = false;
        let mut breakpoints: Option<Vec<f64>> = None;
        let mut pieces: Vec<(usize, [f64; 3], usize)> = vec![];
        let mut even = None;
        let mut generator = None;
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if !header {
                if line != "pw1d" {
                    return Err(err(ln, "expected `pw1d` header"));
                }
                header = true;
                continue;
            }
            let (key, rest) = line.split_once(':').ok_or_else(|| err(ln, "expected `key: value`"))?;
            let key = key.trim();
            let rest = rest.trim();
            let numbers = |s: &str| -> Result<Vec<f64>, Pw1dError> {
                s.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| err(ln, &format!("bad number `{t}`"))))
                    .collect()
            };
            if key == "breakpoints" {
                breakpoints = Some(numbers(rest)?);
            } else if key == "even" {
                even = Some(match rest {
                    "true" => true,
                    "false" => false,
                    _ => return Err(err(ln, "even must be true or false")),
                });
            } else if key == "generator" {
                generator = Some(parse_generator(rest).ok_or_else(|| err(ln, &format!("unknown generator `{rest}`")))?);
            } else if let Some(idx) = key.strip_prefix("piece") {
                let idx: usize = idx.trim().parse().map_err(|_| err(ln, "bad piece index"))?;
                let v = numbers(rest)?;
                let k = match v.len() {
                    2 => [v[0], v[1], 0.0],
                    3 => [v[0], v[1], v[2]],
                    _ => return Err(err(ln, "a piece needs `a b` or `a b c`")),
                };
                pieces.push((idx, k, ln));
            } else {
                return Err(err(ln, &format!("unknown key `{key}`")));
            }
        }
        if !header {
            return Err(err(1, "empty file"));
        }
        if let Some(g) = generator {
            if breakpoints.is_some() || !pieces.is_empty() {
                return Err(err(1, "a generator excludes explicit breakpoints and pieces"));
            }
            return Self::generate(g);
        }
        let breakpoints = breakpoints.ok_or_else(|| err(1, "missing `breakpoints:` or `generator:`"))?;
        pieces.sort_by_key(|p| p.0);
        for (want, (idx, _, ln)) in pieces.iter().enumerate() {
            if *idx != want {
                return Err(err(*ln, &format!("expected piece {want}")));
            }
        }
        let coeffs = pieces.into_iter().map(|p| p.1).collect();
        Self::from_pieces(breakpoints, coeffs, even.unwrap_or(false))
    }

    /// Canonical text; parsing it gives back the same function.
    pub fn save(&self) -> String {
        match &self.source {
            Source::Generated(g) => format!("pw1d\ngenerator: {}\n", g.name()),
            Source::Explicit { breakpoints, coeffs, even } => {
                let mut s = String::from("pw1d\nbreakpoints:");
                for b in breakpoints {
                    s += &format!(" {b:e}");
                }
                s += "\n";
                for (i, k) in coeffs.iter().enumerate() {
                    s += &format!("piece {i}: {:e} {:e} {:e}\n", k[0], k[1], k[2]);
                }
                s += &format!("even: {even}\n");
                s
            }
        }
    }

    pub fn generator(&self) -> Option<Generator> {
        match self.source {
            Source::Generated(g) => Some(g),
            Source::Explicit { .. } => None,
        }
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.pieces[0].lo, self.pieces[self.pieces.len() - 1].hi)
    }

    /// Convex on its domain: convex pieces joined continuously at
    /// nondecreasing slopes.
    pub fn is_convex(&self) -> bool {
        self.pieces.iter().all(|p| p.c >= 0.0)
            && self.pieces.windows(2).all(|w| {
                let (l, r) = (&w[0], &w[1]);
                if l.hi != r.lo {
                    // The accumulation gap; the generators are built convex across it.
                    return self.accumulation.is_some();
                }
                let x = l.hi;
                continuous(l.value(x), r.value(x), x) && l.slope(x) <= r.slope(x) + 1e-12 * (1.0 + l.slope(x).abs())
            })
    }

    fn index(&self, x: f64) -> Result<usize, Pw1dError> {
        let i = self.pieces.partition_point(|p| p.hi < x);
        if i == self.pieces.len() || x < self.pieces[i].lo || !x.is_finite() {
            return Err(Pw1dError::OutsideDomain(x));
        }
        Ok(i)
    }

    fn is_accumulation(&self, x: f64) -> bool {
        self.accumulation.is_some() && x == 0.0
    }

    /// `f(x) - base`.
    pub fn excess(&self, x: f64) -> Result<f64, Pw1dError> {
        if self.is_accumulation(x) {
            return Ok(self.accumulation.unwrap_or(0.0));
        }
        let i = self.index(x)?;
        let p = &self.pieces[i];
        let mut v = p.value(x);
        if x == p.hi {
            if let Some(r) = self.pieces.get(i + 1).filter(|r| r.lo == x) {
                v = v.min(r.value(x));
            }
        }
        Ok(v)
    }

    pub fn value(&self, x: f64) -> Result<f64, Pw1dError> {
        Ok(self.base + self.excess(x)?)
    }

    /// Pieces ending and starting at `x`, or the piece containing it.
    fn sides(&self, x: f64) -> Result<(Option<&Piece>, Option<&Piece>), Pw1dError> {
        let i = self.index(x)?;
        let p = &self.pieces[i];
        if x > p.lo && x < p.hi {
            return Ok((Some(p), Some(p)));
        }
        if x == p.hi {
            Ok((Some(p), self.pieces.get(i + 1).filter(|r| r.lo == x)))
        } else {
            Ok((None, Some(p)))
        }
    }

    pub fn proximal_subdifferential(&self, x: f64) -> Result<Interval, Pw1dError> {
        if self.is_accumulation(x) {
            return Ok(self.accumulation_subdifferential());
        }
        let fx = self.excess(x)?;
        let (left, right) = self.sides(x)?;
        if let (Some(l), Some(r)) = (left, right) {
            if std::ptr::eq(l, r) {
                return Ok(Interval::point(l.slope(x)));
            }
        }
        let lo = match left {
            Some(l) if continuous(l.value(x), fx, x) => l.slope(x),
            _ => f64::NEG_INFINITY,
        };
        let hi = match right {
            Some(r) if continuous(r.value(x), fx, x) => r.slope(x),
            _ => f64::INFINITY,
        };
        Ok(if lo > hi { Interval::empty() } else { Interval { lo, hi } })
    }

    /// Support bounds at the accumulation point from the innermost enumerated
    /// levels: `v` must satisfy `e(y) - e(0) >= v y` along the staircase.
    fn accumulation_subdifferential(&self) -> Interval {
        let e0 = self.accumulation.unwrap_or(0.0);
        let ratio_range = |p: &Piece| -> (f64, f64) {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut consider = |y: f64| {
                if y != 0.0 {
                    let r = (p.value(y) - e0) / y;
                    lo = lo.min(r);
                    hi = hi.max(r);
                }
            };
            consider(p.lo);
            consider(p.hi);
            let a = p.a - e0;
            if p.c != 0.0 && a / p.c > 0.0 {
                let y = (a / p.c).sqrt() * p.lo.signum();
                if y > p.lo && y < p.hi {
                    consider(y);
                }
            }
            (lo, hi)
        };
        let split = self.pieces.partition_point(|p| p.hi <= 0.0);
        let right = self.pieces[split..].iter().take(3).map(|p| ratio_range(p).0).fold(f64::INFINITY, f64::min);
        let left = self.pieces[..split].iter().rev().take(3).map(|p| ratio_range(p).1).fold(f64::NEG_INFINITY, f64::max);
        let snap = |v: f64| if v.abs() <= SNAP { 0.0 } else { v };
        let (lo, hi) = (snap(left), snap(right));
        if lo > hi {
            Interval::empty()
        } else {
            Interval { lo, hi }
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = vec![];
        for p in &self.pieces {
            for x in [p.lo, p.hi] {
                if out.last() != Some(&x) {
                    out.push(x);
                }
            }
        }
        if self.accumulation.is_some() {
            out.push(0.0);
            out.sort_by(f64::total_cmp);
        }
        out
    }

    /// Segments covering the closure of `gph ∂_p f`, shifted so that
    /// `(x_bar, v_bar)` is the origin.
    fn graph(&self, xbar: f64, vbar: f64) -> Vec<[(f64, f64); 2]> {
        let mut segs = vec![];
        for p in &self.pieces {
            segs.push([(p.lo - xbar, p.slope(p.lo) - vbar), (p.hi - xbar, p.slope(p.hi) - vbar)]);
        }
        for x in self.breakpoints() {
            if let Ok(iv) = self.proximal_subdifferential(x) {
                if !iv.is_empty() {
                    let lo = iv.lo.max(-KINK_CLIP);
                    let hi = iv.hi.min(KINK_CLIP);
                    segs.push([(x - xbar, lo - vbar), (x - xbar, hi - vbar)]);
                }
            }
        }
        segs
    }

    /// Per-window distances of the unit vector along `(w, z)` to the
    /// rescaled graph `(gph ∂f - (x_bar, v_bar)) / t`.
    fn window_distances(graph: &[[(f64, f64); 2]], w: f64, z: f64, scales: &[f64]) -> Vec<f64> {
        let n = w.hypot(z);
        let d = (w / n, z / n);
        scales
            .windows(2)
            .map(|s| {
                let (t_hi, t_lo) = (s[0].max(s[1]), s[0].min(s[1]));
                let (tau_lo, tau_hi) = (1.0 / t_hi, 1.0 / t_lo);
                graph
                    .iter()
                    .map(|[p0, p1]| {
                        let q = [
                            (p0.0 * tau_lo, p0.1 * tau_lo),
                            (p1.0 * tau_lo, p1.1 * tau_lo),
                            (p0.0 * tau_hi, p0.1 * tau_hi),
                            (p1.0 * tau_hi, p1.1 * tau_hi),
                        ];
                        hull4_distance(d, &q)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    /// `(w, z)` in the tangent cone to `gph ∂_p f` at `(x_bar, v_bar)`.
    ///
    /// The scales are split into consecutive windows; a window is satisfied
    /// when some rescaled graph point within it lies near the unit direction.
    /// Accepted if the finest window is within `tol`, or if the window
    /// distances decrease strictly and at least halve overall (slow
    /// convergence along an infinite staircase).
    pub fn tangent_direction_test(&self, xbar: f64, vbar: f64, w: f64, z: f64, scales: &[f64], tol: f64) -> bool {
        let graph = self.graph(xbar, vbar);
        Self::accept(&graph, w, z, scales, tol)
    }

    fn accept(graph: &[[(f64, f64); 2]], w: f64, z: f64, scales: &[f64], tol: f64) -> bool {
        if w == 0.0 && z == 0.0 {
            return true;
        }
        let d = Self::window_distances(graph, w, z, scales);
        let (Some(&first), Some(&last)) = (d.first(), d.last()) else { return false };
        if last <= tol {
            return true;
        }
        d.len() >= 2 && d.windows(2).all(|p| p[1] < p[0] * (1.0 - 1e-9)) && last <= 0.5 * first
    }

    /// Finite slopes `dz/dx` of graph segments that contain the origin.
    fn slopes_through_origin(graph: &[[(f64, f64); 2]]) -> Vec<f64> {
        graph
            .iter()
            .filter_map(|[p0, p1]| {
                let (dx, dz) = (p1.0 - p0.0, p1.1 - p0.1);
                if dx == 0.0 {
                    return None;
                }
                let len2 = dx * dx + dz * dz;
                let t = (-(p0.0 * dx + p0.1 * dz) / len2).clamp(0.0, 1.0);
                let (cx, cz) = (p0.0 + t * dx, p0.1 + t * dz);
                let scale = p0.0.hypot(p0.1).max(p1.0.hypot(p1.1));
                (cx.hypot(cz) <= 1e-12 * scale.max(1.0)).then_some(dz / dx)
            })
            .collect()
    }

    pub fn check_conditions(&self, xbar: f64, scales: &[f64], tol: f64) -> Result<Conditions, Pw1dError> {
        let sub = self.proximal_subdifferential(xbar)?;
        let stationary = sub.contains(0.0, 0.0);
        let graph = self.graph(xbar, 0.0);
        let steps = (Z_GRID_HALF_WIDTH / Z_GRID_STEP).round() as i64;
        let grid: Vec<f64> = (-steps..=steps).map(|i| i as f64 * Z_GRID_STEP).collect();
        let slopes = Self::slopes_through_origin(&graph);
        let mut directions = vec![];
        let mut min_ratio = f64::INFINITY;
        let mut witness: Option<(f64, f64)> = None;
        let mut kappa = f64::INFINITY;
        let mut every_w = true;
        for w in [1.0, -1.0] {
            // The grid alone can step over the thin acceptance window of a smooth piece.
            let mut zs = grid.clone();
            zs.extend(slopes.iter().map(|k| k * w).filter(|z| z.abs() <= Z_GRID_HALF_WIDTH));
            zs.sort_by(f64::total_cmp);
            zs.dedup();
            let accepted: Vec<f64> =
                zs.par_iter().copied().filter(|&z| Self::accept(&graph, w, z, scales, DEFAULT_TANGENT_TOL)).collect();
            let best = accepted.iter().map(|z| z * w).fold(f64::NEG_INFINITY, f64::max);
            if accepted.is_empty() {
                every_w = false;
            } else {
                kappa = kappa.min(best);
            }
            for &z in &accepted {
                let r = z * w;
                let better = match witness {
                    None => true,
                    Some((ww, wz)) => r < wz * ww || (r == wz * ww && z.abs() < wz.abs()),
                };
                if better {
                    witness = Some((w, z));
                }
                min_ratio = min_ratio.min(r);
            }
            directions.push(DirectionSummary {
                w,
                accepted: accepted.len(),
                z_min: accepted.first().copied(),
                z_max: accepted.last().copied(),
            });
        }
        let second_kind = every_w && kappa > tol;
        Ok(Conditions {
            x: xbar,
            stationary,
            subdifferential: sub,
            pd_34: min_ratio > tol,
            // `+ 0.0` folds -0 into 0
            pd_34_ratio: min_ratio + 0.0,
            pd_36: witness.is_none_or(|(w, z)| z * w > tol),
            pd_36_witness: witness.filter(|(w, z)| z * w <= tol),
            second_kind,
            second_kind_kappa: if every_w { kappa } else { f64::NEG_INFINITY },
            directions,
        })
    }

    /// Radii suited to the function's own scale structure.
    pub fn auto_radii(&self) -> Vec<f64> {
        match self.generator() {
            Some(Generator::FactorialStaircase) => (3..=8).map(|n| 1.0 / factorial(n + 1)).collect(),
            Some(Generator::DyadicStaircase | Generator::BinaryStaircase(_)) => vec![1.0, 0.25, 0.0625, 0.015625],
            None => crate::oracle::DEFAULT_RADII.to_vec(),
        }
    }

    /// `inf 2 (f(x) - f(x_bar)) / (x - x_bar)^2` over `0 < |x - x_bar| <= r`,
    /// exact over the enumerated pieces.
    pub fn ball_ratio_inf(&self, xbar: f64, r: f64) -> Result<f64, Pw1dError> {
        let e0 = self.excess(xbar)?;
        let mut best = f64::INFINITY;
        let (lo, hi) = (xbar - r, xbar + r);
        for p in &self.pieces {
            let a = p.lo.max(lo);
            let b = p.hi.min(hi);
            if a > b {
                continue;
            }
            // e(x_bar + u) - e0 = A + B u + C u^2 on this piece
            let mut aa = p.value(xbar) - e0;
            if continuous(p.value(xbar), e0, xbar) && (p.lo == xbar || p.hi == xbar) {
                aa = 0.0;
            }
            let bb = p.slope(xbar);
            let cc = p.c;
            let (u1, u2) = (a - xbar, b - xbar);
            let parts: Vec<(f64, f64)> = if u1 < 0.0 && u2 > 0.0 { vec![(u1, 0.0), (0.0, u2)] } else { vec![(u1, u2)] };
            for (s, t) in parts {
                best = best.min(quadratic_ratio_inf(aa, bb, cc, s, t));
            }
        }
        if self.accumulation.is_some() {
            if xbar.abs() > self.gap {
                if lo <= 0.0 && 0.0 <= hi {
                    let e = self.accumulation.unwrap_or(0.0) - e0;
                    best = best.min(2.0 * e / (xbar * xbar));
                }
                if lo < self.gap && hi > -self.gap {
                    // The tail rule is relative to the accumulation point only.
                    return Ok(f64::NAN);
                }
            } else if r > self.gap {
                best = best.min(self.gap_ratio_inf);
            }
        }
        Ok(best)
    }

    pub fn estimate_qgc_1d(&self, xbar: f64, radii: &[f64]) -> Result<Qgc1d, Pw1dError> {
        let e0 = self.excess(xbar)?;
        let per_radius: Vec<f64> = radii.iter().map(|&r| self.ball_ratio_inf(xbar, r)).collect::<Result<_, _>>()?;
        let at_radius = radii
            .iter()
            .map(|&r| {
                [xbar - r, xbar + r]
                    .iter()
                    .filter_map(|&x| self.excess(x).ok().map(|e| 2.0 * (e - e0) / (r * r)))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let verdict = if per_radius.iter().any(|k| k.is_nan()) { QgVerdict::Inconclusive } else { qg_verdict(&per_radius) };
        Ok(Qgc1d { x: xbar, radii: radii.to_vec(), per_radius, at_radius, verdict })
    }

    /// Numerical `d^2 f(x_bar | v)(w)`: liminf of the second-order difference
    /// quotients over decade windows of `tau` with a shrinking `w'`
    /// neighbourhood, then classified by the trend of the window minima.
    pub fn second_subderivative(&self, xbar: f64, v: f64, w: f64, opts: &SubderivativeOptions) -> Result<SecondSubderivative, Pw1dError> {
        let e0 = self.excess(xbar)?;
        let mut minima = vec![];
        for k in 0..opts.windows {
            let t_hi = opts.tau_start * 10f64.powi(-(k as i32));
            let t_lo = t_hi * 0.1;
            let delta = opts.neighbourhood * 10f64.powi(-(k as i32));
            let mut m = f64::INFINITY;
            for i in 0..opts.tau_points {
                let tau = t_hi * (t_lo / t_hi).powf(i as f64 / (opts.tau_points - 1).max(1) as f64);
                for j in 0..opts.w_points {
                    let wp = if opts.w_points == 1 {
                        w
                    } else {
                        w - delta + 2.0 * delta * j as f64 / (opts.w_points - 1) as f64
                    };
                    if let Ok(e) = self.excess(xbar + tau * wp) {
                        m = m.min((e - e0 - tau * v * wp) / (0.5 * tau * tau));
                    }
                }
            }
            minima.push(m);
        }
        Ok(classify_subderivative(minima, self.is_convex()))
    }
}

fn with_mirror(right: Vec<Piece>) -> Vec<Piece> {
    let mut all: Vec<Piece> = right.iter().rev().map(Piece::mirrored).collect();
    all.extend(right);
    all
}

fn parse_generator(s: &str) -> Option<Generator> {
    match s {
        "example31" | "factorial-staircase" => Some(Generator::FactorialStaircase),
        "example33" | "dyadic-staircase" => Some(Generator::DyadicStaircase),
        _ => {
            let inner = s.strip_prefix("binary-staircase(")?.strip_suffix(')')?;
            Some(Generator::BinaryStaircase(inner.trim().parse().ok()?))
        }
    }
}

fn factorial_staircase() -> Piecewise1D {
    const TERMS: usize = 30;
    let n_max = EXAMPLE31_CUTOFF;
    let alpha: Vec<f64> = (0..=n_max + 1).map(|n| 1.0 / factorial(n + 1)).collect();
    let term = |k: usize| 1.0 / (factorial(k) * factorial(k + 2));
    // tail[n] = sum_{k > n} 1/(k! (k+2)!), summed smallest first.
    let tail: Vec<f64> = (0..=n_max).map(|n| (n + 1..=TERMS).rev().map(term).sum()).collect();
    let beta: f64 = (0..=TERMS).rev().map(term).sum();
    let mut right: Vec<Piece> = (0..=n_max)
        .rev()
        .map(|n| Piece { lo: alpha[n + 1], hi: alpha[n], a: -tail[n], b: alpha[n + 1], c: 0.0 })
        .collect();
    right.push(Piece { lo: 1.0, hi: GENERATOR_EXTENT, a: -beta, b: 1.0, c: 0.0 });
    Piecewise1D {
        pieces: with_mirror(right),
        base: beta,
        accumulation: Some(0.0),
        gap: alpha[n_max + 1],
        // Level k contributes 2/(k+3) minus a positive remainder at x = alpha_k,
        // so the ratio over the gap has infimum 0.
        gap_ratio_inf: 0.0,
        source: Source::Generated(Generator::FactorialStaircase),
    }
}

fn staircase(c: f64, g: Generator) -> Result<Piecewise1D, Pw1dError> {
    if !(c > 0.5 && c < 1.0) {
        return Err(Pw1dError::Invalid(format!("staircase parameter {c} must lie in (0.5, 1)")));
    }
    let s = 1.0 / (2.0 * c - 1.0);
    let mut right = vec![];
    for n in (0..=STAIRCASE_CUTOFF).rev() {
        let top = 0.5f64.powi(n as i32);
        let start = 0.5 * top;
        right.push(Piece { lo: start, hi: c * top, a: start * (1.0 - s), b: s, c: 0.0 });
        right.push(Piece { lo: c * top, hi: top, a: top, b: 0.0, c: 0.0 });
    }
    right.push(Piece { lo: 1.0, hi: GENERATOR_EXTENT, a: 0.0, b: 1.0, c: 0.0 });
    // Level n is level 0 scaled by 2^-n, so its ratios are 2^n times larger.
    let level0 = &right[right.len() - 3..right.len() - 1];
    let ratio0 = level0
        .iter()
        .map(|p| quadratic_ratio_inf(p.a, p.b, p.c, p.lo, p.hi))
        .fold(f64::INFINITY, f64::min);
    Ok(Piecewise1D {
        pieces: with_mirror(right),
        base: 0.0,
        accumulation: Some(0.0),
        gap: 0.5f64.powi(STAIRCASE_CUTOFF as i32 + 1),
        gap_ratio_inf: ratio0 * 2f64.powi(STAIRCASE_CUTOFF as i32 + 1),
        source: Source::Generated(g),
    })
}

/// `inf 2 (A/u^2 + B/u + C)` for `u` in `[u1, u2]` (not straddling 0); an
/// endpoint at 0 is the one-sided limit.
fn quadratic_ratio_inf(a: f64, b: f64, c: f64, u1: f64, u2: f64) -> f64 {
    let r = |u: f64| 2.0 * (a / (u * u) + b / u + c);
    let limit0 = |side: f64| {
        if a != 0.0 {
            a.signum() * f64::INFINITY
        } else if b != 0.0 {
            (b * side).signum() * f64::INFINITY
        } else {
            2.0 * c
        }
    };
    let mut best = f64::INFINITY;
    for u in [u1, u2] {
        best = best.min(if u == 0.0 { limit0(if u1 + u2 >= 0.0 { 1.0 } else { -1.0 }) } else { r(u) });
    }
    if b != 0.0 {
        let u = -2.0 * a / b;
        if u > u1 && u < u2 && u != 0.0 {
            best = best.min(r(u));
        }
    }
    best
}

/// Distance from `p` to the convex hull of four points (union of the four
/// vertex triangles).
fn hull4_distance(p: (f64, f64), q: &[(f64, f64); 4]) -> f64 {
    const TRI: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRI.iter().map(|t| triangle_distance(p, q[t[0]], q[t[1]], q[t[2]])).fold(f64::INFINITY, f64::min)
}

fn triangle_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    let cross = |o: (f64, f64), u: (f64, f64), v: (f64, f64)| (u.0 - o.0) * (v.1 - o.1) - (u.1 - o.1) * (v.0 - o.0);
    let area = cross(a, b, c);
    if area.abs() > 1e-300 {
        let s = area.signum();
        if cross(a, b, p) * s >= 0.0 && cross(b, c, p) * s >= 0.0 && cross(c, a, p) * s >= 0.0 {
            return 0.0;
        }
    }
    segment_distance(p, a, b).min(segment_distance(p, b, c)).min(segment_distance(p, c, a))
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let d = (b.0 - a.0, b.1 - a.1);
    let len2 = d.0 * d.0 + d.1 * d.1;
    let t = if len2 > 0.0 { (((p.0 - a.0) * d.0 + (p.1 - a.1) * d.1) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p.0 - a.0 - t * d.0).hypot(p.1 - a.1 - t * d.1)
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionSummary {
    pub w: f64,
    pub accepted: usize,
    pub z_min: Option<f64>,
    pub z_max: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Conditions {
    pub x: f64,
    /// `0 in ∂_p f(x)`.
    pub stationary: bool,
    pub subdifferential: Interval,
    pub pd_34: bool,
    #[serde(serialize_with = "crate::num::ext")]
    pub pd_34_ratio: f64,
    pub pd_36: bool,
    /// Accepted `(w, z)` with the smallest `z w`, when it violates positivity.
    pub pd_36_witness: Option<(f64, f64)>,
    pub second_kind: bool,
    #[serde(serialize_with = "crate::num::ext")]
    pub second_kind_kappa: f64,
    pub directions: Vec<DirectionSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Qgc1d {
    pub x: f64,
    pub radii: Vec<f64>,
    /// Exact `inf` of the growth ratio over each ball.
    #[serde(serialize_with = "crate::num::ext_vec")]
    pub per_radius: Vec<f64>,
    /// Growth ratio at the two points at distance exactly `r`.
    #[serde(serialize_with = "crate::num::ext_vec")]
    pub at_radius: Vec<f64>,
    pub verdict: QgVerdict,
}

#[derive(Debug, Clone)]
pub struct SubderivativeOptions {
    /// Upper end of the first `tau` window; each window spans a decade.
    pub tau_start: f64,
    pub windows: usize,
    pub tau_points: usize,
    pub w_points: usize,
    /// Half-width of the `w'` grid in the first window, shrinking tenfold.
    pub neighbourhood: f64,
}

impl Default for SubderivativeOptions {
    fn default() -> Self {
        SubderivativeOptions { tau_start: 1e-1, windows: 6, tau_points: 50, w_points: 21, neighbourhood: 1e-1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SubderivativeTrend {
    /// Window minima settled.
    Stable,
    /// Window minima grow geometrically: `+inf` (or `-inf` if negative).
    Divergent,
    /// Positive minima still decreasing for a convex function: the liminf is
    /// read as `0`, the smallest value convexity allows.
    Vanishing,
    Irregular,
}

#[derive(Debug, Clone, Serialize)]
pub struct SecondSubderivative {
    #[serde(serialize_with = "crate::num::ext")]
    pub value: f64,
    pub trend: SubderivativeTrend,
    #[serde(serialize_with = "crate::num::ext_vec")]
    pub window_minima: Vec<f64>,
}

fn classify_subderivative(minima: Vec<f64>, convex: bool) -> SecondSubderivative {
    let done = |value, trend| SecondSubderivative { value, trend, window_minima: minima.clone() };
    let k = minima.len();
    if k < 3 || minima[k - 3..].iter().any(|m| !m.is_finite()) {
        return done(minima.last().copied().unwrap_or(f64::NAN), SubderivativeTrend::Irregular);
    }
    let (m1, m2, m3) = (minima[k - 3], minima[k - 2], minima[k - 1]);
    let scale = 1.0 + m3.abs();
    if (m3 - m2).abs() <= 1e-3 * scale && (m2 - m1).abs() <= 1e-2 * scale {
        let denom = m3 - 2.0 * m2 + m1;
        let value = if denom.abs() > 1e-300 && (m3 - m2).abs() < (m2 - m1).abs() {
            m3 - (m3 - m2) * (m3 - m2) / denom
        } else {
            m3
        };
        return done(value, SubderivativeTrend::Stable);
    }
    if m3 > 0.0 && m2 > 0.0 && m3 >= 1.5 * m2 && m2 >= 1.5 * m1 {
        return done(f64::INFINITY, SubderivativeTrend::Divergent);
    }
    if m3 < 0.0 && m2 < 0.0 && m3 <= 1.5 * m2 && m2 <= 1.5 * m1 {
        return done(f64::NEG_INFINITY, SubderivativeTrend::Divergent);
    }
    if convex && m3 > 0.0 && m3 < m2 && m2 < m1 {
        return done(0.0, SubderivativeTrend::Vanishing);
    }
    done(m3, SubderivativeTrend::Irregular)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Piecewise1D {
        Piecewise1D::parse("pw1d\nbreakpoints: -10 10\npiece 0: 0 0 1\neven: false\n").unwrap()
    }

    fn alpha(n: usize) -> f64 {
        1.0 / factorial(n + 1)
    }

    #[test]
    fn parse_and_round_trip() {
        let f = Piecewise1D::parse("pw1d\n# abs\nbreakpoints: 0 2\npiece 0: 0 1\neven: true\n").unwrap();
        assert_eq!(f.value(-1.5).unwrap(), 1.5);
        assert_eq!(f.domain(), (-2.0, 2.0));
        assert!(matches!(f.value(3.0), Err(Pw1dError::OutsideDomain(_))));
        let g = Piecewise1D::parse(&f.save()).unwrap();
        assert_eq!(g.pieces(), f.pieces());
        let h = Piecewise1D::parse("pw1d\ngenerator: binary-staircase(0.75)\n").unwrap();
        assert_eq!(h.value(0.3).unwrap(), Piecewise1D::generate(Generator::DyadicStaircase).unwrap().value(0.3).unwrap());
        assert!(Piecewise1D::parse("pw1d\nbreakpoints: 1 0\npiece 0: 0 0\n").is_err());
        assert!(Piecewise1D::parse("pw1d\ngenerator: binary-staircase(0.3)\n").is_err());
        assert!(Piecewise1D::parse("breakpoints: 0 1\n").is_err());
    }

    #[test]
    fn lower_semicontinuous_closure() {
        // Jump up at 1: the value there is the lower limit.
        let f = Piecewise1D::parse("pw1d\nbreakpoints: 0 1 2\npiece 0: 0 0\npiece 1: 5 0\n").unwrap();
        assert_eq!(f.value(1.0).unwrap(), 0.0);
        let s = f.proximal_subdifferential(1.0).unwrap();
        assert_eq!((s.lo, s.hi), (0.0, f64::INFINITY));
        // Domain ends impose no bound from outside.
        let s = f.proximal_subdifferential(0.0).unwrap();
        assert_eq!((s.lo, s.hi), (f64::NEG_INFINITY, 0.0));
    }

    #[test]
    fn factorial_staircase_values_and_subgradients() {
        let f = Piecewise1D::generate(Generator::FactorialStaircase).unwrap();
        assert!(f.is_convex());
        // Continuous with f(alpha_n) = alpha_n alpha_{n+1} + beta_{n+1}.
        for n in 1..=EXAMPLE31_CUTOFF {
            let x = alpha(n);
            let l = f.pieces().iter().find(|p| p.hi == x).unwrap().value(x);
            let r = f.pieces().iter().find(|p| p.lo == x).unwrap().value(x);
            assert!((l - r).abs() <= 1e-13 * l.abs(), "{n}: {l} {r}");
            let s = f.proximal_subdifferential(x).unwrap();
            assert_eq!((s.lo, s.hi), (alpha(n + 1), alpha(n)));
            let s = f.proximal_subdifferential(-x).unwrap();
            assert_eq!((s.lo, s.hi), (-alpha(n), -alpha(n + 1)));
        }
        assert_eq!(f.proximal_subdifferential(0.0).unwrap(), Interval::point(0.0));
        let mid = 0.5 * (alpha(3) + alpha(4));
        assert_eq!(f.proximal_subdifferential(mid).unwrap(), Interval::point(alpha(4)));
    }

    #[test]
    fn dyadic_staircase_subgradients() {
        let f = Piecewise1D::generate(Generator::DyadicStaircase).unwrap();
        assert!(!f.is_convex());
        assert_eq!(f.proximal_subdifferential(0.0).unwrap(), Interval { lo: -1.0, hi: 1.0 });
        // Concave kink at the end of a ramp, convex kink at its start.
        assert!(f.proximal_subdifferential(0.375).unwrap().is_empty());
        assert_eq!(f.proximal_subdifferential(0.25).unwrap(), Interval { lo: 0.0, hi: 2.0 });
        assert_eq!(f.value(0.875).unwrap(), 1.0);
        assert!(f.value(1e-20).is_err());
    }

    #[test]
    fn smooth_square() {
        let f = square();
        for x in [-1.0, 0.0, 0.3] {
            assert_eq!(f.proximal_subdifferential(x).unwrap(), Interval::point(2.0 * x));
        }
        let c = f.check_conditions(0.0, &DEFAULT_SCALES, 1e-7).unwrap();
        assert!(c.stationary && c.pd_34 && c.pd_36 && c.second_kind);
        assert!((c.pd_34_ratio - 2.0).abs() < 1e-12 && (c.second_kind_kappa - 2.0).abs() < 1e-12);
        let q = f.estimate_qgc_1d(0.0, &f.auto_radii()).unwrap();
        assert_eq!(q.verdict, QgVerdict::Holds(2.0));
        let d = f.second_subderivative(0.0, 0.0, 1.0, &SubderivativeOptions::default()).unwrap();
        assert_eq!(d.trend, SubderivativeTrend::Stable);
        assert!((d.value - 2.0).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn tangent_directions_factorial_staircase() {
        let f = Piecewise1D::generate(Generator::FactorialStaircase).unwrap();
        let t = |w, z| f.tangent_direction_test(0.0, 0.0, w, z, &DEFAULT_SCALES, DEFAULT_TANGENT_TOL);
        assert!(t(1.0, 0.0));
        assert!(t(1.0, 1.0));
        assert!(t(1.0, 0.5));
        assert!(!t(1.0, 2.0));
        assert!(!t(1.0, -1.0));
        assert!(t(-1.0, -0.5));
        assert!(t(0.0, 0.0));
    }

    #[test]
    fn conditions_factorial_staircase() {
        let f = Piecewise1D::generate(Generator::FactorialStaircase).unwrap();
        let c = f.check_conditions(0.0, &DEFAULT_SCALES, 1e-7).unwrap();
        assert!(c.stationary);
        assert!(!c.pd_34 && !c.pd_36);
        assert!(c.second_kind && (c.second_kind_kappa - 1.0).abs() <= 0.1, "{c:?}");
        let q = f.estimate_qgc_1d(0.0, &f.auto_radii()).unwrap();
        assert_eq!(q.verdict, QgVerdict::Fails);
        for (i, n) in (3..=8).enumerate() {
            // 2 (alpha_n alpha_{n+1} - tail_n) / alpha_n^2, about 2/(n+3).
            let tail: f64 = (n + 1..=30).map(|k| 1.0 / (factorial(k) * factorial(k + 2))).sum();
            let want = 2.0 * (alpha(n) * alpha(n + 1) - tail) / (alpha(n) * alpha(n));
            assert!((q.at_radius[i] - want).abs() < 1e-9 * want, "{n}: {} vs {want}", q.at_radius[i]);
            assert!((q.at_radius[i] * (n as f64 + 3.0) / 2.0 - 1.0).abs() < 0.01);
        }
        let d = f.second_subderivative(0.0, 0.0, 1.0, &SubderivativeOptions::default()).unwrap();
        assert_eq!((d.trend, d.value), (SubderivativeTrend::Vanishing, 0.0), "{d:?}");
    }

    #[test]
    fn conditions_dyadic_staircase() {
        let f = Piecewise1D::generate(Generator::DyadicStaircase).unwrap();
        assert!(f.tangent_direction_test(0.0, 0.0, 1.0, 0.0, &DEFAULT_SCALES, DEFAULT_TANGENT_TOL));
        let c = f.check_conditions(0.0, &DEFAULT_SCALES, 1e-7).unwrap();
        assert!(!c.pd_34 && !c.pd_36);
        assert_eq!(c.pd_36_witness, Some((1.0, 0.0)));
        let q = f.estimate_qgc_1d(0.0, &f.auto_radii()).unwrap();
        assert_eq!(q.per_radius, vec![2.0, 8.0, 32.0, 128.0]);
        assert_eq!(q.verdict, QgVerdict::Holds(2.0));
        let d = f.second_subderivative(0.0, 0.0, 1.0, &SubderivativeOptions::default()).unwrap();
        assert_eq!((d.trend, d.value), (SubderivativeTrend::Divergent, f64::INFINITY));
    }

    #[test]
    fn ratio_inf_on_pieces() {
        // f = |x| - x^2 / 4 near 0: ratio 2(1/u - 1/4) is smallest at u = r.
        let f = Piecewise1D::parse("pw1d\nbreakpoints: 0 2\npiece 0: 0 1 -0.25\neven: true\n").unwrap();
        let k = f.ball_ratio_inf(0.0, 1.0).unwrap();
        assert!((k - 1.5).abs() < 1e-12);
        // Off-centre, with an interior critical point of the ratio.
        assert!((quadratic_ratio_inf(1.0, -1.0, 0.0, 0.5, 4.0) - (-0.5)).abs() < 1e-12);
    }
}
