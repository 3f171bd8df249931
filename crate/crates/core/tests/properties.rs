mod common;

use nalgebra::{DMatrix, DVector};
use nogap::cq;
use nogap::expr;
use nogap::kkt::{self, MultiplierSet};
use nogap::problem::{PointData, Problem};
use nogap::pw1d::{Piecewise1D, DEFAULT_SCALES, DEFAULT_TANGENT_TOL, Z_GRID_STEP};
use nogap::sosc::{self, Certification, SoscOptions};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(0), failure_persistence: None, ..Config::default() }
}

fn prepared(p: &Problem) -> (PointData, MultiplierSet) {
    let pd = p.evaluate(p.require_point().unwrap()).unwrap();
    let ms = kkt::build_multiplier_set(&pd).unwrap();
    (pd, ms)
}

fn modulus(p: &Problem, opts: &SoscOptions) -> (f64, Certification) {
    let (pd, ms) = prepared(p);
    let r = sosc::analyze(&pd, &ms, opts).unwrap();
    (r.predicted_modulus, r.certification)
}

const CURVED: [&str; 4] = ["soc-vertex", "soc-boundary", "degenerate-nlp", "licq-nlp"];

// --- expr -----------------------------------------------------------------

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn derivatives_match_finite_differences(seed in any::<u64>(), n in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = common::random_expression(&mut rng, n);
        let e = expr::parse(&text, &common::names(n)).unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let b = e.eval_bundle(&x).unwrap();
        let h = 1e-5;
        for i in 0..n {
            let shifted = |t: f64| {
                let mut y = x.clone();
                y[i] += t;
                y
            };
            let fd = (e.value(&shifted(h)).unwrap() - e.value(&shifted(-h)).unwrap()) / (2.0 * h);
            prop_assert!((fd - b.gradient[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{text}: d/dx{} {fd} vs {}", i + 1, b.gradient[i]);
            let gp = e.eval_bundle(&shifted(h)).unwrap().gradient;
            let gm = e.eval_bundle(&shifted(-h)).unwrap().gradient;
            for j in 0..n {
                let fd2 = (gp[j] - gm[j]) / (2.0 * h);
                prop_assert!((fd2 - b.hessian[(j, i)]).abs() <= 1e-5 * (1.0 + fd2.abs()), "{text}: H[{j},{i}] {fd2} vs {}", b.hessian[(j, i)]);
            }
        }
        prop_assert!(b.hessian.relative_eq(&b.hessian.transpose(), 1e-12, 1e-12));
    }
}

// --- sosc -----------------------------------------------------------------

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn sigma_is_homogeneous_of_degree_two(which in 0usize..CURVED.len(), seed in any::<u64>(), t in 0.05f64..20.0) {
        let p = common::corpus_problem(CURVED[which]);
        let (pd, ms) = prepared(&p);
        let cone = sosc::build_critical_cone(&pd);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DVector::from_fn(pd.n(), |_, _| rng.gen_range(-1.0..1.0));
        let w = cone.project(&raw);
        let s1 = sosc::sigma(&pd, &ms, &cone, &w).unwrap();
        let st = sosc::sigma(&pd, &ms, &cone, &(&w * t)).unwrap();
        prop_assert!((st - t * t * s1).abs() <= 1e-9 * (1.0 + (t * t * s1).abs()), "{}: {st} vs {}", CURVED[which], t * t * s1);
    }

    #[test]
    fn sigma_is_invariant_under_reduction_rescaling(which in 0usize..CURVED.len(), seed in any::<u64>(), factor in 0.1f64..10.0) {
        let p = common::corpus_problem(CURVED[which]);
        let (pd, ms) = prepared(&p);
        let scaled = pd.with_scaled_reductions(factor);
        let cone = sosc::build_critical_cone(&pd);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cone.project(&DVector::from_fn(pd.n(), |_, _| rng.gen_range(-1.0..1.0)));
        let a = sosc::sigma(&pd, &ms, &cone, &w).unwrap();
        let b = sosc::sigma(&scaled, &ms, &cone, &w).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn regularization_shifts_the_modulus(which in 0usize..6, rho in 0.01f64..2.0) {
        let name = ["soc-vertex", "soc-boundary", "degenerate-nlp", "licq-nlp", "convex-qp", "unconstrained-quadratic"][which];
        let p = common::corpus_problem(name);
        let xbar = p.require_point().unwrap().clone();
        let opts = SoscOptions { samples: 2000, ..SoscOptions::default() };
        let (base, _) = modulus(&p, &opts);
        let (shifted, _) = modulus(&p.regularized(rho, &xbar), &opts);
        prop_assert!((shifted - base - rho).abs() <= 1e-6, "{name}: {base} + {rho} vs {shifted}");
    }
}

#[test]
fn exact_and_sampled_paths_agree_on_quadratics() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 0..20 {
        let n = 1 + k % 5;
        let eigs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let h = common::random_with_spectrum(&mut rng, &eigs);
        let lmin = eigs.iter().copied().fold(f64::INFINITY, f64::min);
        let p = common::unconstrained_quadratic(&h);
        let (exact, cert) = modulus(&p, &SoscOptions::default());
        assert_eq!(cert, Certification::Exact);
        let (sampled, cert) = modulus(&p, &SoscOptions { samples: 2000, force_sampled: true, ..SoscOptions::default() });
        assert_eq!(cert, Certification::Sampled);
        assert!((exact - lmin).abs() <= 1e-9 * (1.0 + lmin.abs()), "case {k}: exact {exact} vs {lmin}");
        assert!((sampled - lmin).abs() <= 1e-6, "case {k}: sampled {sampled} vs {lmin}");
    }
}

// --- cq -------------------------------------------------------------------

/// Linear inequality system at 0; some draws make one gradient a
/// nonnegative combination of the negated others, which kills MFCQ.
fn random_linear_system(rng: &mut ChaCha8Rng) -> Problem {
    let n = rng.gen_range(1..=4usize);
    let m = rng.gen_range(1..=4usize);
    let mut rows: Vec<DVector<f64>> = (0..m).map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))).collect();
    if m >= 2 && rng.gen_bool(0.5) {
        let mut combo = DVector::zeros(n);
        for r in &rows[1..] {
            combo -= r * rng.gen_range(0.0..1.5);
        }
        rows[0] = combo;
    }
    let text = format!(
        "vars: {}\nobjective: x1\nblock orthant {m}:\n{}point: {}\n",
        common::names(n).join(" "),
        rows.iter()
            .map(|a| format!("  row: {}\n", common::quadratic_expr(&DMatrix::zeros(n, n), a, 0.0)))
            .collect::<String>(),
        vec!["0"; n].join(" ")
    );
    Problem::parse(&text).unwrap()
}

proptest! {
    #![proptest_config(config(128))]

    #[test]
    fn mfcq_primal_and_dual_agree(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = if rng.gen_bool(0.5) { random_linear_system(&mut rng) } else { common::random_licq_nlp(&mut rng).problem };
        let pd = p.evaluate(p.require_point().unwrap()).unwrap();
        prop_assert_eq!(cq::check_mfcq(&pd), cq::mfcq_dual(&pd), "{}", p.save());
    }
}

// --- pw1d -----------------------------------------------------------------

/// Continuous convex piecewise quadratic on [-10, 10] with a breakpoint at 0
/// where it is minimized. Slopes and curvatures are either 0 or well away
/// from the verdict thresholds.
fn convex_pq(rng: &mut ChaCha8Rng) -> Piecewise1D {
    let side = |rng: &mut ChaCha8Rng| {
        let k = rng.gen_range(1..=4usize);
        let mut ts = vec![0.0];
        let mut t: f64 = rng.gen_range(0.6..2.0);
        for _ in 1..k {
            ts.push(t);
            t += rng.gen_range(0.2..3.0);
        }
        ts.push(10.0);
        let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(lo..hi) };
        let mut s = pick(rng, 0.1, 2.0);
        let mut v = 0.0;
        let mut pieces = vec![];
        for w in ts.windows(2) {
            let c = pick(rng, 0.1, 3.0);
            let b = s - 2.0 * c * w[0];
            let a = v - b * w[0] - c * w[0] * w[0];
            pieces.push((w[0], w[1], [a, b, c]));
            s = b + 2.0 * c * w[1] + pick(rng, 0.1, 1.0);
            v = a + w[1] * (b + c * w[1]);
        }
        pieces
    };
    let right = side(rng);
    let left = side(rng);
    let mut bps: Vec<f64> = left.iter().rev().map(|(_, hi, _)| -hi).collect();
    bps.extend(right.iter().map(|(lo, _, _)| *lo));
    bps.push(10.0);
    let mut coeffs: Vec<[f64; 3]> = left.iter().rev().map(|(_, _, [a, b, c])| [*a, -b, *c]).collect();
    coeffs.extend(right.iter().map(|(_, _, k)| *k));
    Piecewise1D::from_pieces(bps, coeffs, false).unwrap()
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn convex_subdifferential_is_monotone(seed in any::<u64>(), x in -9.5f64..9.5, y in -9.5f64..9.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = convex_pq(&mut rng);
        prop_assert!(f.is_convex());
        let (x, y) = if x <= y { (x, y) } else { (y, x) };
        let (a, b) = (f.proximal_subdifferential(x).unwrap(), f.proximal_subdifferential(y).unwrap());
        prop_assert!(!a.is_empty() && !b.is_empty());
        if x < y {
            prop_assert!(a.hi <= b.lo + 1e-9, "{x}: {a:?}, {y}: {b:?}");
        }
    }

    #[test]
    fn staircase_subdifferential_is_monotone(x in -2.0f64..2.0, y in -2.0f64..2.0) {
        let f = Piecewise1D::parse("pw1d\ngenerator: example31\n").unwrap();
        let (x, y) = if x <= y { (x, y) } else { (y, x) };
        let (a, b) = (f.proximal_subdifferential(x).unwrap(), f.proximal_subdifferential(y).unwrap());
        if x < y {
            prop_assert!(a.hi <= b.lo + 1e-9, "{x}: {a:?}, {y}: {b:?}");
        }
    }

    #[test]
    fn quadratic_subgradients_satisfy_the_homogeneity_identity(c in 0.01f64..5.0, w in -9.0f64..9.0) {
        let h = Piecewise1D::from_pieces(vec![0.0, 10.0], vec![[0.0, 0.0, c]], true).unwrap();
        let sub = h.proximal_subdifferential(w).unwrap();
        prop_assert!((sub.hi - sub.lo).abs() <= 1e-12);
        let z = sub.lo;
        prop_assert!((z - 2.0 * c * w).abs() <= 1e-12 * (1.0 + z.abs()));
        prop_assert!((z * w - 2.0 * h.value(w).unwrap()).abs() <= 1e-10 * (1.0 + z * w));
    }

    #[test]
    fn growth_verdict_matches_positive_definiteness_on_convex_pq(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = convex_pq(&mut rng);
        let cond = f.check_conditions(0.0, &DEFAULT_SCALES, 1e-7).unwrap();
        prop_assert!(cond.stationary);
        let q = f.estimate_qgc_1d(0.0, &f.auto_radii()).unwrap();
        let holds = matches!(q.verdict, nogap::oracle::QgVerdict::Holds(_));
        prop_assert_eq!(holds, cond.pd_36, "verdict {:?}, conditions {:?}", q.verdict, cond);
        // Kinks grow linearly, so only the innermost radius reflects the local modulus.
        let kappa = *q.per_radius.last().unwrap();
        if holds
            && cond.pd_34_ratio.is_finite() {
                // The ratio is read off the z grid, so it is known to one step.
                let r = cond.pd_34_ratio;
                prop_assert!(kappa >= r - Z_GRID_STEP && kappa <= 2.0 * r + Z_GRID_STEP, "kappa {kappa}, pd_34 ratio {r}");
            }
    }
}

fn scale_consistency(f: &Piecewise1D, xbar: f64, vbar: f64) {
    let mut accepted = 0;
    for w in [1.0, -1.0, 0.5] {
        for zi in -40..=40 {
            let z = zi as f64 * 0.1;
            if !f.tangent_direction_test(xbar, vbar, w, z, &DEFAULT_SCALES, DEFAULT_TANGENT_TOL) {
                continue;
            }
            accepted += 1;
            for alpha in [0.5, 2.0] {
                assert!(
                    f.tangent_direction_test(xbar, vbar, alpha * w, alpha * z, &DEFAULT_SCALES, DEFAULT_TANGENT_TOL),
                    "({w}, {z}) accepted, ({}, {}) rejected",
                    alpha * w,
                    alpha * z
                );
            }
        }
    }
    assert!(accepted > 0);
}

#[test]
fn tangent_test_is_scale_consistent_on_staircases() {
    for g in ["example31", "example33"] {
        let f = Piecewise1D::parse(&format!("pw1d\ngenerator: {g}\n")).unwrap();
        scale_consistency(&f, 0.0, 0.0);
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn tangent_test_is_scale_consistent_on_convex_pq(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = convex_pq(&mut rng);
        let sub = f.proximal_subdifferential(0.0).unwrap();
        // Endpoint subgradients have the richest tangent cones.
        for v in [sub.lo, sub.hi, 0.0] {
            for w in [1.0, -1.0] {
                for zi in -40..=40 {
                    let z = zi as f64 * 0.1;
                    if f.tangent_direction_test(0.0, v, w, z, &DEFAULT_SCALES, DEFAULT_TANGENT_TOL) {
                        for alpha in [0.5, 2.0] {
                            prop_assert!(f.tangent_direction_test(0.0, v, alpha * w, alpha * z, &DEFAULT_SCALES, DEFAULT_TANGENT_TOL));
                        }
                    }
                }
            }
        }
    }
}


