#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use nogap::problem::Problem;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub fn corpus_problem(name: &str) -> Problem {
    Problem::load(corpus_dir().join(name).join("problem.txt")).unwrap()
}

pub fn corpus_file(name: &str, file: &str) -> PathBuf {
    corpus_dir().join(name).join(file)
}

pub fn names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}

fn num(v: f64) -> String {
    format!("({v:e})")
}

/// `0.5 x' H x + c' x + k` as problem text.
pub fn quadratic_expr(h: &DMatrix<f64>, c: &DVector<f64>, k: f64) -> String {
    let n = c.len();
    let mut terms = vec![num(k)];
    for i in 0..n {
        terms.push(format!("{}*x{}^2", num(0.5 * h[(i, i)]), i + 1));
        for j in i + 1..n {
            terms.push(format!("{}*x{}*x{}", num(h[(i, j)]), i + 1, j + 1));
        }
        terms.push(format!("{}*x{}", num(c[i]), i + 1));
    }
    terms.join(" + ")
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0) * scale);
    (&m + m.transpose()) * 0.5
}

/// Symmetric with prescribed eigenvalues in a random orthonormal basis.
pub fn random_with_spectrum(rng: &mut ChaCha8Rng, eigs: &[f64]) -> DMatrix<f64> {
    let n = eigs.len();
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let q = m.qr().q();
    &q * DMatrix::from_diagonal(&DVector::from_column_slice(eigs)) * q.transpose()
}

pub fn unconstrained_quadratic(h: &DMatrix<f64>) -> Problem {
    let n = h.nrows();
    let text = format!(
        "vars: {}\nobjective: {}\npoint: {}\n",
        names(n).join(" "),
        quadratic_expr(h, &DVector::zeros(n), 0.0),
        vec!["0"; n].join(" ")
    );
    Problem::parse(&text).unwrap()
}

/// Random NLP at `x = 0`: quadratic objective and up to three quadratic
/// inequalities, active ones with linearly independent gradients, a
/// stationary point by construction (multipliers drawn, some zero).
pub struct RandomNlp {
    pub problem: Problem,
    pub multipliers: Vec<f64>,
}

pub fn random_licq_nlp(rng: &mut ChaCha8Rng) -> RandomNlp {
    loop {
        let n = rng.gen_range(2..=4usize);
        let m = rng.gen_range(1..=3usize);
        let mut rows = vec![];
        let mut active_grads: Vec<DVector<f64>> = vec![];
        let mut lam = vec![];
        let mut c = DVector::zeros(n);
        for _ in 0..m {
            let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let b = random_symmetric(rng, n, 0.5);
            let active = rng.gen_bool(0.75);
            rows.push(quadratic_expr(&b, &a, if active { 0.0 } else { -0.5 }));
            let l = if active && !rng.gen_bool(0.2) { rng.gen_range(0.2..1.5) } else { 0.0 };
            if active {
                c -= &a * l;
                active_grads.push(a);
            }
            lam.push(l);
        }
        if !active_grads.is_empty() {
            let sv = DMatrix::from_columns(&active_grads).svd(false, false).singular_values;
            if sv.min() < 0.1 {
                continue;
            }
        }
        let h = random_symmetric(rng, n, 1.5) + DMatrix::identity(n, n) * rng.gen_range(-0.3..1.5);
        let text = format!(
            "vars: {}\nobjective: {}\nblock orthant {}:\n{}point: {}\n",
            names(n).join(" "),
            quadratic_expr(&h, &c, 0.0),
            m,
            rows.iter().map(|r| format!("  row: {r}\n")).collect::<String>(),
            vec!["0"; n].join(" ")
        );
        return RandomNlp { problem: Problem::parse(&text).unwrap(), multipliers: lam };
    }
}

/// Random smooth expression in `n` variables, finite on all of `R^n`.
pub fn random_expression(rng: &mut ChaCha8Rng, n: usize) -> String {
    let v = |rng: &mut ChaCha8Rng| format!("x{}", rng.gen_range(1..=n));
    let c = |rng: &mut ChaCha8Rng| num((rng.gen_range(-2.0..2.0f64) * 100.0).round() / 100.0);
    let mut terms = vec![];
    for _ in 0..rng.gen_range(2..6) {
        let t = match rng.gen_range(0..7) {
            0 => format!("{}*{}*{}", c(rng), v(rng), v(rng)),
            1 => format!("{}*{}^3", c(rng), v(rng)),
            2 => format!("{}*sin({}*{})", c(rng), c(rng), v(rng)),
            3 => format!("{}*exp({}*{})", c(rng), c(rng), v(rng)),
            4 => format!("{}*cos({} - {}*{})", c(rng), v(rng), c(rng), v(rng)),
            5 => format!("{}*{}/(1 + {}^2)", c(rng), v(rng), v(rng)),
            _ => format!("sqrt(1 + {}^2)", v(rng)),
        };
        terms.push(t);
    }
    terms.join(" + ")
}
