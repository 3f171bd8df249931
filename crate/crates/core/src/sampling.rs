//! Deterministic low-discrepancy point sets.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMES: [u64; 32] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109,
    113, 127, 131,
];

fn prime(i: usize) -> u64 {
    if i < PRIMES.len() {
        return PRIMES[i];
    }
    // Past the table: continue by trial division.
    let mut found = PRIMES.len() - 1;
    let mut p = PRIMES[found];
    while found < i {
        p += 2;
        if (2..).take_while(|d| d * d <= p).all(|d| !p.is_multiple_of(d)) {
            found += 1;
        }
    }
    p
}

pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while index > 0 {
        out += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    out
}

/// Halton points in `[0,1)^dim`, skipping the origin.
pub fn halton(dim: usize, count: usize) -> Vec<DVector<f64>> {
    (1..=count as u64)
        .map(|k| DVector::from_iterator(dim, (0..dim).map(|d| radical_inverse(k, prime(d)))))
        .collect()
}

/// Halton points with a Cranley–Patterson rotation drawn from `seed`.
pub fn cube_points(dim: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
    halton(dim, count)
        .into_iter()
        .map(|p| DVector::from_iterator(dim, p.iter().zip(&shift).map(|(a, s)| (a + s).fract())))
        .collect()
}

fn gaussian_pair(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * (1.0 - u1).ln()).sqrt();
    (r * (2.0 * PI * u2).cos(), r * (2.0 * PI * u2).sin())
}

/// Points on the unit sphere of `R^dim`.
///
/// `dim` 1: both signs; 2: evenly spaced angles; 3: Fibonacci lattice;
/// higher: Box–Muller applied to shifted Halton points.
pub fn sphere_points(dim: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match dim {
        0 => vec![],
        1 => vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
        2 => {
            let shift: f64 = rng.gen();
            (0..count)
                .map(|k| {
                    let a = 2.0 * PI * (k as f64 + shift) / count as f64;
                    DVector::from_vec(vec![a.cos(), a.sin()])
                })
                .collect()
        }
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            let shift: f64 = rng.gen::<f64>() * 2.0 * PI;
            (0..count)
                .map(|k| {
                    let z = 1.0 - (2.0 * k as f64 + 1.0) / count as f64;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let a = golden * k as f64 + shift;
                    DVector::from_vec(vec![r * a.cos(), r * a.sin(), z])
                })
                .collect()
        }
        _ => {
            let pairs = dim.div_ceil(2);
            cube_points(2 * pairs, count, seed)
                .into_iter()
                .filter_map(|u| {
                    let mut g = Vec::with_capacity(2 * pairs);
                    for p in 0..pairs {
                        let (a, b) = gaussian_pair(u[2 * p], u[2 * p + 1]);
                        g.push(a);
                        g.push(b);
                    }
                    g.truncate(dim);
                    let v = DVector::from_vec(g);
                    let n = v.norm();
                    (n > 1e-12).then(|| v / n)
                })
                .collect()
        }
    }
}

/// Points in the closed ball of the given radius around `center`.
pub fn ball_points(center: &DVector<f64>, radius: f64, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let n = center.len();
    if n == 0 {
        return vec![center.clone(); count.min(1)];
    }
    cube_points(n + 1, count, seed)
        .into_iter()
        .map(|u| {
            // Direction from the first n coordinates, radius from the last.
            let mut dir = DVector::from_iterator(n, (0..n).map(|i| {
                let (a, _) = gaussian_pair(u[i], (u[(i + 1) % n] + 0.5 * u[n]).fract());
                a
            }));
            let norm = dir.norm();
            if norm < 1e-12 {
                dir = DVector::zeros(n);
                dir[0] = 1.0;
            } else {
                dir /= norm;
            }
            center + dir * (radius * u[n].powf(1.0 / n as f64))
        })
        .collect()
}
