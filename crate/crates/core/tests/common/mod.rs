//! Brute-force oracles and random fixtures shared by the integration tests.
#![allow(dead_code)]

use joint_bootstrap::crf::CrfParams;
use joint_bootstrap::linalg::Matrix;
use rand::Rng;

/// Every tag sequence of length `n` over `c` tags.
pub fn all_paths(n: usize, c: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..c).map(move |k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn path_score(z: &Matrix, p: &CrfParams, y: &[usize]) -> f64 {
    let mut s = p.start[y[0]] + p.end[*y.last().unwrap()];
    for (t, &k) in y.iter().enumerate() {
        s += z.get(t, k);
        if t > 0 {
            s += p.transitions.get(y[t - 1], k);
        }
    }
    s
}

pub struct Enumerated {
    pub log_z: f64,
    pub marginals: Vec<Vec<f64>>,
    pub best_score: f64,
    /// Lexicographically smallest maximizer.
    pub best: Vec<usize>,
}

pub fn enumerate(z: &Matrix, p: &CrfParams) -> Enumerated {
    let (n, c) = (z.rows(), z.cols());
    let paths = all_paths(n, c);
    let scores: Vec<f64> = paths.iter().map(|y| path_score(z, p, y)).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let log_z = max + sum.ln();
    let mut marginals = vec![vec![0.0; c]; n];
    for (y, s) in paths.iter().zip(&scores) {
        let w = (s - log_z).exp();
        for (t, &k) in y.iter().enumerate() {
            marginals[t][k] += w;
        }
    }
    let (bi, _) = scores.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bs), (i, &s)| if s > bs { (i, s) } else { (bi, bs) });
    Enumerated { log_z, marginals, best_score: scores[bi], best: paths[bi].clone() }
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

pub fn random_crf(c: usize, in_dim: usize, scale: f64, rng: &mut impl Rng) -> CrfParams {
    let mut p = CrfParams::zeros(c, in_dim);
    p.projection = random_matrix(c, in_dim, scale, rng);
    p.transitions = random_matrix(c, c, scale, rng);
    p.start = (0..c).map(|_| rng.gen_range(-scale..scale)).collect();
    p.end = (0..c).map(|_| rng.gen_range(-scale..scale)).collect();
    p
}

/// `max |a - b| / max(max |b|, floor)`.
pub fn scaled_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

/// Central differences of `f` over every entry of `x`.
pub fn numeric_gradient(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
