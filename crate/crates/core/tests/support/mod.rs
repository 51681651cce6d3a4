//! Independent reference computations for the integration tests.
//!
//! Nothing here calls into the solvers under test; each oracle is a slow but
//! simple method (scalar search, quadrature, coordinate descent, sampling,
//! covariance-form conditioning) whose correctness is easy to read off.

#![allow(dead_code)]

use ecgi::inference::Observation;
use ecgi::mesh::{build_lattice_mesh, gradient_operator, GradientOperator, MeshGraph};
use ecgi::sparseprior::{bound_exponent, log_normalizer};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Random symmetric positive-definite matrix with eigenvalues ≥ `floor`.
pub fn spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = normal_mat(rng, n, n);
    &a * a.transpose() + DMatrix::identity(n, n) * floor
}

pub fn chain(n: usize) -> (MeshGraph, GradientOperator) {
    let mesh = build_lattice_mesh(n, 1, 1, 1).unwrap();
    let d = gradient_operator(&mesh);
    (mesh, d)
}

/// Maximizer of a unimodal `f` on `[lo, hi]` by golden-section search.
pub fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        }
    }
    0.5 * (lo + hi)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        eps: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    rec(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), eps, 50)
}

/// Prior part of the expected bound for fixed second moments, written out
/// term by term.
pub fn prior_objective(x_sq: &[f64], p: f64, alpha: f64, lambda: &[f64]) -> f64 {
    let s = bound_exponent(p);
    let scale = (alpha * alpha / p).powf(s);
    x_sq.iter()
        .zip(lambda)
        .map(|(x, l)| log_normalizer(p) - alpha.ln() - 0.5 * l * x - 0.5 * (2.0 - p) * scale * l.powf(s))
        .sum()
}

/// Noise part: expected log-likelihood, Gamma prior and the extra `log β`.
pub fn noise_objective(resid_sq: f64, n_leads: usize, a: f64, b: f64, beta: f64) -> f64 {
    0.5 * n_leads as f64 * beta.ln() - 0.5 * beta * resid_sq + (a - 1.0) * beta.ln() - b * beta + beta.ln()
}

/// `(α, λ)` maximizing [`prior_objective`] by nested scalar searches: for a
/// trial `α` every `λ_i` is found separately (the objective separates), and
/// the profiled objective is then maximized over `log α`.
pub fn prior_argmax(x_sq: &[f64], p: f64) -> (f64, Vec<f64>) {
    let lambda_for = |alpha: f64| -> Vec<f64> {
        x_sq.iter()
            .map(|&x| {
                let g = |log_l: f64| prior_objective(&[x], p, alpha, &[log_l.exp()]);
                golden_max(g, -60.0, 60.0, 1e-11).exp()
            })
            .collect()
    };
    let profile = |log_a: f64| {
        let a = log_a.exp();
        prior_objective(x_sq, p, a, &lambda_for(a))
    };
    let log_a = golden_max(profile, -250.0, 50.0, 1e-10);
    let alpha = log_a.exp();
    (alpha, lambda_for(alpha))
}

/// Minimizer of `½xᵀQx − bᵀx` over `[lo, hi]ⁿ` by exact cyclic coordinate
/// descent.
pub fn box_qp_reference(q: &DMatrix<f64>, b: &DVector<f64>, lo: f64, hi: f64) -> DVector<f64> {
    let n = b.len();
    let mut x = DVector::from_element(n, 0.5 * (lo + hi));
    for _ in 0..200_000 {
        let mut moved = 0.0f64;
        for i in 0..n {
            let rest: f64 = (0..n).filter(|&j| j != i).map(|j| q[(i, j)] * x[j]).sum();
            let xi = ((b[i] - rest) / q[(i, i)]).clamp(lo, hi);
            moved = moved.max((xi - x[i]).abs());
            x[i] = xi;
        }
        if moved < 1e-14 {
            break;
        }
    }
    x
}

/// Gaussian conditioning in covariance form: prior `N(m0, C)`, data
/// `y = Hu + e`, `e ~ N(0, I/β)`.
pub fn condition(
    m0: &DVector<f64>,
    c: &DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let l = h.nrows();
    let s = h * c * h.transpose() + DMatrix::identity(l, l) / beta;
    let k = c * h.transpose() * s.try_inverse().unwrap();
    let mean = m0 + &k * (y - h * m0);
    let cov = c - &k * h * c;
    (mean, cov)
}

/// Mean and standard error of each coordinate over samples.
pub fn mean_and_se(samples: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let m = samples.len() as f64;
    let n = samples[0].len();
    let mut mean = DVector::zeros(n);
    for s in samples {
        mean += s;
    }
    mean /= m;
    let mut var = DVector::zeros(n);
    for s in samples {
        let d = s - &mean;
        var += d.component_mul(&d);
    }
    var /= m - 1.0;
    (mean, var.map(|v| (v / m).sqrt()))
}

/// Edge whose single-jump error pattern best explains `y − Hū` in least
/// squares, found by trying every edge of a chain.
pub fn one_sparse_scan(h: &DMatrix<f64>, resid: &DVector<f64>, n_nodes: usize) -> usize {
    (0..n_nodes - 1)
        .map(|e| {
            let pattern = DVector::from_fn(n_nodes, |i, _| if i > e { 1.0 } else { 0.0 });
            let hp = h * pattern;
            let amp = hp.dot(resid) / hp.norm_squared();
            (e, (resid - hp * amp).norm_squared())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

/// Small chain problem: random lead field, prediction and data.
pub struct Instance {
    pub obs: Observation,
    pub d: GradientOperator,
    pub u_bar: DVector<f64>,
    pub y: DVector<f64>,
}

pub fn instance(rng: &mut ChaCha8Rng, n: usize, leads: usize, data_offset: f64) -> Instance {
    let (_, d) = chain(n);
    let h = normal_mat(rng, leads, n) * 0.3;
    let u_bar = DVector::from_fn(n, |_, _| rng.random_range(-80.0..10.0));
    let truth = &u_bar + normal_vec(rng, n) * 5.0 + DVector::from_element(n, data_offset);
    let y = &h * truth + normal_vec(rng, leads) * 0.5;
    Instance {
        obs: Observation::new(h),
        d,
        u_bar,
        y,
    }
}

/// Five-node chain whose prediction misses one jump.
pub fn one_edge_case(rng: &mut ChaCha8Rng) -> (Instance, usize) {
    let n = 5;
    let (_, d) = chain(n);
    let h = normal_mat(rng, 6, n);
    let u_bar = DVector::from_fn(n, |_, _| rng.random_range(-60.0..-20.0));
    let edge = rng.random_range(0..n - 1);
    let jump = rng.random_range(15.0..30.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let truth = DVector::from_fn(n, |i, _| u_bar[i] + if i > edge { jump } else { 0.0 });
    let y = &h * truth + normal_vec(rng, 6) * 0.1;
    (
        Instance {
            obs: Observation::new(h),
            d,
            u_bar,
            y,
        },
        edge,
    )
}

