//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use kma::dynamics::{ControlInput, Sample, StateVector};
use kma::edmd::LinearEmbeddingModel;
use kma::features::FeatureMap;
use kma::training::problem1_loss;
use nalgebra::{Complex, DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn unif(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

pub fn random_matrix(rng: &mut impl RngCore, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| unif(rng, -scale, scale))
}

pub fn random_vector(rng: &mut impl RngCore, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| unif(rng, -scale, scale))
}

/// Spectral radius from the eigenvalues of the real Schur form.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Random matrix rescaled to spectral radius `rho`.
pub fn matrix_with_radius(rng: &mut impl RngCore, n: usize, rho: f64) -> DMatrix<f64> {
    loop {
        let m = random_matrix(rng, n, n, 1.0);
        let r = spectral_radius(&m);
        if r > 1e-3 {
            return m * (rho / r);
        }
    }
}

/// `|g - fd|_inf / max(|g|_inf, |fd|_inf)`; zero when both vanish.
pub fn rel_err(g: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(g.len(), fd.len());
    let diff = g.iter().zip(fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = g.iter().chain(fd).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    let mut p = at.to_vec();
    (0..at.len())
        .map(|i| {
            p[i] = at[i] + FD_STEP;
            let hi = f(&p);
            p[i] = at[i] - FD_STEP;
            let lo = f(&p);
            p[i] = at[i];
            (hi - lo) / (2.0 * FD_STEP)
        })
        .collect()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

fn from_row_major(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, v)
}

/// Central differences of the Problem-1 objective with respect to theta, A, B and C,
/// each returned row-major.
pub fn loss_fd(
    fm: &FeatureMap,
    model: &LinearEmbeddingModel,
    batch: &[Sample],
    l1: f64,
    l2: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let theta = fm.params();
    let d_theta = central_diff(
        |t| {
            let mut f = fm.clone();
            f.set_params(t).unwrap();
            problem1_loss(&f, model, batch, l1, l2).unwrap()
        },
        &theta,
    );
    let (ar, ac) = model.a.shape();
    let d_a = central_diff(
        |v| problem1_loss(fm, &LinearEmbeddingModel { a: from_row_major(ar, ac, v), ..model.clone() }, batch, l1, l2).unwrap(),
        &row_major(&model.a),
    );
    let (br, bc) = model.b.shape();
    let d_b = central_diff(
        |v| problem1_loss(fm, &LinearEmbeddingModel { b: from_row_major(br, bc, v), ..model.clone() }, batch, l1, l2).unwrap(),
        &row_major(&model.b),
    );
    let (cr, cc) = model.c.shape();
    let d_c = central_diff(
        |v| problem1_loss(fm, &LinearEmbeddingModel { c: from_row_major(cr, cc, v), ..model.clone() }, batch, l1, l2).unwrap(),
        &row_major(&model.c),
    );
    (d_theta, d_a, d_b, d_c)
}

pub fn mat_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    row_major(m)
}

/// A random feature map, model and batch with `n` states and `p` inputs.
pub fn random_problem(seed: u64, n: usize, p: usize, n_extra: usize) -> (FeatureMap, LinearEmbeddingModel, Vec<Sample>) {
    let mut r = rng(seed);
    let fm = FeatureMap::init(n, n_extra, &[5], Default::default(), seed).unwrap();
    let d = n + n_extra;
    let model = LinearEmbeddingModel {
        a: random_matrix(&mut r, d, d, 0.5),
        b: random_matrix(&mut r, d, p, 0.5),
        c: random_matrix(&mut r, n, d, 0.5),
        noise: None,
    };
    let batch = (0..4)
        .map(|_| Sample {
            x: random_vector(&mut r, n, 1.0) as StateVector,
            u: random_vector(&mut r, p, 1.0) as ControlInput,
            y: random_vector(&mut r, n, 1.0),
        })
        .collect();
    (fm, model, batch)
}

/// `x+ = A x + B u` samples from random states and inputs.
pub fn linear_samples(a: &DMatrix<f64>, b: &DMatrix<f64>, count: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let x = random_vector(&mut r, a.nrows(), 1.0);
            let u = random_vector(&mut r, b.ncols(), 1.0);
            let y = a * &x + b * &u;
            Sample { x, u, y }
        })
        .collect()
}

/// DARE right-hand side evaluated independently of the library.
pub fn dare_rhs(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let s = r + b.transpose() * p * b;
    let s_inv = s.try_inverse().expect("invertible");
    q + a.transpose() * p * a - a.transpose() * p * b * s_inv * b.transpose() * p * a
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// `min |lambda| >= 1` of `sigma_min([A - lambda I, B])`: how far the unstable
/// modes are from losing controllability (PBH test). Infinite when `A` is stable.
pub fn stabilizability_margin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (n, p) = (a.nrows(), b.ncols());
    let mut best = f64::INFINITY;
    for lam in a.complex_eigenvalues().iter().filter(|l| l.norm() >= 1.0) {
        let m = DMatrix::<Complex<f64>>::from_fn(n, n + p, |i, j| {
            if j < n {
                Complex::new(a[(i, j)], 0.0) - if i == j { *lam } else { Complex::new(0.0, 0.0) }
            } else {
                Complex::new(b[(i, j - n)], 0.0)
            }
        });
        best = best.min(m.singular_values().min());
    }
    best
}
