//! Least-squares fitting of linear embedding models on lifted data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::Sample;
use crate::error::{KmaError, Result};
use crate::exec::ExecMode;
use crate::features::FeatureMap;
use crate::linalg::{matrix_serde, vector_serde};

pub const DEFAULT_RCOND: f64 = 1e-10;
pub const VAR_FLOOR: f64 = 1e-12;

/// All monomials of total degree `1..=max_degree` plus the constant.
///
/// Order: the state itself, then `1`, then degrees `2..=max_degree` each in
/// graded-lexicographic order (`a^2, ab, b^2, ...`).
pub fn monomial_features(x: &[f64], max_degree: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(monomial_dim(x.len(), max_degree));
    out.extend_from_slice(x);
    out.push(1.0);
    for degree in 2..=max_degree {
        let mut idx = vec![0usize; degree];
        loop {
            out.push(idx.iter().map(|&i| x[i]).product());
            // next non-decreasing multi-index
            let mut pos = degree;
            while pos > 0 && idx[pos - 1] == x.len() - 1 {
                pos -= 1;
            }
            if pos == 0 {
                break;
            }
            let v = idx[pos - 1] + 1;
            for slot in &mut idx[pos - 1..] {
                *slot = v;
            }
        }
    }
    out
}

pub fn monomial_dim(n: usize, max_degree: usize) -> usize {
    let mut dim = n + 1;
    for d in 2..=max_degree {
        // C(n + d - 1, d)
        let mut c = 1usize;
        for k in 0..d {
            c = c * (n + k) / (k + 1);
        }
        dim += c;
    }
    dim
}

/// The dictionary used to lift states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lift {
    MlpFeatures(FeatureMap),
    Monomials { n: usize, max_degree: usize },
}

impl Lift {
    pub fn state_dim(&self) -> usize {
        match self {
            Lift::MlpFeatures(fm) => fm.n,
            Lift::Monomials { n, .. } => *n,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Lift::MlpFeatures(fm) => fm.lift_dim(),
            Lift::Monomials { n, max_degree } => monomial_dim(*n, *max_degree),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Lift::MlpFeatures(fm) => fm.forward(x),
            Lift::Monomials { max_degree, .. } => monomial_features(x, *max_degree),
        }
    }

    pub fn eval_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.eval(x.as_slice()))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Lift::MlpFeatures(fm) => fm.validate(),
            Lift::Monomials { n, max_degree } if *n > 0 && *max_degree >= 1 => Ok(()),
            Lift::Monomials { .. } => Err(KmaError::InvalidArgument("monomial dictionary needs n >= 1 and degree >= 1".into())),
        }
    }
}

/// Solution of a (possibly ridge-regularized) least-squares problem.
#[derive(Debug, Clone)]
pub struct LsSolution {
    pub w: DMatrix<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
}

/// `argmin_W |Y - Phi W|_F^2 + ridge |W|_F^2` through a truncated SVD of `Phi`.
pub fn least_squares(phi: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<LsSolution> {
    least_squares_rcond(phi, y, ridge, DEFAULT_RCOND)
}

pub fn least_squares_rcond(phi: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64, rcond: f64) -> Result<LsSolution> {
    let (m, d) = phi.shape();
    if m == 0 {
        return Err(KmaError::Empty("regression data"));
    }
    if y.nrows() != m {
        return Err(KmaError::Dimension { context: "regression targets", expected: m, got: y.nrows() });
    }
    if !(ridge >= 0.0) {
        return Err(KmaError::InvalidArgument("ridge must be non-negative".into()));
    }
    let q = y.ncols();
    if d == 0 {
        return Ok(LsSolution { w: DMatrix::zeros(0, q), rank: 0, rank_deficient: false });
    }
    // For tall problems work on the d x d Gram-free route: R from a thin QR keeps
    // the SVD small without squaring the condition number.
    let (core, rhs) = if m > d {
        let qr = phi.clone().qr();
        let r = qr.r();
        let qty = qr.q().transpose() * y;
        (r, qty)
    } else {
        (phi.clone(), y.clone())
    };
    let s = core.singular_values();
    let cutoff = rcond * s.iter().cloned().fold(0.0, f64::max);
    let rank = s.iter().filter(|&&si| si > cutoff && si > 0.0).count();
    if rank == d && m >= d {
        // Full column rank: back-substitution is backward stable, the SVD route
        // loses digits along the smallest singular directions.
        let (r, rhs) = if ridge > 0.0 {
            let mut aug = DMatrix::zeros(m + d, d);
            aug.rows_mut(0, m).copy_from(phi);
            aug.rows_mut(m, d).fill_diagonal(ridge.sqrt());
            let mut yaug = DMatrix::zeros(m + d, q);
            yaug.rows_mut(0, m).copy_from(y);
            let qr = aug.qr();
            (qr.r(), qr.q().transpose() * yaug)
        } else {
            (core.clone(), rhs.clone())
        };
        if let Some(w) = r.solve_upper_triangular(&rhs) {
            return Ok(LsSolution { w, rank, rank_deficient: false });
        }
    }
    let svd = core.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s = &svd.singular_values;
    let utb = u.transpose() * &rhs;
    let mut scaled = DMatrix::zeros(s.len(), q);
    for (i, &si) in s.iter().enumerate() {
        if si > cutoff && si > 0.0 {
            let factor = si / (si * si + ridge);
            for c in 0..q {
                scaled[(i, c)] = factor * utb[(i, c)];
            }
        }
    }
    let w = v_t.transpose() * scaled;
    Ok(LsSolution { w, rank, rank_deficient: rank < d })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoiseModel {
    #[serde(with = "vector_serde")]
    pub sigma_x: DVector<f64>,
    #[serde(with = "vector_serde")]
    pub sigma_z: DVector<f64>,
}

/// `z+ = A z + B u`, `x+ = C z+`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEmbeddingModel {
    #[serde(with = "matrix_serde")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub b: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub c: DMatrix<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<GaussianNoiseModel>,
}

impl LinearEmbeddingModel {
    pub fn lift_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn check_dims(&self, lift: &Lift) -> Result<()> {
        let nx = lift.dim();
        let checks = [
            ("A rows", nx, self.a.nrows()),
            ("A cols", nx, self.a.ncols()),
            ("B rows", nx, self.b.nrows()),
            ("C rows", lift.state_dim(), self.c.nrows()),
            ("C cols", nx, self.c.ncols()),
        ];
        for (context, expected, got) in checks {
            if expected != got {
                return Err(KmaError::Dimension { context, expected, got });
            }
        }
        if let Some(noise) = &self.noise {
            if noise.sigma_x.len() != self.state_dim() || noise.sigma_z.len() != nx {
                return Err(KmaError::Dimension { context: "noise model", expected: nx, got: noise.sigma_z.len() });
            }
        }
        if !(self.a.iter().chain(self.b.iter()).chain(self.c.iter()).all(|v| v.is_finite())) {
            return Err(KmaError::InvalidArgument("non-finite model matrix".into()));
        }
        Ok(())
    }

    pub fn latent_step(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b * u
    }
}

/// Lifted regressors for a batch of samples.
#[derive(Debug, Clone)]
pub struct LiftedData {
    /// rows `g(x_j)^T`
    pub gx: DMatrix<f64>,
    /// rows `g(y_j)^T`
    pub gy: DMatrix<f64>,
    /// rows `u_j^T`
    pub u: DMatrix<f64>,
    /// rows `x_j^T`
    pub x: DMatrix<f64>,
    /// rows `y_j^T`
    pub y: DMatrix<f64>,
}

impl LiftedData {
    pub fn new(lift: &Lift, samples: &[Sample], exec: ExecMode) -> Result<Self> {
        let first = samples.first().ok_or(KmaError::Empty("sample set"))?;
        let (n, p, nx) = (lift.state_dim(), first.u.len(), lift.dim());
        for s in samples {
            if s.x.len() != n || s.y.len() != n {
                return Err(KmaError::Dimension { context: "sample state", expected: n, got: s.x.len() });
            }
            if s.u.len() != p {
                return Err(KmaError::Dimension { context: "sample input", expected: p, got: s.u.len() });
            }
        }
        let lifted = exec.map_slice(samples, |s| (lift.eval(s.x.as_slice()), lift.eval(s.y.as_slice())));
        let m = samples.len();
        let gx = DMatrix::from_fn(m, nx, |r, c| lifted[r].0[c]);
        let gy = DMatrix::from_fn(m, nx, |r, c| lifted[r].1[c]);
        let u = DMatrix::from_fn(m, p, |r, c| samples[r].u[c]);
        let x = DMatrix::from_fn(m, n, |r, c| samples[r].x[c]);
        let y = DMatrix::from_fn(m, n, |r, c| samples[r].y[c]);
        Ok(LiftedData { gx, gy, u, x, y })
    }

    pub fn len(&self) -> usize {
        self.gx.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct DynamicsFit {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub rank_deficient: bool,
}

/// `[A B] = argmin sum |g(y) - [A B][g(x); u]|^2`.
pub fn fit_dynamics(lift: &Lift, samples: &[Sample], ridge: f64) -> Result<DynamicsFit> {
    fit_dynamics_lifted(&LiftedData::new(lift, samples, ExecMode::default())?, ridge)
}

pub fn fit_dynamics_lifted(data: &LiftedData, ridge: f64) -> Result<DynamicsFit> {
    let (m, nx) = data.gx.shape();
    let p = data.u.ncols();
    let mut phi = DMatrix::zeros(m, nx + p);
    phi.view_mut((0, 0), (m, nx)).copy_from(&data.gx);
    phi.view_mut((0, nx), (m, p)).copy_from(&data.u);
    let sol = least_squares(&phi, &data.gy, ridge)?;
    let ab = sol.w.transpose();
    Ok(DynamicsFit {
        a: ab.columns(0, nx).into_owned(),
        b: ab.columns(nx, p).into_owned(),
        rank_deficient: sol.rank_deficient || m < nx + p,
    })
}

#[derive(Debug, Clone)]
pub struct DecoderFit {
    pub c: DMatrix<f64>,
    pub rank_deficient: bool,
}

/// `C = argmin sum |x - C g(x)|^2`.
pub fn fit_decoder(lift: &Lift, samples: &[Sample], ridge: f64) -> Result<DecoderFit> {
    fit_decoder_lifted(&LiftedData::new(lift, samples, ExecMode::default())?, ridge)
}

pub fn fit_decoder_lifted(data: &LiftedData, ridge: f64) -> Result<DecoderFit> {
    let sol = least_squares(&data.gx, &data.x, ridge)?;
    Ok(DecoderFit {
        c: sol.w.transpose(),
        rank_deficient: sol.rank_deficient || data.len() < data.gx.ncols(),
    })
}

/// Diagonal maximum-likelihood variances of the state and latent one-step residuals.
pub fn fit_noise(model: &LinearEmbeddingModel, lift: &Lift, samples: &[Sample]) -> Result<GaussianNoiseModel> {
    if samples.len() < 2 {
        return Err(KmaError::InvalidArgument("noise fit needs at least two samples".into()));
    }
    fit_noise_lifted(model, &LiftedData::new(lift, samples, ExecMode::default())?)
}

pub fn fit_noise_lifted(model: &LinearEmbeddingModel, data: &LiftedData) -> Result<GaussianNoiseModel> {
    let m = data.len();
    if m < 2 {
        return Err(KmaError::InvalidArgument("noise fit needs at least two samples".into()));
    }
    // rows of predicted latents: (A g(x) + B u)^T
    let zp = &data.gx * model.a.transpose() + &data.u * model.b.transpose();
    let xp = &zp * model.c.transpose();
    let rz = &data.gy - &zp;
    let rx = &data.y - &xp;
    let mean_sq = |r: &DMatrix<f64>| {
        DVector::from_fn(r.ncols(), |c, _| {
            let v = r.column(c).iter().map(|e| e * e).sum::<f64>() / m as f64;
            v.max(VAR_FLOOR)
        })
    };
    Ok(GaussianNoiseModel { sigma_x: mean_sq(&rx), sigma_z: mean_sq(&rz) })
}

/// Fit `(A, B, C)` and the noise model on one partition.
pub fn fit_member(lift: &Lift, samples: &[Sample], ridge: f64, exec: ExecMode) -> Result<(LinearEmbeddingModel, bool)> {
    let data = LiftedData::new(lift, samples, exec)?;
    let dynamics = fit_dynamics_lifted(&data, ridge)?;
    let decoder = fit_decoder_lifted(&data, ridge)?;
    let mut model = LinearEmbeddingModel { a: dynamics.a, b: dynamics.b, c: decoder.c, noise: None };
    model.noise = Some(fit_noise_lifted(&model, &data)?);
    Ok((model, dynamics.rank_deficient || decoder.rank_deficient))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn sample(x: &[f64], u: &[f64], y: &[f64]) -> Sample {
        Sample { x: DVector::from_row_slice(x), u: DVector::from_row_slice(u), y: DVector::from_row_slice(y) }
    }

    #[test]
    fn least_squares_examples() {
        let sol = least_squares(&m(2, 1, &[1.0, 2.0]), &m(2, 1, &[2.0, 4.0]), 0.0).unwrap();
        assert!((sol.w[(0, 0)] - 2.0).abs() < 1e-14);
        let sol = least_squares(&m(2, 1, &[1.0, 1.0]), &m(2, 1, &[1.0, 3.0]), 0.0).unwrap();
        assert!((sol.w[(0, 0)] - 2.0).abs() < 1e-14);
        let y = m(3, 2, &[1.0, -2.0, 0.5, 3.0, 7.0, 0.25]);
        let sol = least_squares(&DMatrix::identity(3, 3), &y, 0.0).unwrap();
        assert!(max_abs(&(sol.w - &y)) < 1e-14);
        assert!(!sol.rank_deficient);
    }

    #[test]
    fn zero_design_gives_zero_solution() {
        let sol = least_squares(&DMatrix::zeros(4, 2), &m(4, 1, &[1.0, 2.0, 3.0, 4.0]), 0.0).unwrap();
        assert!(sol.rank_deficient);
        assert_eq!(sol.rank, 0);
        assert!(sol.w.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ridge_matches_normal_equations() {
        let phi = m(4, 2, &[1.0, 0.5, -1.0, 2.0, 0.3, 0.3, 2.0, -1.0]);
        let y = m(4, 1, &[1.0, 0.0, 2.0, -1.0]);
        let ridge = 0.7;
        let sol = least_squares(&phi, &y, ridge).unwrap();
        let normal = (phi.transpose() * &phi + DMatrix::identity(2, 2) * ridge).try_inverse().unwrap() * phi.transpose() * &y;
        assert!(max_abs(&(sol.w - normal)) < 1e-12);
    }

    #[test]
    fn scalar_linear_system_recovered() {
        let lift = Lift::MlpFeatures(FeatureMap::identity(1));
        let samples: Vec<Sample> = (0..20)
            .map(|i| {
                let x = (i as f64 * 0.37).sin() * 2.0;
                let u = (i as f64 * 1.3).cos();
                sample(&[x], &[u], &[0.5 * x + u])
            })
            .collect();
        let fit = fit_dynamics(&lift, &samples, 0.0).unwrap();
        assert!((fit.a[(0, 0)] - 0.5).abs() < 1e-10);
        assert!((fit.b[(0, 0)] - 1.0).abs() < 1e-10);
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn autonomous_data_recovers_matrix() {
        let mat = m(2, 2, &[0.9, 0.1, -0.2, 0.8]);
        let lift = Lift::MlpFeatures(FeatureMap::identity(2));
        let samples: Vec<Sample> = (0..30)
            .map(|i| {
                let x = DVector::from_row_slice(&[(i as f64).sin(), (i as f64 * 0.7).cos()]);
                let y = &mat * &x;
                Sample { x, u: DVector::zeros(1), y }
            })
            .collect();
        let fit = fit_dynamics(&lift, &samples, 0.0).unwrap();
        assert!(max_abs(&(fit.a - &mat)) < 1e-10);
        assert!(fit.b.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn repeated_sample_is_rank_deficient() {
        let lift = Lift::MlpFeatures(FeatureMap::identity(2));
        let samples = vec![sample(&[1.0, 2.0], &[0.5], &[0.0, 1.0]); 10];
        assert!(fit_dynamics(&lift, &samples, 0.0).unwrap().rank_deficient);
        assert!(fit_decoder(&lift, &samples, 0.0).unwrap().rank_deficient);
    }

    #[test]
    fn decoder_identity_cases() {
        let lift = Lift::MlpFeatures(FeatureMap::identity(2));
        let samples: Vec<Sample> = (0..10)
            .map(|i| sample(&[i as f64, (i as f64).sqrt()], &[0.0], &[0.0, 0.0]))
            .collect();
        let c = fit_decoder(&lift, &samples, 0.0).unwrap().c;
        assert!(max_abs(&(c - DMatrix::<f64>::identity(2, 2))) < 1e-12);
        let c = fit_decoder(&lift, &samples, 1e12).unwrap().c;
        assert!(max_abs(&c) < 1e-6);
    }

    #[test]
    fn noise_examples() {
        let lift = Lift::MlpFeatures(FeatureMap::identity(1));
        let model = LinearEmbeddingModel {
            a: m(1, 1, &[1.0]),
            b: m(1, 1, &[0.0]),
            c: m(1, 1, &[1.0]),
            noise: None,
        };
        let exact = vec![sample(&[1.0], &[0.0], &[1.0]), sample(&[2.0], &[0.0], &[2.0])];
        let noise = fit_noise(&model, &lift, &exact).unwrap();
        assert_eq!(noise.sigma_x[0], VAR_FLOOR);
        assert_eq!(noise.sigma_z[0], VAR_FLOOR);

        let pm = vec![sample(&[0.0], &[0.0], &[-1.0]), sample(&[0.0], &[0.0], &[1.0])];
        assert_eq!(fit_noise(&model, &lift, &pm).unwrap().sigma_x[0], 1.0);
        let three = vec![
            sample(&[0.0], &[0.0], &[0.0]),
            sample(&[0.0], &[0.0], &[0.0]),
            sample(&[0.0], &[0.0], &[3.0]),
        ];
        assert_eq!(fit_noise(&model, &lift, &three).unwrap().sigma_x[0], 3.0);
        assert!(fit_noise(&model, &lift, &three[..1]).is_err());
    }

    #[test]
    fn monomial_examples() {
        assert_eq!(monomial_features(&[2.0, 3.0], 2), vec![2.0, 3.0, 1.0, 4.0, 6.0, 9.0]);
        assert_eq!(monomial_features(&[0.0, 0.0], 2), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(monomial_features(&[2.0, 3.0], 1), vec![2.0, 3.0, 1.0]);
        assert_eq!(monomial_dim(2, 2), 6);
        for (n, d) in [(1, 4), (3, 3), (4, 2)] {
            assert_eq!(monomial_features(&vec![1.5; n], d).len(), monomial_dim(n, d));
        }
        assert_eq!(monomial_features(&[2.0, 3.0], 3)[6..], [8.0, 12.0, 18.0, 27.0]);
    }
}
