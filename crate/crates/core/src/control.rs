//! Controller synthesis on a (weighted) linear embedding model and
//! closed-loop evaluation against the true plant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::averaging::WeightedModel;
use crate::dynamics::{ControlInput, StateVector, SystemSpec, Trajectory};
use crate::edmd::Lift;
use crate::error::{KmaError, Result};
use crate::linalg::{max_abs, power_iteration_bound, spectral_radius};

/// `C^T Q_x C`, symmetrized.
pub fn lift_cost(q_x: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if q_x.nrows() != c.nrows() || !q_x.is_square() {
        return Err(KmaError::Dimension { context: "state weight", expected: c.nrows(), got: q_x.nrows() });
    }
    let q = c.transpose() * q_x * c;
    Ok((&q + q.transpose()) * 0.5)
}

fn riccati_map(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let at_p = a.transpose() * p;
    let s = r + b.transpose() * p * b;
    let bt_p_a = b.transpose() * p * a;
    let gain = s.lu().solve(&bt_p_a)?;
    let next = q + &at_p * a - at_p * b * gain;
    Some((&next + next.transpose()) * 0.5)
}

/// `|P - (Q + A'PA - A'PB (R + B'PB)^-1 B'PA)|_inf`.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    riccati_map(a, b, q, r, p).map_or(f64::INFINITY, |next| max_abs(&(p - next)))
}

pub const DARE_TOL: f64 = 1e-10;
pub const DARE_MAX_ITER: usize = 10_000;
pub const DARE_RESIDUAL_BOUND: f64 = 1e-8;

/// Value iteration on the Riccati map starting from `P = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let nx = a.nrows();
    if !a.is_square() || b.nrows() != nx || q.shape() != (nx, nx) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(KmaError::Dimension { context: "riccati data", expected: nx, got: b.nrows() });
    }
    let mut p = q.clone();
    for _ in 0..max_iter {
        let next = riccati_map(a, b, q, r, &p)
            .ok_or_else(|| KmaError::NotStabilizable("singular R + B'PB".into()))?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(KmaError::NotStabilizable("riccati iterate diverged".into()));
        }
        let delta = max_abs(&(&next - &p));
        p = next;
        if delta < tol {
            let residual = dare_residual(a, b, q, r, &p);
            if residual >= DARE_RESIDUAL_BOUND {
                return Err(KmaError::NotStabilizable(format!("riccati residual {residual:e} too large")));
            }
            return Ok(p);
        }
    }
    Err(KmaError::NotStabilizable(format!("no convergence in {max_iter} iterations")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrSpec {
    /// Diagonal of the state weight.
    pub q_diag: Vec<f64>,
    /// Diagonal of the input weight.
    pub r_diag: Vec<f64>,
    #[serde(default = "default_dare_tol")]
    pub tol: f64,
    #[serde(default = "default_dare_max_iter")]
    pub max_iter: usize,
}

fn default_dare_tol() -> f64 {
    DARE_TOL
}

fn default_dare_max_iter() -> usize {
    DARE_MAX_ITER
}

impl LqrSpec {
    pub fn new(q_diag: Vec<f64>, r_diag: Vec<f64>) -> Self {
        LqrSpec { q_diag, r_diag, tol: DARE_TOL, max_iter: DARE_MAX_ITER }
    }

    pub fn validate(&self, n: usize, p: usize) -> Result<()> {
        if self.q_diag.len() != n || self.q_diag.iter().any(|q| !(*q >= 0.0)) {
            return Err(KmaError::config("lqr.q_diag", format!("needs {n} non-negative entries")));
        }
        if self.r_diag.len() != p || self.r_diag.iter().any(|r| !(*r > 0.0)) {
            return Err(KmaError::config("lqr.r_diag", format!("needs {p} positive entries")));
        }
        Ok(())
    }
}

/// `u = -K g(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrController {
    #[serde(with = "crate::linalg::matrix_serde")]
    pub k: DMatrix<f64>,
    #[serde(with = "crate::linalg::matrix_serde")]
    pub p: DMatrix<f64>,
    pub closed_loop_spectral_radius: f64,
}

/// `K = (R + B'PB)^-1 B'PA`; fails unless `A - BK` is Schur stable.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q_z: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<LqrController> {
    let p = solve_dare(a, b, q_z, r, tol, max_iter)?;
    let s = r + b.transpose() * &p * b;
    let k = s
        .lu()
        .solve(&(b.transpose() * &p * a))
        .ok_or_else(|| KmaError::NotStabilizable("singular R + B'PB".into()))?;
    let rho = spectral_radius(&(a - b * &k));
    if !(rho < 1.0) {
        return Err(KmaError::NotStabilizable(format!("closed-loop spectral radius {rho}")));
    }
    Ok(LqrController { k, p, closed_loop_spectral_radius: rho })
}

/// LQR on the weighted model with the state cost pulled through `C_bar`.
pub fn lqr_for_model(wm: &WeightedModel, spec: &LqrSpec) -> Result<LqrController> {
    spec.validate(wm.state_dim(), wm.input_dim())?;
    let q_z = lift_cost(&DMatrix::from_diagonal(&DVector::from_vec(spec.q_diag.clone())), &wm.c_bar)?;
    let r = DMatrix::from_diagonal(&DVector::from_vec(spec.r_diag.clone()));
    lqr_gain(&wm.a_bar, &wm.b_bar, &q_z, &r, spec.tol, spec.max_iter)
}

/// Reference signal on the decoded state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    Constant { value: Vec<f64> },
    /// `before` for `t <= switch_time`, `after` afterwards.
    Step { switch_time: f64, before: Vec<f64>, after: Vec<f64> },
}

impl Reference {
    /// `r(t) = -1` up to `t = 10`, then `+1`, on the first of `n` components.
    pub fn square_step(n: usize) -> Self {
        let mut before = vec![0.0; n];
        let mut after = vec![0.0; n];
        before[0] = -1.0;
        after[0] = 1.0;
        Reference::Step { switch_time: 10.0, before, after }
    }

    pub fn eval(&self, t: f64) -> &[f64] {
        match self {
            Reference::Constant { value } => value,
            Reference::Step { switch_time, before, after } => {
                if t <= *switch_time {
                    before
                } else {
                    after
                }
            }
        }
    }

    fn dim(&self) -> usize {
        self.eval(0.0).len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSpec {
    pub horizon: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub reference: Reference,
    /// Sampling period used to time-stamp the prediction horizon.
    pub dt: f64,
    /// Use `r(t + k dt)` along the horizon instead of holding `r(t)`.
    #[serde(default)]
    pub preview: bool,
    #[serde(default = "default_qp_tol")]
    pub qp_tol: f64,
    #[serde(default = "default_qp_max_iter")]
    pub qp_max_iter: usize,
}

pub const QP_TOL: f64 = 1e-8;
pub const QP_MAX_ITER: usize = 20_000;

fn default_qp_tol() -> f64 {
    QP_TOL
}

fn default_qp_max_iter() -> usize {
    QP_MAX_ITER
}

impl MpcSpec {
    pub fn validate(&self, n: usize, p: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(KmaError::config("mpc.horizon", "must be at least 1"));
        }
        if self.q_diag.len() != n || self.q_diag.iter().any(|q| !(*q >= 0.0)) {
            return Err(KmaError::config("mpc.q_diag", format!("needs {n} non-negative entries")));
        }
        if self.r_diag.len() != p || self.r_diag.iter().any(|r| !(*r >= 0.0)) {
            return Err(KmaError::config("mpc.r_diag", format!("needs {p} non-negative entries")));
        }
        if self.u_min.len() != p || self.u_max.len() != p || self.u_min.iter().zip(&self.u_max).any(|(lo, hi)| !(lo < hi)) {
            return Err(KmaError::config("mpc.u_min", "bounds need u_min < u_max for every input"));
        }
        if self.reference.dim() != n {
            return Err(KmaError::config("mpc.reference", format!("needs {n} components")));
        }
        if !(self.dt > 0.0) {
            return Err(KmaError::config("mpc.dt", "must be positive"));
        }
        Ok(())
    }
}

/// `min 0.5 U'HU + f'U` subject to `lower <= U <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxQp {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxQp {
    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.f.dot(u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub iterations: usize,
    /// `|U - clip(U - grad)|_inf` at the returned point.
    pub residual: f64,
    /// False when `max_iter` ran out; `u` is then the best iterate seen.
    pub converged: bool,
}

fn clip(u: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..u.len() {
        u[i] = u[i].clamp(lower[i], upper[i]);
    }
}

fn projected_residual(u: &DVector<f64>, grad: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> f64 {
    (0..u.len())
        .map(|i| (u[i] - (u[i] - grad[i]).clamp(lower[i], upper[i])).abs())
        .fold(0.0, f64::max)
}

/// Projected gradient with step `1/L`, `L` from power iteration.
pub fn solve_box_qp(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution> {
    solve_box_qp_from(h, f, lower, upper, tol, max_iter, None)
}

pub fn solve_box_qp_from(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    warm_start: Option<&DVector<f64>>,
) -> Result<QpSolution> {
    let m = f.len();
    if h.shape() != (m, m) || lower.len() != m || upper.len() != m {
        return Err(KmaError::Dimension { context: "box QP", expected: m, got: h.nrows() });
    }
    if (0..m).any(|i| !(lower[i] <= upper[i])) {
        return Err(KmaError::InvalidArgument("box QP bounds are inverted".into()));
    }
    let lipschitz = power_iteration_bound(h, 200);
    let mut u = warm_start.cloned().unwrap_or_else(|| DVector::zeros(m));
    clip(&mut u, lower, upper);
    if lipschitz <= 0.0 {
        // H = 0: the minimizer sits on the bounds picked by the sign of f.
        for i in 0..m {
            if f[i] > 0.0 {
                u[i] = lower[i];
            } else if f[i] < 0.0 {
                u[i] = upper[i];
            }
        }
        let grad = h * &u + f;
        let residual = projected_residual(&u, &grad, lower, upper);
        return Ok(QpSolution { u, iterations: 0, residual, converged: residual < tol });
    }
    let step = 1.0 / lipschitz;
    let mut best = (f64::INFINITY, u.clone(), f64::INFINITY);
    for it in 0..=max_iter {
        let grad = h * &u + f;
        let residual = projected_residual(&u, &grad, lower, upper);
        if residual < tol {
            return Ok(QpSolution { u, iterations: it, residual, converged: true });
        }
        if residual < best.0 {
            best = (residual, u.clone(), it as f64);
        }
        if it == max_iter {
            break;
        }
        u.axpy(-step, &grad, 1.0);
        clip(&mut u, lower, upper);
    }
    log::warn!("box QP stopped after {max_iter} iterations (residual {:.3e})", best.0);
    Ok(QpSolution { u: best.1, iterations: max_iter, residual: best.0, converged: false })
}

/// Condensed prediction matrices: stacked decoded outputs `Y = Phi z0 + Gamma U`.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub spec: MpcSpec,
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    q_stack: DVector<f64>,
    h: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    n: usize,
    p: usize,
}

impl MpcProblem {
    pub fn new(wm: &WeightedModel, spec: &MpcSpec) -> Result<Self> {
        let (n, p, nx, hor) = (wm.state_dim(), wm.input_dim(), wm.lift_dim(), spec.horizon);
        spec.validate(n, p)?;
        // y_{k+1} = CA z_k + CB u_k, z_k = A^k z0 + sum_{j<k} A^{k-1-j} B u_j
        let mut phi = DMatrix::zeros(n * hor, nx);
        let mut gamma = DMatrix::zeros(n * hor, p * hor);
        let mut a_pow = DMatrix::identity(nx, nx);
        // ca_a_pow_b[d] = CA A^d B
        let mut ca_a_pow_b = Vec::with_capacity(hor);
        for k in 0..hor {
            let ca_ak = &wm.ca_bar * &a_pow;
            phi.view_mut((k * n, 0), (n, nx)).copy_from(&ca_ak);
            ca_a_pow_b.push(&ca_ak * &wm.b_bar);
            a_pow = &wm.a_bar * a_pow;
        }
        for k in 0..hor {
            gamma.view_mut((k * n, k * p), (n, p)).copy_from(&wm.cb_bar);
            for j in 0..k {
                gamma.view_mut((k * n, j * p), (n, p)).copy_from(&ca_a_pow_b[k - 1 - j]);
            }
        }
        let q_stack = DVector::from_fn(n * hor, |i, _| spec.q_diag[i % n]);
        let r_stack = DVector::from_fn(p * hor, |i, _| spec.r_diag[i % p]);
        let qg = DMatrix::from_fn(n * hor, p * hor, |r, c| q_stack[r] * gamma[(r, c)]);
        let mut h = (gamma.transpose() * qg) * 2.0;
        for i in 0..p * hor {
            h[(i, i)] += 2.0 * r_stack[i];
        }
        let h = (&h + h.transpose()) * 0.5;
        let lower = DVector::from_fn(p * hor, |i, _| spec.u_min[i % p]);
        let upper = DVector::from_fn(p * hor, |i, _| spec.u_max[i % p]);
        Ok(MpcProblem { spec: spec.clone(), phi, gamma, q_stack, h, lower, upper, n, p })
    }

    /// The QP for latent state `z0` at time `t`.
    pub fn qp(&self, z0: &DVector<f64>, t: f64) -> BoxQp {
        let hor = self.spec.horizon;
        let reference = DVector::from_fn(self.n * hor, |i, _| {
            let tk = if self.spec.preview { t + (i / self.n + 1) as f64 * self.spec.dt } else { t };
            self.spec.reference.eval(tk)[i % self.n]
        });
        let mut err = &self.phi * z0 - reference;
        err.component_mul_assign(&self.q_stack);
        let f = self.gamma.transpose() * err * 2.0;
        BoxQp { h: self.h.clone(), f, lower: self.lower.clone(), upper: self.upper.clone() }
    }

    pub fn solve(&self, z0: &DVector<f64>, t: f64, warm_start: Option<&DVector<f64>>) -> Result<QpSolution> {
        let qp = self.qp(z0, t);
        solve_box_qp_from(&qp.h, &qp.f, &qp.lower, &qp.upper, self.spec.qp_tol, self.spec.qp_max_iter, warm_start)
    }

    pub fn input_dim(&self) -> usize {
        self.p
    }
}

/// Condensed QP for the weighted model from latent state `z0` at time `t`.
pub fn build_mpc_qp(wm: &WeightedModel, lift: &Lift, spec: &MpcSpec, z0: &DVector<f64>, t: f64) -> Result<BoxQp> {
    wm.check_dims(lift)?;
    if z0.len() != wm.lift_dim() {
        return Err(KmaError::Dimension { context: "latent state", expected: wm.lift_dim(), got: z0.len() });
    }
    Ok(MpcProblem::new(wm, spec)?.qp(z0, t))
}

/// First input of the receding-horizon solution from state `x` at time `t`.
pub fn mpc_step(wm: &WeightedModel, lift: &Lift, spec: &MpcSpec, x: &StateVector, t: f64) -> Result<ControlInput> {
    wm.check_dims(lift)?;
    let problem = MpcProblem::new(wm, spec)?;
    let sol = problem.solve(&lift.eval_vec(x), t, None)?;
    Ok(sol.u.rows(0, problem.p).into_owned())
}

/// State feedback evaluated on the true plant.
pub trait Policy {
    fn control(&mut self, x: &StateVector, t: f64) -> Result<ControlInput>;

    /// Reference the policy tracks, if any.
    fn reference(&self, _t: f64) -> Option<Vec<f64>> {
        None
    }

    /// State components whose tracking error is reported.
    fn tracked(&self) -> Vec<usize> {
        Vec::new()
    }
}

/// `u = -K (g(x) - g(0))`: regulates the lifted deviation from the origin, so
/// the origin stays an equilibrium even when the learned features have a bias.
/// Identical to `u = -K g(x)` for lifts with `g(0) = 0`.
pub struct LqrPolicy<'a> {
    lift: &'a Lift,
    controller: &'a LqrController,
    z_origin: DVector<f64>,
}

impl<'a> LqrPolicy<'a> {
    pub fn new(lift: &'a Lift, controller: &'a LqrController) -> Result<Self> {
        if controller.k.ncols() != lift.dim() {
            return Err(KmaError::Dimension { context: "LQR gain vs lift", expected: lift.dim(), got: controller.k.ncols() });
        }
        let z_origin = lift.eval_vec(&DVector::zeros(lift.state_dim()));
        Ok(LqrPolicy { lift, controller, z_origin })
    }
}

impl Policy for LqrPolicy<'_> {
    fn control(&mut self, x: &StateVector, _t: f64) -> Result<ControlInput> {
        Ok(-(&self.controller.k * (self.lift.eval_vec(x) - &self.z_origin)))
    }
}

/// Receding-horizon MPC; the previous solution, shifted one step, warm-starts the next QP.
pub struct MpcPolicy<'a> {
    lift: &'a Lift,
    problem: MpcProblem,
    warm: Option<DVector<f64>>,
    pub unconverged_steps: usize,
}

impl<'a> MpcPolicy<'a> {
    pub fn new(wm: &WeightedModel, lift: &'a Lift, spec: &MpcSpec) -> Result<Self> {
        wm.check_dims(lift)?;
        Ok(MpcPolicy { lift, problem: MpcProblem::new(wm, spec)?, warm: None, unconverged_steps: 0 })
    }
}

impl Policy for MpcPolicy<'_> {
    fn control(&mut self, x: &StateVector, t: f64) -> Result<ControlInput> {
        let sol = self.problem.solve(&self.lift.eval_vec(x), t, self.warm.as_ref())?;
        if !sol.converged {
            self.unconverged_steps += 1;
        }
        let p = self.problem.p;
        let len = sol.u.len();
        let mut shifted = DVector::zeros(len);
        shifted.rows_mut(0, len - p).copy_from(&sol.u.rows(p, len - p));
        shifted.rows_mut(len - p, p).copy_from(&sol.u.rows(len - p, p));
        self.warm = Some(shifted);
        Ok(sol.u.rows(0, p).into_owned())
    }

    fn reference(&self, t: f64) -> Option<Vec<f64>> {
        Some(self.problem.spec.reference.eval(t).to_vec())
    }

    fn tracked(&self) -> Vec<usize> {
        (0..self.problem.n).filter(|&i| self.problem.spec.q_diag[i] > 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopMetrics {
    pub final_state_norm: f64,
    /// `max_i |x_i - r_i|` over tracked components at every sample time.
    pub tracking_error: Vec<f64>,
    /// `sum_k |u_k|^2 dt`
    pub input_energy: f64,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    pub trajectory: Trajectory,
    pub times: Vec<f64>,
    /// Reference at every sample time when tracking.
    pub references: Option<Vec<Vec<f64>>>,
    pub metrics: ClosedLoopMetrics,
}

/// Apply `policy` to the true plant for `steps` sampling periods.
pub fn closed_loop(system: &SystemSpec, policy: &mut dyn Policy, x0: &StateVector, steps: usize) -> Result<ClosedLoopResult> {
    if x0.len() != system.n {
        return Err(KmaError::Dimension { context: "initial state", expected: system.n, got: x0.len() });
    }
    let mut states = vec![x0.clone()];
    let mut inputs = Vec::with_capacity(steps);
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * system.dt).collect();
    for k in 0..steps {
        let u = policy.control(&states[k], times[k])?;
        if u.len() != system.p {
            return Err(KmaError::Dimension { context: "controller output", expected: system.p, got: u.len() });
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(KmaError::Diverged { step: k });
        }
        let next = system.step(states[k].as_slice(), u.as_slice())?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(KmaError::Diverged { step: k + 1 });
        }
        states.push(DVector::from_vec(next));
        inputs.push(u);
    }
    let references: Option<Vec<Vec<f64>>> = times.iter().map(|&t| policy.reference(t)).collect();
    let tracked = policy.tracked();
    let tracking_error = match &references {
        Some(refs) => states
            .iter()
            .zip(refs)
            .map(|(x, r)| tracked.iter().map(|&i| (x[i] - r[i]).abs()).fold(0.0, f64::max))
            .collect(),
        None => Vec::new(),
    };
    let input_energy = inputs.iter().map(|u| u.norm_squared()).sum::<f64>() * system.dt;
    let metrics = ClosedLoopMetrics {
        final_state_norm: states.last().map_or(0.0, |x| x.norm()),
        tracking_error,
        input_energy,
    };
    Ok(ClosedLoopResult { trajectory: Trajectory { states, inputs }, times, references, metrics })
}
