//! Benchmark plants, time discretization, trajectory simulation and
//! randomized dataset generation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KmaError, Result};
use crate::exec::ExecMode;

pub type StateVector = DVector<f64>;
pub type ControlInput = DVector<f64>;

/// Right-hand side `dx/dt = f(x, u)` supplied by the user.
#[derive(Clone)]
pub struct CustomRhs(pub Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>);

impl fmt::Debug for CustomRhs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomRhs(..)")
    }
}

/// Two custom right-hand sides are equal only if they are the same closure.
impl PartialEq for CustomRhs {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemName {
    Duffing,
    Cartpole,
    Custom,
}

impl FromStr for SystemName {
    type Err = KmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "duffing" => Ok(SystemName::Duffing),
            "cartpole" => Ok(SystemName::Cartpole),
            "custom" => Ok(SystemName::Custom),
            other => Err(KmaError::config(
                "system.name",
                format!("unknown system `{other}` (expected duffing, cartpole or custom)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: SystemName,
    pub n: usize,
    pub p: usize,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub dt: f64,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(skip)]
    pub custom: Option<CustomRhs>,
}

pub const DEFAULT_DT: f64 = 0.01;

impl SystemSpec {
    pub fn duffing(dt: f64) -> Self {
        SystemSpec {
            name: SystemName::Duffing,
            n: 2,
            p: 1,
            params: BTreeMap::new(),
            dt,
            integrator: Integrator::Euler,
            custom: None,
        }
    }

    /// Cartpole with m=1, M=5, L=2, g=-10, delta=1.
    pub fn cartpole(dt: f64) -> Self {
        let params = [("m", 1.0), ("M", 5.0), ("L", 2.0), ("g", -10.0), ("delta", 1.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        SystemSpec {
            name: SystemName::Cartpole,
            n: 4,
            p: 1,
            params,
            dt,
            integrator: Integrator::Euler,
            custom: None,
        }
    }

    pub fn custom(n: usize, p: usize, dt: f64, rhs: CustomRhs) -> Self {
        SystemSpec {
            name: SystemName::Custom,
            n,
            p,
            params: BTreeMap::new(),
            dt,
            integrator: Integrator::Euler,
            custom: Some(rhs),
        }
    }

    pub fn by_name(name: SystemName, dt: f64) -> Result<Self> {
        match name {
            SystemName::Duffing => Ok(Self::duffing(dt)),
            SystemName::Cartpole => Ok(Self::cartpole(dt)),
            SystemName::Custom => Err(KmaError::config(
                "system.name",
                "custom systems need a right-hand side supplied through the library API",
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(KmaError::config("system.dt", "sampling period must be positive"));
        }
        let fixed = match self.name {
            SystemName::Duffing => Some((2, 1)),
            SystemName::Cartpole => Some((4, 1)),
            SystemName::Custom => None,
        };
        if let Some((n, p)) = fixed {
            if (self.n, self.p) != (n, p) {
                return Err(KmaError::config(
                    "system",
                    format!("{:?} has n={n}, p={p}", self.name),
                ));
            }
        }
        if self.name == SystemName::Custom && self.custom.is_none() {
            return Err(KmaError::config("system.name", "custom system without a right-hand side"));
        }
        Ok(())
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    /// Continuous-time vector field.
    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(KmaError::Dimension { context: "state", expected: self.n, got: x.len() });
        }
        if u.len() != self.p {
            return Err(KmaError::Dimension { context: "input", expected: self.p, got: u.len() });
        }
        match self.name {
            SystemName::Duffing => Ok(duffing_rhs(x, u).to_vec()),
            SystemName::Cartpole => {
                let params = CartpoleParams {
                    m: self.param("m", 1.0),
                    big_m: self.param("M", 5.0),
                    l: self.param("L", 2.0),
                    g: self.param("g", -10.0),
                    delta: self.param("delta", 1.0),
                };
                cartpole_rhs_with(&params, x, u).map(|v| v.to_vec())
            }
            SystemName::Custom => {
                let rhs = self
                    .custom
                    .as_ref()
                    .ok_or_else(|| KmaError::config("system.name", "custom system without a right-hand side"))?;
                let out = (rhs.0)(x, u);
                if out.len() != self.n {
                    return Err(KmaError::Dimension { context: "custom rhs", expected: self.n, got: out.len() });
                }
                Ok(out)
            }
        }
    }

    /// One sampling period of the discretized plant.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        match self.integrator {
            Integrator::Euler => euler_step(|x, u| self.rhs(x, u), x, u, self.dt),
            Integrator::Rk4 => rk4_step(|x, u| self.rhs(x, u), x, u, self.dt),
        }
    }
}

/// Duffing oscillator with a control input.
pub fn duffing_rhs(x: &[f64], u: &[f64]) -> [f64; 2] {
    let (x1, x2) = (x[0], x[1]);
    [x2, -0.5 * x2 + x1 - 4.0 * x1 * x1 * x1 + u[0]]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartpoleParams {
    pub m: f64,
    pub big_m: f64,
    pub l: f64,
    pub g: f64,
    pub delta: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        CartpoleParams { m: 1.0, big_m: 5.0, l: 2.0, g: -10.0, delta: 1.0 }
    }
}

pub fn cartpole_rhs(x: &[f64], u: &[f64]) -> [f64; 4] {
    cartpole_rhs_with(&CartpoleParams::default(), x, u).expect("default cartpole parameters are regular")
}

pub fn cartpole_rhs_with(p: &CartpoleParams, x: &[f64], u: &[f64]) -> Result<[f64; 4]> {
    let (x2, x3, x4) = (x[1], x[2], x[3]);
    let (s, c) = x3.sin_cos();
    let (m, big_m, l, g) = (p.m, p.big_m, p.l, p.g);
    let den = m * l * l * (big_m + m * (1.0 - c * c));
    if den == 0.0 || !den.is_finite() {
        return Err(KmaError::DegenerateDenominator("cartpole"));
    }
    let a = m * l * x4 * x4 * s - p.delta * x2;
    let dx2 = (-m * m * l * l * g * c * s + m * l * l * a + m * l * l * u[0]) / den;
    let dx4 = ((m + big_m) * m * g * l * s - m * l * c * a + m * l * c * u[0]) / den;
    Ok([x2, dx2, x4, dx4])
}

/// `x + dt * rhs(x, u)`.
pub fn euler_step<F>(rhs: F, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    let dx = rhs(x, u)?;
    Ok(x.iter().zip(&dx).map(|(xi, di)| xi + dt * di).collect())
}

/// Classical fourth-order Runge-Kutta with the input held over the step.
pub fn rk4_step<F>(rhs: F, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
    let k1 = rhs(x, u)?;
    let k2 = rhs(&axpy(0.5 * dt, &k1), u)?;
    let k3 = rhs(&axpy(0.5 * dt, &k2), u)?;
    let k4 = rhs(&axpy(dt, &k3), u)?;
    Ok((0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateVector>,
    pub inputs: Vec<ControlInput>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        self.inputs.iter().enumerate().map(move |(k, u)| Sample {
            x: self.states[k].clone(),
            u: u.clone(),
            y: self.states[k + 1].clone(),
        })
    }
}

/// Roll the plant forward under the given input sequence.
pub fn simulate(system: &SystemSpec, x0: &StateVector, inputs: &[ControlInput]) -> Result<Trajectory> {
    if inputs.is_empty() {
        return Err(KmaError::Empty("input sequence"));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for (k, u) in inputs.iter().enumerate() {
        let next = system.step(states[k].as_slice(), u.as_slice())?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(KmaError::Diverged { step: k + 1 });
        }
        states.push(DVector::from_vec(next));
    }
    Ok(Trajectory { states, inputs: inputs.to_vec() })
}

/// One transition `(x_k, u_k, x_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: StateVector,
    pub u: ControlInput,
    pub y: StateVector,
}

/// Dataset partition label: `D1`..`DN` for model fitting, `Da` held out for weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Fit(u32),
    HeldOut,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::Fit(i) => write!(f, "D{i}"),
            Partition::HeldOut => f.write_str("Da"),
        }
    }
}

impl FromStr for Partition {
    type Err = KmaError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "Da" {
            return Ok(Partition::HeldOut);
        }
        s.strip_prefix('D')
            .and_then(|rest| rest.parse::<u32>().ok())
            .filter(|i| *i >= 1)
            .map(Partition::Fit)
            .ok_or_else(|| KmaError::InvalidArgument(format!("bad partition label `{s}`")))
    }
}

impl Serialize for Partition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Partition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Partition {
    /// Fixed offset added to the root seed for this partition's stream.
    fn seed_offset(self) -> u64 {
        match self {
            Partition::Fit(i) => u64::from(i) * 1_000_003,
            Partition::HeldOut => 1_000_003 * 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub label: Partition,
    pub n_traj: usize,
    pub traj_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPlan {
    /// Initial conditions are drawn from `Uniform[-ic_range, ic_range]^n`.
    pub ic_range: f64,
    /// Inputs are drawn from `Uniform[-input_range, input_range]^p` per step.
    pub input_range: f64,
    pub partitions: Vec<PartitionPlan>,
}

impl Default for DataPlan {
    fn default() -> Self {
        let mut partitions = vec![PartitionPlan { label: Partition::Fit(1), n_traj: 300, traj_len: 50 }];
        for i in 2..=5 {
            partitions.push(PartitionPlan { label: Partition::Fit(i), n_traj: 100, traj_len: 50 });
        }
        partitions.push(PartitionPlan { label: Partition::HeldOut, n_traj: 50, traj_len: 20 });
        DataPlan { ic_range: 3.0, input_range: 2.5, partitions }
    }
}

impl DataPlan {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.partitions {
            if !seen.insert(p.label) {
                return Err(KmaError::config("data.partitions", format!("duplicate partition {}", p.label)));
            }
            if p.n_traj == 0 || p.traj_len == 0 {
                return Err(KmaError::config("data.partitions", format!("partition {} is empty", p.label)));
            }
        }
        if !(self.ic_range >= 0.0 && self.input_range >= 0.0) {
            return Err(KmaError::config("data", "sampling ranges must be non-negative"));
        }
        Ok(())
    }
}

/// Uniform on `[lo, hi)` by inversion of the top 53 bits.
pub fn uniform(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    let unit = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    lo + (hi - lo) * unit
}

/// Generator for trajectory `index` of a partition; independent of scheduling.
pub fn trajectory_rng(root_seed: u64, partition: Partition, index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(root_seed.wrapping_add(partition.seed_offset()));
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrajectory {
    pub traj_id: usize,
    pub partition: Partition,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: SystemSpec,
    pub seed: u64,
    pub plan: DataPlan,
    pub trajectories: Vec<LabeledTrajectory>,
}

impl Dataset {
    pub fn partitions(&self) -> Vec<Partition> {
        let mut out: Vec<Partition> = self.trajectories.iter().map(|t| t.partition).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn fit_partitions(&self) -> Vec<Partition> {
        self.partitions().into_iter().filter(|p| *p != Partition::HeldOut).collect()
    }

    pub fn trajectories_in(&self, label: Partition) -> Vec<&LabeledTrajectory> {
        self.trajectories.iter().filter(|t| t.partition == label).collect()
    }

    pub fn samples_in(&self, label: Partition) -> Vec<Sample> {
        self.trajectories_in(label).into_iter().flat_map(|t| t.trajectory.samples()).collect()
    }

    pub fn all_samples(&self) -> Vec<Sample> {
        self.trajectories.iter().flat_map(|t| t.trajectory.samples()).collect()
    }

    pub fn sample_count(&self, label: Partition) -> usize {
        self.trajectories_in(label).iter().map(|t| t.trajectory.len()).sum()
    }
}

/// One trajectory from a uniform initial condition under i.i.d. uniform inputs.
pub fn random_trajectory(
    system: &SystemSpec,
    ic_range: f64,
    input_range: f64,
    len: usize,
    rng: &mut impl RngCore,
) -> Result<Trajectory> {
    let x0 = DVector::from_fn(system.n, |_, _| uniform(rng, -ic_range, ic_range));
    let inputs: Vec<ControlInput> =
        (0..len).map(|_| DVector::from_fn(system.p, |_, _| uniform(rng, -input_range, input_range))).collect();
    simulate(system, &x0, &inputs)
}

/// Random trajectories for every partition of `plan`, deterministic in `seed`.
pub fn generate_dataset(system: &SystemSpec, plan: &DataPlan, seed: u64, exec: ExecMode) -> Result<Dataset> {
    system.validate()?;
    plan.validate()?;
    let mut trajectories = Vec::new();
    let mut next_id = 0;
    for part in &plan.partitions {
        let generated = exec.map_indexed(part.n_traj, |i| {
            let mut rng = trajectory_rng(seed, part.label, i);
            random_trajectory(system, plan.ic_range, plan.input_range, part.traj_len, &mut rng)
        });
        for traj in generated {
            trajectories.push(LabeledTrajectory { traj_id: next_id, partition: part.label, trajectory: traj? });
            next_id += 1;
        }
    }
    Ok(Dataset { system: system.clone(), seed, plan: plan.clone(), trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn duffing_examples() {
        assert_eq!(duffing_rhs(&[0.0, 0.0], &[0.0]), [0.0, 0.0]);
        assert_eq!(duffing_rhs(&[1.0, 0.0], &[0.0]), [0.0, -3.0]);
        assert_eq!(duffing_rhs(&[1.0, 2.0], &[0.5]), [2.0, -3.5]);
    }

    #[test]
    fn cartpole_examples() {
        assert_eq!(cartpole_rhs(&[0.0; 4], &[0.0]), [0.0; 4]);
        let r = cartpole_rhs(&[0.0; 4], &[1.0]);
        assert!((r[1] - 0.2).abs() < 1e-15 && (r[3] - 0.1).abs() < 1e-15);
        // A = -delta * x2 = -1 enters exactly like u = -1.
        let r = cartpole_rhs(&[0.0, 1.0, 0.0, 0.0], &[0.0]);
        assert_eq!(r[0], 1.0);
        assert!((r[1] + 0.2).abs() < 1e-15);
        assert_eq!(r[2], 0.0);
        assert!((r[3] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn cartpole_degenerate_denominator() {
        let p = CartpoleParams { big_m: 0.0, ..Default::default() };
        assert!(matches!(
            cartpole_rhs_with(&p, &[0.0; 4], &[0.0]),
            Err(KmaError::DegenerateDenominator(_))
        ));
    }

    #[test]
    fn euler_examples() {
        let rhs = |x: &[f64], u: &[f64]| Ok(duffing_rhs(x, u).to_vec());
        let x = euler_step(rhs, &[1.0, 0.0], &[0.0], 0.01).unwrap();
        assert_eq!(x[0], 1.0);
        assert!((x[1] + 0.03).abs() < 1e-15);
        assert_eq!(euler_step(rhs, &[0.3, -0.7], &[1.0], 0.0).unwrap(), vec![0.3, -0.7]);
        let zero = |x: &[f64], _: &[f64]| Ok(vec![0.0; x.len()]);
        assert_eq!(euler_step(zero, &[2.0, 5.0], &[1.0], 0.1).unwrap(), vec![2.0, 5.0]);
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        let rhs = |x: &[f64], _: &[f64]| Ok(vec![-x[0]]);
        let x = rk4_step(rhs, &[1.0], &[0.0], 0.1).unwrap();
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn simulate_examples() {
        let sys = SystemSpec::duffing(0.01);
        let traj = simulate(&sys, &v(&[0.0, 0.0]), &vec![v(&[0.0]); 50]).unwrap();
        assert_eq!(traj.states.len(), 51);
        assert!(traj.states.iter().all(|s| s.iter().all(|x| *x == 0.0)));

        let traj = simulate(&sys, &v(&[1.0, 0.0]), &[v(&[0.0])]).unwrap();
        assert_eq!(traj.states[1][0], 1.0);
        assert!((traj.states[1][1] + 0.03).abs() < 1e-15);

        let cp = SystemSpec::cartpole(0.01);
        let traj = simulate(&cp, &DVector::zeros(4), &[v(&[1.0])]).unwrap();
        let expected = [0.0, 0.002, 0.0, 0.001];
        for (a, b) in traj.states[1].iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn simulate_rejects_empty_and_reports_divergence() {
        let sys = SystemSpec::duffing(0.01);
        assert!(simulate(&sys, &v(&[0.0, 0.0]), &[]).is_err());
        let sys = SystemSpec::duffing(10.0);
        let err = simulate(&sys, &v(&[3.0, 3.0]), &vec![v(&[0.0]); 50]).unwrap_err();
        assert!(matches!(err, KmaError::Diverged { .. }));
    }

    #[test]
    fn default_plan_sizes() {
        let ds = generate_dataset(&SystemSpec::duffing(0.01), &DataPlan::default(), 7, ExecMode::Parallel).unwrap();
        assert_eq!(ds.sample_count(Partition::Fit(1)), 15_000);
        assert_eq!(ds.sample_count(Partition::Fit(3)), 5_000);
        assert_eq!(ds.sample_count(Partition::HeldOut), 1_000);
        assert_eq!(ds.fit_partitions().len(), 5);
    }

    #[test]
    fn samples_are_exact_euler_steps() {
        let plan = DataPlan {
            partitions: vec![PartitionPlan { label: Partition::Fit(1), n_traj: 5, traj_len: 10 }],
            ..DataPlan::default()
        };
        let sys = SystemSpec::duffing(0.01);
        let ds = generate_dataset(&sys, &plan, 1, ExecMode::Sequential).unwrap();
        for s in ds.all_samples() {
            let y = sys.step(s.x.as_slice(), s.u.as_slice()).unwrap();
            assert_eq!(y.as_slice(), s.y.as_slice());
            assert!(s.x.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn generation_is_deterministic_and_schedule_independent() {
        let sys = SystemSpec::cartpole(0.01);
        let plan = DataPlan::default();
        let a = generate_dataset(&sys, &plan, 11, ExecMode::Parallel).unwrap();
        let b = generate_dataset(&sys, &plan, 11, ExecMode::Sequential).unwrap();
        let c = generate_dataset(&sys, &plan, 12, ExecMode::Sequential).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_ne!(a.trajectories, c.trajectories);
    }

    #[test]
    fn constant_input_rollout_composes() {
        let sys = SystemSpec::duffing(0.01);
        let u = v(&[0.7]);
        let traj = simulate(&sys, &v(&[0.5, -0.2]), &vec![u.clone(); 20]).unwrap();
        let mut x = vec![0.5, -0.2];
        for k in 0..20 {
            x = sys.step(&x, u.as_slice()).unwrap();
            assert_eq!(x.as_slice(), traj.states[k + 1].as_slice());
        }
    }

    #[test]
    fn partition_labels_round_trip() {
        for label in ["D1", "D12", "Da"] {
            assert_eq!(label.parse::<Partition>().unwrap().to_string(), label);
        }
        assert!("D0".parse::<Partition>().is_err());
        assert!("x".parse::<Partition>().is_err());
        assert!("nope".parse::<SystemName>().is_err());
    }

    #[test]
    fn custom_rhs_hook() {
        let rhs = CustomRhs(Arc::new(|x: &[f64], u: &[f64]| vec![-x[0] + u[0]]));
        let sys = SystemSpec::custom(1, 1, 0.1, rhs);
        sys.validate().unwrap();
        assert_eq!(sys.step(&[1.0], &[0.0]).unwrap(), vec![0.9]);
    }
}
