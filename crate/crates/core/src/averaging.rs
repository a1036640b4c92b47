//! Model averaging: held-out predictive scores, pseudo-BMA weights and the
//! weighted linear embedding model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dataset, Partition, Sample, StateVector, ControlInput};
use crate::edmd::{fit_member, Lift, LinearEmbeddingModel};
use crate::error::{KmaError, Result};
use crate::exec::ExecMode;
use crate::linalg::matrix_serde;
use crate::training::{train_base_model, FeatureConfig, TrainConfig, TrainReport};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Shared lift plus the fitted members; member 0 is the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEnsemble {
    pub lift: Lift,
    pub members: Vec<LinearEmbeddingModel>,
    pub partitions: Vec<Partition>,
}

impl ModelEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(KmaError::Empty("ensemble"));
        }
        self.members.iter().try_for_each(|m| m.check_dims(&self.lift))
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(KmaError::Empty("weight vector"));
        }
        let sum: f64 = w.iter().sum();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(KmaError::InvalidArgument(format!("weights must be a probability vector (sum {sum})")));
        }
        Ok(WeightVector(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// The averaged model: `z+ = A_bar z + B_bar u`, `x+ = CA_bar z + CB_bar u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedModel {
    #[serde(with = "matrix_serde")]
    pub a_bar: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub b_bar: DMatrix<f64>,
    /// `sum_i w_i C_i A_i`
    #[serde(with = "matrix_serde")]
    pub ca_bar: DMatrix<f64>,
    /// `sum_i w_i C_i B_i`
    #[serde(with = "matrix_serde")]
    pub cb_bar: DMatrix<f64>,
    /// `sum_i w_i C_i`, used only to pull state costs into the latent space.
    #[serde(with = "matrix_serde")]
    pub c_bar: DMatrix<f64>,
    pub w: WeightVector,
}

impl WeightedModel {
    /// A single model viewed as a one-member average.
    pub fn from_model(model: &LinearEmbeddingModel) -> Self {
        weighted_sum(std::slice::from_ref(model), &WeightVector(vec![1.0]))
    }

    pub fn lift_dim(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.ca_bar.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_bar.ncols()
    }

    pub fn check_dims(&self, lift: &Lift) -> Result<()> {
        let nx = lift.dim();
        let n = lift.state_dim();
        let checks = [
            ("A_bar", nx, self.a_bar.nrows()),
            ("A_bar cols", nx, self.a_bar.ncols()),
            ("B_bar", nx, self.b_bar.nrows()),
            ("CA_bar", n, self.ca_bar.nrows()),
            ("CA_bar cols", nx, self.ca_bar.ncols()),
            ("CB_bar", n, self.cb_bar.nrows()),
            ("CB_bar cols", self.input_dim(), self.cb_bar.ncols()),
            ("C_bar cols", nx, self.c_bar.ncols()),
        ];
        for (context, expected, got) in checks {
            if expected != got {
                return Err(KmaError::Dimension { context, expected, got });
            }
        }
        Ok(())
    }
}

fn weighted_sum(members: &[LinearEmbeddingModel], w: &WeightVector) -> WeightedModel {
    let mut terms = members.iter().zip(w.as_slice());
    let (first, w0) = terms.next().expect("nonempty ensemble");
    let mut a_bar = &first.a * *w0;
    let mut b_bar = &first.b * *w0;
    let mut ca_bar = (&first.c * &first.a) * *w0;
    let mut cb_bar = (&first.c * &first.b) * *w0;
    let mut c_bar = &first.c * *w0;
    for (m, wi) in terms {
        a_bar += &m.a * *wi;
        b_bar += &m.b * *wi;
        ca_bar += (&m.c * &m.a) * *wi;
        cb_bar += (&m.c * &m.b) * *wi;
        c_bar += &m.c * *wi;
    }
    WeightedModel { a_bar, b_bar, ca_bar, cb_bar, c_bar, w: w.clone() }
}

fn gaussian_log_density(residual: impl Iterator<Item = f64>, variances: &DVector<f64>) -> f64 {
    residual
        .zip(variances.iter())
        .map(|(r, var)| -0.5 * (LN_2PI + var.ln() + r * r / var))
        .sum()
}

/// `log N(y; C (A g(x) + B u), diag(sigma_x))`.
pub fn log_predictive_density(member: &LinearEmbeddingModel, lift: &Lift, sample: &Sample) -> Result<f64> {
    let noise = member.noise.as_ref().ok_or_else(|| KmaError::InvalidArgument("member has no noise model".into()))?;
    let z = lift.eval_vec(&sample.x);
    let mean = &member.c * member.latent_step(&z, &sample.u);
    Ok(gaussian_log_density(sample.y.iter().zip(mean.iter()).map(|(y, m)| y - m), &noise.sigma_x))
}

/// `log N(g(y); A g(x) + B u, diag(sigma_z))`.
pub fn log_predictive_density_latent(member: &LinearEmbeddingModel, lift: &Lift, sample: &Sample) -> Result<f64> {
    let noise = member.noise.as_ref().ok_or_else(|| KmaError::InvalidArgument("member has no noise model".into()))?;
    let mean = member.latent_step(&lift.eval_vec(&sample.x), &sample.u);
    let gy = lift.eval_vec(&sample.y);
    Ok(gaussian_log_density(gy.iter().zip(mean.iter()).map(|(y, m)| y - m), &noise.sigma_z))
}

/// Which predictive density scores the members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElpdTarget {
    #[default]
    State,
    Latent,
}

/// Sum of log predictive densities over the held-out samples.
pub fn elpd(member: &LinearEmbeddingModel, lift: &Lift, heldout: &[Sample]) -> Result<f64> {
    elpd_with(member, lift, heldout, ElpdTarget::State)
}

pub fn elpd_with(member: &LinearEmbeddingModel, lift: &Lift, heldout: &[Sample], target: ElpdTarget) -> Result<f64> {
    if heldout.is_empty() {
        return Err(KmaError::MissingHeldOut);
    }
    heldout.iter().try_fold(0.0, |acc, s| {
        let lp = match target {
            ElpdTarget::State => log_predictive_density(member, lift, s)?,
            ElpdTarget::Latent => log_predictive_density_latent(member, lift, s)?,
        };
        Ok(acc + lp)
    })
}

/// `w_i = exp(elpd_i) / sum_k exp(elpd_k)`, evaluated with max subtraction.
pub fn pseudo_bma_weights(elpds: &[f64]) -> Result<WeightVector> {
    if elpds.is_empty() {
        return Err(KmaError::Empty("elpd vector"));
    }
    if elpds.iter().any(|e| !e.is_finite()) {
        return Err(KmaError::InvalidArgument("elpd values must be finite".into()));
    }
    let max = elpds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = elpds.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(WeightVector(exps.into_iter().map(|e| e / total).collect()))
}

pub fn build_weighted_model(ensemble: &ModelEnsemble, w: &WeightVector) -> Result<WeightedModel> {
    if w.len() != ensemble.len() {
        return Err(KmaError::Dimension { context: "weight vector", expected: ensemble.len(), got: w.len() });
    }
    ensemble.validate()?;
    Ok(weighted_sum(&ensemble.members, w))
}

/// `A_bar z + B_bar u`.
pub fn advance_latent(wm: &WeightedModel, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    &wm.a_bar * z + &wm.b_bar * u
}

/// `CA_bar z + CB_bar u`.
pub fn predict_state(wm: &WeightedModel, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    &wm.ca_bar * z + &wm.cb_bar * u
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Advance the latent state autonomously from `g(x0)`.
    #[default]
    Latent,
    /// Re-lift every predicted state before the next step.
    Reencode,
}

/// Predicted states `x_1..x_T` for the input sequence `u_0..u_{T-1}`.
pub fn rollout(
    wm: &WeightedModel,
    lift: &Lift,
    x0: &StateVector,
    inputs: &[ControlInput],
    mode: RolloutMode,
) -> Result<Vec<StateVector>> {
    if inputs.is_empty() {
        return Err(KmaError::Empty("input sequence"));
    }
    wm.check_dims(lift)?;
    if x0.len() != lift.state_dim() {
        return Err(KmaError::Dimension { context: "initial state", expected: lift.state_dim(), got: x0.len() });
    }
    let mut z = lift.eval_vec(x0);
    let mut out = Vec::with_capacity(inputs.len());
    for (k, u) in inputs.iter().enumerate() {
        if u.len() != wm.input_dim() {
            return Err(KmaError::Dimension { context: "input", expected: wm.input_dim(), got: u.len() });
        }
        let x = predict_state(wm, &z, u);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(KmaError::Diverged { step: k + 1 });
        }
        z = match mode {
            RolloutMode::Latent => advance_latent(wm, &z, u),
            RolloutMode::Reencode => lift.eval_vec(&x),
        };
        out.push(x);
    }
    Ok(out)
}

/// Everything produced by one run of the averaging pipeline.
#[derive(Debug, Clone)]
pub struct KmaOutcome {
    pub ensemble: ModelEnsemble,
    pub train_report: TrainReport,
    pub elpds: Vec<f64>,
    pub weights: WeightVector,
    pub weighted: WeightedModel,
    pub rank_deficient: Vec<bool>,
    pub n_heldout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmaConfig {
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub ridge: f64,
    pub elpd_target: ElpdTarget,
    /// Ensemble size N: members are fitted on `D1..DN`; `None` uses every fit partition.
    pub ensemble_size: Option<usize>,
}

impl Default for KmaConfig {
    fn default() -> Self {
        KmaConfig {
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
            ridge: 0.0,
            elpd_target: ElpdTarget::State,
            ensemble_size: None,
        }
    }
}

/// Train the base model on `D1`, fit members on `D2..DN`, score everything on
/// `Da` and merge.
pub fn run_kma(dataset: &Dataset, cfg: &KmaConfig) -> Result<KmaOutcome> {
    let heldout = dataset.samples_in(Partition::HeldOut);
    if heldout.is_empty() {
        return Err(KmaError::MissingHeldOut);
    }
    let mut fit_parts = dataset.fit_partitions();
    if fit_parts.first() != Some(&Partition::Fit(1)) {
        return Err(KmaError::InvalidArgument("partition D1 required for the base model".into()));
    }
    if let Some(n) = cfg.ensemble_size {
        if n == 0 || n > fit_parts.len() {
            return Err(KmaError::config("kma.ensemble_size", format!("must lie in 1..={}", fit_parts.len())));
        }
        fit_parts.truncate(n);
    }
    let exec = cfg.train.exec;

    let d1: Vec<_> = dataset.trajectories_in(Partition::Fit(1)).into_iter().map(|t| t.trajectory.clone()).collect();
    let (fm, base, train_report) =
        train_base_model(&d1, &cfg.features, &cfg.train).map_err(|e| e.in_stage("base model training"))?;
    let lift = Lift::MlpFeatures(fm);

    let fitted = exec.map_slice(&fit_parts, |&part| -> Result<(LinearEmbeddingModel, bool)> {
        let samples = dataset.samples_in(part);
        if part == Partition::Fit(1) {
            let mut model = base.clone();
            model.noise = Some(crate::edmd::fit_noise(&model, &lift, &samples)?);
            Ok((model, false))
        } else {
            fit_member(&lift, &samples, cfg.ridge, ExecMode::Sequential)
        }
    });
    let mut members = Vec::with_capacity(fitted.len());
    let mut rank_deficient = Vec::with_capacity(fitted.len());
    for f in fitted {
        let (m, rd) = f.map_err(|e| e.in_stage("ensemble fitting"))?;
        members.push(m);
        rank_deficient.push(rd);
    }
    for (part, rd) in fit_parts.iter().zip(&rank_deficient) {
        if *rd {
            log::warn!("member fitted on {part} is rank-deficient");
        }
    }
    let ensemble = ModelEnsemble { lift, members, partitions: fit_parts };

    let elpds = exec
        .map_slice(&ensemble.members, |m| elpd_with(m, &ensemble.lift, &heldout, cfg.elpd_target))
        .into_iter()
        .collect::<Result<Vec<f64>>>()
        .map_err(|e| e.in_stage("held-out scoring"))?;
    let weights = pseudo_bma_weights(&elpds)?;
    let weighted = build_weighted_model(&ensemble, &weights)?;
    Ok(KmaOutcome { ensemble, train_report, elpds, weights, weighted, rank_deficient, n_heldout: heldout.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edmd::GaussianNoiseModel;
    use crate::features::FeatureMap;

    fn scalar(a: f64, b: f64, c: f64) -> LinearEmbeddingModel {
        LinearEmbeddingModel {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DMatrix::from_element(1, 1, c),
            noise: None,
        }
    }

    fn unit_noise_model(n: usize) -> LinearEmbeddingModel {
        LinearEmbeddingModel {
            a: DMatrix::identity(n, n),
            b: DMatrix::zeros(n, 1),
            c: DMatrix::identity(n, n),
            noise: Some(GaussianNoiseModel { sigma_x: DVector::from_element(n, 1.0), sigma_z: DVector::from_element(n, 1.0) }),
        }
    }

    fn sample(x: &[f64], y: &[f64]) -> Sample {
        Sample { x: DVector::from_row_slice(x), u: DVector::zeros(1), y: DVector::from_row_slice(y) }
    }

    #[test]
    fn log_density_examples() {
        let lift = Lift::MlpFeatures(FeatureMap::identity(2));
        let mut member = unit_noise_model(2);
        let lp = log_predictive_density(&member, &lift, &sample(&[0.5, 1.0], &[0.5, 1.0])).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((lp + 1.837_877).abs() < 1e-6);
        let lp1 = log_predictive_density(&member, &lift, &sample(&[0.5, 1.0], &[1.5, 1.0])).unwrap();
        assert!((lp1 - (lp - 0.5)).abs() < 1e-12);
        member.noise.as_mut().unwrap().sigma_x[1] = 4.0;
        let lp4 = log_predictive_density(&member, &lift, &sample(&[0.5, 1.0], &[0.5, 1.0])).unwrap();
        assert!((lp - lp4 - 0.5 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn elpd_examples() {
        let lift = Lift::MlpFeatures(FeatureMap::identity(2));
        let member = unit_noise_model(2);
        let one = vec![sample(&[1.0, 2.0], &[1.0, 2.0])];
        assert!((elpd(&member, &lift, &one).unwrap() + LN_2PI).abs() < 1e-12);
        let da = vec![sample(&[1.0, 2.0], &[1.2, 2.0]), sample(&[0.0, 1.0], &[0.0, 0.7])];
        let doubled: Vec<Sample> = da.iter().chain(da.iter()).cloned().collect();
        let e = elpd(&member, &lift, &da).unwrap();
        assert!((elpd(&member, &lift, &doubled).unwrap() - 2.0 * e).abs() < 1e-12);
        let mut corrupted = member.clone();
        corrupted.a[(0, 1)] = 0.3;
        let exact = vec![sample(&[1.0, 2.0], &[1.0, 2.0]), sample(&[0.0, 1.0], &[0.0, 1.0])];
        assert!(elpd(&member, &lift, &exact).unwrap() > elpd(&corrupted, &lift, &exact).unwrap());
        assert!(matches!(elpd(&member, &lift, &[]), Err(KmaError::MissingHeldOut)));
        assert!(log_predictive_density(&scalar(1.0, 0.0, 1.0), &Lift::MlpFeatures(FeatureMap::identity(1)), &sample(&[1.0], &[1.0])).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(pseudo_bma_weights(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let w = pseudo_bma_weights(&[3f64.ln(), 0.0]).unwrap();
        assert!((w.as_slice()[0] - 0.75).abs() < 1e-12 && (w.as_slice()[1] - 0.25).abs() < 1e-12);
        let w = pseudo_bma_weights(&[1000.0, 0.0]).unwrap();
        assert_eq!(w.as_slice()[0], 1.0);
        assert!(w.as_slice()[1].is_finite() && w.as_slice()[1] >= 0.0);
        assert!(pseudo_bma_weights(&[]).is_err());
        assert!(pseudo_bma_weights(&[f64::NAN]).is_err());
    }

    #[test]
    fn weighted_model_examples() {
        let lift = Lift::MlpFeatures(FeatureMap::identity(1));
        let ens = ModelEnsemble { lift: lift.clone(), members: vec![scalar(1.0, 0.5, 1.0), scalar(3.0, 0.0, 2.0)], partitions: vec![] };
        let w = pseudo_bma_weights(&[0.0, 0.0]).unwrap();
        let wm = build_weighted_model(&ens, &w).unwrap();
        assert_eq!(wm.ca_bar[(0, 0)], 3.5);
        assert_eq!(wm.a_bar[(0, 0)], 2.0);
        let x = predict_state(&wm, &DVector::from_element(1, 1.0), &DVector::zeros(1));
        assert_eq!(x[0], 3.5);

        let ens2 = ModelEnsemble {
            lift: Lift::MlpFeatures(FeatureMap::identity(2)),
            members: vec![
                LinearEmbeddingModel { a: DMatrix::zeros(2, 2), ..unit_noise_model(2) },
                LinearEmbeddingModel { a: DMatrix::identity(2, 2) * 2.0, ..unit_noise_model(2) },
            ],
            partitions: vec![],
        };
        let wm = build_weighted_model(&ens2, &w).unwrap();
        assert_eq!(wm.a_bar, DMatrix::identity(2, 2));

        assert!(build_weighted_model(&ens, &WeightVector::new(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn single_member_is_the_model() {
        let m = scalar(0.7, 0.2, 1.5);
        let ens = ModelEnsemble { lift: Lift::MlpFeatures(FeatureMap::identity(1)), members: vec![m.clone()], partitions: vec![] };
        let wm = build_weighted_model(&ens, &WeightVector::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(wm, WeightedModel::from_model(&m));
        let z = DVector::from_element(1, 0.4);
        let u = DVector::from_element(1, -1.0);
        // CA z + CB u vs C (A z + B u): equal up to association order
        let direct = &m.c * m.latent_step(&z, &u);
        assert!((predict_state(&wm, &z, &u)[0] - direct[0]).abs() < 1e-15);
    }

    #[test]
    fn latent_and_state_steps() {
        let wm = WeightedModel::from_model(&scalar(2.0, 1.0, 1.0));
        let z = DVector::from_element(1, 3.0);
        let u = DVector::from_element(1, 1.0);
        assert_eq!(advance_latent(&wm, &z, &u)[0], 7.0);
        assert_eq!(advance_latent(&wm, &DVector::zeros(1), &DVector::zeros(1))[0], 0.0);
        assert_eq!(predict_state(&wm, &DVector::zeros(1), &DVector::zeros(1))[0], 0.0);
        let id = WeightedModel::from_model(&scalar(1.0, 0.0, 1.0));
        assert_eq!(advance_latent(&id, &z, &u), z);
    }

    #[test]
    fn rollout_cases() {
        let lift = Lift::MlpFeatures(FeatureMap::identity(2));
        let wm = WeightedModel::from_model(&unit_noise_model(2));
        let x0 = DVector::from_row_slice(&[0.3, -0.4]);
        let inputs = vec![DVector::from_element(1, 1.0); 10];
        let pred = rollout(&wm, &lift, &x0, &inputs, RolloutMode::Latent).unwrap();
        assert_eq!(pred.len(), 10);
        assert!(pred.iter().all(|x| *x == x0));
        let one = rollout(&wm, &lift, &x0, &inputs[..1], RolloutMode::Reencode).unwrap();
        assert_eq!(one, vec![predict_state(&wm, &lift.eval_vec(&x0), &inputs[0])]);
        assert!(rollout(&wm, &lift, &x0, &[], RolloutMode::Latent).is_err());

        let blowup = WeightedModel::from_model(&scalar(1e300, 0.0, 1e300));
        let err = rollout(&blowup, &Lift::MlpFeatures(FeatureMap::identity(1)), &DVector::from_element(1, 1e10), &inputs, RolloutMode::Latent);
        assert!(matches!(err, Err(KmaError::Diverged { step: 1 })));
    }

    #[test]
    fn weight_vector_validation() {
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
        assert!(WeightVector::new(vec![-0.5, 1.5]).is_err());
        assert_eq!(WeightVector::new(vec![0.2, 0.8]).unwrap().argmax(), 1);
    }
}
