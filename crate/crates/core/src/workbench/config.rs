//! Experiment configuration, read from a single TOML file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::averaging::{ElpdTarget, KmaConfig};
use crate::control::{LqrSpec, MpcSpec, Reference, DARE_MAX_ITER, DARE_TOL, QP_MAX_ITER, QP_TOL};
use crate::dynamics::{DataPlan, Integrator, Partition, SystemName, SystemSpec, DEFAULT_DT};
use crate::error::{KmaError, Result};
use crate::training::{FeatureConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub name: String,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub integrator: Integrator,
    /// Overrides for named parameters (cartpole: m, M, L, g, delta).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

impl SystemConfig {
    pub fn spec(&self) -> Result<SystemSpec> {
        let name: SystemName = self.name.parse()?;
        let mut spec = SystemSpec::by_name(name, self.dt)?;
        spec.integrator = self.integrator;
        for (k, v) in &self.params {
            if !spec.params.contains_key(k) {
                return Err(KmaError::config("system.params", format!("unknown parameter `{k}`")));
            }
            spec.params.insert(k.clone(), *v);
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmaSection {
    /// Ensemble size N; `None` uses every fit partition of the data plan.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
    pub ridge: f64,
    pub elpd_target: ElpdTarget,
}

impl Default for KmaSection {
    fn default() -> Self {
        KmaSection { ensemble_size: None, ridge: 0.0, elpd_target: ElpdTarget::State }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqrConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_diag: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_diag: Option<Vec<f64>>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LqrConfig {
    fn default() -> Self {
        LqrConfig { q_diag: None, r_diag: None, tol: DARE_TOL, max_iter: DARE_MAX_ITER }
    }
}

pub const DEFAULT_LQR_R: f64 = 0.01;

impl LqrConfig {
    /// `Q_x = I`, `R = 0.01 I` unless overridden.
    pub fn spec(&self, system: &SystemSpec) -> Result<LqrSpec> {
        let spec = LqrSpec {
            q_diag: self.q_diag.clone().unwrap_or_else(|| vec![1.0; system.n]),
            r_diag: self.r_diag.clone().unwrap_or_else(|| vec![DEFAULT_LQR_R; system.p]),
            tol: self.tol,
            max_iter: self.max_iter,
        };
        spec.validate(system.n, system.p)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_diag: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_diag: Option<Vec<f64>>,
    pub u_min: f64,
    pub u_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
    pub preview: bool,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

pub const DEFAULT_MPC_Q1: f64 = 10.0;
pub const DEFAULT_MPC_R: f64 = 1e-3;

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 20,
            q_diag: None,
            r_diag: None,
            u_min: -10.0,
            u_max: 10.0,
            reference: None,
            preview: false,
            qp_tol: QP_TOL,
            qp_max_iter: QP_MAX_ITER,
        }
    }
}

impl MpcConfig {
    /// Tracks the first state component: `Q_x = diag(10, 0, ..)`, `R = 1e-3 I`,
    /// reference -1 up to t = 10 and +1 afterwards.
    pub fn spec(&self, system: &SystemSpec) -> Result<MpcSpec> {
        let q_diag = self.q_diag.clone().unwrap_or_else(|| {
            let mut q = vec![0.0; system.n];
            q[0] = DEFAULT_MPC_Q1;
            q
        });
        let spec = MpcSpec {
            horizon: self.horizon,
            q_diag,
            r_diag: self.r_diag.clone().unwrap_or_else(|| vec![DEFAULT_MPC_R; system.p]),
            u_min: vec![self.u_min; system.p],
            u_max: vec![self.u_max; system.p],
            reference: self.reference.clone().unwrap_or_else(|| Reference::square_step(system.n)),
            dt: system.dt,
            preview: self.preview,
            qp_tol: self.qp_tol,
            qp_max_iter: self.qp_max_iter,
        };
        spec.validate(system.n, system.p)?;
        Ok(spec)
    }
}

/// Fresh trajectories used to score multi-step prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub n_ics: usize,
    pub steps: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { n_ics: 10, steps: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Single initial condition; without it the evaluation set is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Horizon for a single `x0`; defaults to `evaluation.steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_constant: Option<Vec<f64>>,
    /// CSV with columns `u0..`; one row per step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// LQR initial conditions; random ones are drawn when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lqr_x0: Option<Vec<Vec<f64>>>,
    pub n_random_ics: usize,
    pub ic_range: f64,
    pub lqr_duration: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpc_x0: Option<Vec<f64>>,
    pub mpc_duration: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig { lqr_x0: None, n_random_ics: 5, ic_range: 1.0, lqr_duration: 10.0, mpc_x0: None, mpc_duration: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub edmd_degree: usize,
    pub edmd_ridge: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { edmd_degree: 2, edmd_ridge: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Dataset CSV; defaults to `<out>/dataset.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub system: SystemConfig,
    #[serde(default)]
    pub data: DataPlan,
    /// Defaults depend on the system (one extra feature for Duffing, eight for cartpole).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub kma: KmaSection,
    #[serde(default)]
    pub lqr: LqrConfig,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
}

impl ExperimentConfig {
    /// Default experiment for a named system.
    pub fn for_system(name: &str) -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: None,
            dataset: None,
            system: SystemConfig { name: name.to_string(), dt: DEFAULT_DT, integrator: Integrator::Euler, params: BTreeMap::new() },
            data: DataPlan::default(),
            features: None,
            train: TrainConfig::default(),
            kma: KmaSection::default(),
            lqr: LqrConfig::default(),
            mpc: MpcConfig::default(),
            evaluation: EvaluationConfig::default(),
            predict: PredictConfig::default(),
            control: ControlConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| text[..s.start].lines().count()).map_or(String::from("config"), |l| format!("config line {l}"));
            KmaError::Config { field, message: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KmaError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| KmaError::config("config", e.to_string()))
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        self.system.spec()
    }

    pub fn feature_config(&self) -> Result<FeatureConfig> {
        if let Some(f) = &self.features {
            return Ok(f.clone());
        }
        Ok(match self.system.name.parse::<SystemName>()? {
            SystemName::Cartpole => FeatureConfig::cartpole(),
            _ => FeatureConfig::default(),
        })
    }

    pub fn kma_config(&self) -> Result<KmaConfig> {
        Ok(KmaConfig {
            features: self.feature_config()?,
            train: self.train.clone(),
            ridge: self.kma.ridge,
            elpd_target: self.kma.elpd_target,
            ensemble_size: self.kma.ensemble_size,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let system = self.system_spec()?;
        self.data.validate()?;
        self.train.validate()?;
        let fit_parts: Vec<Partition> =
            self.data.partitions.iter().map(|p| p.label).filter(|l| *l != Partition::HeldOut).collect();
        for (i, label) in fit_parts.iter().enumerate() {
            if *label != Partition::Fit(i as u32 + 1) {
                return Err(KmaError::config("data.partitions", "fit partitions must be D1, D2, .. in order without gaps"));
            }
        }
        if let Some(n) = self.kma.ensemble_size {
            if n == 0 || n > fit_parts.len() {
                return Err(KmaError::config(
                    "kma.ensemble_size",
                    format!("must lie in 1..={} (the defined fit partitions)", fit_parts.len()),
                ));
            }
        }
        if !(self.kma.ridge >= 0.0) {
            return Err(KmaError::config("kma.ridge", "must be non-negative"));
        }
        let features = self.feature_config()?;
        if features.hidden.is_empty() && features.n_extra > 0 {
            return Err(KmaError::config("features.hidden", "needs at least one hidden layer"));
        }
        self.lqr.spec(&system)?;
        self.mpc.spec(&system)?;
        if self.evaluation.n_ics == 0 || self.evaluation.steps == 0 {
            return Err(KmaError::config("evaluation", "n_ics and steps must be positive"));
        }
        if self.baselines.edmd_degree == 0 {
            return Err(KmaError::config("baselines.edmd_degree", "must be at least 1"));
        }
        if let Some(x0) = &self.predict.x0 {
            if x0.len() != system.n {
                return Err(KmaError::config("predict.x0", format!("needs {} components", system.n)));
            }
        }
        if let Some(u) = &self.predict.input_constant {
            if u.len() != system.p {
                return Err(KmaError::config("predict.input_constant", format!("needs {} components", system.p)));
            }
        }
        let c = &self.control;
        if let Some(ics) = &c.lqr_x0 {
            if ics.is_empty() || ics.iter().any(|x| x.len() != system.n) {
                return Err(KmaError::config("control.lqr_x0", format!("needs states with {} components", system.n)));
            }
        }
        if c.mpc_x0.as_ref().is_some_and(|x| x.len() != system.n) {
            return Err(KmaError::config("control.mpc_x0", format!("needs {} components", system.n)));
        }
        if !(c.lqr_duration > 0.0 && c.mpc_duration > 0.0 && c.ic_range >= 0.0) || c.n_random_ics == 0 {
            return Err(KmaError::config("control", "durations and n_random_ics must be positive"));
        }
        Ok(())
    }

    /// Number of sampling periods covering `seconds`.
    pub fn steps_for(&self, seconds: f64) -> usize {
        (seconds / self.system.dt).round() as usize
    }
}
