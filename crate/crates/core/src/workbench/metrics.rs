//! Multi-step prediction scoring against the true plant.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::averaging::{rollout, RolloutMode, WeightedModel};
use crate::dynamics::{random_trajectory, DataPlan, StateVector, SystemSpec, Trajectory};
use crate::edmd::Lift;
use crate::error::Result;
use crate::exec::ExecMode;

const EVAL_SEED_SALT: u64 = 0x6576_616c_5f69_6373;

/// Evaluation trajectories drawn from the data plan's distributions on a
/// stream that no training partition uses.
pub fn evaluation_trajectories(
    system: &SystemSpec,
    plan: &DataPlan,
    n_ics: usize,
    steps: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<Vec<Trajectory>> {
    exec.map_indexed(n_ics, |i| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ EVAL_SEED_SALT);
        rng.set_stream(i as u64);
        random_trajectory(system, plan.ic_range, plan.input_range, steps, &mut rng)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionEval {
    /// Per-component RMSE at prediction steps `1..=T`, pooled over trajectories.
    pub rmse_per_step: Vec<f64>,
    /// RMSE pooled over every step; `None` when no step was predicted.
    pub total_rmse: Option<f64>,
    /// `x_1..x_T` per trajectory.
    pub predictions: Vec<Vec<StateVector>>,
}

/// Latent rollouts of `wm` along each trajectory's recorded inputs.
pub fn evaluate_prediction(wm: &WeightedModel, lift: &Lift, trajs: &[Trajectory], exec: ExecMode) -> Result<PredictionEval> {
    let predictions = exec
        .map_slice(trajs, |t| {
            if t.inputs.is_empty() {
                Ok(Vec::new())
            } else {
                rollout(wm, lift, &t.states[0], &t.inputs, RolloutMode::Latent)
            }
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let horizon = trajs.iter().map(|t| t.inputs.len()).max().unwrap_or(0);
    let mut sq = vec![0.0; horizon];
    let mut count = vec![0usize; horizon];
    for (t, pred) in trajs.iter().zip(&predictions) {
        for (k, x) in pred.iter().enumerate() {
            sq[k] += (x - &t.states[k + 1]).norm_squared();
            count[k] += x.len();
        }
    }
    let rmse_per_step = sq.iter().zip(&count).map(|(s, c)| (s / *c as f64).sqrt()).collect();
    let total_count: usize = count.iter().sum();
    let total_rmse = (total_count > 0).then(|| (sq.iter().sum::<f64>() / total_count as f64).sqrt());
    Ok(PredictionEval { rmse_per_step, total_rmse, predictions })
}
