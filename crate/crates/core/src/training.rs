//! Joint gradient-based fit of the feature map and the embedding matrices.
//!
//! The loss over a batch is
//! `sum_i l1 |A g(x_i) + B u_i - g(y_i)|^2 + l2 |C (A g(x_i) + B u_i) - y_i|^2`.
//! Gradients are accumulated over fixed chunks of the batch and summed in
//! chunk order, so results do not depend on the execution mode.

use std::time::Instant;

use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Sample, Trajectory};
use crate::edmd::{fit_decoder_lifted, fit_dynamics_lifted, LiftedData, Lift, LinearEmbeddingModel};
use crate::error::{KmaError, Result};
use crate::exec::ExecMode;
use crate::features::{Activation, FeatureMap, ForwardCache};
use crate::linalg::identity_prefix_decoder;

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub n_extra: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { n_extra: 1, hidden: vec![10], activation: Activation::Tanh }
    }
}

impl FeatureConfig {
    pub fn cartpole() -> Self {
        FeatureConfig { n_extra: 8, hidden: vec![10, 10], activation: Activation::Tanh }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub val_fraction: f64,
    /// Hold `C = [I 0]` fixed instead of learning it.
    pub fix_decoder: bool,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lr: 1e-3,
            epochs: 2000,
            batch_size: 256,
            optimizer: Optimizer::Adam,
            seed: 0,
            val_fraction: 0.1,
            fix_decoder: true,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || self.lambda1 + self.lambda2 == 0.0 {
            return Err(KmaError::config("train.lambda1", "loss weights must be non-negative and not both zero"));
        }
        if !(self.lr > 0.0) {
            return Err(KmaError::config("train.lr", "learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(KmaError::config("train.batch_size", "must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(KmaError::config("train.val_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Lowest validation loss up to and including this epoch.
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch 0 is the warm-started initialization.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Mean per-sample loss on the validation trajectories.
    pub final_val_loss: f64,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// Best validation loss seen up to and including each epoch.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .scan(f64::INFINITY, |best, r| {
                *best = best.min(r.val_loss);
                Some(*best)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub d_theta: Vec<f64>,
    pub d_a: DMatrix<f64>,
    pub d_b: DMatrix<f64>,
    pub d_c: DMatrix<f64>,
}

/// Flat layout `[theta | A | B | C]`, matrices row-major.
#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    p: usize,
    nx: usize,
    n_theta: usize,
}

impl Layout {
    fn new(fm: &FeatureMap, p: usize) -> Self {
        Layout { n: fm.n, p, nx: fm.lift_dim(), n_theta: fm.param_count() }
    }
    fn a(&self) -> usize {
        self.n_theta
    }
    fn b(&self) -> usize {
        self.a() + self.nx * self.nx
    }
    fn c(&self) -> usize {
        self.b() + self.nx * self.p
    }
    fn total(&self) -> usize {
        self.c() + self.n * self.nx
    }

    fn pack(&self, fm: &FeatureMap, model: &LinearEmbeddingModel) -> Vec<f64> {
        let mut v = fm.params();
        for m in [&model.a, &model.b, &model.c] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    v.push(m[(r, c)]);
                }
            }
        }
        v
    }

    fn unpack(&self, flat: &[f64], fm: &mut FeatureMap) -> LinearEmbeddingModel {
        fm.set_params(&flat[..self.n_theta]).expect("layout matches feature map");
        LinearEmbeddingModel {
            a: DMatrix::from_row_slice(self.nx, self.nx, &flat[self.a()..self.b()]),
            b: DMatrix::from_row_slice(self.nx, self.p, &flat[self.b()..self.c()]),
            c: DMatrix::from_row_slice(self.n, self.nx, &flat[self.c()..self.total()]),
            noise: None,
        }
    }
}

fn check_batch(fm: &FeatureMap, model: &LinearEmbeddingModel, batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(KmaError::Empty("batch"));
    }
    model.check_dims(&Lift::MlpFeatures(fm.clone()))?;
    for s in batch {
        if s.x.len() != fm.n || s.y.len() != fm.n || s.u.len() != model.input_dim() {
            return Err(KmaError::Dimension { context: "batch sample", expected: fm.n, got: s.x.len() });
        }
    }
    Ok(())
}

/// Loss and (optionally) its gradient summed over `batch`, all in the flat layout.
fn loss_and_grad(
    fm: &FeatureMap,
    flat: &[f64],
    layout: &Layout,
    batch: &[&Sample],
    lambda1: f64,
    lambda2: f64,
    with_grad: bool,
    exec: ExecMode,
) -> (f64, Vec<f64>) {
    let n_chunks = batch.len().div_ceil(CHUNK);
    let partials = exec.map_indexed(n_chunks, |ci| {
        let chunk = &batch[ci * CHUNK..((ci + 1) * CHUNK).min(batch.len())];
        chunk_loss_grad(fm, flat, layout, chunk, lambda1, lambda2, with_grad)
    });
    let mut loss = 0.0;
    let mut grad = if with_grad { vec![0.0; layout.total()] } else { Vec::new() };
    for (l, g) in partials {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    (loss, grad)
}

fn chunk_loss_grad(
    fm: &FeatureMap,
    flat: &[f64],
    layout: &Layout,
    chunk: &[&Sample],
    lambda1: f64,
    lambda2: f64,
    with_grad: bool,
) -> (f64, Vec<f64>) {
    let Layout { n, p, nx, .. } = *layout;
    let a = &flat[layout.a()..layout.b()];
    let b = &flat[layout.b()..layout.c()];
    let c = &flat[layout.c()..layout.total()];
    let mut grad = if with_grad { vec![0.0; layout.total()] } else { Vec::new() };
    let (mut cache_x, mut cache_y) = (ForwardCache::default(), ForwardCache::default());
    let mut pred = vec![0.0; nx];
    let mut e1 = vec![0.0; nx];
    let mut e2 = vec![0.0; n];
    let mut delta = vec![0.0; nx];
    let mut loss = 0.0;
    for s in chunk {
        let gx = fm.forward_cached(s.x.as_slice(), &mut cache_x);
        let gy = fm.forward_cached(s.y.as_slice(), &mut cache_y);
        for r in 0..nx {
            let mut acc = 0.0;
            for k in 0..nx {
                acc += a[r * nx + k] * gx[k];
            }
            for k in 0..p {
                acc += b[r * p + k] * s.u[k];
            }
            pred[r] = acc;
            e1[r] = acc - gy[r];
        }
        for r in 0..n {
            let mut acc = 0.0;
            for k in 0..nx {
                acc += c[r * nx + k] * pred[k];
            }
            e2[r] = acc - s.y[r];
        }
        loss += lambda1 * e1.iter().map(|v| v * v).sum::<f64>() + lambda2 * e2.iter().map(|v| v * v).sum::<f64>();
        if !with_grad {
            continue;
        }
        // d loss / d pred
        for k in 0..nx {
            let mut acc = 2.0 * lambda1 * e1[k];
            for r in 0..n {
                acc += 2.0 * lambda2 * c[r * nx + k] * e2[r];
            }
            delta[k] = acc;
        }
        let (ga, rest) = grad[layout.a()..].split_at_mut(nx * nx);
        let (gb, gc) = rest.split_at_mut(nx * p);
        for r in 0..nx {
            for k in 0..nx {
                ga[r * nx + k] += delta[r] * gx[k];
            }
            for k in 0..p {
                gb[r * p + k] += delta[r] * s.u[k];
            }
        }
        for r in 0..n {
            let scale = 2.0 * lambda2 * e2[r];
            for k in 0..nx {
                gc[r * nx + k] += scale * pred[k];
            }
        }
        if nx > n {
            // upstream into g(x) is A^T delta, into g(y) is -2 l1 e1; only the
            // learned block carries parameters
            let up_x: Vec<f64> = (n..nx).map(|k| (0..nx).map(|r| a[r * nx + k] * delta[r]).sum()).collect();
            let up_y: Vec<f64> = (n..nx).map(|k| -2.0 * lambda1 * e1[k]).collect();
            let theta = &mut grad[..layout.n_theta];
            fm.backward_accumulate(&cache_x, &up_x, theta);
            fm.backward_accumulate(&cache_y, &up_y, theta);
        }
    }
    (loss, grad)
}

/// Problem loss summed over `batch`.
pub fn problem1_loss(
    fm: &FeatureMap,
    model: &LinearEmbeddingModel,
    batch: &[Sample],
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    check_batch(fm, model, batch)?;
    let layout = Layout::new(fm, model.input_dim());
    let flat = layout.pack(fm, model);
    let refs: Vec<&Sample> = batch.iter().collect();
    Ok(loss_and_grad(fm, &flat, &layout, &refs, lambda1, lambda2, false, ExecMode::default()).0)
}

/// Exact gradients of [`problem1_loss`] with respect to `theta`, `A`, `B` and `C`.
pub fn loss_gradients(
    fm: &FeatureMap,
    model: &LinearEmbeddingModel,
    batch: &[Sample],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossGradients> {
    check_batch(fm, model, batch)?;
    let layout = Layout::new(fm, model.input_dim());
    let flat = layout.pack(fm, model);
    let refs: Vec<&Sample> = batch.iter().collect();
    let (_, g) = loss_and_grad(fm, &flat, &layout, &refs, lambda1, lambda2, true, ExecMode::default());
    Ok(LossGradients {
        d_theta: g[..layout.n_theta].to_vec(),
        d_a: DMatrix::from_row_slice(layout.nx, layout.nx, &g[layout.a()..layout.b()]),
        d_b: DMatrix::from_row_slice(layout.nx, layout.p, &g[layout.b()..layout.c()]),
        d_c: DMatrix::from_row_slice(layout.n, layout.nx, &g[layout.c()..layout.total()]),
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, frozen: &std::ops::Range<usize>) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            if frozen.contains(&i) {
                continue;
            }
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + Self::EPS);
        }
    }
}

/// Split trajectories into (train, validation): the trailing `val_fraction`
/// of trajectories validate. A single trajectory serves both roles.
pub fn split_validation(trajectories: &[Trajectory], val_fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let count = trajectories.len();
    let n_val = ((count as f64 * val_fraction).ceil() as usize).clamp(1, count.max(1));
    let collect = |ts: &[Trajectory]| ts.iter().flat_map(|t| t.samples()).collect::<Vec<_>>();
    if count <= 1 {
        let all = collect(trajectories);
        return (all.clone(), all);
    }
    let (train, val) = trajectories.split_at(count - n_val);
    (collect(train), collect(val))
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha20Rng) {
    for i in (1..indices.len()).rev() {
        let j = ((u128::from(rng.next_u64()) * (i as u128 + 1)) >> 64) as usize;
        indices.swap(i, j);
    }
}

/// Minibatch optimization of the joint loss; returns the parameters with the
/// best validation loss seen (the warm start counts as epoch 0).
pub fn train_base_model(
    trajectories: &[Trajectory],
    features: &FeatureConfig,
    cfg: &TrainConfig,
) -> Result<(FeatureMap, LinearEmbeddingModel, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let first = trajectories
        .iter()
        .find(|t| !t.is_empty())
        .ok_or(KmaError::Empty("training partition"))?;
    let (n, p) = (first.states[0].len(), first.inputs[0].len());
    let (train, val) = split_validation(trajectories, cfg.val_fraction);
    if train.is_empty() || val.is_empty() {
        return Err(KmaError::Empty("training partition"));
    }

    let mut fm = FeatureMap::init(n, features.n_extra, &features.hidden, features.activation, cfg.seed)?;
    let lift = Lift::MlpFeatures(fm.clone());
    let lifted = LiftedData::new(&lift, &train, cfg.exec)?;
    let dynamics = fit_dynamics_lifted(&lifted, 0.0)?;
    let c = if cfg.fix_decoder {
        identity_prefix_decoder(n, fm.lift_dim())
    } else {
        fit_decoder_lifted(&lifted, 0.0)?.c
    };
    let init = LinearEmbeddingModel { a: dynamics.a, b: dynamics.b, c, noise: None };

    let layout = Layout::new(&fm, p);
    let mut flat = layout.pack(&fm, &init);
    let frozen = if cfg.fix_decoder { layout.c()..layout.total() } else { 0..0 };
    let train_refs: Vec<&Sample> = train.iter().collect();
    let val_refs: Vec<&Sample> = val.iter().collect();
    let val_loss = |flat: &[f64], fm: &FeatureMap| {
        loss_and_grad(fm, flat, &layout, &val_refs, cfg.lambda1, cfg.lambda2, false, cfg.exec).0 / val_refs.len() as f64
    };
    let train_loss0 =
        loss_and_grad(&fm, &flat, &layout, &train_refs, cfg.lambda1, cfg.lambda2, false, cfg.exec).0 / train.len() as f64;
    let val0 = val_loss(&flat, &fm);
    if !(train_loss0.is_finite() && val0.is_finite()) {
        return Err(KmaError::TrainingDiverged { epoch: 0 });
    }
    let mut records = vec![EpochRecord { epoch: 0, train_loss: train_loss0, val_loss: val0, best_val_loss: val0 }];
    let (mut best_flat, mut best_val, mut best_epoch) = (flat.clone(), val0, 0);

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = Adam::new(flat.len());
    let mut batch: Vec<&Sample> = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| &train[i]));
            fm.set_params(&flat[..layout.n_theta])?;
            let (loss, mut grad) = loss_and_grad(&fm, &flat, &layout, &batch, cfg.lambda1, cfg.lambda2, true, cfg.exec);
            if !loss.is_finite() {
                return Err(KmaError::TrainingDiverged { epoch });
            }
            epoch_loss += loss;
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut flat, &grad, cfg.lr, &frozen),
                Optimizer::Sgd => {
                    for (i, (w, g)) in flat.iter_mut().zip(&grad).enumerate() {
                        if !frozen.contains(&i) {
                            *w -= cfg.lr * g;
                        }
                    }
                }
            }
        }
        fm.set_params(&flat[..layout.n_theta])?;
        let v = val_loss(&flat, &fm);
        let t = epoch_loss / train.len() as f64;
        if !(v.is_finite() && t.is_finite()) {
            return Err(KmaError::TrainingDiverged { epoch });
        }
        if v < best_val {
            best_val = v;
            best_epoch = epoch;
            best_flat.copy_from_slice(&flat);
        }
        records.push(EpochRecord { epoch, train_loss: t, val_loss: v, best_val_loss: best_val });
        if epoch % 100 == 0 {
            log::debug!("epoch {epoch}: train {t:.3e} val {v:.3e} best {best_val:.3e}");
        }
    }
    let model = layout.unpack(&best_flat, &mut fm);
    let report = TrainReport {
        epochs: records,
        best_epoch,
        final_val_loss: best_val,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((fm, model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn sample(x: &[f64], u: &[f64], y: &[f64]) -> Sample {
        Sample { x: DVector::from_row_slice(x), u: DVector::from_row_slice(u), y: DVector::from_row_slice(y) }
    }

    fn scalar_model(a: f64, b: f64, c: f64) -> LinearEmbeddingModel {
        LinearEmbeddingModel {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DMatrix::from_element(1, 1, c),
            noise: None,
        }
    }

    #[test]
    fn zero_residual_loss_and_gradients() {
        let fm = FeatureMap::identity(2);
        let model = LinearEmbeddingModel {
            a: DMatrix::identity(2, 2),
            b: DMatrix::zeros(2, 1),
            c: DMatrix::identity(2, 2),
            noise: None,
        };
        let batch = vec![sample(&[1.0, 2.0], &[0.3], &[1.0, 2.0]), sample(&[-1.0, 0.5], &[0.0], &[-1.0, 0.5])];
        assert_eq!(problem1_loss(&fm, &model, &batch, 1.0, 1.0).unwrap(), 0.0);
        let g = loss_gradients(&fm, &model, &batch, 1.0, 1.0).unwrap();
        assert!(g.d_a.iter().chain(g.d_b.iter()).chain(g.d_c.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn state_term_only_scalar() {
        let fm = FeatureMap::identity(1);
        // C (A x + B u) - y = 1 * (1 * 3 + 0) - 1 = 2
        let batch = vec![sample(&[3.0], &[0.0], &[1.0])];
        let model = scalar_model(1.0, 0.0, 1.0);
        assert_eq!(problem1_loss(&fm, &model, &batch, 0.0, 1.0).unwrap(), 4.0);
        let l1 = problem1_loss(&fm, &model, &batch, 0.7, 0.4).unwrap();
        let l2 = problem1_loss(&fm, &model, &batch, 1.4, 0.8).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        let g = loss_gradients(&fm, &model, &batch, 0.0, 0.0).unwrap();
        assert!(g.d_a.iter().chain(g.d_c.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let fm = FeatureMap::identity(1);
        assert!(problem1_loss(&fm, &scalar_model(1.0, 0.0, 1.0), &[], 1.0, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.lambda1 = 0.0;
        cfg.lambda2 = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn validation_split_takes_trailing_trajectories() {
        let trajs: Vec<Trajectory> = (0..10)
            .map(|i| Trajectory {
                states: vec![DVector::from_element(1, i as f64); 3],
                inputs: vec![DVector::zeros(1); 2],
            })
            .collect();
        let (train, val) = split_validation(&trajs, 0.1);
        assert_eq!(train.len(), 18);
        assert_eq!(val.len(), 2);
        assert!(val.iter().all(|s| s.x[0] == 9.0));
    }

    #[test]
    fn trivial_dataset_converges_immediately() {
        let trajs: Vec<Trajectory> = (0..10)
            .map(|i| {
                let x = DVector::from_row_slice(&[i as f64 * 0.1 - 0.5, 0.3 - i as f64 * 0.05]);
                Trajectory { states: vec![x; 6], inputs: vec![DVector::zeros(1); 5] }
            })
            .collect();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let features = FeatureConfig { n_extra: 1, hidden: vec![4], activation: Activation::Tanh };
        let (_, _, report) = train_base_model(&trajs, &features, &cfg).unwrap();
        assert!(report.final_val_loss < 1e-10);
        assert!(report.epochs.iter().all(|r| r.train_loss >= 0.0 && r.val_loss >= 0.0));
    }
}
