//! The lift `z = g(x)`: the state itself followed by the outputs of a small MLP.
//!
//! Parameters are flattened layer by layer; within a layer the weight matrix
//! comes first in row-major order (`rows` = outputs, `cols` = inputs), then the
//! bias. Hidden layers apply the activation, the output layer is affine.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::uniform;
use crate::error::{KmaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn param_count(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub n: usize,
    pub n_extra: usize,
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_theta: Vec<f64>,
    pub d_input: Vec<f64>,
}

/// Activations of every layer for one input, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl FeatureMap {
    /// Lift with no learned coordinates: `g(x) = x`.
    pub fn identity(n: usize) -> Self {
        FeatureMap { n, n_extra: 0, activation: Activation::Tanh, layers: Vec::new() }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(n: usize, n_extra: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(KmaError::InvalidArgument("state dimension must be positive".into()));
        }
        if n_extra == 0 {
            return Ok(FeatureMap::identity(n));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(KmaError::InvalidArgument("hidden layer sizes must be nonempty and positive".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut sizes = vec![n];
        sizes.extend_from_slice(hidden);
        sizes.push(n_extra);
        let layers = sizes
            .windows(2)
            .map(|pair| {
                let (cols, rows) = (pair[0], pair[1]);
                let s = (6.0 / (cols + rows) as f64).sqrt();
                Layer {
                    rows,
                    cols,
                    w: (0..rows * cols).map(|_| uniform(&mut rng, -s, s)).collect(),
                    b: vec![0.0; rows],
                }
            })
            .collect();
        Ok(FeatureMap { n, n_extra, activation, layers })
    }

    /// Lift dimension `n + n_extra`.
    pub fn lift_dim(&self) -> usize {
        self.n + self.n_extra
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(KmaError::Dimension { context: "feature parameters", expected: self.param_count(), got: theta.len() });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.w.len();
            layer.w.copy_from_slice(&theta[offset..offset + nw]);
            offset += nw;
            let nb = layer.b.len();
            layer.b.copy_from_slice(&theta[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.n;
        for layer in &self.layers {
            if layer.cols != width || layer.w.len() != layer.rows * layer.cols || layer.b.len() != layer.rows {
                return Err(KmaError::InvalidArgument("inconsistent feature map layer shapes".into()));
            }
            width = layer.rows;
        }
        let learned = if self.layers.is_empty() { 0 } else { width };
        if learned != self.n_extra {
            return Err(KmaError::Dimension { context: "feature map output", expected: self.n_extra, got: learned });
        }
        if !self.params().iter().all(|v| v.is_finite()) {
            return Err(KmaError::InvalidArgument("non-finite feature map parameter".into()));
        }
        Ok(())
    }

    /// `[x; MLP(x)]`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        cache.acts.resize(self.layers.len() + 1, Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = cache.acts.split_at_mut(l + 1);
            layer.affine(&head[l], &mut tail[0]);
            if l != last {
                for v in tail[0].iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
        }
        let mut out = Vec::with_capacity(self.lift_dim());
        out.extend_from_slice(x);
        if !self.layers.is_empty() {
            out.extend_from_slice(&cache.acts[self.layers.len()]);
        }
        out
    }

    /// Gradient of `<upstream, forward(x)>` with respect to the parameters and the input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<GradientBundle> {
        if upstream.len() != self.lift_dim() {
            return Err(KmaError::Dimension { context: "upstream gradient", expected: self.lift_dim(), got: upstream.len() });
        }
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache);
        let mut d_theta = vec![0.0; self.param_count()];
        let mut d_input = upstream[..self.n].to_vec();
        let d_learned = self.backward_accumulate(&cache, &upstream[self.n..], &mut d_theta);
        for (d, v) in d_input.iter_mut().zip(d_learned) {
            *d += v;
        }
        Ok(GradientBundle { d_theta, d_input })
    }

    /// Adds the parameter gradient for the learned block into `d_theta` using a
    /// cache filled by [`forward_cached`](Self::forward_cached). Returns the
    /// gradient with respect to the input through the learned block only.
    pub fn backward_accumulate(&self, cache: &ForwardCache, upstream_learned: &[f64], d_theta: &mut [f64]) -> Vec<f64> {
        if self.layers.is_empty() {
            return vec![0.0; self.n];
        }
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.param_count();
                Some(start)
            })
            .collect();
        let last = self.layers.len() - 1;
        let mut delta = upstream_learned.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l != last {
                for (d, a) in delta.iter_mut().zip(&cache.acts[l + 1]) {
                    *d *= self.activation.derivative_from_output(*a);
                }
            }
            let input = &cache.acts[l];
            let base = offsets[l];
            for r in 0..layer.rows {
                let dr = delta[r];
                if dr != 0.0 {
                    let row = &mut d_theta[base + r * layer.cols..base + (r + 1) * layer.cols];
                    for (g, x) in row.iter_mut().zip(input) {
                        *g += dr * x;
                    }
                }
                d_theta[base + layer.rows * layer.cols + r] += dr;
            }
            let mut next = vec![0.0; layer.cols];
            for r in 0..layer.rows {
                let dr = delta[r];
                let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                for (nx, w) in next.iter_mut().zip(row) {
                    *nx += dr * w;
                }
            }
            delta = next;
        }
        delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes() {
        let fm = FeatureMap::init(2, 1, &[10], Activation::Tanh, 0).unwrap();
        assert_eq!(fm.lift_dim(), 3);
        assert_eq!(fm.param_count(), 2 * 10 + 10 + 10 + 1);
        let fm = FeatureMap::init(4, 8, &[10, 10], Activation::Tanh, 0).unwrap();
        assert_eq!(fm.lift_dim(), 12);
        fm.validate().unwrap();
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = FeatureMap::init(2, 1, &[10], Activation::Tanh, 5).unwrap();
        let b = FeatureMap::init(2, 1, &[10], Activation::Tanh, 5).unwrap();
        let c = FeatureMap::init(2, 1, &[10], Activation::Tanh, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let s = (6.0f64 / 12.0).sqrt();
        assert!(a.layers[0].w.iter().all(|w| w.abs() <= s));
        assert!(a.layers.iter().all(|l| l.b.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn empty_hidden_is_rejected() {
        assert!(FeatureMap::init(2, 1, &[], Activation::Tanh, 0).is_err());
    }

    #[test]
    fn identity_prefix_and_zero_net() {
        let mut fm = FeatureMap::init(2, 3, &[4], Activation::Tanh, 1).unwrap();
        let out = fm.forward(&[0.25, -1.5]);
        assert_eq!(&out[..2], &[0.25, -1.5]);
        let zeros = vec![0.0; fm.param_count()];
        fm.set_params(&zeros).unwrap();
        assert_eq!(&fm.forward(&[0.25, -1.5])[2..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn hand_set_tanh_composition() {
        let fm = FeatureMap {
            n: 1,
            n_extra: 1,
            activation: Activation::Tanh,
            layers: vec![
                Layer { rows: 1, cols: 1, w: vec![1.0], b: vec![0.0] },
                Layer { rows: 1, cols: 1, w: vec![2.0], b: vec![0.0] },
            ],
        };
        let out = fm.forward(&[0.5]);
        assert!((out[1] - 0.924_234).abs() < 1e-6);
        assert_eq!(out[1], 2.0 * 0.5f64.tanh());
    }

    #[test]
    fn trivial_backward_cases() {
        let fm = FeatureMap::init(2, 2, &[5], Activation::Tanh, 3).unwrap();
        let g = fm.backward(&[0.3, 0.1], &[0.0; 4]).unwrap();
        assert!(g.d_theta.iter().all(|v| *v == 0.0));
        let g = fm.backward(&[0.3, 0.1], &[1.0, -2.0, 0.0, 0.0]).unwrap();
        assert!(g.d_theta.iter().all(|v| *v == 0.0));
        assert_eq!(g.d_input, vec![1.0, -2.0]);
        assert!(fm.backward(&[0.3, 0.1], &[1.0]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut fm = FeatureMap::init(3, 2, &[4, 5], Activation::Relu, 9).unwrap();
        let theta: Vec<f64> = (0..fm.param_count()).map(|i| i as f64 * 0.01).collect();
        fm.set_params(&theta).unwrap();
        assert_eq!(fm.params(), theta);
        assert_eq!(fm.layers[0].w[1], 0.01);
        assert_eq!(fm.layers[0].b[0], 0.01 * 12.0);
    }
}
