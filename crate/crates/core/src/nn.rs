//! Dense MLP kernel with explicit reverse-mode gradients.
//!
//! Parameters live in a [`Params`] table addressed by [`ParamId`]; gradients
//! live in a separate [`Gradients`] table of identical shapes, so forward
//! passes only need `&Params` and per-graph backward passes can each fill their
//! own `Gradients` before an ordered reduction.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_named(&self) -> Vec<NamedArray> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| NamedArray {
                name: name.clone(),
                shape: [v.nrows(), v.ncols()],
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites values from `named`, which must list exactly the same
    /// parameters (names, order and shapes).
    pub fn load_named(&mut self, named: &[NamedArray]) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (i, n) in named.iter().enumerate() {
            if n.name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected `{}`, found `{}`",
                    self.names[i], n.name
                )));
            }
            let v = &self.values[i];
            if n.shape != [v.nrows(), v.ncols()] || n.data.len() != v.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}`: shape {:?} does not match {:?}",
                    n.name,
                    n.shape,
                    v.shape()
                )));
            }
            self.values[i] = Array2::from_shape_vec((n.shape[0], n.shape[1]), n.data.clone())
                .expect("shape checked");
        }
        Ok(())
    }
}

/// Row-major parameter array as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    bufs: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Self {
        Self {
            bufs: params.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.bufs[id.0]
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.bufs {
            b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.bufs.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters, their gradient buffers and Adam moment estimates.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub params: Params,
    pub grads: Gradients,
    first_moment: Vec<Array2<f64>>,
    second_moment: Vec<Array2<f64>>,
    step: u64,
    seed: u64,
}

impl ParamStore {
    pub fn new(params: Params, seed: u64) -> Self {
        let grads = Gradients::zeros_like(&params);
        let zeros: Vec<_> = params.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        Self {
            params,
            grads,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        self.grads.zero();
    }

    /// One bias-corrected Adam update from the current gradient buffers.
    /// Nothing is modified if any gradient entry is non-finite.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for id in self.params.ids() {
            if self.grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter `{}`",
                    self.params.name(id)
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.params.values.len() {
            Zip::from(&mut self.params.values[i])
                .and(&self.grads.bufs[i])
                .and(&mut self.first_moment[i])
                .and(&mut self.second_moment[i])
                .for_each(|p, &g, m, v| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                });
        }
        Ok(())
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

/// Feed-forward network: affine layers with ReLU between them and an identity
/// output. Weights are `out x in`, biases `1 x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Linear>,
}

/// Inputs seen by each layer during a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Registers parameters `name.{k}.weight` / `name.{k}.bias`, initialised
    /// Kaiming-uniform (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`) with zero biases.
    pub fn new<R: Rng>(params: &mut Params, name: &str, sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid MLP layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(rng));
                Linear {
                    weight: params.add(format!("{name}.{k}.weight"), weight),
                    bias: params.add(format!("{name}.{k}.bias"), Array2::zeros((1, fan_out))),
                }
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward(&self, params: &Params, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("MLP input", self.input_dim(), x.ncols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let w = params.get(layer.weight);
            let b = params.get(layer.bias);
            let mut out = h.dot(&w.t()) + b;
            if k + 1 < self.layers.len() {
                out.mapv_inplace(relu);
            }
            inputs.push(h);
            h = out;
        }
        Ok((h, MlpCache { inputs }))
    }

    pub fn forward_vec(&self, params: &Params, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let (y, cache) = self.forward(params, view)?;
        Ok((y.into_raw_vec_and_offset().0, cache))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(
        &self,
        params: &Params,
        grads: &mut Gradients,
        cache: &MlpCache,
        dy: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::dim("MLP cache layers", self.layers.len(), cache.inputs.len()));
        }
        let rows = cache.inputs[0].nrows();
        if dy.dim() != (rows, self.output_dim()) {
            return Err(Error::dim("MLP upstream gradient width", self.output_dim(), dy.ncols()));
        }
        let mut delta = dy.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = self.layers[k];
            if k + 1 < self.layers.len() {
                // ReLU: pass gradient where the activation (next input) is positive.
                Zip::from(&mut delta)
                    .and(&cache.inputs[k + 1])
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let input = &cache.inputs[k];
            *grads.get_mut(layer.weight) += &delta.t().dot(input);
            *grads.get_mut(layer.bias) += &delta.sum_axis(Axis(0)).insert_axis(Axis(0));
            delta = delta.dot(params.get(layer.weight));
        }
        Ok(delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and the per-entry scale mask
/// (`0` or `1 / (1 - rate)`; all ones in eval mode).
pub fn dropout<R: Rng>(
    x: &Array2<f64>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), Array2::ones(x.raw_dim())));
    }
    let keep = Bernoulli::new(1.0 - rate).expect("valid probability");
    let scale = 1.0 / (1.0 - rate);
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || if keep.sample(rng) { scale } else { 0.0 });
    Ok((x * &mask, mask))
}
