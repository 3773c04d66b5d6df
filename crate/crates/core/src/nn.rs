//! Just enough neural-network machinery for the encoder, decoder and
//! noise-prediction network: dense layers with hand-written reverse-mode
//! gradients, Fourier feature embeddings and Adam.
//!
//! Gradients of a model are stored in a value of the model's own type, so the
//! optimizer's moment buffers and any structural edits (dropping decoder
//! outputs) apply uniformly to parameters, gradients and moments.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat access to every trainable tensor of a model, in a fixed order.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn tensor_names(&self) -> Vec<String>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Names the first tensor holding a NaN or infinity.
    fn check_finite(&self) -> Result<()> {
        let names = self.tensor_names();
        for (name, t) in names.into_iter().zip(self.tensors()) {
            if let Some(i) = t.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { path: format!("{name}[{i}]") });
            }
        }
        Ok(())
    }

    fn same_shape(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        if self == Activation::Relu {
            x.mapv_inplace(|v| v.max(0.0));
        }
    }

    /// Multiplies `grad` by the derivative evaluated at pre-activation `pre`.
    fn backprop(self, pre: &Array2<f64>, grad: &mut Array2<f64>) {
        if self == Activation::Relu {
            grad.zip_mut_with(pre, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
        }
    }
}

/// Affine map `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear { weight: Array2::zeros((inputs, outputs)), bias: Array1::zeros(outputs) }
    }

    /// He-uniform: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero bias.
    pub fn he_uniform(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((inputs, outputs), |_| rng.gen_range(-limit..limit));
        Linear { weight, bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Like [`Linear::backward`] without propagating to the input.
    pub fn accumulate(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    fn tensors(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Keeps only the listed output columns.
    pub fn retain_outputs(&mut self, keep: &[usize]) {
        let weight = self.weight.select(Axis(1), keep);
        self.weight = weight.as_standard_layout().into_owned();
        self.bias = self.bias.select(Axis(0), keep);
    }
}

/// Feed-forward stack of [`Linear`] layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

/// Intermediate values kept by [`DenseNet::forward_tape`] for the backward pass.
pub struct DenseTape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl DenseNet {
    /// `widths = [in, h1, ..., out]`; hidden layers use `hidden`, the last uses `output`.
    pub fn new(widths: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "a network needs input and output widths");
        let n = widths.len() - 1;
        let layers = widths.windows(2).map(|w| Linear::he_uniform(w[0], w[1], rng)).collect();
        let activations = (0..n).map(|i| if i + 1 == n { output } else { hidden }).collect();
        DenseNet { layers, activations }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::Dimension { expected: self.input_width(), actual: x.ncols() });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.to_owned();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            h = layer.forward(h.view());
            act.apply(&mut h);
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, DenseTape)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let z = layer.forward(h.view());
            inputs.push(h);
            h = z.clone();
            act.apply(&mut h);
            pre.push(z);
        }
        Ok((h, DenseTape { inputs, pre }))
    }

    /// Accumulates into `grads` and returns the gradient w.r.t. the network input.
    pub fn backward(&self, tape: &DenseTape, d_out: ArrayView2<f64>, grads: &mut DenseNet) -> Array2<f64> {
        let mut g = d_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            self.activations[i].backprop(&tape.pre[i], &mut g);
            g = self.layers[i].backward(tape.inputs[i].view(), g.view(), &mut grads.layers[i]);
        }
        g
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(Linear::outputs));
        w
    }
}

impl Parameters for DenseNet {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Linear::tensors).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Linear::tensors_mut).collect()
    }

    fn tensor_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layers.{i}.weight"), format!("layers.{i}.bias")])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    Log,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub frequencies: usize,
    pub min_frequency: f64,
    pub max_frequency: f64,
    pub spacing: Spacing,
    pub seed: u64,
}

impl EmbeddingConfig {
    /// 32 log-spaced frequencies in [1, 1000] for diffusion time in (0, 1].
    pub fn diffusion_time(seed: u64) -> Self {
        EmbeddingConfig { frequencies: 32, min_frequency: 1.0, max_frequency: 1000.0, spacing: Spacing::Log, seed }
    }

    /// 32 linearly spaced frequencies in [0.1, 10] for temperature.
    pub fn temperature(seed: u64) -> Self {
        EmbeddingConfig { frequencies: 32, min_frequency: 0.1, max_frequency: 10.0, spacing: Spacing::Linear, seed }
    }
}

/// Random Fourier features `[sin(f_k v), cos(f_k v)]`. Frequency `k` is drawn
/// (seeded) from the `k`-th of `count` equal strata of the configured range,
/// log- or linearly spaced.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEmbedding {
    pub config: EmbeddingConfig,
    pub frequencies: Vec<f64>,
}

impl FourierEmbedding {
    pub fn new(config: EmbeddingConfig) -> Result<Self> {
        let EmbeddingConfig { frequencies: count, min_frequency: lo, max_frequency: hi, spacing, seed } = config;
        if count == 0 || !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidConfig("embedding needs >= 1 frequency and 0 < min <= max".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = (0..count)
            .map(|k| {
                let u = (k as f64 + rng.gen::<f64>()) / count as f64;
                match spacing {
                    Spacing::Log => lo * (hi / lo).powf(u),
                    Spacing::Linear => lo + (hi - lo) * u,
                }
            })
            .collect();
        Ok(FourierEmbedding { config, frequencies })
    }

    pub fn width(&self) -> usize {
        2 * self.frequencies.len()
    }

    pub fn embed(&self, value: f64) -> Result<Vec<f64>> {
        if !value.is_finite() {
            return Err(Error::NonFinite("embedding input".into()));
        }
        let mut out = vec![0.0; self.width()];
        self.embed_into(value, &mut out);
        Ok(out)
    }

    pub(crate) fn embed_into(&self, value: f64, out: &mut [f64]) {
        let n = self.frequencies.len();
        for (k, f) in self.frequencies.iter().enumerate() {
            let (s, c) = (f * value).sin_cos();
            out[k] = s;
            out[n + k] = c;
        }
    }

    /// Embeddings of several values stacked as rows.
    pub fn embed_rows(&self, values: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros((values.len(), self.width()));
        for (row, &v) in out.rows_mut().into_iter().zip(values) {
            self.embed_into(v, row.into_slice().expect("row-major"));
        }
        out
    }

    /// `|e(a) - e(b)| <= L |a - b|` with `L = sqrt(sum f_k^2)`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.frequencies.iter().map(|f| f * f).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<P> {
    pub config: AdamConfig,
    first: P,
    second: P,
    steps: u64,
}

impl<P: Parameters> Adam<P> {
    pub fn new(params: &P, config: AdamConfig) -> Self {
        Adam { config, first: params.zeros_like(), second: params.zeros_like(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Moment buffers, shaped like the parameters.
    pub fn moments_mut(&mut self) -> (&mut P, &mut P) {
        (&mut self.first, &mut self.second)
    }

    pub fn step(&mut self, params: &mut P, grads: &P) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.first) {
            return Err(Error::Shape("optimizer, parameter and gradient tensors differ".into()));
        }
        self.steps += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let g = grads.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(g)
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
