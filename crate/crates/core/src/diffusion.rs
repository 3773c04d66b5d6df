//! Diffusion latent prior: discretised variance-preserving noise schedule,
//! temperature-conditioned noise-prediction network, the unweighted
//! denoising loss and the ancestral sampler.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EmbeddingConfig, FourierEmbedding, Linear, Parameters};

/// `beta_t` rising linearly from `beta_start` (t = 1) to `beta_end` (t = steps).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "noise schedule needs steps >= 2 and 0 < start < end < 1 (got {steps}, {beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    /// 100 steps from 1e-4 to 0.2.
    pub fn standard() -> Self {
        Self::new(100, 1e-4, 0.2).expect("valid defaults")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { step: t, max: self.steps() });
        }
        Ok(())
    }

    /// Step indices are 1-based throughout.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Noise level `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_noise(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        if z0.len() != eps.len() {
            return Err(Error::Dimension { expected: z0.len(), actual: eps.len() });
        }
        let (a, s) = (self.alpha_bar(t).sqrt(), self.sigma(t));
        Ok(z0.iter().zip(eps).map(|(z, e)| a * z + s * e).collect())
    }

    /// Score of the noising kernel implied by a noise estimate: `-eps / sigma_t`.
    pub fn score_from_noise(&self, eps_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_step(t)?;
        let s = self.sigma(t);
        Ok(eps_hat.iter().map(|e| -e / s).collect())
    }

    fn noise_rows(&self, z0: ArrayView2<f64>, steps: &[usize], eps: ArrayView2<f64>) -> Array2<f64> {
        let mut zt = Array2::zeros(z0.raw_dim());
        for (i, mut row) in zt.rows_mut().into_iter().enumerate() {
            let t = steps[i];
            let (a, s) = (self.alpha_bar(t).sqrt(), self.sigma(t));
            row.assign(&(&z0.row(i) * a + &eps.row(i) * s));
        }
        zt
    }
}

/// Prior standard deviation: `T` when tempering is on, else 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperedPrior {
    pub temperature: Option<f64>,
}

impl TemperedPrior {
    pub fn std(&self) -> f64 {
        self.temperature.unwrap_or(1.0)
    }
}

/// Per-sample noise standard deviations for a batch.
pub fn noise_scales(temperatures: &[f64], tempered: bool) -> Vec<f64> {
    temperatures.iter().map(|&t| if tempered { t } else { 1.0 }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Injection {
    /// Project each embedding to the layer width and add it to the pre-activation.
    Additive,
    /// Concatenate raw embeddings to every layer's input.
    Concatenate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreNetConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    /// Number of linear layers.
    pub layers: usize,
    pub injection: Injection,
    pub diffusion_steps: usize,
    pub time_embedding: EmbeddingConfig,
    pub temperature_embedding: EmbeddingConfig,
}

impl ScoreNetConfig {
    pub fn standard(latent_dim: usize, diffusion_steps: usize, seed: u64) -> Self {
        ScoreNetConfig {
            latent_dim,
            hidden: 256,
            layers: 7,
            injection: Injection::Additive,
            diffusion_steps,
            time_embedding: EmbeddingConfig::diffusion_time(seed),
            temperature_embedding: EmbeddingConfig::temperature(seed.wrapping_add(1)),
        }
    }
}

/// Noise-prediction network `eps_theta(z_t, t, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    pub config: ScoreNetConfig,
    pub layers: Vec<Linear>,
    /// Additive mode only: per hidden layer, embedding-to-width projections.
    pub time_proj: Vec<Array2<f64>>,
    pub temp_proj: Vec<Array2<f64>>,
    time_emb: FourierEmbedding,
    temp_emb: FourierEmbedding,
}

/// Unique embedding rows for a batch plus the row each sample uses.
struct EmbeddingRows {
    table: Array2<f64>,
    index: Vec<usize>,
}

impl EmbeddingRows {
    fn build(emb: &FourierEmbedding, values: impl Iterator<Item = f64>) -> Self {
        let mut lookup: HashMap<u64, usize> = HashMap::new();
        let mut uniq = Vec::new();
        let index = values
            .map(|v| {
                *lookup.entry(v.to_bits()).or_insert_with(|| {
                    uniq.push(v);
                    uniq.len() - 1
                })
            })
            .collect();
        EmbeddingRows { table: emb.embed_rows(&uniq), index }
    }

    fn gathered(&self) -> Array2<f64> {
        self.table.select(Axis(0), &self.index)
    }

    /// `pre[i] += (table * proj)[index[i]]`
    fn add_projection(&self, proj: &Array2<f64>, pre: &mut Array2<f64>) {
        let projected = self.table.dot(proj);
        for (mut row, &k) in pre.rows_mut().into_iter().zip(&self.index) {
            row += &projected.row(k);
        }
    }

    /// `grad += table^T * (rows of d_pre summed per unique value)`
    fn accumulate_projection(&self, d_pre: &Array2<f64>, grad: &mut Array2<f64>) {
        let mut summed = Array2::zeros((self.table.nrows(), d_pre.ncols()));
        for (row, &k) in d_pre.rows().into_iter().zip(&self.index) {
            let mut target = summed.row_mut(k);
            target += &row;
        }
        ndarray::linalg::general_mat_mul(1.0, &self.table.t(), &summed, 1.0, grad);
    }
}

pub struct ScoreTape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    time: EmbeddingRows,
    temp: EmbeddingRows,
}

impl ScoreNet {
    pub fn new(config: ScoreNetConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.layers < 2 || config.hidden == 0 || config.latent_dim == 0 {
            return Err(Error::InvalidConfig("score network needs >= 2 layers and non-zero widths".into()));
        }
        let time_emb = FourierEmbedding::new(config.time_embedding.clone())?;
        let temp_emb = FourierEmbedding::new(config.temperature_embedding.clone())?;
        let extra = match config.injection {
            Injection::Additive => 0,
            Injection::Concatenate => time_emb.width() + temp_emb.width(),
        };
        let (d, h, n) = (config.latent_dim, config.hidden, config.layers);
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let inputs = if i == 0 { d } else { h } + extra;
            if i + 1 == n {
                layers.push(Linear::zeros(inputs, d));
            } else {
                layers.push(Linear::he_uniform(inputs, h, rng));
            }
        }
        let (mut time_proj, mut temp_proj) = (Vec::new(), Vec::new());
        if config.injection == Injection::Additive {
            for _ in 0..n - 1 {
                time_proj.push(Linear::he_uniform(time_emb.width(), h, rng).weight);
                temp_proj.push(Linear::he_uniform(temp_emb.width(), h, rng).weight);
            }
        }
        Ok(ScoreNet { config, layers, time_proj, temp_proj, time_emb, temp_emb })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn time_value(&self, t: usize) -> f64 {
        t as f64 / self.config.diffusion_steps as f64
    }

    pub fn forward_tape(&self, z: ArrayView2<f64>, steps: &[usize], temperatures: &[f64]) -> Result<(Array2<f64>, ScoreTape)> {
        let b = z.nrows();
        if z.ncols() != self.latent_dim() {
            return Err(Error::Dimension { expected: self.latent_dim(), actual: z.ncols() });
        }
        if steps.len() != b || temperatures.len() != b {
            return Err(Error::Shape("one step and one temperature per row required".into()));
        }
        if let Some(&t) = steps.iter().find(|&&t| t == 0 || t > self.config.diffusion_steps) {
            return Err(Error::StepOutOfRange { step: t, max: self.config.diffusion_steps });
        }
        let time = EmbeddingRows::build(&self.time_emb, steps.iter().map(|&t| self.time_value(t)));
        let temp = EmbeddingRows::build(&self.temp_emb, temperatures.iter().copied());
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = z.to_owned();
        match self.config.injection {
            Injection::Additive => {
                for i in 0..n {
                    let mut p = self.layers[i].forward(h.view());
                    if i + 1 < n {
                        time.add_projection(&self.time_proj[i], &mut p);
                        temp.add_projection(&self.temp_proj[i], &mut p);
                    }
                    inputs.push(h);
                    h = if i + 1 < n { p.mapv(|v| v.max(0.0)) } else { p.clone() };
                    pre.push(p);
                }
            }
            Injection::Concatenate => {
                let emb = ndarray::concatenate![Axis(1), time.gathered(), temp.gathered()];
                for i in 0..n {
                    let input = ndarray::concatenate![Axis(1), h, emb];
                    let p = self.layers[i].forward(input.view());
                    inputs.push(input);
                    h = if i + 1 < n { p.mapv(|v| v.max(0.0)) } else { p.clone() };
                    pre.push(p);
                }
            }
        }
        Ok((h, ScoreTape { inputs, pre, time, temp }))
    }

    /// Accumulates parameter gradients and returns `dL/dz`.
    pub fn backward(&self, tape: &ScoreTape, d_out: ArrayView2<f64>, grads: &mut ScoreNet) -> Array2<f64> {
        let n = self.layers.len();
        let width = |i: usize| if i == 0 { self.latent_dim() } else { self.config.hidden };
        let mut g = d_out.to_owned();
        for i in (0..n).rev() {
            if i + 1 < n {
                g.zip_mut_with(&tape.pre[i], |d, &p| {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                });
                if self.config.injection == Injection::Additive {
                    tape.time.accumulate_projection(&g, &mut grads.time_proj[i]);
                    tape.temp.accumulate_projection(&g, &mut grads.temp_proj[i]);
                }
            }
            let d_in = self.layers[i].backward(tape.inputs[i].view(), g.view(), &mut grads.layers[i]);
            g = match self.config.injection {
                Injection::Additive => d_in,
                Injection::Concatenate => d_in.slice(s![.., ..width(i)]).to_owned(),
            };
        }
        g
    }
}

impl Parameters for ScoreNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            t.push(l.weight.as_slice().expect("standard layout"));
            t.push(l.bias.as_slice().expect("standard layout"));
        }
        t.extend(self.time_proj.iter().map(|p| p.as_slice().expect("standard layout")));
        t.extend(self.temp_proj.iter().map(|p| p.as_slice().expect("standard layout")));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            t.push(l.weight.as_slice_mut().expect("standard layout"));
            t.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        t.extend(self.time_proj.iter_mut().map(|p| p.as_slice_mut().expect("standard layout")));
        t.extend(self.temp_proj.iter_mut().map(|p| p.as_slice_mut().expect("standard layout")));
        t
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut n = Vec::new();
        for i in 0..self.layers.len() {
            n.push(format!("layers.{i}.weight"));
            n.push(format!("layers.{i}.bias"));
        }
        n.extend((0..self.time_proj.len()).map(|i| format!("time_proj.{i}")));
        n.extend((0..self.temp_proj.len()).map(|i| format!("temp_proj.{i}")));
        n
    }
}

/// Anything that predicts the injected noise from a noised latent.
pub trait NoisePredictor {
    fn latent_dim(&self) -> usize;
    fn predict(&self, z: ArrayView2<f64>, steps: &[usize], temperatures: &[f64]) -> Result<Array2<f64>>;
}

impl NoisePredictor for ScoreNet {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn predict(&self, z: ArrayView2<f64>, steps: &[usize], temperatures: &[f64]) -> Result<Array2<f64>> {
        Ok(self.forward_tape(z, steps, temperatures)?.0)
    }
}

/// Diffusion steps and noise drawn for one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    pub eps: Array2<f64>,
}

/// Uniform steps in `1..=T_diff`; noise row `i` has standard deviation `scales[i]`.
pub fn draw_noise(rng: &mut impl Rng, schedule: &NoiseSchedule, dim: usize, scales: &[f64]) -> NoiseDraw {
    let steps = scales.iter().map(|_| rng.gen_range(1..=schedule.steps())).collect();
    let mut eps = Array2::zeros((scales.len(), dim));
    for (mut row, &s) in eps.rows_mut().into_iter().zip(scales) {
        row.mapv_inplace(|_| s * Distribution::<f64>::sample(&StandardNormal, rng));
    }
    NoiseDraw { steps, eps }
}

fn check_batch(z0: ArrayView2<f64>, temperatures: &[f64], draw: &NoiseDraw) -> Result<()> {
    if z0.nrows() == 0 {
        return Err(Error::Empty("denoising batch"));
    }
    if temperatures.len() != z0.nrows() || draw.steps.len() != z0.nrows() || draw.eps.dim() != z0.dim() {
        return Err(Error::Shape("latents, temperatures and noise draw disagree".into()));
    }
    Ok(())
}

/// Batch mean of `0.5 * |eps - eps_theta(z_t, t, T)|^2`.
pub fn denoising_loss(
    net: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    z0: ArrayView2<f64>,
    temperatures: &[f64],
    draw: &NoiseDraw,
) -> Result<f64> {
    check_batch(z0, temperatures, draw)?;
    let zt = schedule.noise_rows(z0, &draw.steps, draw.eps.view());
    let pred = net.predict(zt.view(), &draw.steps, temperatures)?;
    let loss = 0.5 * (&draw.eps - &pred).mapv(|v| v * v).sum() / z0.nrows() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("denoising loss".into()));
    }
    Ok(loss)
}

/// Value of [`denoising_loss`] with its gradients: parameter gradients of the
/// network and the gradient with respect to `z0`.
pub fn denoising_loss_grad(
    net: &ScoreNet,
    schedule: &NoiseSchedule,
    z0: ArrayView2<f64>,
    temperatures: &[f64],
    draw: &NoiseDraw,
) -> Result<(f64, ScoreNet, Array2<f64>)> {
    check_batch(z0, temperatures, draw)?;
    let b = z0.nrows() as f64;
    let zt = schedule.noise_rows(z0, &draw.steps, draw.eps.view());
    let (pred, tape) = net.forward_tape(zt.view(), &draw.steps, temperatures)?;
    let resid = &pred - &draw.eps;
    let loss = 0.5 * resid.mapv(|v| v * v).sum() / b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("denoising loss".into()));
    }
    let mut grads = net.zeros_like();
    let d_zt = net.backward(&tape, (resid / b).view(), &mut grads);
    let mut d_z0 = d_zt;
    for (mut row, &t) in d_z0.rows_mut().into_iter().zip(&draw.steps) {
        row *= schedule.alpha_bar(t).sqrt();
    }
    Ok((loss, grads, d_z0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    /// Tempered sampling: prior variance `T^2`; also the network's conditioning.
    pub temperature: Option<f64>,
    /// Conditioning temperature when `temperature` is `None`.
    pub conditioning: f64,
    /// Scale the per-step noise by `T` too, not just the initial draw.
    pub scale_step_noise: bool,
    pub chunk: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { temperature: None, conditioning: 1.0, scale_step_noise: true, chunk: 4096 }
    }
}

/// Ancestral sampling: start from `N(0, sigma^2 I)` and apply
/// `z_{t-1} = (z_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) eps_theta) / sqrt(alpha_t) + sqrt(beta_t) gamma`
/// for `t = T_diff..2`, then a final noiseless mean update at `t = 1`.
pub fn sample(
    net: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    count: usize,
    options: &SampleOptions,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    if count == 0 {
        return Err(Error::InvalidConfig("sample count must be >= 1".into()));
    }
    if let Some(t) = options.temperature {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")));
        }
    }
    let sigma = TemperedPrior { temperature: options.temperature }.std();
    let step_sigma = if options.scale_step_noise { sigma } else { 1.0 };
    let conditioning = options.temperature.unwrap_or(options.conditioning);
    let d = net.latent_dim();
    let mut out = Array2::zeros((count, d));
    let chunk = options.chunk.max(1);
    for start in (0..count).step_by(chunk) {
        let end = (start + chunk).min(count);
        let b = end - start;
        let temps = vec![conditioning; b];
        let mut z = Array2::from_shape_fn((b, d), |_| sigma * Distribution::<f64>::sample(&StandardNormal, rng));
        for t in (1..=schedule.steps()).rev() {
            let steps = vec![t; b];
            let eps = net.predict(z.view(), &steps, &temps)?;
            let coef = (1.0 - schedule.alpha(t)) / schedule.sigma(t);
            z = (&z - &(eps * coef)) / schedule.alpha(t).sqrt();
            if t > 1 {
                let scale = schedule.beta(t).sqrt() * step_sigma;
                z.mapv_inplace(|v| v + scale * Distribution::<f64>::sample(&StandardNormal, rng));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteSample { step: t });
            }
        }
        out.slice_mut(s![start..end, ..]).assign(&z);
    }
    Ok(out)
}

/// Column means and (unbiased) variances, handy for moment checks.
pub fn column_moments(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let var = x.map_axis(Axis(0), |c| {
        let m = c.mean().expect("non-empty");
        c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    });
    (mean, var)
}
