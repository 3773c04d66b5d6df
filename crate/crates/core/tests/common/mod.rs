//! Oracle checks shared by the property tests and the acceptance runner.
//! Each returns the measured quantity so callers can apply their tolerance.
#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dspib_core::diffusion::{
    self, denoising_loss, denoising_loss_grad, draw_noise, NoiseSchedule, NoisePredictor, SampleOptions, ScoreNet,
    ScoreNetConfig,
};
use dspib_core::eval::{self, Binning};
use dspib_core::nn::{Adam, AdamConfig, Parameters};
use dspib_core::sim::{
    initial_coordinates, potential_energy, potential_gradient, Boundary, Harmonic, Langevin, PotentialSpec,
    SimulationConfig, SystemKind,
};
use dspib_core::spib::{standard_normal_prior, SpibModel};
use dspib_core::trainer::rng_stream;
use dspib_core::Result;

pub fn normal(rng: &mut impl Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng))
}

/// `|a - b| / (|a| + |b|)` over whole vectors; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst per-point relative error of the analytic potential gradient
/// against central differences.
pub fn potential_gradient_error(system: SystemKind, points: usize, seed: u64) -> f64 {
    let spec = PotentialSpec::for_system(system);
    let mut rng = rng_stream(seed, 0);
    let base = initial_coordinates(&spec);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x: Vec<f64> = match system {
            SystemKind::ThreeHole => vec![rng.gen_range(-2.0..2.0), rng.gen_range(-1.5..2.5)],
            SystemKind::Lj7 => base.iter().map(|b| b + 0.08 * normal(&mut rng)).collect(),
        };
        let g = potential_gradient(&spec, &x).unwrap();
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                (potential_energy(&spec, &p).unwrap() - potential_energy(&spec, &m).unwrap()) / (2.0 * h)
            })
            .collect();
        worst = worst.max(relative_error(&g, &fd));
    }
    worst
}

/// Central differences of `f` at `count` randomly chosen parameter entries,
/// compared with `grads` at the same entries.
pub fn fd_parameters<P: Parameters>(params: &P, grads: &P, count: usize, seed: u64, f: impl Fn(&P) -> f64) -> f64 {
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = rng_stream(seed, 99);
    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..count.min(total) {
        let mut k = rng.gen_range(0..total);
        let mut tensor = 0;
        while k >= sizes[tensor] {
            k -= sizes[tensor];
            tensor += 1;
        }
        let mut p = params.clone();
        p.tensors_mut()[tensor][k] += h;
        let up = f(&p);
        p.tensors_mut()[tensor][k] -= 2.0 * h;
        let down = f(&p);
        numeric.push((up - down) / (2.0 * h));
        analytic.push(grads.tensors()[tensor][k]);
    }
    relative_error(&analytic, &numeric)
}

/// Central differences with respect to every entry of a small matrix.
pub fn fd_matrix(x: &Array2<f64>, grad: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let h = 1e-6;
    let mut numeric = Vec::new();
    for idx in 0..x.len() {
        let mut p = x.clone();
        p.as_slice_mut().unwrap()[idx] += h;
        let up = f(&p);
        p.as_slice_mut().unwrap()[idx] -= 2.0 * h;
        numeric.push((up - f(&p)) / (2.0 * h));
    }
    relative_error(grad.as_slice().unwrap(), &numeric)
}

pub struct LossFixture {
    pub model: SpibModel,
    pub score: ScoreNet,
    pub schedule: NoiseSchedule,
    pub x: Array2<f64>,
    pub noise: Array2<f64>,
    pub labels: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub draw: diffusion::NoiseDraw,
    pub beta: f64,
}

impl LossFixture {
    /// Small model and batch; the output layer of the score network is given
    /// random weights so its gradients are not trivially zero.
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_stream(seed, 5);
        let (batch, input, latent, states) = (16, 3, 2, 3);
        let model = SpibModel::new(input, latent, &[8, 8], states, &mut rng);
        let mut config = ScoreNetConfig::standard(latent, 100, seed);
        config.hidden = 16;
        config.layers = 3;
        let mut score = ScoreNet::new(config, &mut rng).unwrap();
        for w in score.layers.last_mut().unwrap().weight.iter_mut() {
            *w = 0.3 * normal(&mut rng);
        }
        let schedule = NoiseSchedule::standard();
        let temperatures: Vec<f64> = (0..batch).map(|i| 0.2 + 0.1 * (i % 4) as f64).collect();
        let scales = diffusion::noise_scales(&temperatures, true);
        LossFixture {
            x: normal_matrix(batch, input, &mut rng),
            noise: normal_matrix(batch, latent, &mut rng),
            labels: (0..batch).map(|_| rng.gen_range(0..states)).collect(),
            draw: draw_noise(&mut rng, &schedule, latent, &scales),
            model,
            score,
            schedule,
            temperatures,
            beta: 0.3,
        }
    }

    pub fn pretrain_loss(&self, model: &SpibModel) -> f64 {
        let fwd = model.forward(self.x.view(), self.noise.view()).unwrap();
        let terms = model.terms(&fwd, &self.labels).unwrap();
        terms.prediction + self.beta * (terms.posterior + standard_normal_prior(fwd.z.view()).0)
    }

    pub fn joint_loss(&self, model: &SpibModel, score: &ScoreNet) -> f64 {
        let fwd = model.forward(self.x.view(), self.noise.view()).unwrap();
        let terms = model.terms(&fwd, &self.labels).unwrap();
        let den = denoising_loss(score, &self.schedule, fwd.z.view(), &self.temperatures, &self.draw).unwrap();
        terms.prediction + self.beta * (terms.posterior + den)
    }

    /// Relative FD error of the phase-one objective gradient.
    pub fn pretrain_error(&self) -> f64 {
        let fwd = self.model.forward(self.x.view(), self.noise.view()).unwrap();
        let (_, dz) = standard_normal_prior(fwd.z.view());
        let grads = self.model.backward(&fwd, &self.labels, self.beta, Some((dz * self.beta).view())).unwrap();
        fd_parameters(&self.model, &grads, 100, 1, |m| self.pretrain_loss(m))
    }

    /// Relative FD errors of the joint objective with respect to the encoder
    /// and decoder (gradient through `z0` enabled) and to the score network.
    pub fn joint_errors(&self) -> (f64, f64) {
        let fwd = self.model.forward(self.x.view(), self.noise.view()).unwrap();
        let (_, mut score_grads, dz0) =
            denoising_loss_grad(&self.score, &self.schedule, fwd.z.view(), &self.temperatures, &self.draw).unwrap();
        let grads = self.model.backward(&fwd, &self.labels, self.beta, Some((dz0 * self.beta).view())).unwrap();
        score_grads.scale(self.beta);
        let model_err = fd_parameters(&self.model, &grads, 100, 2, |m| self.joint_loss(m, &self.score));
        let score_err = fd_parameters(&self.score, &score_grads, 100, 3, |s| self.joint_loss(&self.model, s));
        (model_err, score_err)
    }

    /// Relative FD errors of the bare denoising loss with respect to the
    /// score network and to `z0`.
    pub fn denoising_errors(&self) -> (f64, f64) {
        let z0 = self.noise.clone();
        let loss = |s: &ScoreNet, z: &Array2<f64>| {
            denoising_loss(s, &self.schedule, z.view(), &self.temperatures, &self.draw).unwrap()
        };
        let (_, grads, dz0) =
            denoising_loss_grad(&self.score, &self.schedule, z0.view(), &self.temperatures, &self.draw).unwrap();
        let param_err = fd_parameters(&self.score, &grads, 100, 4, |s| loss(s, &z0));
        let z_err = fd_matrix(&z0, &dz0, |z| loss(&self.score, z));
        (param_err, z_err)
    }
}

/// BAOAB on `k/2 (x - c)^2` in 1D: relative errors of the sampled mean and
/// variance against `c` and `kT / k`.
pub fn harmonic_thermostat(seed: u64) -> (f64, f64) {
    let (k, c, kt) = (4.0, 1.0, 0.5);
    let config = SimulationConfig {
        temperature: kt,
        friction: 1.0,
        timestep: 0.01,
        n_steps: 2_000_000,
        record_stride: 10,
        seed,
        boundary: Boundary::None,
        box_half_width: 3.0,
        mass: 1.0,
    };
    let mut engine = Langevin::with_coordinates(Harmonic { stiffness: k, center: vec![c] }, config, vec![c]).unwrap();
    let (mut n, mut sum, mut sum2) = (0.0, 0.0, 0.0);
    engine
        .run_with(2_000_000, |step, pos, _| {
            if step % 10 == 0 {
                n += 1.0;
                sum += pos[0];
                sum2 += pos[0] * pos[0];
            }
        })
        .unwrap();
    let mean = sum / n;
    let var = sum2 / n - mean * mean;
    ((mean - c).abs() / c, (var - kt / k).abs() / (kt / k))
}

/// Time-averaged kinetic energy per degree of freedom of LJ7 at `T`, as a
/// relative deviation from `T / 2`, over `frames` recorded frames.
pub fn lj7_equipartition(temperature: f64, frames: u64, seed: u64) -> f64 {
    let stride = 10;
    let config = SimulationConfig { seed, ..SimulationConfig::lj7(temperature) };
    let mut engine = Langevin::new(PotentialSpec::for_system(SystemKind::Lj7), config).unwrap();
    let mut ke = 0.0;
    let mut count = 0.0;
    engine
        .run_with(frames * stride, |step, _, vel| {
            if step % stride == 0 {
                ke += 0.5 * vel.iter().map(|v| v * v).sum::<f64>() / vel.len() as f64;
                count += 1.0;
            }
        })
        .unwrap();
    (ke / count - 0.5 * temperature).abs() / (0.5 * temperature)
}

/// Step-by-step Markov noising versus the one-shot closed form: worst
/// relative error of the sample means and variances across a few steps.
pub fn chain_vs_closed_form(draws: usize, seed: u64) -> f64 {
    let schedule = NoiseSchedule::standard();
    let mut rng = rng_stream(seed, 0);
    let z0 = [1.5, -0.7];
    let checkpoints = [1usize, 10, 50, 100];
    let mut chain = vec![Vec::new(); checkpoints.len()];
    let mut shot = vec![Vec::new(); checkpoints.len()];
    for _ in 0..draws {
        let mut z = z0.to_vec();
        let mut c = 0;
        for t in 1..=schedule.steps() {
            for v in z.iter_mut() {
                *v = schedule.alpha(t).sqrt() * *v + schedule.beta(t).sqrt() * normal(&mut rng);
            }
            if t == checkpoints[c] {
                chain[c].push(z.clone());
                let eps = [normal(&mut rng), normal(&mut rng)];
                shot[c].push(schedule.forward_noise(&z0, t, &eps).unwrap());
                c = (c + 1).min(checkpoints.len() - 1);
            }
        }
    }
    let mut worst: f64 = 0.0;
    for (a, b) in chain.iter().zip(&shot) {
        let (ma, va) = moments(a);
        let (mb, vb) = moments(b);
        for d in 0..2 {
            // means near zero are compared on the scale of their spread
            let scale = ma[d].abs().max(va[d].sqrt());
            worst = worst.max((ma[d] - mb[d]).abs() / scale);
            worst = worst.max((va[d] - vb[d]).abs() / va[d]);
        }
    }
    worst
}

fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let a = Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j]);
    let (m, v) = diffusion::column_moments(a.view());
    (m.to_vec(), v.to_vec())
}

/// Analytic noise predictor for standard-normal data (or `N(0, T^2)` data
/// with tempered noise): `eps(z_t, t) = sqrt(1 - alpha_bar_t) z_t`.
pub struct GaussianOracle {
    pub schedule: NoiseSchedule,
    pub dim: usize,
}

impl NoisePredictor for GaussianOracle {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, z: ArrayView2<f64>, steps: &[usize], _temperatures: &[f64]) -> Result<Array2<f64>> {
        let mut out = z.to_owned();
        for (mut row, &t) in out.rows_mut().into_iter().zip(steps) {
            row *= self.schedule.sigma(t);
        }
        Ok(out)
    }
}

/// Sampler driven by the Gaussian oracle: worst |mean| and worst relative
/// variance error per coordinate.
pub fn gaussian_oracle_sampler(count: usize, seed: u64) -> (f64, f64) {
    let oracle = GaussianOracle { schedule: NoiseSchedule::standard(), dim: 2 };
    let z = diffusion::sample(&oracle, &oracle.schedule, count, &SampleOptions::default(), &mut rng_stream(seed, 0))
        .unwrap();
    let (m, v) = diffusion::column_moments(z.view());
    (m.iter().fold(0.0_f64, |a, x| a.max(x.abs())), v.iter().fold(0.0_f64, |a, x| a.max((x - 1.0).abs())))
}

/// Tempered sampling with the oracle at several temperatures: worst relative
/// deviation of the per-coordinate std from `T`.
pub fn tempering_linearity(count: usize, seed: u64) -> f64 {
    let oracle = GaussianOracle { schedule: NoiseSchedule::standard(), dim: 2 };
    let mut worst: f64 = 0.0;
    for (i, t) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let opts = SampleOptions { temperature: Some(t), ..Default::default() };
        let z = diffusion::sample(&oracle, &oracle.schedule, count, &opts, &mut rng_stream(seed, i as u64)).unwrap();
        let (_, v) = diffusion::column_moments(z.view());
        worst = v.iter().fold(worst, |a, x| a.max((x.sqrt() - t).abs() / t));
    }
    worst
}

pub struct MixtureResult {
    pub weight_error: f64,
    pub mean_error: f64,
    pub final_loss: f64,
}

/// Train a small score network on a two-component Gaussian mixture in 2D and
/// sample from it; components are assigned by nearest true mean.
pub fn mixture_oracle(seed: u64, steps: usize, count: usize) -> MixtureResult {
    let weights = [0.3, 0.7];
    let means = [[-2.0, 1.0], [2.0, -0.5]];
    let spread = 0.5;
    let mut rng = rng_stream(seed, 0);
    let draw_data = |n: usize, rng: &mut ChaCha8Rng| {
        let mut x = Array2::zeros((n, 2));
        for mut row in x.rows_mut() {
            let c = usize::from(rng.gen::<f64>() >= weights[0]);
            row[0] = means[c][0] + spread * normal(rng);
            row[1] = means[c][1] + spread * normal(rng);
        }
        x
    };
    let mut config = ScoreNetConfig::standard(2, 100, seed);
    config.hidden = 128;
    config.layers = 4;
    let schedule = NoiseSchedule::standard();
    let mut net = ScoreNet::new(config, &mut rng).unwrap();
    let mut opt = Adam::new(&net, AdamConfig::with_learning_rate(1e-3));
    let batch = 256;
    let temps = vec![1.0; batch];
    let scales = vec![1.0; batch];
    let tail = steps.min(200);
    let mut recent = 0.0;
    for step in 0..steps {
        let x = draw_data(batch, &mut rng);
        let draw = draw_noise(&mut rng, &schedule, 2, &scales);
        let (loss, grads, _) = denoising_loss_grad(&net, &schedule, x.view(), &temps, &draw).unwrap();
        opt.step(&mut net, &grads).unwrap();
        if step + tail >= steps {
            recent += loss / tail as f64;
        }
    }
    let z = diffusion::sample(&net, &schedule, count, &SampleOptions::default(), &mut rng).unwrap();
    let mut counts = [0.0; 2];
    let mut sums = [[0.0; 2]; 2];
    for row in z.rows() {
        let d: Vec<f64> = means.iter().map(|m| (row[0] - m[0]).powi(2) + (row[1] - m[1]).powi(2)).collect();
        let c = usize::from(d[1] < d[0]);
        counts[c] += 1.0;
        sums[c][0] += row[0];
        sums[c][1] += row[1];
    }
    let mut weight_error: f64 = 0.0;
    let mut mean_error: f64 = 0.0;
    for c in 0..2 {
        weight_error = weight_error.max((counts[c] / count as f64 - weights[c]).abs());
        for d in 0..2 {
            mean_error = mean_error.max((sums[c][d] / counts[c].max(1.0) - means[c][d]).abs());
        }
    }
    MixtureResult { weight_error, mean_error, final_loss: recent }
}

pub struct KlChecks {
    pub identical: f64,
    pub asymmetry: f64,
    pub analytic: f64,
}

/// KL of a set with itself, the asymmetry under swapping arguments, and the
/// symmetrized KL between N(0,1) and N(1,1) samples (analytically 0.5).
pub fn kl_checks(samples: usize, seed: u64) -> KlChecks {
    let mut rng = rng_stream(seed, 0);
    let p = Array2::from_shape_fn((samples, 1), |_| normal(&mut rng));
    let q = Array2::from_shape_fn((samples, 1), |_| 1.0 + normal(&mut rng));
    let fine = Binning::covering(&[p.view(), q.view()], 200, eval::DEFAULT_PADDING).unwrap();
    let pq = eval::kl_between(p.view(), q.view(), &fine).unwrap();
    let qp = eval::kl_between(q.view(), p.view(), &fine).unwrap();
    let self_bins = Binning::covering(&[p.view()], 50, eval::DEFAULT_PADDING).unwrap();
    KlChecks {
        identical: eval::kl_between(p.view(), p.view(), &self_bins).unwrap(),
        asymmetry: (pq - qp).abs(),
        analytic: pq,
    }
}
