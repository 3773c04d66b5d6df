//! Two-phase training. Phase one fits the encoder and decoder with a
//! standard-normal latent prior, alternating gradient training with label
//! refinement. Phase two adds the diffusion prior and optimizes
//! `prediction + beta * (posterior + denoising)` jointly.

use std::time::Instant;

use log::{debug, info};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    denoising_loss, denoising_loss_grad, draw_noise, noise_scales, Injection, NoiseSchedule, ScoreNet, ScoreNetConfig,
};
use crate::error::{Error, Result};
use crate::featurize::Dataset;
use crate::nn::{Adam, AdamConfig, EmbeddingConfig, Parameters};
use crate::sim::SystemKind;
use crate::spib::{refine_labels, standard_normal_prior, SpibModel, StateBook};

const INIT_STREAM: u64 = 1;
const SCORE_INIT_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;
const VALIDATION_STREAM: u64 = 4;
const VALIDATION_CHUNK: usize = 4096;

/// Independent, reproducible random stream `stream` derived from `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Quantity watched by early stopping in the joint phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Monitor {
    /// The full objective, `prediction + beta * (posterior + denoising)`.
    Total,
    /// The (unweighted) denoising term alone.
    Denoising,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lag: usize,
    pub latent_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub tolerance: f64,
    pub patience: usize,
    pub refinements: usize,
    pub diffusion_patience: usize,
    pub diffusion_refinements: usize,
    pub diffusion_steps: usize,
    pub noise_beta_start: f64,
    pub noise_beta_end: f64,
    pub seed: u64,
    /// Scale the diffusion prior's noise with temperature.
    pub tempering: bool,
    /// k-means clusters used as the initial labels.
    pub initial_states: usize,
    /// States whose population drops below this fraction are removed.
    pub min_population: f64,
    pub decoder_hidden: Vec<usize>,
    pub score_hidden: usize,
    pub score_layers: usize,
    pub injection: Injection,
    /// Let the denoising term's gradient reach the encoder through `z0`.
    pub joint_gradients: bool,
    /// Hold encoder and decoder fixed in the joint phase.
    pub freeze_encoder: bool,
    /// Temperature scales the per-step sampler noise as well as the initial draw.
    pub scale_step_noise: bool,
    /// Reparameterized latent draws per sample and loss evaluation.
    pub latent_draws: usize,
    /// Epoch cap for one pretraining round.
    pub max_epochs: usize,
    /// Epoch cap for one joint-phase round.
    pub max_diffusion_epochs: usize,
    pub monitor: Monitor,
}

impl TrainConfig {
    pub fn for_system(system: SystemKind) -> Self {
        let (lag, diffusion_patience) = match system {
            SystemKind::ThreeHole => (20, 50),
            SystemKind::Lj7 => (1, 150),
        };
        TrainConfig {
            lag,
            latent_dim: 2,
            batch_size: 512,
            learning_rate: 1e-3,
            beta: 1e-5,
            tolerance: 1e-3,
            patience: 5,
            refinements: 10,
            diffusion_patience,
            diffusion_refinements: 0,
            diffusion_steps: 100,
            noise_beta_start: 1e-4,
            noise_beta_end: 0.2,
            seed: 42,
            tempering: false,
            initial_states: 10,
            min_population: 0.01,
            decoder_hidden: vec![32, 32],
            score_hidden: 256,
            score_layers: 7,
            injection: Injection::Additive,
            joint_gradients: false,
            freeze_encoder: false,
            scale_step_noise: true,
            latent_draws: 1,
            max_epochs: 200,
            max_diffusion_epochs: 400,
            monitor: Monitor::Denoising,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lag", self.lag),
            ("latent_dim", self.latent_dim),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("diffusion_patience", self.diffusion_patience),
            ("diffusion_steps", self.diffusion_steps),
            ("initial_states", self.initial_states),
            ("score_hidden", self.score_hidden),
            ("latent_draws", self.latent_draws),
            ("max_epochs", self.max_epochs),
            ("max_diffusion_epochs", self.max_diffusion_epochs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.score_layers < 2 {
            return Err(Error::InvalidConfig("score_layers must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig("beta must be non-negative".into()));
        }
        if !(self.tolerance >= 0.0 && self.tolerance < 1.0) {
            return Err(Error::InvalidConfig("tolerance must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.min_population) {
            return Err(Error::InvalidConfig("min_population must be in [0, 1)".into()));
        }
        if self.decoder_hidden.contains(&0) {
            return Err(Error::InvalidConfig("decoder_hidden widths must be >= 1".into()));
        }
        NoiseSchedule::new(self.diffusion_steps, self.noise_beta_start, self.noise_beta_end)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.diffusion_steps, self.noise_beta_start, self.noise_beta_end)
    }

    pub fn score_config(&self) -> ScoreNetConfig {
        ScoreNetConfig {
            latent_dim: self.latent_dim,
            hidden: self.score_hidden,
            layers: self.score_layers,
            injection: self.injection,
            diffusion_steps: self.diffusion_steps,
            time_embedding: EmbeddingConfig::diffusion_time(self.seed),
            temperature_embedding: EmbeddingConfig::temperature(self.seed.wrapping_add(1)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Joint,
}

/// Batch-mean loss components. `prior` is `-log N(z; 0, I)` in pretraining
/// and the denoising loss in the joint phase; `total = prediction + beta * (posterior + prior)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub prediction: f64,
    pub posterior: f64,
    pub prior: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn new(prediction: f64, posterior: f64, prior: f64, beta: f64) -> Self {
        LossTerms { prediction, posterior, prior, total: prediction + beta * (posterior + prior) }
    }
}

#[derive(Default)]
struct Accumulator {
    prediction: f64,
    posterior: f64,
    prior: f64,
    weight: f64,
}

impl Accumulator {
    fn add(&mut self, prediction: f64, posterior: f64, prior: f64, rows: usize) {
        let w = rows as f64;
        self.prediction += prediction * w;
        self.posterior += posterior * w;
        self.prior += prior * w;
        self.weight += w;
    }

    fn finish(&self, beta: f64) -> LossTerms {
        let w = self.weight.max(1.0);
        LossTerms::new(self.prediction / w, self.posterior / w, self.prior / w, beta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub round: usize,
    pub epoch: usize,
    pub states: usize,
    pub train: LossTerms,
    pub validation: LossTerms,
    pub monitored: f64,
    pub improved: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    LabelsConverged,
    RefinementBudget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub phase: Phase,
    pub round: usize,
    pub epochs: usize,
    pub stop: StopReason,
    pub best_epoch: usize,
    pub best_monitored: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementLog {
    pub phase: Phase,
    pub round: usize,
    pub changed_fraction: f64,
    pub states_before: usize,
    pub states_after: usize,
}

/// An improvement of the monitored validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub phase: Phase,
    pub round: usize,
    pub epoch: usize,
    pub monitored: f64,
    pub validation: LossTerms,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub beta: f64,
    pub epochs: Vec<EpochLog>,
    pub rounds: Vec<RoundSummary>,
    pub refinements: Vec<RefinementLog>,
    pub checkpoints: Vec<Checkpoint>,
    pub phase_stops: Vec<(Phase, StopReason)>,
    /// Seconds per phase; kept out of serialized (hashed) output.
    #[serde(skip)]
    pub wall_clock: Vec<(Phase, f64)>,
}

impl TrainReport {
    /// Active-state count after each logged epoch.
    pub fn state_history(&self) -> Vec<usize> {
        self.epochs.iter().map(|e| e.states).collect()
    }

    pub fn final_states(&self) -> Option<usize> {
        self.refinements.last().map(|r| r.states_after).or_else(|| self.epochs.last().map(|e| e.states))
    }
}

/// Encoder/decoder after pretraining, with the optimizer that continues into
/// the joint phase.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: SpibModel,
    pub book: StateBook,
    pub optimizer: Adam<SpibModel>,
    pub report: TrainReport,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: SpibModel,
    pub score: ScoreNet,
    pub schedule: NoiseSchedule,
    pub book: StateBook,
    pub report: TrainReport,
}

struct Batch {
    x: Array2<f64>,
    labels: Vec<usize>,
    temperatures: Vec<f64>,
}

impl Batch {
    fn gather(ds: &Dataset, starts: &[usize], draws: usize) -> Batch {
        let idx: Vec<usize> = starts.iter().flat_map(|&n| std::iter::repeat_n(n, draws)).collect();
        Batch {
            x: ds.features.select(Axis(0), &idx),
            labels: idx.iter().map(|&n| ds.labels[n + ds.lag]).collect(),
            temperatures: idx.iter().map(|&n| ds.temperature(n)).collect(),
        }
    }

    fn rows(&self) -> usize {
        self.labels.len()
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| Distribution::<f64>::sample(&StandardNormal, rng))
}

struct Session<'a> {
    config: &'a TrainConfig,
    dataset: &'a mut Dataset,
    schedule: NoiseSchedule,
    model: SpibModel,
    book: StateBook,
    optimizer: Adam<SpibModel>,
    score: Option<(ScoreNet, Adam<ScoreNet>)>,
    rng: ChaCha8Rng,
    report: TrainReport,
}

impl Session<'_> {
    fn train_epoch(&mut self, phase: Phase) -> Result<LossTerms> {
        let cfg = self.config;
        let beta = cfg.beta;
        let mut order = self.dataset.train_pairs().to_vec();
        order.shuffle(&mut self.rng);
        let mut acc = Accumulator::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::gather(self.dataset, chunk, cfg.latent_draws);
            let noise = normal_matrix(batch.rows(), cfg.latent_dim, &mut self.rng);
            let fwd = self.model.forward(batch.x.view(), noise.view())?;
            let terms = self.model.terms(&fwd, &batch.labels)?;
            let prior = match phase {
                Phase::Pretrain => {
                    let (prior, dz) = standard_normal_prior(fwd.z.view());
                    let grads = self.model.backward(&fwd, &batch.labels, beta, Some((dz * beta).view()))?;
                    grads.check_finite()?;
                    self.optimizer.step(&mut self.model, &grads)?;
                    prior
                }
                Phase::Joint => {
                    let (score, score_opt) = self.score.as_mut().expect("score network in joint phase");
                    let scales = noise_scales(&batch.temperatures, cfg.tempering);
                    let draw = draw_noise(&mut self.rng, &self.schedule, cfg.latent_dim, &scales);
                    let (den, mut score_grads, dz0) =
                        denoising_loss_grad(score, &self.schedule, fwd.z.view(), &batch.temperatures, &draw)?;
                    if !cfg.freeze_encoder {
                        let extra = cfg.joint_gradients.then(|| dz0 * beta);
                        let grads = self.model.backward(&fwd, &batch.labels, beta, extra.as_ref().map(|e| e.view()))?;
                        grads.check_finite()?;
                        self.optimizer.step(&mut self.model, &grads)?;
                    }
                    score_grads.scale(beta);
                    score_grads.check_finite()?;
                    score_opt.step(score, &score_grads)?;
                    den
                }
            };
            acc.add(terms.prediction, terms.posterior, prior, batch.rows());
        }
        Ok(acc.finish(beta))
    }

    /// Validation terms with a fixed random stream, so successive epochs
    /// differ only through the parameters.
    fn validate(&self, phase: Phase) -> Result<LossTerms> {
        let cfg = self.config;
        let pairs = self.dataset.validation_pairs();
        if pairs.is_empty() {
            return Err(Error::Empty("validation pairs"));
        }
        let mut rng = rng_stream(cfg.seed, VALIDATION_STREAM);
        let mut acc = Accumulator::default();
        for chunk in pairs.chunks(VALIDATION_CHUNK) {
            let batch = Batch::gather(self.dataset, chunk, cfg.latent_draws);
            let noise = normal_matrix(batch.rows(), cfg.latent_dim, &mut rng);
            let fwd = self.model.forward(batch.x.view(), noise.view())?;
            let terms = self.model.terms(&fwd, &batch.labels)?;
            let prior = match phase {
                Phase::Pretrain => standard_normal_prior(fwd.z.view()).0,
                Phase::Joint => {
                    let (score, _) = self.score.as_ref().expect("score network in joint phase");
                    let scales = noise_scales(&batch.temperatures, cfg.tempering);
                    let draw = draw_noise(&mut rng, &self.schedule, cfg.latent_dim, &scales);
                    denoising_loss(score, &self.schedule, fwd.z.view(), &batch.temperatures, &draw)?
                }
            };
            acc.add(terms.prediction, terms.posterior, prior, batch.rows());
        }
        Ok(acc.finish(cfg.beta))
    }

    fn monitored(&self, phase: Phase, terms: &LossTerms) -> f64 {
        match (phase, self.config.monitor) {
            (Phase::Joint, Monitor::Denoising) => terms.prior,
            _ => terms.total,
        }
    }

    /// Train until the monitored validation loss stops improving, then restore
    /// the best parameters.
    fn train_round(&mut self, phase: Phase, round: usize) -> Result<()> {
        let cfg = self.config;
        let (patience, max_epochs) = match phase {
            Phase::Pretrain => (cfg.patience, cfg.max_epochs),
            Phase::Joint => (cfg.diffusion_patience, cfg.max_diffusion_epochs),
        };
        let mut best = f64::INFINITY;
        let mut best_epoch = 0;
        let mut best_params = (self.model.clone(), self.score.as_ref().map(|s| s.0.clone()));
        let mut stale = 0;
        let mut stop = StopReason::MaxEpochs;
        let mut epochs = 0;
        for epoch in 0..max_epochs {
            let train = self.train_epoch(phase)?;
            let validation = self.validate(phase)?;
            let monitored = self.monitored(phase, &validation);
            if !monitored.is_finite() {
                return Err(Error::Diverged { phase: phase_name(phase), epoch });
            }
            let improved = !best.is_finite() || monitored < best - cfg.tolerance * best.abs();
            if improved {
                best = monitored;
                best_epoch = epoch;
                best_params = (self.model.clone(), self.score.as_ref().map(|s| s.0.clone()));
                stale = 0;
                self.report.checkpoints.push(Checkpoint { phase, round, epoch, monitored, validation });
            } else {
                stale += 1;
            }
            debug!(
                "{} round {round} epoch {epoch}: train {:.6} val {:.6} prior {:.5}{}",
                phase_name(phase),
                train.total,
                validation.total,
                validation.prior,
                if improved { " *" } else { "" }
            );
            self.report.epochs.push(EpochLog {
                phase,
                round,
                epoch,
                states: self.model.num_states(),
                train,
                validation,
                monitored,
                improved,
            });
            epochs = epoch + 1;
            if stale >= patience {
                stop = StopReason::Patience;
                break;
            }
        }
        self.model = best_params.0;
        if let (Some(params), Some((score, _))) = (best_params.1, self.score.as_mut()) {
            *score = params;
        }
        info!(
            "{} round {round}: {epochs} epochs, stop {:?}, best {best:.6} at epoch {best_epoch}",
            phase_name(phase),
            stop
        );
        self.report.rounds.push(RoundSummary { phase, round, epochs, stop, best_epoch, best_monitored: best });
        Ok(())
    }

    fn refine(&mut self, phase: Phase, round: usize) -> Result<f64> {
        let before = self.model.num_states();
        let r = refine_labels(
            &self.model,
            self.dataset.features.view(),
            &self.dataset.labels,
            &self.book,
            self.config.min_population,
            round,
        )?;
        if r.keep.len() < before {
            self.model.retain_states(&r.keep);
            let (m, v) = self.optimizer.moments_mut();
            m.retain_states(&r.keep);
            v.retain_states(&r.keep);
        }
        let after = r.keep.len();
        self.dataset.relabel(r.labels, after);
        self.book = r.book;
        info!("{} refinement {round}: {before} -> {after} states, {:.4} relabeled", phase_name(phase), r.changed_fraction);
        self.report.refinements.push(RefinementLog {
            phase,
            round,
            changed_fraction: r.changed_fraction,
            states_before: before,
            states_after: after,
        });
        Ok(r.changed_fraction)
    }

    fn run_phase(&mut self, phase: Phase, refinements: usize) -> Result<()> {
        let start = Instant::now();
        let mut round = 0;
        let stop = loop {
            self.train_round(phase, round)?;
            if round == refinements {
                break StopReason::RefinementBudget;
            }
            round += 1;
            if self.refine(phase, round)? < self.config.tolerance {
                break StopReason::LabelsConverged;
            }
        };
        self.report.phase_stops.push((phase, stop));
        self.report.wall_clock.push((phase, start.elapsed().as_secs_f64()));
        Ok(())
    }
}

fn phase_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Pretrain => "pretrain",
        Phase::Joint => "joint",
    }
}

fn check_dataset(config: &TrainConfig, dataset: &Dataset) -> Result<()> {
    config.validate()?;
    if dataset.lag != config.lag {
        return Err(Error::InvalidConfig(format!("dataset lag {} differs from configured lag {}", dataset.lag, config.lag)));
    }
    if dataset.train_pairs().is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    if dataset.num_states < 2 {
        return Err(Error::StateCollapse { remaining: dataset.num_states });
    }
    Ok(())
}

/// Phase one: fit encoder and decoder under the standard-normal prior,
/// refining labels (in place in `dataset`) between rounds.
pub fn pretrain_spib(config: &TrainConfig, dataset: &mut Dataset) -> Result<Pretrained> {
    check_dataset(config, dataset)?;
    let mut init = rng_stream(config.seed, INIT_STREAM);
    let model = SpibModel::new(
        dataset.feature_dim(),
        config.latent_dim,
        &config.decoder_hidden,
        dataset.num_states,
        &mut init,
    );
    let optimizer = Adam::new(&model, AdamConfig::with_learning_rate(config.learning_rate));
    let book = StateBook::from_labels(&dataset.labels, dataset.num_states);
    let mut session = Session {
        config,
        schedule: config.schedule()?,
        dataset,
        model,
        book,
        optimizer,
        score: None,
        rng: rng_stream(config.seed, BATCH_STREAM),
        report: TrainReport { beta: config.beta, ..Default::default() },
    };
    session.run_phase(Phase::Pretrain, config.refinements)?;
    Ok(Pretrained { model: session.model, book: session.book, optimizer: session.optimizer, report: session.report })
}

/// Phase two: add the diffusion prior and optimize the joint objective.
/// Labels stay fixed unless `diffusion_refinements > 0`.
pub fn train_joint(config: &TrainConfig, dataset: &mut Dataset, pretrained: Pretrained) -> Result<Trained> {
    check_dataset(config, dataset)?;
    if pretrained.model.num_states() != dataset.num_states {
        return Err(Error::Shape("pretrained decoder and dataset labels disagree on the state count".into()));
    }
    let score = ScoreNet::new(config.score_config(), &mut rng_stream(config.seed, SCORE_INIT_STREAM))?;
    let score_opt = Adam::new(&score, AdamConfig::with_learning_rate(config.learning_rate));
    let mut rng = rng_stream(config.seed, BATCH_STREAM);
    rng.set_word_pos(1 << 40);
    let mut session = Session {
        config,
        schedule: config.schedule()?,
        dataset,
        model: pretrained.model,
        book: pretrained.book,
        optimizer: pretrained.optimizer,
        score: Some((score, score_opt)),
        rng,
        report: pretrained.report,
    };
    session.run_phase(Phase::Joint, config.diffusion_refinements)?;
    let (score, _) = session.score.take().expect("score network");
    Ok(Trained { model: session.model, score, schedule: session.schedule, book: session.book, report: session.report })
}

/// Both phases back to back.
pub fn train(config: &TrainConfig, dataset: &mut Dataset) -> Result<Trained> {
    let pretrained = pretrain_spib(config, dataset)?;
    train_joint(config, dataset, pretrained)
}
