//! Trained-model checkpoint: every parameter in one little-endian f64 file
//! plus a JSON manifest with architecture, configs and the state book.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, NoiseSchedule, SampleOptions, ScoreNet};
use crate::error::{Error, Result};
use crate::featurize::FeatureConfig;
use crate::io;
use crate::nn::Parameters;
use crate::sim::SystemKind;
use crate::spib::{SpibModel, StateBook};
use crate::trainer::{TrainConfig, Trained};

const MAGIC: &[u8; 8] = b"DSPIBW01";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub version: u32,
    pub system: SystemKind,
    pub feature_config: FeatureConfig,
    pub input_dim: usize,
    pub num_states: usize,
    pub train_config: TrainConfig,
    /// Temperatures present in the training data.
    pub temperatures: Vec<f64>,
    pub book: StateBook,
    pub weights_file: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

/// Encoder, decoder and noise-prediction network with everything needed to
/// encode features and draw latents.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub system: SystemKind,
    pub feature_config: FeatureConfig,
    pub train_config: TrainConfig,
    pub temperatures: Vec<f64>,
    pub model: SpibModel,
    pub score: ScoreNet,
    pub schedule: NoiseSchedule,
    pub book: StateBook,
}

impl ModelBundle {
    pub fn from_training(
        system: SystemKind,
        feature_config: FeatureConfig,
        train_config: TrainConfig,
        temperatures: Vec<f64>,
        trained: Trained,
    ) -> Self {
        ModelBundle {
            system,
            feature_config,
            train_config,
            temperatures,
            model: trained.model,
            score: trained.score,
            schedule: trained.schedule,
            book: trained.book,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.model.encoder.latent_dim()
    }

    pub fn num_states(&self) -> usize {
        self.model.num_states()
    }

    /// Deterministic (posterior-mean) encoding.
    pub fn encode(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.model.encoder.mean(features)
    }

    /// Draw latents from the diffusion prior. Tempered bundles condition on
    /// `temperature` and scale the prior with it; untempered bundles condition
    /// on `temperature` (or their single training temperature) with unit prior.
    pub fn sample(&self, count: usize, temperature: Option<f64>, seed: u64) -> Result<Array2<f64>> {
        let options = self.sample_options(temperature)?;
        sample(&self.score, &self.schedule, count, &options, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn sample_options(&self, temperature: Option<f64>) -> Result<SampleOptions> {
        let conditioning = match (temperature, self.temperatures.as_slice()) {
            (Some(t), _) => t,
            (None, [t]) => *t,
            (None, []) => 1.0,
            (None, _) => return Err(Error::InvalidConfig("multi-temperature bundle needs a sampling temperature".into())),
        };
        Ok(SampleOptions {
            temperature: if self.train_config.tempering { Some(conditioning) } else { None },
            conditioning,
            scale_step_noise: self.train_config.scale_step_noise,
            ..SampleOptions::default()
        })
    }

    fn tensors(&self) -> Vec<(String, &[f64])> {
        let spib = self.model.tensor_names().into_iter().map(|n| format!("spib.{n}")).zip(self.model.tensors());
        let score = self.score.tensor_names().into_iter().map(|n| format!("score.{n}")).zip(self.score.tensors());
        spib.chain(score).collect()
    }

    /// Writes `path` (manifest JSON) and a sibling `.weights` file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let weights = weights_path(path);
        let tensors = self.tensors();
        let mut bytes = Vec::with_capacity(16 + 8 * tensors.iter().map(|t| t.1.len()).sum::<usize>());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (_, t) in &tensors {
            for v in t.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        io::ensure_parent(&weights)?;
        std::fs::write(&weights, bytes).map_err(|e| Error::io(&weights, e))?;
        let manifest = BundleManifest {
            version: BUNDLE_VERSION,
            system: self.system,
            feature_config: self.feature_config.clone(),
            input_dim: self.model.encoder.input_dim(),
            num_states: self.num_states(),
            train_config: self.train_config.clone(),
            temperatures: self.temperatures.clone(),
            book: self.book.clone(),
            weights_file: file_name(&weights),
            tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), len: t.len() }).collect(),
        };
        io::write_json(path, &manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: BundleManifest = io::read_json(path)?;
        if manifest.version != BUNDLE_VERSION {
            return Err(Error::format(path, format!("unsupported bundle version {}", manifest.version)));
        }
        let cfg = &manifest.train_config;
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        // Shapes come from the manifest; values are overwritten below.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = SpibModel::new(manifest.input_dim, cfg.latent_dim, &cfg.decoder_hidden, manifest.num_states, &mut rng);
        let score = ScoreNet::new(cfg.score_config(), &mut rng)?;
        let mut bundle = ModelBundle {
            system: manifest.system,
            feature_config: manifest.feature_config.clone(),
            train_config: cfg.clone(),
            temperatures: manifest.temperatures.clone(),
            model,
            score,
            schedule: cfg.schedule()?,
            book: manifest.book.clone(),
        };
        let expected: Vec<TensorEntry> =
            bundle.tensors().iter().map(|(n, t)| TensorEntry { name: n.clone(), len: t.len() }).collect();
        if expected != manifest.tensors {
            return Err(Error::format(path, "tensor list does not match the declared architecture"));
        }
        let weights = path.with_file_name(&manifest.weights_file);
        let bytes = io::read_bytes(&weights)?;
        let total: usize = expected.iter().map(|t| t.len).sum();
        if bytes.len() != 16 + 8 * total || &bytes[..8] != MAGIC {
            return Err(Error::format(&weights, "weights file has the wrong size or header"));
        }
        let mut values = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for t in bundle.model.tensors_mut().into_iter().chain(bundle.score.tensors_mut()) {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        bundle.model.check_finite().map_err(|e| Error::format(&weights, e.to_string()))?;
        bundle.score.check_finite().map_err(|e| Error::format(&weights, e.to_string()))?;
        Ok(bundle)
    }
}

/// `model.json` -> `model.weights`.
pub fn weights_path(path: &Path) -> PathBuf {
    path.with_extension("weights")
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}
