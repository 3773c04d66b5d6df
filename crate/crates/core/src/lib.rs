//! Diffusive state-predictive information bottleneck.
//!
//! A time-lagged variational information-bottleneck encoder/decoder whose
//! latent prior is a temperature-conditioned denoising diffusion model, along
//! with the Langevin benchmarks (three-hole potential, 2D LJ7 cluster) and the
//! histogram-based evaluation used to compare generated and encoded latents.
//!
//! Module map:
//!
//! * [`sim`]: analytic potentials and a BAOAB Langevin integrator.
//! * [`featurize`]: feature extraction, lagged datasets, k-means initial labels.
//! * [`nn`]: dense networks, Fourier embeddings, hand-written backprop, Adam.
//! * [`spib`]: stochastic encoder, state decoder, loss terms, label refinement.
//! * [`diffusion`]: VP noise schedule, noise-prediction network, ancestral sampler.
//! * [`trainer`]: SPIB pretraining followed by the joint objective.
//! * [`eval`]: histograms, symmetrized KL, free-energy profiles, temperature sweeps.
//! * [`recipe`]: TOML experiment recipes, artifact manifests, end-to-end runs.

pub mod bundle;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod io;
pub mod nn;
pub mod recipe;
pub mod sim;
pub mod spib;
pub mod trainer;

pub use bundle::ModelBundle;
pub use error::{Error, Result};
pub use sim::{PotentialSpec, SimulationConfig, SystemKind, Trajectory};

/// Boltzmann constant; simulations run in reduced units.
pub const K_B: f64 = 1.0;
