use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::potential::{ForceField, PotentialSpec, SystemKind, LJ7_PARTICLES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Specular reflection at the walls of a square box centred on the origin.
    Reflective,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// k_B·T in energy units.
    pub temperature: f64,
    pub friction: f64,
    pub timestep: f64,
    pub n_steps: u64,
    pub record_stride: u64,
    pub seed: u64,
    pub boundary: Boundary,
    /// Half-width of the reflective box.
    #[serde(default = "default_box")]
    pub box_half_width: f64,
    #[serde(default = "default_mass")]
    pub mass: f64,
}

fn default_box() -> f64 {
    3.0
}

fn default_mass() -> f64 {
    1.0
}

impl SimulationConfig {
    pub fn three_hole() -> Self {
        SimulationConfig {
            temperature: 1.0,
            friction: 1.0,
            timestep: 0.001,
            n_steps: 50_000_000,
            record_stride: 50,
            seed: 42,
            boundary: Boundary::Reflective,
            box_half_width: default_box(),
            mass: default_mass(),
        }
    }

    pub fn lj7(temperature: f64) -> Self {
        SimulationConfig {
            temperature,
            friction: 1.0,
            timestep: 0.005,
            n_steps: 10_000_000,
            record_stride: 100,
            seed: 42,
            boundary: Boundary::None,
            box_half_width: default_box(),
            mass: default_mass(),
        }
    }

    pub fn for_system(kind: SystemKind, temperature: f64) -> Self {
        match kind {
            SystemKind::ThreeHole => SimulationConfig { temperature, ..Self::three_hole() },
            SystemKind::Lj7 => Self::lj7(temperature),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.timestep > 0.0) {
            return bad("timestep must be > 0");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.friction >= 0.0) || !(self.mass > 0.0) {
            return bad("friction must be >= 0 and mass > 0");
        }
        if self.record_stride < 1 || self.n_steps < self.record_stride {
            return bad("require n_steps >= record_stride >= 1");
        }
        if self.boundary == Boundary::Reflective && !(self.box_half_width > 0.0) {
            return bad("reflective box needs a positive half-width");
        }
        Ok(())
    }
}

/// Recorded simulation frames. Coordinates are stored in single precision,
/// exactly as they appear on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub system: SystemKind,
    pub dim: usize,
    pub frames: Vec<f32>,
    pub temperature: f64,
    pub record_stride: u64,
    pub seed: u64,
    pub config_hash: String,
}

impl Trajectory {
    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frame_f64(&self, i: usize) -> Vec<f64> {
        self.frame(i).iter().map(|&v| v as f64).collect()
    }
}

/// Starting configuration inside a deep basin: (1, 0) for the three-hole
/// particle, a centred hexagon at the pair-potential minimum for LJ7.
pub fn initial_coordinates(spec: &PotentialSpec) -> Vec<f64> {
    match spec.kind {
        SystemKind::ThreeHole => vec![1.0, 0.0],
        SystemKind::Lj7 => {
            let r = 2f64.powf(1.0 / 6.0) * spec.sigma;
            let mut coords = vec![0.0; 2 * LJ7_PARTICLES];
            for k in 0..6 {
                let angle = std::f64::consts::PI / 3.0 * k as f64;
                coords[2 * (k + 1)] = r * angle.cos();
                coords[2 * (k + 1) + 1] = r * angle.sin();
            }
            coords
        }
    }
}

pub(crate) fn config_hash(spec: &PotentialSpec, config: &SimulationConfig) -> String {
    let payload = serde_json::to_vec(&(spec, config)).expect("config serializes");
    hex::encode(&Sha256::digest(&payload)[..8])
}

/// BAOAB ("middle") Langevin integrator: half kick, half drift, exact
/// Ornstein-Uhlenbeck velocity update, half drift, half kick.
pub struct Langevin<F: ForceField = PotentialSpec> {
    spec: F,
    config: SimulationConfig,
    pos: Vec<f64>,
    vel: Vec<f64>,
    grad: Vec<f64>,
    rng: ChaCha8Rng,
    step: u64,
    capped: u64,
    ou_decay: f64,
    ou_noise: f64,
}

impl Langevin<PotentialSpec> {
    pub fn new(spec: PotentialSpec, config: SimulationConfig) -> Result<Self> {
        let pos = initial_coordinates(&spec);
        Self::with_coordinates(spec, config, pos)
    }
}

impl<F: ForceField> Langevin<F> {
    pub fn with_coordinates(spec: F, config: SimulationConfig, pos: Vec<f64>) -> Result<Self> {
        spec.check()?;
        config.validate()?;
        let dim = spec.dim();
        if pos.len() != dim {
            return Err(Error::Dimension { expected: dim, actual: pos.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vel_std = (config.temperature / config.mass).sqrt();
        let vel = (0..dim)
            .map(|_| vel_std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let mut grad = vec![0.0; dim];
        spec.gradient_into(&pos, &mut grad)?;
        let ou_decay = (-config.friction * config.timestep).exp();
        let ou_noise = ((1.0 - ou_decay * ou_decay) * config.temperature / config.mass).sqrt();
        Ok(Langevin { spec, config, pos, vel, grad, rng, step: 0, capped: 0, ou_decay, ou_noise })
    }

    pub fn positions(&self) -> &[f64] {
        &self.pos
    }

    pub fn velocities(&self) -> &[f64] {
        &self.vel
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Number of pair-force evaluations clipped by the LJ force cap so far.
    pub fn capped_forces(&self) -> u64 {
        self.capped
    }

    pub fn energy(&self) -> Result<f64> {
        self.spec.energy(&self.pos)
    }

    pub fn step(&mut self) -> Result<()> {
        let dt = self.config.timestep;
        let inv_m = 1.0 / self.config.mass;
        for (v, g) in self.vel.iter_mut().zip(&self.grad) {
            *v -= 0.5 * dt * g * inv_m;
        }
        self.drift(0.5 * dt);
        for v in self.vel.iter_mut() {
            let noise: f64 = StandardNormal.sample(&mut self.rng);
            *v = self.ou_decay * *v + self.ou_noise * noise;
        }
        self.drift(0.5 * dt);
        self.step += 1;
        if !self.pos.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFiniteDynamics { step: self.step });
        }
        self.capped += self.spec.gradient_into(&self.pos, &mut self.grad)
            .map_err(|_| Error::NonFiniteDynamics { step: self.step })? as u64;
        for (v, g) in self.vel.iter_mut().zip(&self.grad) {
            *v -= 0.5 * dt * g * inv_m;
        }
        if !self.vel.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteDynamics { step: self.step });
        }
        Ok(())
    }

    fn drift(&mut self, h: f64) {
        for (p, v) in self.pos.iter_mut().zip(&self.vel) {
            *p += h * v;
        }
        if self.config.boundary == Boundary::Reflective {
            let wall = self.config.box_half_width;
            for (p, v) in self.pos.iter_mut().zip(self.vel.iter_mut()) {
                if *p > wall {
                    *p = 2.0 * wall - *p;
                    *v = -*v;
                } else if *p < -wall {
                    *p = -2.0 * wall - *p;
                    *v = -*v;
                }
            }
        }
    }

    /// Runs `n_steps`, handing positions and velocities to `observe` after every step.
    pub fn run_with(&mut self, n_steps: u64, mut observe: impl FnMut(u64, &[f64], &[f64])) -> Result<()> {
        for _ in 0..n_steps {
            self.step()?;
            observe(self.step, &self.pos, &self.vel);
        }
        Ok(())
    }
}

/// Integrates `config.n_steps` steps and records every `record_stride`-th frame.
pub fn simulate(spec: &PotentialSpec, config: &SimulationConfig) -> Result<Trajectory> {
    let mut engine = Langevin::new(spec.clone(), config.clone())?;
    let dim = spec.kind.dim();
    let n_frames = (config.n_steps / config.record_stride) as usize;
    let mut frames = Vec::with_capacity(n_frames * dim);
    let stride = config.record_stride;
    engine.run_with(config.n_steps, |step, pos, _| {
        if step % stride == 0 {
            frames.extend(pos.iter().map(|&p| p as f32));
        }
    })?;
    if engine.capped_forces() > 0 {
        log::warn!(
            "{} pair forces were capped at {}σ during the {} run",
            engine.capped_forces(),
            spec.force_cap,
            spec.kind
        );
    }
    Ok(Trajectory {
        system: spec.kind,
        dim,
        frames,
        temperature: config.temperature,
        record_stride: config.record_stride,
        seed: config.seed,
        config_hash: config_hash(spec, config),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(kind: SystemKind, n_steps: u64, stride: u64) -> SimulationConfig {
        SimulationConfig { n_steps, record_stride: stride, ..SimulationConfig::for_system(kind, 1.0) }
    }

    #[test]
    fn frame_count_is_steps_over_stride() {
        let spec = PotentialSpec::three_hole();
        let traj = simulate(&spec, &short(SystemKind::ThreeHole, 1234, 50)).unwrap();
        assert_eq!(traj.n_frames(), 24);
        assert_eq!(traj.dim, 2);
        let traj = simulate(&spec, &short(SystemKind::ThreeHole, 50, 50)).unwrap();
        assert_eq!(traj.n_frames(), 1);
    }

    #[test]
    fn same_seed_gives_identical_trajectory() {
        let spec = PotentialSpec::lj7(1.0, 1.0);
        let cfg = SimulationConfig { temperature: 0.3, n_steps: 2000, record_stride: 10, ..SimulationConfig::lj7(0.3) };
        let a = simulate(&spec, &cfg).unwrap();
        let b = simulate(&spec, &cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate(&spec, &SimulationConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn reflective_box_keeps_particle_inside() {
        let spec = PotentialSpec::three_hole();
        let cfg = SimulationConfig {
            temperature: 8.0,
            box_half_width: 1.5,
            ..short(SystemKind::ThreeHole, 20_000, 1)
        };
        let traj = simulate(&spec, &cfg).unwrap();
        assert!(traj.frames.iter().all(|&c| c.abs() <= 1.5));
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = short(SystemKind::ThreeHole, 100, 10);
        for cfg in [
            SimulationConfig { timestep: 0.0, ..base.clone() },
            SimulationConfig { temperature: -1.0, ..base.clone() },
            SimulationConfig { record_stride: 0, ..base.clone() },
            SimulationConfig { n_steps: 5, ..base.clone() },
        ] {
            assert!(matches!(simulate(&PotentialSpec::three_hole(), &cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn blow_up_reports_step() {
        let spec = PotentialSpec::three_hole();
        let cfg = SimulationConfig { timestep: 50.0, boundary: Boundary::None, ..short(SystemKind::ThreeHole, 1000, 1) };
        match simulate(&spec, &cfg) {
            Err(Error::NonFiniteDynamics { step }) => assert!(step >= 1),
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn hexagon_start_has_expected_geometry() {
        let coords = initial_coordinates(&PotentialSpec::lj7(1.0, 1.0));
        let rmin = 2f64.powf(1.0 / 6.0);
        for p in 1..7 {
            let r = (coords[2 * p].powi(2) + coords[2 * p + 1].powi(2)).sqrt();
            assert!((r - rmin).abs() < 1e-12);
        }
    }
}
