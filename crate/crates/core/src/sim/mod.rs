//! Analytic potentials and Langevin dynamics for the benchmark systems.

mod langevin;
mod potential;

pub use langevin::{
    initial_coordinates, simulate, Boundary, Langevin, SimulationConfig, Trajectory,
};
pub use potential::{
    lj_pair, potential_energy, potential_gradient, three_hole, ForceField, Harmonic, PotentialSpec,
    SystemKind,
    LJ7_PARTICLES,
};
