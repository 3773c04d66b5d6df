use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two benchmark systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    ThreeHole,
    Lj7,
}

impl SystemKind {
    /// Number of configuration-space coordinates.
    pub fn dim(self) -> usize {
        match self {
            SystemKind::ThreeHole => 2,
            SystemKind::Lj7 => 2 * LJ7_PARTICLES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::ThreeHole => "three-hole",
            SystemKind::Lj7 => "lj7",
        }
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "three-hole" => Ok(SystemKind::ThreeHole),
            "lj7" => Ok(SystemKind::Lj7),
            other => Err(Error::InvalidConfig(format!("unknown system `{other}`"))),
        }
    }
}

pub const LJ7_PARTICLES: usize = 7;

/// Potential energy surface. `epsilon`/`sigma` only matter for LJ7.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub kind: SystemKind,
    #[serde(default = "one")]
    pub epsilon: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    /// Pair forces are evaluated at `force_cap * sigma` for closer pairs.
    #[serde(default = "default_force_cap")]
    pub force_cap: f64,
    /// Harmonic spring on the cluster centroid; 0 disables it.
    #[serde(default)]
    pub centroid_spring: f64,
}

fn one() -> f64 {
    1.0
}

fn default_force_cap() -> f64 {
    0.3
}

impl PotentialSpec {
    pub fn three_hole() -> Self {
        PotentialSpec {
            kind: SystemKind::ThreeHole,
            epsilon: 1.0,
            sigma: 1.0,
            force_cap: default_force_cap(),
            centroid_spring: 0.0,
        }
    }

    pub fn lj7(epsilon: f64, sigma: f64) -> Self {
        PotentialSpec {
            kind: SystemKind::Lj7,
            epsilon,
            sigma,
            force_cap: default_force_cap(),
            centroid_spring: 0.0,
        }
    }

    pub fn for_system(kind: SystemKind) -> Self {
        match kind {
            SystemKind::ThreeHole => Self::three_hole(),
            SystemKind::Lj7 => Self::lj7(1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == SystemKind::Lj7 && !(self.epsilon > 0.0 && self.sigma > 0.0) {
            return Err(Error::InvalidConfig("LJ7 requires epsilon > 0 and sigma > 0".into()));
        }
        if !(self.force_cap >= 0.0) || !(self.centroid_spring >= 0.0) {
            return Err(Error::InvalidConfig("force cap and centroid spring must be >= 0".into()));
        }
        Ok(())
    }

    fn check_dim(&self, coords: &[f64]) -> Result<()> {
        let expected = self.kind.dim();
        if coords.len() != expected {
            return Err(Error::Dimension { expected, actual: coords.len() });
        }
        Ok(())
    }
}

/// Anything the Langevin integrator can move particles on.
pub trait ForceField {
    /// Number of coordinates.
    fn dim(&self) -> usize;
    fn energy(&self, coords: &[f64]) -> Result<f64>;
    /// Writes the gradient and returns how many force evaluations were capped.
    fn gradient_into(&self, coords: &[f64], grad: &mut [f64]) -> Result<usize>;
    fn check(&self) -> Result<()> {
        Ok(())
    }
}

impl ForceField for PotentialSpec {
    fn dim(&self) -> usize {
        self.kind.dim()
    }

    fn energy(&self, coords: &[f64]) -> Result<f64> {
        potential_energy(self, coords)
    }

    fn gradient_into(&self, coords: &[f64], grad: &mut [f64]) -> Result<usize> {
        gradient_into(self, coords, grad)
    }

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

/// Isotropic harmonic well `k/2 |x - center|^2`, whose Boltzmann density is
/// a Gaussian of variance `kT / k`; used to check the thermostat.
#[derive(Clone, Debug, PartialEq)]
pub struct Harmonic {
    pub stiffness: f64,
    pub center: Vec<f64>,
}

impl ForceField for Harmonic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn energy(&self, coords: &[f64]) -> Result<f64> {
        if coords.len() != self.center.len() {
            return Err(Error::Dimension { expected: self.center.len(), actual: coords.len() });
        }
        Ok(0.5 * self.stiffness * coords.iter().zip(&self.center).map(|(x, c)| (x - c) * (x - c)).sum::<f64>())
    }

    fn gradient_into(&self, coords: &[f64], grad: &mut [f64]) -> Result<usize> {
        if coords.len() != self.center.len() {
            return Err(Error::Dimension { expected: self.center.len(), actual: coords.len() });
        }
        for ((g, x), c) in grad.iter_mut().zip(coords).zip(&self.center) {
            *g = self.stiffness * (x - c);
        }
        Ok(0)
    }

    fn check(&self) -> Result<()> {
        if !(self.stiffness > 0.0) || self.center.is_empty() {
            return Err(Error::InvalidConfig("harmonic well needs stiffness > 0 and dim >= 1".into()));
        }
        Ok(())
    }
}

/// Potential energy of `coords` (flat `[x0, y0, x1, y1, ...]`).
pub fn potential_energy(spec: &PotentialSpec, coords: &[f64]) -> Result<f64> {
    spec.check_dim(coords)?;
    match spec.kind {
        SystemKind::ThreeHole => Ok(three_hole(coords[0], coords[1])),
        SystemKind::Lj7 => {
            let mut energy = 0.0;
            for i in 0..LJ7_PARTICLES {
                for j in (i + 1)..LJ7_PARTICLES {
                    let r2 = dist2(coords, i, j);
                    if r2 == 0.0 {
                        return Err(Error::Singularity { i, j });
                    }
                    energy += lj_pair(spec.epsilon, spec.sigma, r2.sqrt());
                }
            }
            if spec.centroid_spring > 0.0 {
                let (cx, cy) = centroid(coords);
                energy += 0.5 * spec.centroid_spring * (cx * cx + cy * cy);
            }
            Ok(energy)
        }
    }
}

/// Analytic gradient of [`potential_energy`].
pub fn potential_gradient(spec: &PotentialSpec, coords: &[f64]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; coords.len()];
    gradient_into(spec, coords, &mut grad)?;
    Ok(grad)
}

/// Writes the gradient into `grad` and returns how many LJ pairs hit the force cap.
pub(crate) fn gradient_into(spec: &PotentialSpec, coords: &[f64], grad: &mut [f64]) -> Result<usize> {
    spec.check_dim(coords)?;
    match spec.kind {
        SystemKind::ThreeHole => {
            let (gx, gy) = three_hole_gradient(coords[0], coords[1]);
            grad[0] = gx;
            grad[1] = gy;
            Ok(0)
        }
        SystemKind::Lj7 => {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let r_cap = spec.force_cap * spec.sigma;
            let mut capped = 0;
            for i in 0..LJ7_PARTICLES {
                for j in (i + 1)..LJ7_PARTICLES {
                    let dx = coords[2 * i] - coords[2 * j];
                    let dy = coords[2 * i + 1] - coords[2 * j + 1];
                    let r2 = dx * dx + dy * dy;
                    if r2 == 0.0 {
                        return Err(Error::Singularity { i, j });
                    }
                    let mut r = r2.sqrt();
                    if r < r_cap {
                        r = r_cap;
                        capped += 1;
                    }
                    // dV/dr divided by the true separation gives the Cartesian factor
                    let factor = lj_pair_derivative(spec.epsilon, spec.sigma, r) / r2.sqrt();
                    grad[2 * i] += factor * dx;
                    grad[2 * i + 1] += factor * dy;
                    grad[2 * j] -= factor * dx;
                    grad[2 * j + 1] -= factor * dy;
                }
            }
            if spec.centroid_spring > 0.0 {
                let (cx, cy) = centroid(coords);
                let n = LJ7_PARTICLES as f64;
                for p in 0..LJ7_PARTICLES {
                    grad[2 * p] += spec.centroid_spring * cx / n;
                    grad[2 * p + 1] += spec.centroid_spring * cy / n;
                }
            }
            Ok(capped)
        }
    }
}

pub fn three_hole(x: f64, y: f64) -> f64 {
    let e1 = (-x * x - (y - 1.0 / 3.0).powi(2)).exp();
    let e2 = (-x * x - (y - 5.0 / 3.0).powi(2)).exp();
    let e3 = (-(x - 1.0).powi(2) - y * y).exp();
    let e4 = (-(x + 1.0).powi(2) - y * y).exp();
    3.0 * e1 - 3.0 * e2 - 5.0 * e3 - 5.0 * e4 + 0.2 * x.powi(4) + 0.2 * (y - 1.0 / 3.0).powi(4)
}

fn three_hole_gradient(x: f64, y: f64) -> (f64, f64) {
    let y1 = y - 1.0 / 3.0;
    let y2 = y - 5.0 / 3.0;
    let e1 = (-x * x - y1 * y1).exp();
    let e2 = (-x * x - y2 * y2).exp();
    let e3 = (-(x - 1.0).powi(2) - y * y).exp();
    let e4 = (-(x + 1.0).powi(2) - y * y).exp();
    let gx = -6.0 * x * e1 + 6.0 * x * e2 + 10.0 * (x - 1.0) * e3 + 10.0 * (x + 1.0) * e4
        + 0.8 * x.powi(3);
    let gy = -6.0 * y1 * e1 + 6.0 * y2 * e2 + 10.0 * y * e3 + 10.0 * y * e4 + 0.8 * y1.powi(3);
    (gx, gy)
}

/// 4ε[(σ/r)^12 − (σ/r)^6]
pub fn lj_pair(epsilon: f64, sigma: f64, r: f64) -> f64 {
    let s6 = (sigma / r).powi(6);
    4.0 * epsilon * (s6 * s6 - s6)
}

fn lj_pair_derivative(epsilon: f64, sigma: f64, r: f64) -> f64 {
    let s6 = (sigma / r).powi(6);
    4.0 * epsilon * (-12.0 * s6 * s6 + 6.0 * s6) / r
}

fn dist2(coords: &[f64], i: usize, j: usize) -> f64 {
    let dx = coords[2 * i] - coords[2 * j];
    let dy = coords[2 * i + 1] - coords[2 * j + 1];
    dx * dx + dy * dy
}

fn centroid(coords: &[f64]) -> (f64, f64) {
    let n = (coords.len() / 2) as f64;
    let cx = coords.iter().step_by(2).sum::<f64>() / n;
    let cy = coords.iter().skip(1).step_by(2).sum::<f64>() / n;
    (cx, cy)
}
