//! Histogram-based comparison of latent distributions: binned probabilities
//! with a pseudo-count, symmetrized KL divergence, free-energy profiles and
//! the temperature-sweep comparison.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::K_B;

pub const PSEUDO_COUNT: f64 = 1e-10;
pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_PADDING: f64 = 0.05;

/// Uniform bins over an axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: Vec<usize>,
}

impl Binning {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, bins: Vec<usize>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.len() != bins.len() {
            return Err(Error::InvalidConfig("binning needs matching, non-empty lo/hi/bins".into()));
        }
        if bins.contains(&0) || lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && h > l)) {
            return Err(Error::InvalidConfig("binning needs >= 1 bin and finite lo < hi per axis".into()));
        }
        Ok(Binning { lo, hi, bins })
    }

    pub fn square(lo: f64, hi: f64, bins: usize, dims: usize) -> Result<Self> {
        Self::new(vec![lo; dims], vec![hi; dims], vec![bins; dims])
    }

    /// Bounding box of all point sets, each side padded by `padding` of its width.
    pub fn covering(sets: &[ArrayView2<f64>], bins: usize, padding: f64) -> Result<Self> {
        let dims = sets.first().ok_or(Error::Empty("point sets"))?.ncols();
        let mut lo = vec![f64::INFINITY; dims];
        let mut hi = vec![f64::NEG_INFINITY; dims];
        for set in sets {
            if set.ncols() != dims {
                return Err(Error::Dimension { expected: dims, actual: set.ncols() });
            }
            for row in set.rows() {
                for (j, &v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::NonFinite("point to bin".into()));
                    }
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
        if lo[0] == f64::INFINITY {
            return Err(Error::Empty("points to bin"));
        }
        for j in 0..dims {
            let width = (hi[j] - lo[j]).max(1e-9);
            lo[j] -= padding * width;
            hi[j] += padding * width;
        }
        Self::new(lo, hi, vec![bins; dims])
    }

    pub fn dims(&self) -> usize {
        self.bins.len()
    }

    pub fn total_bins(&self) -> usize {
        self.bins.iter().product()
    }

    pub fn width(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.bins[axis] as f64
    }

    pub fn centers(&self, axis: usize) -> Vec<f64> {
        let w = self.width(axis);
        (0..self.bins[axis]).map(|i| self.lo[axis] + (i as f64 + 0.5) * w).collect()
    }

    /// Flat (row-major) bin index; `None` outside the box. The upper edge
    /// belongs to the last bin.
    pub fn index(&self, point: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for (j, &v) in point.iter().enumerate() {
            if !(v >= self.lo[j] && v <= self.hi[j]) {
                return None;
            }
            let i = (((v - self.lo[j]) / self.width(j)) as usize).min(self.bins[j] - 1);
            flat = flat * self.bins[j] + i;
        }
        Some(flat)
    }

    /// The one-axis binning along `axis`.
    pub fn axis(&self, axis: usize) -> Binning {
        Binning { lo: vec![self.lo[axis]], hi: vec![self.hi[axis]], bins: vec![self.bins[axis]] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentHistogram {
    pub binning: Binning,
    pub counts: Vec<f64>,
    /// Points that fell outside the binning box.
    pub clipped: usize,
    pub pseudo_count: f64,
}

impl LatentHistogram {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Normalized bin masses with the pseudo-count added to each bin's
    /// empirical probability before renormalizing.
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.total().max(1.0);
        let norm = 1.0 + self.pseudo_count * self.counts.len() as f64;
        self.counts.iter().map(|c| (c / n + self.pseudo_count) / norm).collect()
    }
}

pub fn latent_histogram(points: ArrayView2<f64>, binning: &Binning) -> Result<LatentHistogram> {
    if points.nrows() == 0 {
        return Err(Error::Empty("points to histogram"));
    }
    if points.ncols() != binning.dims() {
        return Err(Error::Dimension { expected: binning.dims(), actual: points.ncols() });
    }
    let mut counts = vec![0.0; binning.total_bins()];
    let mut clipped = 0;
    for row in points.rows() {
        let p = row.to_vec();
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point to histogram".into()));
        }
        match binning.index(&p) {
            Some(i) => counts[i] += 1.0,
            None => clipped += 1,
        }
    }
    if clipped > 0 {
        log::warn!("{clipped} of {} points fell outside the histogram range", points.nrows());
    }
    Ok(LatentHistogram { binning: binning.clone(), counts, clipped, pseudo_count: PSEUDO_COUNT })
}

/// `0.5 * (KL(p || q) + KL(q || p))` over pseudo-counted bins.
pub fn symmetrized_kl(p: &LatentHistogram, q: &LatentHistogram) -> Result<f64> {
    if p.binning != q.binning {
        return Err(Error::BinningMismatch);
    }
    let (pp, qq) = (p.probabilities(), q.probabilities());
    Ok(0.5 * pp.iter().zip(&qq).map(|(a, b)| (a - b) * (a.ln() - b.ln())).sum::<f64>())
}

/// Histogram both point sets on a shared binning and return their symmetrized KL.
pub fn kl_between(a: ArrayView2<f64>, b: ArrayView2<f64>, binning: &Binning) -> Result<f64> {
    symmetrized_kl(&latent_histogram(a, binning)?, &latent_histogram(b, binning)?)
}

/// `F = -k_B T ln p` along one latent axis, shifted so its minimum is zero.
/// Bins with no points carry `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyProfile {
    pub axis: usize,
    pub temperature: f64,
    pub centers: Vec<f64>,
    pub free_energy: Vec<Option<f64>>,
    pub population: Vec<f64>,
}

impl FreeEnergyProfile {
    /// Position of the minimum.
    pub fn minimum(&self) -> Option<f64> {
        self.free_energy
            .iter()
            .zip(&self.centers)
            .filter_map(|(f, c)| f.map(|f| (f, *c)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, c)| c)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,free_energy,population\n");
        for ((c, f), p) in self.centers.iter().zip(&self.free_energy).zip(&self.population) {
            let f = f.map(|f| format!("{f:.8}")).unwrap_or_else(|| "nan".into());
            let _ = writeln!(out, "{c:.8},{f},{p:.10}");
        }
        out
    }
}

pub fn free_energy_profile(
    points: ArrayView2<f64>,
    axis: usize,
    binning: &Binning,
    temperature: f64,
) -> Result<FreeEnergyProfile> {
    if points.nrows() == 0 {
        return Err(Error::Empty("points for a free-energy profile"));
    }
    if axis >= points.ncols() {
        return Err(Error::Dimension { expected: points.ncols(), actual: axis + 1 });
    }
    if binning.dims() != 1 {
        return Err(Error::InvalidConfig("free-energy profiles need a one-axis binning".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let column = points.column(axis).to_owned().insert_axis(Axis(1));
    let hist = latent_histogram(column.view(), binning)?;
    let n = hist.total().max(1.0);
    let population: Vec<f64> = hist.counts.iter().map(|c| c / n).collect();
    let raw: Vec<Option<f64>> =
        population.iter().map(|&p| (p > 0.0).then(|| -K_B * temperature * p.ln())).collect();
    let min = raw.iter().flatten().fold(f64::INFINITY, |m, &v| m.min(v));
    Ok(FreeEnergyProfile {
        axis,
        temperature,
        centers: binning.centers(0),
        free_energy: raw.into_iter().map(|f| f.map(|f| f - min)).collect(),
        population,
    })
}

/// `sum |F_a - F_b| * width` over bins where both profiles are defined.
pub fn profile_l1(a: &FreeEnergyProfile, b: &FreeEnergyProfile) -> Result<f64> {
    if a.centers != b.centers {
        return Err(Error::BinningMismatch);
    }
    let width = if a.centers.len() > 1 { a.centers[1] - a.centers[0] } else { 1.0 };
    Ok(a.free_energy
        .iter()
        .zip(&b.free_energy)
        .filter_map(|(x, y)| Some((x.as_ref()? - y.as_ref()?).abs()))
        .sum::<f64>()
        * width)
}

/// Axis used for one-dimensional profiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileAxis {
    /// The latent axis along which the pooled reference latents spread most.
    MaxVariance,
    Index(usize),
}

impl ProfileAxis {
    pub fn resolve(self, pooled: ArrayView2<f64>) -> usize {
        match self {
            ProfileAxis::Index(i) => i,
            ProfileAxis::MaxVariance => (0..pooled.ncols())
                .max_by(|&a, &b| column_variance(pooled, a).total_cmp(&column_variance(pooled, b)))
                .unwrap_or(0),
        }
    }
}

fn column_variance(x: ArrayView2<f64>, j: usize) -> f64 {
    let c = x.column(j);
    let m = c.mean().unwrap_or(0.0);
    c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRow {
    pub temperature: f64,
    /// Symmetrized KL between 1D marginals along the profile axis.
    pub kl_profile: f64,
    /// Symmetrized KL between the 2D latent histograms.
    pub kl_latent: f64,
    pub generated: FreeEnergyProfile,
    pub reference: FreeEnergyProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: usize,
    pub profile_binning: Binning,
    pub latent_binning: Binning,
    pub rows: Vec<TemperatureRow>,
}

impl SweepReport {
    pub fn row(&self, temperature: f64) -> Option<&TemperatureRow> {
        self.rows.iter().find(|r| (r.temperature - temperature).abs() < 1e-9)
    }

    /// L1 distance between the generated profiles at two temperatures.
    pub fn generated_change(&self, from: f64, to: f64) -> Result<f64> {
        let a = self.row(from).ok_or(Error::MissingReference(from))?;
        let b = self.row(to).ok_or(Error::MissingReference(to))?;
        profile_l1(&a.generated, &b.generated)
    }

    pub fn reference_change(&self, from: f64, to: f64) -> Result<f64> {
        let a = self.row(from).ok_or(Error::MissingReference(from))?;
        let b = self.row(to).ok_or(Error::MissingReference(to))?;
        profile_l1(&a.reference, &b.reference)
    }
}

/// Compare generated and reference latents temperature by temperature.
/// `generated` and `reference` are paired by temperature; every requested
/// temperature needs both.
pub fn compare_latent_sets(
    temperatures: &[f64],
    generated: &[(f64, Array2<f64>)],
    reference: &[(f64, Array2<f64>)],
    axis: ProfileAxis,
    bins: usize,
) -> Result<SweepReport> {
    if temperatures.is_empty() {
        return Err(Error::Empty("temperatures"));
    }
    let find = |sets: &'_ [(f64, Array2<f64>)], t: f64| -> Result<Array2<f64>> {
        sets.iter()
            .find(|(v, _)| (v - t).abs() < 1e-9)
            .map(|(_, x)| x.clone())
            .ok_or(Error::MissingReference(t))
    };
    let mut pairs = Vec::with_capacity(temperatures.len());
    for &t in temperatures {
        pairs.push((t, find(generated, t)?, find(reference, t)?));
    }
    let all: Vec<ArrayView2<f64>> = pairs.iter().flat_map(|(_, g, r)| [g.view(), r.view()]).collect();
    let latent_binning = Binning::covering(&all, bins, DEFAULT_PADDING)?;
    let pooled_refs: Vec<ArrayView2<f64>> = pairs.iter().map(|(_, _, r)| r.view()).collect();
    let pooled = ndarray::concatenate(Axis(0), &pooled_refs).map_err(|e| Error::Shape(e.to_string()))?;
    let axis = axis.resolve(pooled.view());
    if axis >= latent_binning.dims() {
        return Err(Error::Dimension { expected: latent_binning.dims(), actual: axis + 1 });
    }
    let profile_binning = latent_binning.axis(axis);
    let mut rows = Vec::with_capacity(pairs.len());
    for (t, g, r) in pairs {
        let g1 = g.column(axis).to_owned().insert_axis(Axis(1));
        let r1 = r.column(axis).to_owned().insert_axis(Axis(1));
        rows.push(TemperatureRow {
            temperature: t,
            kl_profile: kl_between(g1.view(), r1.view(), &profile_binning)?,
            kl_latent: kl_between(g.view(), r.view(), &latent_binning)?,
            generated: free_energy_profile(g.view(), axis, &profile_binning, t)?,
            reference: free_energy_profile(r.view(), axis, &profile_binning, t)?,
        });
    }
    Ok(SweepReport { axis, profile_binning, latent_binning, rows })
}

/// One line of a divergence table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRecord {
    pub system: String,
    pub temperature: f64,
    pub method: String,
    pub kl: f64,
    pub binning: Binning,
    pub samples: usize,
}

pub fn kl_table_csv(records: &[KlRecord]) -> String {
    let mut out = String::from("system,temperature,method,kl,bins,lo,hi,pseudo_count,samples\n");
    for r in records {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";");
        let bins = r.binning.bins.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("x");
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{},{},{},{:e},{}",
            r.system,
            r.temperature,
            r.method,
            r.kl,
            bins,
            join(&r.binning.lo),
            join(&r.binning.hi),
            PSEUDO_COUNT,
            r.samples
        );
    }
    out
}

pub fn write_profiles(dir: &Path, report: &SweepReport) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for row in &report.rows {
        for (kind, profile) in [("generated", &row.generated), ("reference", &row.reference)] {
            let path = dir.join(format!("profile_{kind}_T{:.2}.csv", row.temperature));
            std::fs::write(&path, profile.to_csv()).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
