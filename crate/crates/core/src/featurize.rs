//! Trajectories to lagged training pairs.
//!
//! A [`Dataset`] owns every frame's features, its current state label and its
//! temperature. Frames are grouped into blocks (one per source trajectory) and
//! each block is cut into contiguous segments; whole segments are held out for
//! validation and a lagged pair `(n, n + lag)` never spans two segments.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Content, MATRIX_FORMAT};
use crate::sim::{SystemKind, Trajectory, LJ7_PARTICLES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Switching-function radius for LJ7 coordination numbers, in units of sigma.
    pub switch_radius: f64,
    pub sigma: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { switch_radius: 1.5, sigma: 1.0 }
    }
}

pub fn feature_dim(system: SystemKind) -> usize {
    match system {
        SystemKind::ThreeHole => 2,
        SystemKind::Lj7 => LJ7_PARTICLES,
    }
}

/// Per-particle coordination numbers `sum_j 1 / (1 + (r_ij / r0)^8)`, sorted
/// in descending order. This is the rational switching function
/// `(1 - x^8) / (1 - x^16)` with the removable singularity at `r = r0` cancelled.
pub fn coordination_numbers(coords: &[f64], r0: f64) -> Vec<f64> {
    let n = coords.len() / 2;
    let mut c = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = coords[2 * i] - coords[2 * j];
            let dy = coords[2 * i + 1] - coords[2 * j + 1];
            let x2 = (dx * dx + dy * dy) / (r0 * r0);
            let s = 1.0 / (1.0 + x2 * x2 * x2 * x2);
            c[i] += s;
            c[j] += s;
        }
    }
    c.sort_by(|a, b| b.total_cmp(a));
    c
}

/// Features for every frame, rounded to f32 so they survive the dataset cache exactly.
pub fn extract_features(traj: &Trajectory, config: &FeatureConfig) -> Result<Array2<f64>> {
    if traj.dim != traj.system.dim() {
        return Err(Error::Dimension { expected: traj.system.dim(), actual: traj.dim });
    }
    if let Some(pos) = traj.frames.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("coordinate in frame {}", pos / traj.dim)));
    }
    let d = feature_dim(traj.system);
    let n = traj.n_frames();
    let mut out = Array2::zeros((n, d));
    let r0 = config.switch_radius * config.sigma;
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let frame = traj.frame_f64(i);
        match traj.system {
            SystemKind::ThreeHole => {
                row[0] = frame[0];
                row[1] = frame[1];
            }
            SystemKind::Lj7 => {
                for (slot, c) in row.iter_mut().zip(coordination_numbers(&frame, r0)) {
                    *slot = c as f32 as f64;
                }
            }
        }
    }
    Ok(out)
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(points: ArrayView2<f64>, cap: usize) -> usize {
    let mut seen = HashSet::new();
    for row in points.rows() {
        seen.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        if seen.len() >= cap {
            break;
        }
    }
    seen.len()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
}

/// Lloyd's k-means with k-means++ seeding; best of `restarts` initialisations.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64, restarts: usize) -> Result<Clustering> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::Empty("k-means input"));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts.max(1) {
        let result = lloyd(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Clustering {
    let (n, d) = points.dim();
    let mut centers = Array2::zeros((k, d));
    centers.row_mut(0).assign(&points.row(rng.gen_range(0..n)));
    let mut nearest: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if target < *w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, centers.row(c)));
        }
    }

    let mut assignments = vec![0; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..100 {
        let mut changed = false;
        inertia = 0.0;
        for (i, p) in points.rows().into_iter().enumerate() {
            let (best, dist) = (0..k)
                .map(|c| (c, sq_dist(p, centers.row(c))))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("k >= 1");
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            inertia += dist;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = sums.row_mut(assignments[i]);
            row += &p;
            counts[assignments[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centers.row_mut(c).assign(&mean);
            }
        }
        if !changed {
            break;
        }
    }
    Clustering { assignments, centers, inertia }
}

/// Initial state labels: k-means into `k0` clusters. Empty clusters are
/// squeezed out so the returned labels index `0..num_states` densely.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialLabels {
    pub labels: Vec<usize>,
    pub num_states: usize,
}

pub fn initial_labels(features: ArrayView2<f64>, k0: usize, seed: u64) -> Result<InitialLabels> {
    if features.nrows() == 0 {
        return Err(Error::Empty("features for initial labels"));
    }
    let distinct = count_distinct(features, k0);
    let k = if distinct < k0 {
        log::warn!("only {distinct} distinct feature vectors; reducing initial states from {k0} to {distinct}");
        distinct
    } else {
        k0
    };
    let clustering = kmeans(features, k, seed, 3)?;
    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    let labels = clustering
        .assignments
        .iter()
        .map(|&a| {
            if remap[a] == usize::MAX {
                remap[a] = next;
                next += 1;
            }
            remap[a]
        })
        .collect();
    Ok(InitialLabels { labels, num_states: next })
}

pub fn one_hot(label: usize, num_states: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_states];
    v[label] = 1.0;
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub segments: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { segments: 50, validation_fraction: 0.2, seed: 42 }
    }
}

/// Frames from one source trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub len: usize,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub validation: bool,
}

/// One `(X^n, y^{n+lag}, T)` training unit.
#[derive(Clone, Debug, PartialEq)]
pub struct LaggedSample<'a> {
    pub x: ArrayView1<'a, f64>,
    pub label: usize,
    pub temperature: f64,
    pub frame_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_states: usize,
    pub lag: usize,
    pub blocks: Vec<Block>,
    pub segments: Vec<Segment>,
    pub split_seed: u64,
    pub label_version: u32,
    temperatures: Vec<f64>,
    train: Vec<usize>,
    validation: Vec<usize>,
}

impl Dataset {
    fn assemble(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_states: usize,
        lag: usize,
        blocks: Vec<Block>,
        segments: Vec<Segment>,
        split_seed: u64,
        label_version: u32,
    ) -> Dataset {
        let mut temperatures = Vec::with_capacity(features.nrows());
        for b in &blocks {
            temperatures.extend(std::iter::repeat_n(b.temperature, b.len));
        }
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for s in &segments {
            let target = if s.validation { &mut validation } else { &mut train };
            target.extend(s.start..(s.start + s.len).saturating_sub(lag));
        }
        Dataset {
            features,
            labels,
            num_states,
            lag,
            blocks,
            segments,
            split_seed,
            label_version,
            temperatures,
            train,
            validation,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Start frames of training pairs.
    pub fn train_pairs(&self) -> &[usize] {
        &self.train
    }

    pub fn validation_pairs(&self) -> &[usize] {
        &self.validation
    }

    pub fn temperature(&self, frame: usize) -> f64 {
        self.temperatures[frame]
    }

    pub fn frame_temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    /// Every frame inside a held-out segment.
    pub fn validation_frames(&self) -> Vec<usize> {
        self.segments.iter().filter(|s| s.validation).flat_map(|s| s.start..s.start + s.len).collect()
    }

    /// Label at `n + lag` paired with the features at `n`.
    pub fn sample(&self, n: usize) -> LaggedSample<'_> {
        LaggedSample {
            x: self.features.row(n),
            label: self.labels[n + self.lag],
            temperature: self.temperatures[n],
            frame_index: n,
        }
    }

    /// Distinct temperatures with their training-pair counts.
    pub fn temperature_counts(&self) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for &n in &self.train {
            let t = self.temperatures[n];
            match out.iter_mut().find(|(v, _)| *v == t) {
                Some(entry) => entry.1 += 1,
                None => out.push((t, 1)),
            }
        }
        out
    }

    /// Replace the per-frame labels (after refinement).
    pub fn relabel(&mut self, labels: Vec<usize>, num_states: usize) {
        assert_eq!(labels.len(), self.n_frames());
        self.labels = labels;
        self.num_states = num_states;
        self.label_version += 1;
    }
}

/// Cut one trajectory's features into segments and form lagged pairs.
/// `labels` must index a state space of size `num_states` shared by any
/// datasets that will later be merged.
pub fn make_lagged_dataset(
    features: Array2<f64>,
    lag: usize,
    labels: Vec<usize>,
    num_states: usize,
    temperature: f64,
    split: &SplitConfig,
) -> Result<Dataset> {
    let n = features.nrows();
    if lag < 1 || lag >= n {
        return Err(Error::LagTooLong { lag, len: n });
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {} frames", labels.len(), n)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_states) {
        return Err(Error::InactiveState { label: bad, states: num_states });
    }
    if !(0.0..1.0).contains(&split.validation_fraction) || split.segments == 0 {
        return Err(Error::InvalidConfig("validation fraction must be in [0, 1) with >= 1 segment".into()));
    }
    let count = split.segments.min(n);
    let base = n / count;
    let mut segments: Vec<Segment> = (0..count)
        .map(|i| Segment {
            start: i * base,
            len: if i + 1 == count { n - i * base } else { base },
            validation: false,
        })
        .collect();
    let held_out = (split.validation_fraction * count as f64).round() as usize;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
    for &i in order.iter().take(held_out) {
        segments[i].validation = true;
    }
    let blocks = vec![Block { start: 0, len: n, temperature }];
    Ok(Dataset::assemble(features, labels, num_states, lag, blocks, segments, split.seed, 0))
}

/// Concatenate datasets from several temperatures.
pub fn merge_multitemperature(datasets: Vec<Dataset>) -> Result<Dataset> {
    let mut iter = datasets.into_iter();
    let first = iter.next().ok_or(Error::Empty("datasets to merge"))?;
    let rest: Vec<Dataset> = iter.collect();
    if rest.is_empty() {
        return Ok(first);
    }
    let d = first.feature_dim();
    let lag = first.lag;
    for ds in &rest {
        if ds.feature_dim() != d {
            return Err(Error::Dimension { expected: d, actual: ds.feature_dim() });
        }
        if ds.lag != lag {
            return Err(Error::InvalidConfig(format!("lag mismatch: {} vs {}", lag, ds.lag)));
        }
    }
    let num_states = rest.iter().map(|d| d.num_states).fold(first.num_states, usize::max);
    let total: usize = first.n_frames() + rest.iter().map(Dataset::n_frames).sum::<usize>();
    let mut features = Array2::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    let mut blocks = Vec::new();
    let mut segments = Vec::new();
    let mut offset = 0;
    for ds in std::iter::once(first.clone()).chain(rest) {
        let n = ds.n_frames();
        features.slice_mut(ndarray::s![offset..offset + n, ..]).assign(&ds.features);
        labels.extend_from_slice(&ds.labels);
        blocks.extend(ds.blocks.iter().map(|b| Block { start: b.start + offset, ..b.clone() }));
        segments.extend(ds.segments.iter().map(|s| Segment { start: s.start + offset, ..s.clone() }));
        offset += n;
    }
    Ok(Dataset::assemble(features, labels, num_states, lag, blocks, segments, first.split_seed, 0))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetSidecar {
    format: String,
    content: Content,
    rows: usize,
    cols: usize,
    lag: usize,
    split_seed: u64,
    label_version: u32,
    num_states: usize,
    labels_file: String,
    blocks: Vec<Block>,
    segments: Vec<Segment>,
}

fn labels_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("labels")
}

/// Writes `name.f32` (features), `name.labels` (u32 LE) and `name.json`.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let values: Vec<f32> = ds.features.iter().map(|&v| v as f32).collect();
    io::write_f32(path, &values)?;
    let lp = labels_path(path);
    let bytes: Vec<u8> = ds.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
    std::fs::write(&lp, bytes).map_err(|e| Error::io(&lp, e))?;
    io::write_json(
        &io::sidecar_path(path),
        &DatasetSidecar {
            format: MATRIX_FORMAT.into(),
            content: Content::Features,
            rows: ds.n_frames(),
            cols: ds.feature_dim(),
            lag: ds.lag,
            split_seed: ds.split_seed,
            label_version: ds.label_version,
            num_states: ds.num_states,
            labels_file: lp.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            blocks: ds.blocks.clone(),
            segments: ds.segments.clone(),
        },
    )
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let side: DatasetSidecar = io::read_json(&io::sidecar_path(path))?;
    if side.format != MATRIX_FORMAT || side.content != Content::Features {
        return Err(Error::format(path, "not a feature dataset"));
    }
    let values = io::read_f32(path, side.rows * side.cols)?;
    let features = Array2::from_shape_vec((side.rows, side.cols), values.into_iter().map(f64::from).collect())
        .map_err(|e| Error::format(path, e.to_string()))?;
    let lp = path.with_file_name(&side.labels_file);
    let bytes = io::read_bytes(&lp)?;
    if bytes.len() != side.rows * 4 {
        return Err(Error::format(&lp, "label count does not match frame count"));
    }
    let labels: Vec<usize> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= side.num_states) {
        return Err(Error::InactiveState { label: bad, states: side.num_states });
    }
    Ok(Dataset::assemble(
        features,
        labels,
        side.num_states,
        side.lag,
        side.blocks,
        side.segments,
        side.split_seed,
        side.label_version,
    ))
}
