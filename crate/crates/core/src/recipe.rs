//! Experiment recipes: compiled-in defaults per benchmark, strict TOML
//! overrides, and the end-to-end pipeline
//! (simulate, featurize, train, sample, evaluate) with a hashed manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use ndarray::{Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::ModelBundle;
use crate::error::{Error, Result};
use crate::eval::{self, Binning, KlRecord, ProfileAxis};
use crate::featurize::{self, Dataset, FeatureConfig, SplitConfig};
use crate::io::{self, LatentFile};
use crate::sim::{self, PotentialSpec, SimulationConfig, SystemKind, Trajectory};
use crate::trainer::{self, rng_stream, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecipeName {
    ThreeHole,
    Lj7Single,
    Lj7Multitemp,
}

impl RecipeName {
    pub const ALL: [RecipeName; 3] = [RecipeName::ThreeHole, RecipeName::Lj7Single, RecipeName::Lj7Multitemp];

    pub fn as_str(self) -> &'static str {
        match self {
            RecipeName::ThreeHole => "three-hole",
            RecipeName::Lj7Single => "lj7-single",
            RecipeName::Lj7Multitemp => "lj7-multitemp",
        }
    }

    pub fn system(self) -> SystemKind {
        match self {
            RecipeName::ThreeHole => SystemKind::ThreeHole,
            _ => SystemKind::Lj7,
        }
    }
}

impl fmt::Display for RecipeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecipeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "three-hole" => Ok(RecipeName::ThreeHole),
            "lj7" | "lj7-single" => Ok(RecipeName::Lj7Single),
            "lj7-multitemp" => Ok(RecipeName::Lj7Multitemp),
            other => Err(Error::InvalidConfig(format!(
                "unknown recipe `{other}` (expected three-hole, lj7-single or lj7-multitemp)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
    pub padding: f64,
    /// Generated latents per temperature; 0 matches the reference count.
    pub samples: usize,
    pub sample_seed: u64,
    pub baseline_seed: u64,
    pub profile_axis: ProfileAxis,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bins: eval::DEFAULT_BINS,
            padding: eval::DEFAULT_PADDING,
            samples: 0,
            sample_seed: 7,
            baseline_seed: 11,
            profile_axis: ProfileAxis::MaxVariance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecipe {
    pub name: RecipeName,
    /// Multiplies simulation length and patience budgets.
    pub scale: f64,
    /// Simulated temperatures.
    pub temperatures: Vec<f64>,
    /// Temperatures whose data trains the model.
    pub train_temperatures: Vec<f64>,
    /// Temperatures at which generated and reference latents are compared.
    pub eval_temperatures: Vec<f64>,
    pub potential: PotentialSpec,
    /// Template for every simulation; temperature is replaced and the seed
    /// offset by the temperature's index.
    pub simulation: SimulationConfig,
    pub features: FeatureConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentRecipe {
    pub fn defaults(name: RecipeName) -> Self {
        let system = name.system();
        let (temperatures, train_temperatures, eval_temperatures) = match name {
            RecipeName::ThreeHole => (vec![1.0], vec![1.0], vec![1.0]),
            RecipeName::Lj7Single => (vec![0.2], vec![0.2], vec![0.2]),
            RecipeName::Lj7Multitemp => {
                (vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7], vec![0.2, 0.5], vec![0.2, 0.3, 0.4, 0.5])
            }
        };
        let mut train = TrainConfig::for_system(system);
        train.tempering = name == RecipeName::Lj7Multitemp;
        ExperimentRecipe {
            name,
            scale: 1.0,
            simulation: SimulationConfig::for_system(system, temperatures[0]),
            temperatures,
            train_temperatures,
            eval_temperatures,
            potential: PotentialSpec::for_system(system),
            features: FeatureConfig::default(),
            split: SplitConfig::default(),
            train,
            eval: EvalConfig::default(),
        }
    }

    pub fn system(&self) -> SystemKind {
        self.name.system()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if self.potential.kind != self.system() {
            return bad(format!("recipe {} needs a {} potential", self.name, self.system()));
        }
        if self.temperatures.is_empty() || self.temperatures.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("temperatures must be a non-empty list of positive values".into());
        }
        let known = |t: &f64| self.temperatures.iter().any(|s| (s - t).abs() < 1e-12);
        for (key, list) in [("train_temperatures", &self.train_temperatures), ("eval_temperatures", &self.eval_temperatures)] {
            if list.is_empty() || !list.iter().all(known) {
                return bad(format!("{key} must be a non-empty subset of temperatures"));
            }
        }
        if self.eval.bins == 0 || !(self.eval.padding >= 0.0) {
            return bad("eval.bins must be >= 1 and eval.padding >= 0".into());
        }
        self.potential.validate()?;
        self.simulation.validate()?;
        self.train.validate()
    }

    /// The recipe actually executed: simulation length and patience
    /// multiplied by `scale`.
    pub fn scaled(&self) -> ExperimentRecipe {
        let mut r = self.clone();
        if self.scale != 1.0 {
            let steps = (self.simulation.n_steps as f64 * self.scale).round() as u64;
            r.simulation.n_steps = steps.max(self.simulation.record_stride);
            r.train.patience = scale_budget(self.train.patience, self.scale);
            r.train.diffusion_patience = scale_budget(self.train.diffusion_patience, self.scale);
        }
        r
    }

    pub fn simulation_for(&self, index: usize) -> SimulationConfig {
        SimulationConfig {
            temperature: self.temperatures[index],
            seed: self.simulation.seed.wrapping_add(index as u64),
            ..self.simulation.clone()
        }
    }
}

/// `ceil(budget * scale)`, at least 1.
pub fn scale_budget(budget: usize, scale: f64) -> usize {
    ((budget as f64 * scale).ceil() as usize).max(1)
}

/// Parse TOML overrides onto the defaults of `name` (or of the file's own
/// `name` key). Keys of `[train]` may also appear at top level.
pub fn parse_config_str(text: &str, name: RecipeName) -> Result<ExperimentRecipe> {
    let user: toml::Table =
        text.parse().map_err(|e: toml::de::Error| Error::Schema { key: String::new(), message: e.message().to_string() })?;
    let name = match user.get("name") {
        Some(toml::Value::String(s)) => s.parse()?,
        Some(_) => return Err(Error::Schema { key: "name".into(), message: "expected a recipe name string".into() }),
        None => name,
    };
    let defaults = ExperimentRecipe::defaults(name);
    let mut tree = toml::Value::try_from(&defaults).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let root = tree.as_table_mut().expect("recipe serializes to a table");
    for (key, value) in user {
        if root.contains_key(&key) {
            merge(root, &key, value, &key)?;
        } else if root["train"].as_table().is_some_and(|t| t.contains_key(&key)) {
            let train = root.get_mut("train").and_then(toml::Value::as_table_mut).expect("train table");
            merge(train, &key, value, &format!("train.{key}"))?;
        } else {
            return Err(Error::Schema { key, message: "unknown key".into() });
        }
    }
    let recipe: ExperimentRecipe = tree
        .try_into()
        .map_err(|e: toml::de::Error| Error::Schema { key: String::new(), message: e.message().to_string() })?;
    recipe.validate()?;
    Ok(recipe)
}

pub fn parse_config(path: &Path, name: RecipeName) -> Result<ExperimentRecipe> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, name).map_err(|e| match e {
        Error::Schema { key, message } => Error::Schema { key, message: format!("{message} (in {})", path.display()) },
        other => other,
    })
}

fn merge(table: &mut toml::Table, key: &str, value: toml::Value, path: &str) -> Result<()> {
    let slot = table.get_mut(key).expect("caller checked the key");
    match (slot, value) {
        (toml::Value::Table(base), toml::Value::Table(over)) => {
            for (k, v) in over {
                let sub = format!("{path}.{k}");
                if !base.contains_key(&k) {
                    return Err(Error::Schema { key: sub, message: "unknown key".into() });
                }
                merge(base, &k, v, &sub)?;
            }
            Ok(())
        }
        (slot, value) => {
            if std::mem::discriminant(slot) != std::mem::discriminant(&value)
                && !(slot.is_float() && value.is_integer())
                && !slot.is_str()
            {
                return Err(Error::Schema {
                    key: path.into(),
                    message: format!("expected {}, found {}", slot.type_str(), value.type_str()),
                });
            }
            *slot = match (slot.is_float(), value) {
                (true, toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            Ok(())
        }
    }
}

/// One produced file, relative to the run directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Hash of the stage's configuration and input artifacts.
    pub key: String,
    pub outputs: Vec<Artifact>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemperatureResult {
    pub temperature: f64,
    pub kl_dspib: f64,
    pub kl_spib_prior: f64,
    pub kl_profile: f64,
    pub reference_points: usize,
    pub generated_points: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileChange {
    pub from: f64,
    pub to: f64,
    pub generated_l1: f64,
    pub reference_l1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub final_states: usize,
    pub profile_axis: usize,
    pub temperatures: Vec<TemperatureResult>,
    pub profile_changes: Vec<ProfileChange>,
}

impl RunResults {
    pub fn at(&self, temperature: f64) -> Option<&TemperatureResult> {
        self.temperatures.iter().find(|r| (r.temperature - temperature).abs() < 1e-9)
    }

    pub fn change(&self, from: f64, to: f64) -> Option<&ProfileChange> {
        self.profile_changes.iter().find(|c| (c.from - from).abs() < 1e-9 && (c.to - to).abs() < 1e-9)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub recipe: ExperimentRecipe,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<RunResults>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

fn hash_json<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}

fn temp_tag(t: f64) -> String {
    format!("T{t:.2}")
}

struct Run<'a> {
    root: &'a Path,
    recipe: ExperimentRecipe,
    previous: Option<Manifest>,
    manifest: Manifest,
    timing: Vec<(String, f64, bool)>,
}

impl Run<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn outputs_of(&self, stage: &str) -> Vec<Artifact> {
        self.manifest.stages.iter().filter(|s| s.stage == stage).flat_map(|s| s.outputs.clone()).collect()
    }

    fn reusable(&self, stage: &str, key: &str) -> Option<StageRecord> {
        let prev = self.previous.as_ref()?.stages.iter().find(|s| s.stage == stage && s.key == key)?;
        let intact = prev.outputs.iter().all(|a| {
            let p = self.path(&a.path);
            p.exists() && io::file_sha256(&p).is_ok_and(|h| h == a.sha256)
        });
        intact.then(|| prev.clone())
    }

    /// Run `body` unless a previous run recorded the same key and its outputs
    /// are intact; `body` returns the relative paths it wrote.
    fn stage(
        &mut self,
        stage: &'static str,
        key_input: &impl Serialize,
        body: impl FnOnce(&Self) -> Result<Vec<String>>,
    ) -> Result<()> {
        let key = hash_json(&(stage, key_input));
        let start = Instant::now();
        let (record, skipped) = match self.reusable(stage, &key) {
            Some(rec) => {
                info!("stage {stage}: outputs up to date, skipping");
                (rec, true)
            }
            None => {
                info!("stage {stage}: running");
                let written = body(self).map_err(|e| e.in_stage(stage))?;
                let mut outputs = Vec::with_capacity(written.len());
                for rel in written {
                    let sha256 = io::file_sha256(&self.path(&rel)).map_err(|e| e.in_stage(stage))?;
                    outputs.push(Artifact { path: rel, sha256 });
                }
                (StageRecord { stage: stage.into(), key, outputs }, false)
            }
        };
        self.manifest.stages.push(record);
        self.timing.push((stage.into(), start.elapsed().as_secs_f64(), skipped));
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<()> {
        io::write_json(&self.path(MANIFEST_FILE), &self.manifest)?;
        let timing: Vec<serde_json::Value> = self
            .timing
            .iter()
            .map(|(s, t, skipped)| serde_json::json!({ "stage": s, "seconds": t, "skipped": skipped }))
            .collect();
        io::write_json(&self.path(TIMING_FILE), &timing)
    }
}

/// Paths of a run directory's main artifacts.
pub mod layout {
    pub fn trajectory(tag: &str) -> String {
        format!("sim/traj_{tag}.f32")
    }
    pub const DATASET: &str = "data/train.f32";
    pub const BUNDLE: &str = "model/bundle.json";
    pub const REPORT: &str = "model/train_report.json";
    pub const TRAIN_LOG: &str = "model/train_log.jsonl";
    pub const FINAL_DATASET: &str = "model/refined.f32";
    pub fn generated(tag: &str) -> String {
        format!("latents/generated_{tag}.f32")
    }
    pub fn reference(tag: &str) -> String {
        format!("latents/reference_{tag}.f32")
    }
    pub fn baseline(tag: &str) -> String {
        format!("latents/spib_prior_{tag}.f32")
    }
    pub const KL_TABLE: &str = "eval/kl.csv";
    pub const SUMMARY: &str = "eval/summary.json";
}

fn with_sidecars(paths: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for p in paths {
        out.push(p.clone());
        out.push(io::sidecar_path(Path::new(p)).to_string_lossy().into_owned());
    }
    out
}

/// Execute a recipe into `root`, skipping stages whose recorded inputs and
/// outputs are unchanged. Returns the final manifest.
pub fn run_recipe(recipe: &ExperimentRecipe, root: &Path) -> Result<Manifest> {
    recipe.validate()?;
    let effective = recipe.scaled();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest_path = root.join(MANIFEST_FILE);
    let previous = if manifest_path.exists() { io::read_json::<Manifest>(&manifest_path).ok() } else { None };
    let mut run = Run {
        root,
        manifest: Manifest { recipe: effective.clone(), stages: Vec::new(), results: None },
        recipe: effective,
        previous,
        timing: Vec::new(),
    };
    let r = run.recipe.clone();

    // simulate: one trajectory per temperature, run concurrently
    let sims: Vec<SimulationConfig> = (0..r.temperatures.len()).map(|i| r.simulation_for(i)).collect();
    run.stage("simulate", &(&r.potential, &sims), |run| {
        let results: Vec<Result<Trajectory>> = std::thread::scope(|s| {
            let handles: Vec<_> = sims.iter().map(|c| s.spawn(|| sim::simulate(&r.potential, c))).collect();
            handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
        });
        let mut written = Vec::new();
        for (traj, cfg) in results.into_iter().zip(&sims) {
            let rel = layout::trajectory(&temp_tag(cfg.temperature));
            io::save_trajectory(&run.path(&rel), &traj?)?;
            written.push(rel);
        }
        Ok(with_sidecars(&written))
    })?;

    // featurize: pooled k-means labels over the training temperatures
    let sim_outputs = run.outputs_of("simulate");
    let feat_key = (&r.features, &r.split, r.train.lag, r.train.initial_states, r.train.seed, &r.train_temperatures, &sim_outputs);
    run.stage("featurize", &feat_key, |run| {
        let ds = build_dataset(run.root, &r)?;
        io::ensure_parent(&run.path(layout::DATASET))?;
        featurize::save_dataset(&run.path(layout::DATASET), &ds)?;
        Ok(vec![layout::DATASET.into(), "data/train.labels".into(), "data/train.json".into()])
    })?;

    // train
    let data_outputs = run.outputs_of("featurize");
    run.stage("train", &(&r.train, &data_outputs), |run| {
        let mut ds = featurize::load_dataset(&run.path(layout::DATASET))?;
        let trained = trainer::train(&r.train, &mut ds)?;
        let report = trained.report.clone();
        let bundle = ModelBundle::from_training(r.system(), r.features.clone(), r.train.clone(), r.train_temperatures.clone(), trained);
        bundle.save(&run.path(layout::BUNDLE))?;
        io::write_json(&run.path(layout::REPORT), &report)?;
        let mut log = String::new();
        for e in &report.epochs {
            log.push_str(&serde_json::to_string(e)?);
            log.push('\n');
        }
        std::fs::write(run.path(layout::TRAIN_LOG), log).map_err(|e| Error::io(run.path(layout::TRAIN_LOG), e))?;
        featurize::save_dataset(&run.path(layout::FINAL_DATASET), &ds)?;
        Ok(vec![
            layout::BUNDLE.into(),
            "model/bundle.weights".into(),
            layout::REPORT.into(),
            layout::TRAIN_LOG.into(),
            layout::FINAL_DATASET.into(),
            "model/refined.labels".into(),
            "model/refined.json".into(),
        ])
    })?;

    // sample: generated, reference (deterministic encodings) and prior-baseline latents
    let model_outputs = run.outputs_of("train");
    run.stage("sample", &(&r.eval, &r.eval_temperatures, &model_outputs, &sim_outputs), |run| {
        let bundle = ModelBundle::load(&run.path(layout::BUNDLE))?;
        let ds = featurize::load_dataset(&run.path(layout::DATASET))?;
        let mut written = Vec::new();
        for &t in &r.eval_temperatures {
            let tag = temp_tag(t);
            let reference = reference_latents(run.root, &r, &bundle, &ds, t)?;
            let count = if r.eval.samples == 0 { reference.nrows() } else { r.eval.samples };
            let seed = r.eval.sample_seed.wrapping_add((t * 1000.0).round() as u64);
            let generated = bundle.sample(count, Some(t), seed)?;
            let mut rng = rng_stream(r.eval.baseline_seed, (t * 1000.0).round() as u64);
            let baseline =
                Array2::from_shape_fn((count, bundle.latent_dim()), |_| Distribution::<f64>::sample(&StandardNormal, &mut rng));
            for (rel, latents, s) in [
                (layout::reference(&tag), &reference, 0),
                (layout::generated(&tag), &generated, seed),
                (layout::baseline(&tag), &baseline, r.eval.baseline_seed),
            ] {
                io::save_latents(&run.path(&rel), &LatentFile::from_array(latents, Some(t), s))?;
                written.push(rel);
            }
        }
        Ok(with_sidecars(&written))
    })?;

    // evaluate
    let latent_outputs = run.outputs_of("sample");
    let mut results = RunResults::default();
    run.stage("evaluate", &(&r.eval, &latent_outputs), |run| {
        let (res, written) = evaluate_run(run.root, &r)?;
        results = res;
        Ok(written)
    })?;
    if results.temperatures.is_empty() {
        results = io::read_json(&run.path(layout::SUMMARY))?;
    }
    run.manifest.results = Some(results);
    run.write_manifest()?;
    Ok(run.manifest)
}

/// Features of every training temperature with pooled initial labels.
fn build_dataset(root: &Path, r: &ExperimentRecipe) -> Result<Dataset> {
    let mut features = Vec::new();
    for &t in &r.train_temperatures {
        let traj = io::load_trajectory(&root.join(layout::trajectory(&temp_tag(t))))?;
        features.push(featurize::extract_features(&traj, &r.features)?);
    }
    let views: Vec<_> = features.iter().map(|f| f.view()).collect();
    let pooled = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let init = featurize::initial_labels(pooled.view(), r.train.initial_states, r.train.seed)?;
    let mut datasets = Vec::new();
    let mut offset = 0;
    for (f, &t) in features.into_iter().zip(&r.train_temperatures) {
        let n = f.nrows();
        let labels = init.labels[offset..offset + n].to_vec();
        offset += n;
        datasets.push(featurize::make_lagged_dataset(f, r.train.lag, labels, init.num_states, t, &r.split)?);
    }
    featurize::merge_multitemperature(datasets)
}

/// Deterministic encodings of reference MD data at `t`: held-out frames for
/// training temperatures, every frame otherwise.
fn reference_latents(root: &Path, r: &ExperimentRecipe, bundle: &ModelBundle, ds: &Dataset, t: f64) -> Result<Array2<f64>> {
    let trained = r.train_temperatures.iter().any(|s| (s - t).abs() < 1e-12);
    let features = if trained {
        let frames: Vec<usize> =
            ds.validation_frames().into_iter().filter(|&n| (ds.temperature(n) - t).abs() < 1e-12).collect();
        ds.features.select(Axis(0), &frames)
    } else {
        let path = root.join(layout::trajectory(&temp_tag(t)));
        if !path.exists() {
            return Err(Error::MissingReference(t));
        }
        featurize::extract_features(&io::load_trajectory(&path)?, &r.features)?
    };
    bundle.encode(features.view())
}

fn evaluate_run(root: &Path, r: &ExperimentRecipe) -> Result<(RunResults, Vec<String>)> {
    let bundle_manifest: crate::bundle::BundleManifest = io::read_json(&root.join(layout::BUNDLE))?;
    let load = |rel: String| -> Result<Array2<f64>> { Ok(io::load_latents(&root.join(rel))?.to_array()) };
    let mut generated = Vec::new();
    let mut reference = Vec::new();
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for &t in &r.eval_temperatures {
        let tag = temp_tag(t);
        let (g, rf, b) = (load(layout::generated(&tag))?, load(layout::reference(&tag))?, load(layout::baseline(&tag))?);
        let bin_d = Binning::covering(&[rf.view(), g.view()], r.eval.bins, r.eval.padding)?;
        let bin_b = Binning::covering(&[rf.view(), b.view()], r.eval.bins, r.eval.padding)?;
        let kl_dspib = eval::kl_between(rf.view(), g.view(), &bin_d)?;
        let kl_spib = eval::kl_between(rf.view(), b.view(), &bin_b)?;
        info!("T = {t}: KL(encoded, generated) = {kl_dspib:.4}, KL(encoded, standard normal) = {kl_spib:.4}");
        let system = r.name.to_string();
        records.push(KlRecord { system: system.clone(), temperature: t, method: "d-spib".into(), kl: kl_dspib, binning: bin_d, samples: g.nrows() });
        records.push(KlRecord { system, temperature: t, method: "spib-prior".into(), kl: kl_spib, binning: bin_b, samples: b.nrows() });
        rows.push(TemperatureResult {
            temperature: t,
            kl_dspib,
            kl_spib_prior: kl_spib,
            kl_profile: 0.0,
            reference_points: rf.nrows(),
            generated_points: g.nrows(),
        });
        generated.push((t, g));
        reference.push((t, rf));
    }
    let sweep = eval::compare_latent_sets(&r.eval_temperatures, &generated, &reference, r.eval.profile_axis, r.eval.bins)?;
    for (row, s) in rows.iter_mut().zip(&sweep.rows) {
        row.kl_profile = s.kl_profile;
        records.push(KlRecord {
            system: r.name.to_string(),
            temperature: s.temperature,
            method: format!("d-spib-profile-z{}", sweep.axis),
            kl: s.kl_profile,
            binning: sweep.profile_binning.clone(),
            samples: s.generated.population.len(),
        });
    }
    let mut changes = Vec::new();
    for w in r.eval_temperatures.windows(2) {
        changes.push(ProfileChange {
            from: w[0],
            to: w[1],
            generated_l1: sweep.generated_change(w[0], w[1])?,
            reference_l1: sweep.reference_change(w[0], w[1])?,
        });
    }
    let results = RunResults {
        final_states: bundle_manifest.num_states,
        profile_axis: sweep.axis,
        temperatures: rows,
        profile_changes: changes,
    };
    let table = root.join(layout::KL_TABLE);
    io::ensure_parent(&table)?;
    std::fs::write(&table, eval::kl_table_csv(&records)).map_err(|e| Error::io(&table, e))?;
    let mut written = vec![layout::KL_TABLE.to_string()];
    for p in eval::write_profiles(&root.join("eval/profiles"), &sweep)? {
        written.push(p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned());
    }
    io::write_json(&root.join(layout::SUMMARY), &results)?;
    written.push(layout::SUMMARY.into());
    Ok((results, written))
}
