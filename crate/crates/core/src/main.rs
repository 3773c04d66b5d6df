use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use dspib_core::eval::{self, Binning, KlRecord};
use dspib_core::featurize::{self, FeatureConfig};
use dspib_core::io::{self, LatentFile};
use dspib_core::recipe::{self, ExperimentRecipe, RecipeName};
use dspib_core::trainer::{self, rng_stream};
use dspib_core::{sim, Error, ModelBundle, PotentialSpec, Result, SimulationConfig, SystemKind};

/// Relative output paths are resolved against this directory when set.
const OUTPUT_ROOT_ENV: &str = "DSPIB_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "dspib", version, about = "Diffusive state-predictive information bottleneck experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Langevin dynamics and write a trajectory.
    Simulate(SimulateArgs),
    /// Extract features, assign initial labels and build a lagged dataset.
    Featurize(FeaturizeArgs),
    /// Pretrain SPIB, then train the joint model; writes a model bundle.
    Train(TrainArgs),
    /// Draw latents from a trained bundle's prior.
    Sample(SampleArgs),
    /// Compare generated latents with encoded reference trajectories.
    Evaluate(EvaluateArgs),
    /// Run a full experiment recipe end to end.
    Run(RunArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_system)]
    system: SystemKind,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    stride: Option<u64>,
    #[arg(long)]
    timestep: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturizeArgs {
    /// One trajectory per temperature; labels are clustered jointly.
    #[arg(long = "trajectory", required = true, num_args = 1..)]
    trajectories: Vec<PathBuf>,
    #[arg(long)]
    lag: usize,
    #[arg(long, default_value_t = 10)]
    initial_states: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1.5)]
    switch_radius: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_recipe, default_value = "three-hole")]
    system: RecipeName,
    /// Recipe TOML; only its train section and temperatures are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Bundle manifest path (a `.weights` file is written beside it).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Reference trajectories; each is encoded and compared at its temperature.
    #[arg(long = "reference", required = true, num_args = 1..)]
    references: Vec<PathBuf>,
    /// Generated latent files, one per reference; sampled afresh when omitted.
    #[arg(long = "generated", num_args = 1..)]
    generated: Vec<PathBuf>,
    #[arg(long, default_value_t = eval::DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_parser = parse_recipe, default_value = "three-hole")]
    system: RecipeName,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Multiplies simulation length and patience budgets.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_system(s: &str) -> std::result::Result<SystemKind, String> {
    match s {
        "three-hole" => Ok(SystemKind::ThreeHole),
        "lj7" => Ok(SystemKind::Lj7),
        other => Err(format!("unknown system `{other}` (expected three-hole or lj7)")),
    }
}

fn parse_recipe(s: &str) -> std::result::Result<RecipeName, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn load_recipe(name: RecipeName, config: Option<&Path>) -> Result<ExperimentRecipe> {
    match config {
        Some(path) => recipe::parse_config(path, name),
        None => Ok(ExperimentRecipe::defaults(name)),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let spec = PotentialSpec::for_system(args.system);
    let mut config = SimulationConfig::for_system(args.system, args.temperature.unwrap_or(match args.system {
        SystemKind::ThreeHole => 1.0,
        SystemKind::Lj7 => 0.2,
    }));
    if let Some(v) = args.steps {
        config.n_steps = v;
    }
    if let Some(v) = args.stride {
        config.record_stride = v;
    }
    if let Some(v) = args.timestep {
        config.timestep = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    let traj = sim::simulate(&spec, &config)?;
    let out = resolve(&args.out);
    io::save_trajectory(&out, &traj)?;
    println!("wrote {} frames of {} at T = {} to {}", traj.n_frames(), args.system, config.temperature, out.display());
    Ok(())
}

fn featurize(args: FeaturizeArgs) -> Result<()> {
    let fc = FeatureConfig { switch_radius: args.switch_radius, ..FeatureConfig::default() };
    let mut features = Vec::new();
    let mut temps = Vec::new();
    for path in &args.trajectories {
        let traj = io::load_trajectory(path)?;
        temps.push(traj.temperature);
        features.push(featurize::extract_features(&traj, &fc)?);
    }
    let views: Vec<_> = features.iter().map(|f| f.view()).collect();
    let pooled = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let init = featurize::initial_labels(pooled.view(), args.initial_states, args.seed)?;
    let split = featurize::SplitConfig { seed: args.seed, ..Default::default() };
    let mut datasets = Vec::new();
    let mut offset = 0;
    for (f, t) in features.into_iter().zip(temps) {
        let n = f.nrows();
        let labels = init.labels[offset..offset + n].to_vec();
        offset += n;
        datasets.push(featurize::make_lagged_dataset(f, args.lag, labels, init.num_states, t, &split)?);
    }
    let ds = featurize::merge_multitemperature(datasets)?;
    let out = resolve(&args.out);
    featurize::save_dataset(&out, &ds)?;
    println!(
        "wrote {} frames x {} features, {} initial states, {} training / {} validation pairs to {}",
        ds.n_frames(),
        ds.feature_dim(),
        ds.num_states,
        ds.train_pairs().len(),
        ds.validation_pairs().len(),
        out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let recipe = load_recipe(args.system, args.config.as_deref())?;
    let mut ds = featurize::load_dataset(&args.dataset)?;
    let temps: Vec<f64> = ds.temperature_counts().into_iter().map(|(t, _)| t).collect();
    let trained = trainer::train(&recipe.train, &mut ds)?;
    let report = trained.report.clone();
    let bundle = ModelBundle::from_training(recipe.system(), recipe.features.clone(), recipe.train.clone(), temps, trained);
    let out = resolve(&args.out);
    bundle.save(&out)?;
    let report_path = out.with_file_name("train_report.json");
    io::write_json(&report_path, &report)?;
    let log_path = out.with_file_name("train_log.jsonl");
    let mut log = String::new();
    for e in &report.epochs {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    println!(
        "trained {} epochs; {} active states; bundle at {}",
        report.epochs.len(),
        bundle.num_states(),
        out.display()
    );
    Ok(())
}

fn sample(args: SampleArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.bundle)?;
    let z = bundle.sample(args.count, args.temperature, args.seed)?;
    let out = resolve(&args.out);
    io::save_latents(&out, &LatentFile::from_array(&z, args.temperature, args.seed))?;
    println!("wrote {} latents (dim {}) to {}", z.nrows(), z.ncols(), out.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    if !args.generated.is_empty() && args.generated.len() != args.references.len() {
        return Err(Error::InvalidConfig("--generated needs one file per --reference".into()));
    }
    let bundle = ModelBundle::load(&args.bundle)?;
    let out = resolve(&args.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut temps = Vec::new();
    let mut generated = Vec::new();
    let mut reference = Vec::new();
    let mut records = Vec::new();
    for (i, path) in args.references.iter().enumerate() {
        let traj = io::load_trajectory(path)?;
        let t = traj.temperature;
        let rf = bundle.encode(featurize::extract_features(&traj, &bundle.feature_config)?.view())?;
        let g = match args.generated.get(i) {
            Some(p) => io::load_latents(p)?.to_array(),
            None => bundle.sample(rf.nrows(), Some(t), args.seed.wrapping_add(i as u64))?,
        };
        let mut rng = rng_stream(args.seed, 1000 + i as u64);
        let base = Array2::from_shape_fn(g.raw_dim(), |_| Distribution::<f64>::sample(&StandardNormal, &mut rng));
        for (method, other) in [("d-spib", &g), ("spib-prior", &base)] {
            let binning = Binning::covering(&[rf.view(), other.view()], args.bins, eval::DEFAULT_PADDING)?;
            let kl = eval::kl_between(rf.view(), other.view(), &binning)?;
            println!("T = {t}: {method} KL = {kl:.4}");
            records.push(KlRecord { system: bundle.system.to_string(), temperature: t, method: method.into(), kl, binning, samples: other.nrows() });
        }
        temps.push(t);
        generated.push((t, g));
        reference.push((t, rf));
    }
    let sweep = eval::compare_latent_sets(&temps, &generated, &reference, eval::ProfileAxis::MaxVariance, args.bins)?;
    let table = out.join("kl.csv");
    std::fs::write(&table, eval::kl_table_csv(&records)).map_err(|e| Error::io(&table, e))?;
    eval::write_profiles(&out.join("profiles"), &sweep)?;
    for row in &sweep.rows {
        println!("T = {}: profile KL along z{} = {:.4}", row.temperature, sweep.axis, row.kl_profile);
    }
    println!("wrote {} and profiles to {}", table.display(), out.display());
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut recipe = load_recipe(args.system, args.config.as_deref())?;
    if let Some(s) = args.scale {
        recipe.scale = s;
    }
    if let Some(seed) = args.seed {
        recipe.train.seed = seed;
        recipe.simulation.seed = seed;
    }
    let out = resolve(&args.out);
    let manifest = recipe::run_recipe(&recipe, &out)?;
    let files: usize = manifest.stages.iter().map(|s| s.outputs.len()).sum();
    println!("{} (scale {}): {} stages, {} artifacts in {}", recipe.name, recipe.scale, manifest.stages.len(), files, out.display());
    if let Some(res) = &manifest.results {
        println!("active states: {}", res.final_states);
        for t in &res.temperatures {
            println!(
                "T = {}: KL d-spib {:.4}, KL spib prior {:.4}, profile KL {:.4}",
                t.temperature, t.kl_dspib, t.kl_spib_prior, t.kl_profile
            );
        }
        for c in &res.profile_changes {
            println!("profile change {} -> {}: generated {:.4}, reference {:.4}", c.from, c.to, c.generated_l1, c.reference_l1);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Featurize(a) => featurize(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
