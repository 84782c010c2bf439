use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tactile_pose::catalog::Catalog;
use tactile_pose::contact::{synthesize_dataset, ContactSampler, Rejections, SynthesisConfig};
use tactile_pose::dataset::{read_dataset, write_dataset, DatasetHeader, DATASET_SCHEMA_VERSION};
use tactile_pose::ddpm::{self, DiffusionModel, ModelInfo, TrainConfig};
use tactile_pose::eval::{self, check_model, ExperimentSpec, RunOptions, ScheduleSpec};
use tactile_pose::filter::{run_filter, FilterConfig, FilterSetup, PoseProposer, ProjectionProposer, SensorPlacement};
use tactile_pose::geometry::PlanarPose;
use tactile_pose::io::{read_to_string, write_atomic};
use tactile_pose::rng::{self, derive_seed};
use tactile_pose::{Error, Observation, Result, SensorConfig, TaxelArray};

/// Planar tactile pose estimation with a diffusion-based inverse observation model.
#[derive(Parser)]
#[command(name = "tactile-pose", version)]
struct Cli {
    /// Progress messages on standard error.
    #[arg(short, long, global = true)]
    verbose: bool,

    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the shapes of a catalog.
    Catalog {
        /// Catalog file; the built-in catalog when omitted.
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Synthesize a contact dataset.
    Synth(SynthArgs),
    /// Train a diffusion model on a dataset.
    Train(TrainArgs),
    /// Sample pose hypotheses for an observation.
    Sample(SampleArgs),
    /// Run the particle filter on a simulated static object.
    Filter(FilterArgs),
    /// Run an experiment spec and write its tables.
    Eval(EvalArgs),
}

#[derive(Args, Clone)]
struct SensorArgs {
    /// Sensor radius in meters.
    #[arg(long, default_value_t = 0.05)]
    radius: f64,
    /// Taxel sensing range in meters.
    #[arg(long, default_value_t = 0.005)]
    rho: f64,
    /// Activation noise standard deviation.
    #[arg(long, default_value_t = 0.02)]
    noise_std: f64,
}

impl SensorArgs {
    fn config(&self, n_taxels: usize) -> SensorConfig {
        SensorConfig {
            radius: self.radius,
            n_taxels,
            rho: self.rho,
            noise_std: self.noise_std,
            saturation_depth: None,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Catalog shape name.
    #[arg(long)]
    object: String,
    /// Number of records.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    taxels: u64,
    /// Maximum penetration depth in meters.
    #[arg(long, default_value_t = 0.005)]
    delta_max: f64,
    #[arg(long, default_value_t = 3)]
    max_reprojections: usize,
    #[command(flatten)]
    sensor: SensorArgs,
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Output dataset file.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output checkpoint file.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ddpm::DEFAULT_HIDDEN as u64, value_parser = clap::value_parser!(u64).range(1..))]
    hidden: u64,
    #[arg(long, default_value_t = ddpm::DEFAULT_TIME_DIM as u64, value_parser = clap::value_parser!(u64).range(2..))]
    time_dim: u64,
    /// Noise draws per record per minibatch.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    noise_draws: u64,
    /// Diffusion steps T.
    #[arg(long, default_value_t = ddpm::DEFAULT_STEPS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, default_value_t = ddpm::DEFAULT_BETA_START)]
    beta_start: f64,
    #[arg(long, default_value_t = ddpm::DEFAULT_BETA_END)]
    beta_end: f64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Observation file: activations separated by whitespace or commas.
    #[arg(long)]
    obs: PathBuf,
    /// Number of hypotheses.
    #[arg(long = "s", default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    s: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also time this many sampling calls and report on standard error.
    #[arg(long)]
    time_reps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ProposerKind {
    Ddpm,
    Sdf,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    object: String,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProposerKind::Ddpm)]
    proposer: ProposerKind,
    /// Number of contacts K.
    #[arg(long, default_value_t = 20)]
    contacts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    particles: u64,
    #[arg(long, default_value_t = 0.1)]
    likelihood_std: f64,
    #[arg(long, default_value_t = 3)]
    resample_period: usize,
    /// Particles injected on the first contact; half the particles by default.
    #[arg(long)]
    initial_injection: Option<usize>,
    #[arg(long, default_value_t = 0.8)]
    injection_decay: f64,
    #[arg(long, value_enum, default_value_t = PlacementArg::Resample)]
    placement: PlacementArg,
    #[arg(long, default_value_t = 0.005)]
    delta_max: f64,
    #[command(flatten)]
    sensor: SensorArgs,
    /// Output run log, one JSON object per line.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Fixed,
    Resample,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Train and save checkpoints that are missing.
    #[arg(long)]
    train: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Config(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    emit(&format!("{text}\n"))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Catalog { catalog } => cmd_catalog(cli, catalog.as_deref()),
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Sample(a) => cmd_sample(cli, a),
        Command::Filter(a) => cmd_filter(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
    }
}

fn cmd_catalog(cli: &Cli, path: Option<&Path>) -> Result<()> {
    let catalog = Catalog::load_or_builtin(path)?;
    if cli.print_config {
        let entries: Vec<_> = catalog.entries().map(|(e, _)| e).collect();
        return print_json(&entries);
    }
    let mut out = String::from("name\tkind\tperimeter_m\tbounding_radius_m\n");
    for (entry, shape) in catalog.entries() {
        writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}",
            entry.name,
            entry.spec.kind_name(),
            shape.perimeter(),
            shape.bounding_radius()
        )
        .expect("writing to a string");
    }
    emit(&out)
}

#[derive(Serialize)]
struct SynthConfig<'a> {
    object: &'a str,
    catalog: Option<&'a Path>,
    out: &'a Path,
    sensor: SensorConfig,
    synthesis: SynthesisConfig,
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let sensor = a.sensor.config(a.taxels as usize);
    let synthesis = SynthesisConfig {
        n_samples: a.n as usize,
        delta_max: a.delta_max,
        bounds: tactile_pose::contact::Bounds::around_sensor(sensor.radius),
        seed: a.seed,
        max_reprojections: a.max_reprojections,
    };
    if cli.print_config {
        return print_json(&SynthConfig {
            object: &a.object,
            catalog: a.catalog.as_deref(),
            out: &a.out,
            sensor,
            synthesis,
        });
    }
    let catalog = Catalog::load_or_builtin(a.catalog.as_deref())?;
    let object = catalog.get(&a.object)?;
    let array = TaxelArray::new(sensor)?;
    let syn = synthesize_dataset(object, &array, &synthesis)?;
    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        object: a.object.clone(),
        sensor_hash: sensor.hash(),
        seed: a.seed,
        n_records: syn.records.len(),
        sensor,
        synthesis,
        rejections: syn.rejections,
    };
    write_dataset(&a.out, &header, &syn.records)?;
    if cli.verbose {
        eprintln!(
            "wrote {} records to {} ({} candidates rejected)",
            syn.records.len(),
            a.out.display(),
            syn.rejections.total()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainRunConfig<'a> {
    dataset: &'a Path,
    out: &'a Path,
    schedule: ScheduleSpec,
    training: TrainConfig,
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let schedule = ScheduleSpec {
        steps: a.steps as usize,
        beta_start: a.beta_start,
        beta_end: a.beta_end,
    };
    let training = TrainConfig {
        epochs: a.epochs as usize,
        batch_size: a.batch_size as usize,
        learning_rate: a.lr,
        seed: a.seed,
        hidden_width: a.hidden as usize,
        time_dim: a.time_dim as usize,
        noise_draws: a.noise_draws as usize,
    };
    if cli.print_config {
        return print_json(&TrainRunConfig {
            dataset: &a.dataset,
            out: &a.out,
            schedule,
            training,
        });
    }
    let sched = schedule.build()?;
    let (header, records) = read_dataset(&a.dataset)?;
    let info = ModelInfo {
        object: header.object.clone(),
        sensor_hash: header.sensor_hash.clone(),
        train_seed: a.seed,
    };
    let report = ddpm::train(&records, &sched, &training, info)?;
    report.model.save(&a.out)?;
    if cli.verbose {
        let first = report.epoch_losses.first().copied().unwrap_or(f64::NAN);
        let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
        eprintln!(
            "trained on {} records: loss {first:.5} -> {last:.5}; wrote {}",
            records.len(),
            a.out.display()
        );
    }
    Ok(())
}

fn read_observation(path: &Path) -> Result<Observation> {
    let text = read_to_string(path)?;
    let values = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split(|c: char| c.is_whitespace() || c == ','))
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("{t:?}: {e}"),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Observation::new(values)
}

#[derive(Serialize)]
struct SampleConfig<'a> {
    checkpoint: &'a Path,
    obs: &'a Path,
    s: u64,
    seed: u64,
    time_reps: Option<usize>,
}

fn cmd_sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    if cli.print_config {
        return print_json(&SampleConfig {
            checkpoint: &a.checkpoint,
            obs: &a.obs,
            s: a.s,
            seed: a.seed,
            time_reps: a.time_reps,
        });
    }
    let model = DiffusionModel::load(&a.checkpoint)?;
    let z = read_observation(&a.obs)?;
    let poses = model.sample(&z, a.s as usize, &mut rng::seeded(a.seed))?;
    let mut out = String::from("# x y cos sin\n");
    for p in &poses {
        writeln!(out, "{} {} {} {}", p.x, p.y, p.c, p.s).expect("writing to a string");
    }
    emit(&out)?;
    if let Some(reps) = a.time_reps {
        let t = eval::time_sampling(&model, &z, a.s as usize, reps, a.seed)?;
        eprintln!(
            "sampling {} hypotheses: {:.3} ms mean, {:.3} ms std over {} runs",
            t.n_hypotheses, t.mean_ms, t.std_ms, t.repetitions
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct FilterRunConfig<'a> {
    checkpoint: &'a Path,
    object: &'a str,
    proposer: ProposerKind,
    contacts: usize,
    sensor_without_taxel_count: SensorConfig,
    delta_max: f64,
    filter: FilterConfig,
    out: &'a Path,
}

fn cmd_filter(cli: &Cli, a: &FilterArgs) -> Result<()> {
    let n = a.particles as usize;
    let filter = FilterConfig {
        n_particles: n,
        likelihood_std: a.likelihood_std,
        resample_period: a.resample_period,
        initial_injection: a.initial_injection.unwrap_or(n.div_ceil(2)),
        injection_decay: a.injection_decay,
        seed: a.seed,
        placement: match a.placement {
            PlacementArg::Fixed => SensorPlacement::Fixed,
            PlacementArg::Resample => SensorPlacement::Resample,
        },
    };
    if cli.print_config {
        return print_json(&FilterRunConfig {
            checkpoint: &a.checkpoint,
            object: &a.object,
            proposer: a.proposer,
            contacts: a.contacts,
            sensor_without_taxel_count: a.sensor.config(0),
            delta_max: a.delta_max,
            filter,
            out: &a.out,
        });
    }
    filter.validate()?;
    let model = DiffusionModel::load(&a.checkpoint)?;
    let sensor = a.sensor.config(model.n_taxels());
    check_model(&model, &a.object, &sensor)?;
    let catalog = Catalog::load_or_builtin(a.catalog.as_deref())?;
    let object = catalog.get(&a.object)?;
    let array = TaxelArray::new(sensor)?;
    let mut synthesis = SynthesisConfig::new(1, sensor.radius, a.seed);
    synthesis.delta_max = a.delta_max;
    let sampler = ContactSampler::new(object, &array, &synthesis)?;
    let ground_truth: PlanarPose = sampler
        .sample_record(
            &array,
            &mut rng::stream(derive_seed(a.seed, 1), 0),
            &mut Rejections::default(),
        )?
        .pose;
    let points = object.boundary_points(eval::DEFAULT_MODEL_POINTS)?;
    let setup = FilterSetup {
        object,
        array: &array,
        bounds: sampler.bounds,
        model_points: &points,
        contacts: &sampler,
    };
    let projection = ProjectionProposer {
        sampler: sampler.clone(),
    };
    let proposer: &dyn PoseProposer = match a.proposer {
        ProposerKind::Ddpm => &model,
        ProposerKind::Sdf => &projection,
    };
    let run = run_filter(
        &setup,
        proposer,
        &ground_truth,
        &filter,
        a.contacts,
        &mut rng::seeded(a.seed),
    )?;
    let mut log = Vec::new();
    for step in run.rows() {
        serde_json::to_writer(&mut log, step).map_err(|e| Error::Config(e.to_string()))?;
        log.push(b'\n');
    }
    write_atomic(&a.out, &log)?;
    if cli.verbose {
        let last = run.steps.last().unwrap_or(&run.prior);
        eprintln!(
            "{} contacts: final MAP ADD {:.4} m, weighted-mean ADD {:.4} m, {} degenerate updates",
            run.steps.len(),
            last.map_add,
            last.wmean_add,
            run.degenerate_updates
        );
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let spec = ExperimentSpec::load(&a.spec)?;
    if cli.print_config {
        return print_json(&spec);
    }
    let out = eval::run_experiment(
        &spec,
        RunOptions {
            train_missing: a.train,
            verbose: cli.verbose,
        },
    )?;
    let listing: String = out.files.iter().map(|f| format!("{}\n", f.display())).collect();
    emit(&listing)
}
