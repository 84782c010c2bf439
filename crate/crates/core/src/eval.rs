//! ADD metric and the two experiment harnesses.
//!
//! `compare_samplers` pits observation-conditioned diffusion samples against
//! unconditioned SDF-projection samples for single contacts across taxel
//! resolutions. `filter_convergence` runs the particle filter with each
//! proposal source on a static object and logs ADD per contact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::Catalog;
use crate::contact::{synthesize_dataset, Bounds, ContactSampler, Rejections, SynthesisConfig};
use crate::dataset::{DatasetHeader, DATASET_SCHEMA_VERSION};
use crate::ddpm::{self, DiffusionModel, ModelInfo, NoiseSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::filter::{run_filter, FilterConfig, FilterRun, FilterSetup, PoseProposer, ProjectionProposer};
use crate::geometry::{PlanarPose, Shape, Vec2};
use crate::io::{read_to_string, write_atomic};
use crate::rng::{self, derive_seed};
use crate::sensor::{observe, SensorConfig, TaxelArray};

pub const DEFAULT_MODEL_POINTS: usize = 512;

const TAG_GROUND_TRUTH: u64 = 1;
const TAG_DDPM: u64 = 2;
const TAG_PROJECTION: u64 = 3;
const TAG_FILTER: u64 = 4;

/// Average distance of model points between two poses of the same object.
pub fn add_error(points: &[Vec2], q_est: &PlanarPose, q_gt: &PlanarPose) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("ADD needs at least one model point".into()));
    }
    let dt = q_est.translation() - q_gt.translation();
    if q_est.c == q_gt.c && q_est.s == q_gt.s {
        return Ok(dt.norm());
    }
    let (dc, ds) = (q_est.c - q_gt.c, q_est.s - q_gt.s);
    let sum: f64 = points
        .iter()
        .map(|p| Vec2::new(dc * p.x - ds * p.y + dt.x, ds * p.x + dc * p.y + dt.y).norm())
        .sum();
    Ok(sum / points.len() as f64)
}

/// Median, minimum and maximum of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Self {
            median,
            min: v[0],
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ddpm,
    SdfProjection,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Ddpm, Method::SdfProjection];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ddpm => "ddpm",
            Method::SdfProjection => "sdf_projection",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything about one object at one resolution.
pub struct Cell<'a> {
    pub object_name: &'a str,
    pub object: &'a Shape,
    pub array: &'a TaxelArray,
    pub model: &'a DiffusionModel,
    /// Contact generator for ground truth and projection proposals.
    pub sampler: &'a ContactSampler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSettings {
    pub n_configurations: usize,
    pub n_hypotheses: usize,
    /// Condition on noisy rather than noiseless activations.
    #[serde(default = "default_true")]
    pub noisy_observations: bool,
    #[serde(default = "default_model_points")]
    pub model_points: usize,
}

fn default_true() -> bool {
    true
}

fn default_model_points() -> usize {
    DEFAULT_MODEL_POINTS
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub object: String,
    pub n_taxels: usize,
    pub method: Method,
    pub seed: u64,
    pub n_configurations: usize,
    pub n_hypotheses: usize,
    /// Per configuration, the ADD of its best hypothesis.
    pub best: Spread,
    /// ADD of every hypothesis of every configuration.
    pub all: Spread,
}

/// Best-hypothesis and all-hypothesis ADD for both methods on one cell.
///
/// Configuration `i` draws its ground truth, diffusion noise and projection
/// samples from streams indexed by `i`, so configurations are evaluated in
/// parallel without affecting the result.
pub fn compare_cell(cell: &Cell<'_>, settings: &CompareSettings, seed: u64) -> Result<[CompareRow; 2]> {
    if settings.n_configurations == 0 || settings.n_hypotheses == 0 {
        return Err(Error::Config(
            "n_configurations and n_hypotheses must be positive".into(),
        ));
    }
    if cell.model.n_taxels() != cell.array.n_taxels() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "model expects {} taxels, array has {}",
            cell.model.n_taxels(),
            cell.array.n_taxels()
        )));
    }
    let points = cell.object.boundary_points(settings.model_points)?;
    let s = settings.n_hypotheses;
    let per_config: Vec<[Vec<f64>; 2]> = (0..settings.n_configurations)
        .into_par_iter()
        .map(|i| -> Result<[Vec<f64>; 2]> {
            let i = i as u64;
            let mut gt_rng = rng::stream(derive_seed(seed, TAG_GROUND_TRUTH), i);
            let gt = cell
                .sampler
                .sample_record(cell.array, &mut gt_rng, &mut Rejections::default())?;
            let z = if settings.noisy_observations {
                observe(cell.object, &gt.pose, cell.array, Some(&mut gt_rng))
            } else {
                gt.observation
            };
            let ddpm = cell
                .model
                .sample(&z, s, &mut rng::stream(derive_seed(seed, TAG_DDPM), i))?;
            let proj = ProjectionProposer {
                sampler: cell.sampler.clone(),
            }
            .propose(&z, s, &mut rng::stream(derive_seed(seed, TAG_PROJECTION), i))?;
            let adds = |hyps: &[PlanarPose]| -> Result<Vec<f64>> {
                hyps.iter().map(|q| add_error(&points, q, &gt.pose)).collect()
            };
            Ok([adds(&ddpm)?, adds(&proj)?])
        })
        .collect::<Result<_>>()?;

    let row = |m: usize, method: Method| {
        let best: Vec<f64> = per_config
            .iter()
            .map(|c| c[m].iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let all: Vec<f64> = per_config.iter().flat_map(|c| c[m].iter().copied()).collect();
        CompareRow {
            object: cell.object_name.to_string(),
            n_taxels: cell.array.n_taxels(),
            method,
            seed,
            n_configurations: settings.n_configurations,
            n_hypotheses: s,
            best: Spread::of(&best).expect("at least one configuration"),
            all: Spread::of(&all).expect("at least one hypothesis"),
        }
    };
    Ok([row(0, Method::Ddpm), row(1, Method::SdfProjection)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSettings {
    pub n_contacts: usize,
    #[serde(default = "default_threshold")]
    pub add_threshold: f64,
    #[serde(default = "default_model_points")]
    pub model_points: usize,
    #[serde(default)]
    pub filter: FilterConfig,
}

fn default_threshold() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRun {
    pub seed: u64,
    pub method: Method,
    pub ground_truth: PlanarPose,
    pub run: FilterRun,
}

impl ConvergenceRun {
    pub fn contacts_to_threshold(&self, threshold: f64) -> usize {
        self.run.contacts_to_threshold(threshold)
    }
}

/// Filter runs with diffusion and with projection injection for one seed.
///
/// Both runs share the ground truth, the initial belief and the observation
/// sequence; only the proposal source differs.
pub fn filter_convergence(cell: &Cell<'_>, settings: &ConvergenceSettings, seed: u64) -> Result<[ConvergenceRun; 2]> {
    let points = cell.object.boundary_points(settings.model_points)?;
    let gt = cell
        .sampler
        .sample_record(
            cell.array,
            &mut rng::stream(derive_seed(seed, TAG_GROUND_TRUTH), 0),
            &mut Rejections::default(),
        )?
        .pose;
    let setup = FilterSetup {
        object: cell.object,
        array: cell.array,
        bounds: cell.sampler.bounds,
        model_points: &points,
        contacts: cell.sampler,
    };
    let cfg = FilterConfig {
        seed,
        ..settings.filter
    };
    let projection = ProjectionProposer {
        sampler: cell.sampler.clone(),
    };
    let proposers: [(Method, &dyn PoseProposer); 2] =
        [(Method::Ddpm, cell.model), (Method::SdfProjection, &projection)];
    let runs = proposers.map(|(method, proposer)| {
        let mut rng = rng::seeded(derive_seed(seed, TAG_FILTER));
        run_filter(&setup, proposer, &gt, &cfg, settings.n_contacts, &mut rng).map(|run| ConvergenceRun {
            seed,
            method,
            ground_truth: gt,
            run,
        })
    });
    let [a, b] = runs;
    Ok([a?, b?])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingSummary {
    pub n_hypotheses: usize,
    pub repetitions: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Wall-clock statistics of `sample(model, z, s)` over `repetitions` calls.
pub fn time_sampling(
    model: &DiffusionModel,
    z: &crate::sensor::Observation,
    s: usize,
    repetitions: usize,
    seed: u64,
) -> Result<TimingSummary> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be positive".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let out = model.sample(z, s, &mut rng)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Ok(TimingSummary {
        n_hypotheses: s,
        repetitions,
        mean_ms: mean,
        std_ms: var.sqrt(),
    })
}

/// Noise schedule parameters as written in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: ddpm::DEFAULT_STEPS,
            beta_start: ddpm::DEFAULT_BETA_START,
            beta_end: ddpm::DEFAULT_BETA_END,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Training-set synthesis parameters; bounds follow the sensor radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default = "default_delta_max")]
    pub delta_max: f64,
    #[serde(default = "default_reprojections")]
    pub max_reprojections: usize,
}

fn default_delta_max() -> f64 {
    0.005
}

fn default_reprojections() -> usize {
    3
}

impl DatasetSpec {
    pub fn synthesis_config(&self, sensor_radius: f64) -> SynthesisConfig {
        SynthesisConfig {
            n_samples: self.n_samples,
            delta_max: self.delta_max,
            bounds: Bounds::around_sensor(sensor_radius),
            seed: self.seed,
            max_reprojections: self.max_reprojections,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    pub objects: Vec<String>,
    pub taxel_resolutions: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_configurations: usize,
    pub n_hypotheses: usize,
    #[serde(default = "default_true")]
    pub noisy_observations: bool,
    #[serde(default = "default_model_points")]
    pub model_points: usize,
}

impl CompareSpec {
    pub fn settings(&self) -> CompareSettings {
        CompareSettings {
            n_configurations: self.n_configurations,
            n_hypotheses: self.n_hypotheses,
            noisy_observations: self.noisy_observations,
            model_points: self.model_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub object: String,
    pub n_taxels: usize,
    pub seeds: Vec<u64>,
    pub n_contacts: usize,
    #[serde(default = "default_threshold")]
    pub add_threshold: f64,
    #[serde(default = "default_model_points")]
    pub model_points: usize,
    #[serde(default)]
    pub filter: FilterConfig,
}

impl ConvergenceSpec {
    pub fn settings(&self) -> ConvergenceSettings {
        ConvergenceSettings {
            n_contacts: self.n_contacts,
            add_threshold: self.add_threshold,
            model_points: self.model_points,
            filter: self.filter,
        }
    }
}

/// An experiment file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Shape catalog; the built-in catalog when absent.
    #[serde(default)]
    pub catalog: Option<PathBuf>,
    /// Holds `<object>_<n_taxels>.ckpt` files.
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Sensor parameters; `n_taxels` is set per resolution.
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub diffusion: ScheduleSpec,
    pub dataset: DatasetSpec,
    pub training: TrainConfig,
    #[serde(default)]
    pub compare: Option<CompareSpec>,
    #[serde(default)]
    pub convergence: Option<ConvergenceSpec>,
    /// Directory relative paths were resolved against.
    #[serde(skip)]
    base_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut spec = Self::parse(&text).map_err(|e| Error::format(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(c) = spec.catalog.as_mut() {
            resolve(c);
        }
        resolve(&mut spec.checkpoint_dir);
        resolve(&mut spec.output_dir);
        spec.base_dir = Some(base.to_path_buf());
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !crate::catalog::valid_name(&self.name) {
            return Err(Error::Config(format!("invalid experiment name {:?}", self.name)));
        }
        self.diffusion.build()?;
        self.training.validate()?;
        self.dataset.synthesis_config(self.sensor.radius).validate()?;
        if let Some(c) = &self.compare {
            if c.objects.is_empty() || c.taxel_resolutions.is_empty() || c.seeds.is_empty() {
                return Err(Error::Config(
                    "compare needs at least one object, resolution and seed".into(),
                ));
            }
            if c.n_configurations == 0 || c.n_hypotheses == 0 {
                return Err(Error::Config(
                    "n_configurations and n_hypotheses must be positive".into(),
                ));
            }
            if c.taxel_resolutions.contains(&0) {
                return Err(Error::Config("taxel resolutions must be positive".into()));
            }
        }
        if let Some(c) = &self.convergence {
            if c.seeds.is_empty() || c.n_taxels == 0 {
                return Err(Error::Config("convergence needs seeds and a positive n_taxels".into()));
            }
            c.filter.validate()?;
        }
        if self.compare.is_none() && self.convergence.is_none() {
            return Err(Error::Config(
                "experiment has neither [compare] nor [convergence]".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the spec. Paths under the
    /// spec file's directory are hashed relative to it, so moving an
    /// experiment directory leaves the hash unchanged.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        if let Some(base) = &self.base_dir {
            let relative = |p: &mut PathBuf| {
                if let Ok(r) = p.strip_prefix(base) {
                    *p = r.to_path_buf();
                }
            };
            if let Some(c) = canonical.catalog.as_mut() {
                relative(c);
            }
            relative(&mut canonical.checkpoint_dir);
            relative(&mut canonical.output_dir);
        }
        let json = serde_json::to_vec(&canonical).expect("spec serializes");
        crate::sensor::hex_prefix(&Sha256::digest(&json), 32)
    }

    pub fn sensor_for(&self, n_taxels: usize) -> SensorConfig {
        self.sensor.with_taxels(n_taxels)
    }

    pub fn checkpoint_path(&self, object: &str, n_taxels: usize) -> PathBuf {
        self.checkpoint_dir.join(format!("{object}_{n_taxels}.ckpt"))
    }

    /// Every `(object, n_taxels)` pair that needs a model.
    pub fn model_keys(&self) -> Vec<(String, usize)> {
        let mut keys = Vec::new();
        if let Some(c) = &self.compare {
            for o in &c.objects {
                for &n in &c.taxel_resolutions {
                    keys.push((o.clone(), n));
                }
            }
        }
        if let Some(c) = &self.convergence {
            keys.push((c.object.clone(), c.n_taxels));
        }
        let mut seen = std::collections::HashSet::new();
        keys.retain(|k| seen.insert(k.clone()));
        keys
    }
}

/// Synthesizes a training set for `object` and fits a model to it.
pub fn build_model(
    object_name: &str,
    object: &Shape,
    sensor: SensorConfig,
    dataset: &DatasetSpec,
    schedule: &NoiseSchedule,
    training: &TrainConfig,
) -> Result<(DiffusionModel, DatasetHeader, Vec<f64>)> {
    let array = TaxelArray::new(sensor)?;
    let cfg = dataset.synthesis_config(sensor.radius);
    let syn = synthesize_dataset(object, &array, &cfg)?;
    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        object: object_name.to_string(),
        sensor_hash: sensor.hash(),
        seed: dataset.seed,
        n_records: syn.records.len(),
        sensor,
        synthesis: cfg,
        rejections: syn.rejections,
    };
    let info = ModelInfo {
        object: object_name.to_string(),
        sensor_hash: sensor.hash(),
        train_seed: training.seed,
    };
    let report = ddpm::train(&syn.records, schedule, training, info)?;
    Ok((report.model, header, report.epoch_losses))
}

/// Checks that `model` was trained for `object` with `sensor`.
pub fn check_model(model: &DiffusionModel, object: &str, sensor: &SensorConfig) -> Result<()> {
    if model.info.object != object {
        return Err(Error::IncompatibleCheckpoint(format!(
            "trained for object {:?}, requested {object:?}",
            model.info.object
        )));
    }
    if model.info.sensor_hash != sensor.hash() || model.n_taxels() != sensor.n_taxels {
        return Err(Error::IncompatibleCheckpoint(format!(
            "trained for sensor {} with {} taxels, requested {} with {}",
            model.info.sensor_hash,
            model.n_taxels(),
            sensor.hash(),
            sensor.n_taxels
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Train and save models whose checkpoints are missing.
    pub train_missing: bool,
    pub verbose: bool,
}

/// Loads the checkpoint for `(object, n_taxels)`, training it first if allowed.
pub fn provide_model(
    spec: &ExperimentSpec,
    catalog: &Catalog,
    object: &str,
    n_taxels: usize,
    opts: RunOptions,
) -> Result<DiffusionModel> {
    let path = spec.checkpoint_path(object, n_taxels);
    let sensor = spec.sensor_for(n_taxels);
    if path.exists() {
        let model = DiffusionModel::load(&path)?;
        check_model(&model, object, &sensor)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", path.display())))?;
        return Ok(model);
    }
    if !opts.train_missing {
        return Err(Error::Config(format!(
            "missing checkpoint {} (train it first or pass --train)",
            path.display()
        )));
    }
    if opts.verbose {
        eprintln!("training {object} with {n_taxels} taxels -> {}", path.display());
    }
    let (model, _, losses) = build_model(
        object,
        catalog.get(object)?,
        sensor,
        &spec.dataset,
        &spec.diffusion.build()?,
        &spec.training,
    )?;
    if opts.verbose {
        eprintln!("  final epoch loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
    }
    std::fs::create_dir_all(&spec.checkpoint_dir).map_err(|e| Error::io(&spec.checkpoint_dir, e))?;
    model.save(&path)?;
    Ok(model)
}

fn csv_preamble(spec: &ExperimentSpec, table: &str, columns: &str) -> String {
    format!(
        "# experiment: {}\n# spec_sha256: {}\n# table: {table}\n{columns}\n",
        spec.name,
        spec.hash()
    )
}

pub fn compare_csv(spec: &ExperimentSpec, rows: &[CompareRow]) -> String {
    let mut out = csv_preamble(
        spec,
        "sampler_comparison",
        "object,n_taxels,method,seed,n_configurations,n_hypotheses,\
         best_median_add,best_min_add,best_max_add,all_median_add,all_min_add,all_max_add",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.object,
            r.n_taxels,
            r.method,
            r.seed,
            r.n_configurations,
            r.n_hypotheses,
            r.best.median,
            r.best.min,
            r.best.max,
            r.all.median,
            r.all.min,
            r.all.max
        )
        .expect("writing to a string");
    }
    out
}

pub fn trajectory_csv(spec: &ExperimentSpec, runs: &[ConvergenceRun]) -> String {
    let mut out = csv_preamble(
        spec,
        "filter_trajectories",
        "seed,method,contact_index,map_add,wmean_add,effective_sample_size,injected_count",
    );
    for r in runs {
        for s in r.run.rows() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.seed, r.method, s.contact_index, s.map_add, s.wmean_add, s.effective_sample_size, s.injected_count
            )
            .expect("writing to a string");
        }
    }
    out
}

pub fn convergence_summary_csv(spec: &ExperimentSpec, runs: &[ConvergenceRun], threshold: f64) -> String {
    let mut out = csv_preamble(
        spec,
        "contacts_to_threshold",
        "seed,method,add_threshold,contacts_to_threshold,final_map_add,final_wmean_add",
    );
    for r in runs {
        let last = r.run.steps.last().unwrap_or(&r.run.prior);
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.seed,
            r.method,
            threshold,
            r.contacts_to_threshold(threshold),
            last.map_add,
            last.wmean_add
        )
        .expect("writing to a string");
    }
    out
}

/// Median of integer counts, averaging the middle pair for even lengths.
pub fn median_count(counts: &[usize]) -> f64 {
    let v: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    Spread::of(&v).map_or(f64::NAN, |s| s.median)
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub compare: Vec<CompareRow>,
    pub convergence: Vec<ConvergenceRun>,
    pub files: Vec<PathBuf>,
}

/// Runs every section of `spec` and writes its CSV tables to `output_dir`.
pub fn run_experiment(spec: &ExperimentSpec, opts: RunOptions) -> Result<ExperimentOutput> {
    let catalog = Catalog::load_or_builtin(spec.catalog.as_deref())?;
    for (object, _) in spec.model_keys() {
        catalog.get(&object)?;
    }
    let mut models = Vec::new();
    for (object, n) in spec.model_keys() {
        let model = provide_model(spec, &catalog, &object, n, opts)?;
        models.push(((object, n), model));
    }
    let model_for = |object: &str, n: usize| {
        &models
            .iter()
            .find(|((o, m), _)| o == object && *m == n)
            .expect("model provided above")
            .1
    };
    let cell_parts = |object: &str, n: usize| -> Result<(TaxelArray, ContactSampler)> {
        let sensor = spec.sensor_for(n);
        let array = TaxelArray::new(sensor)?;
        let sampler = ContactSampler::new(
            catalog.get(object)?,
            &array,
            &spec.dataset.synthesis_config(sensor.radius),
        )?;
        Ok((array, sampler))
    };

    std::fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;
    let mut out = ExperimentOutput::default();
    if let Some(c) = &spec.compare {
        for object in &c.objects {
            for &n in &c.taxel_resolutions {
                let (array, sampler) = cell_parts(object, n)?;
                let cell = Cell {
                    object_name: object,
                    object: catalog.get(object)?,
                    array: &array,
                    model: model_for(object, n),
                    sampler: &sampler,
                };
                for &seed in &c.seeds {
                    if opts.verbose {
                        eprintln!("compare {object} n={n} seed={seed}");
                    }
                    out.compare.extend(compare_cell(&cell, &c.settings(), seed)?);
                }
            }
        }
        let path = spec.output_dir.join(format!("{}_compare.csv", spec.name));
        write_atomic(&path, compare_csv(spec, &out.compare).as_bytes())?;
        out.files.push(path);
    }
    if let Some(c) = &spec.convergence {
        let (array, sampler) = cell_parts(&c.object, c.n_taxels)?;
        let cell = Cell {
            object_name: &c.object,
            object: catalog.get(&c.object)?,
            array: &array,
            model: model_for(&c.object, c.n_taxels),
            sampler: &sampler,
        };
        for &seed in &c.seeds {
            if opts.verbose {
                eprintln!("filter {} n={} seed={seed}", c.object, c.n_taxels);
            }
            out.convergence.extend(filter_convergence(&cell, &c.settings(), seed)?);
        }
        let path = spec.output_dir.join(format!("{}_trajectories.csv", spec.name));
        write_atomic(&path, trajectory_csv(spec, &out.convergence).as_bytes())?;
        out.files.push(path);
        let path = spec.output_dir.join(format!("{}_convergence.csv", spec.name));
        write_atomic(
            &path,
            convergence_summary_csv(spec, &out.convergence, c.add_threshold).as_bytes(),
        )?;
        out.files.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn brute_force(points: &[Vec2], a: &PlanarPose, b: &PlanarPose) -> f64 {
        points
            .iter()
            .map(|p| a.transform_point(*p).distance(b.transform_point(*p)))
            .sum::<f64>()
            / points.len() as f64
    }

    #[test]
    fn add_examples() {
        let pts = Shape::rect(0.04, 0.025).unwrap().boundary_points(512).unwrap();
        let q = PlanarPose::from_angle(0.01, 0.07, 0.4);
        assert_eq!(add_error(&pts, &q, &q).unwrap(), 0.0);
        for d in [0.0, 1e-9, 0.003, 0.1, 7.25] {
            let moved = PlanarPose { x: q.x + d, ..q };
            let expected = (moved.x - q.x).abs();
            assert_eq!(add_error(&pts, &moved, &q).unwrap(), expected);
        }
        assert!(add_error(&[], &q, &q).is_err());
    }

    #[test]
    fn add_matches_brute_force_on_a_circle() {
        let circle = Shape::circle(0.03).unwrap();
        let pts = circle.boundary_points(256).unwrap();
        let mut rng = seeded(3);
        for _ in 0..100 {
            let a = PlanarPose::from_angle(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-3.0..3.0));
            let b = PlanarPose::from_angle(a.x, a.y, rng.random_range(-3.0..3.0));
            let got = add_error(&pts, &a, &b).unwrap();
            assert!((got - brute_force(&pts, &a, &b)).abs() < 1e-12);
            assert!((got - add_error(&pts, &b, &a).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn spread_statistics() {
        assert_eq!(
            Spread::of(&[3.0, 1.0, 2.0]).unwrap(),
            Spread {
                median: 2.0,
                min: 1.0,
                max: 3.0
            }
        );
        assert_eq!(Spread::of(&[4.0, 1.0, 2.0, 3.0]).unwrap().median, 2.5);
        assert!(Spread::of(&[]).is_none());
        assert_eq!(median_count(&[5, 1, 3, 9]), 4.0);
    }

    const SPEC: &str = r#"
        name = "smoke"
        checkpoint_dir = "models"
        output_dir = "out"

        [dataset]
        n_samples = 200
        seed = 1

        [training]
        epochs = 2
        batch_size = 64
        learning_rate = 0.001
        seed = 2
        hidden_width = 16
        time_dim = 8

        [compare]
        objects = ["circle", "box"]
        taxel_resolutions = [8, 16]
        seeds = [0]
        n_configurations = 4
        n_hypotheses = 3

        [convergence]
        object = "box"
        n_taxels = 8
        seeds = [0, 1]
        n_contacts = 3
        [convergence.filter]
        n_particles = 10
        initial_injection = 5
    "#;

    #[test]
    fn spec_parsing_and_validation() {
        let spec = ExperimentSpec::parse(SPEC).unwrap();
        assert_eq!(spec.sensor, SensorConfig::default());
        assert_eq!(spec.diffusion, ScheduleSpec::default());
        assert!(spec.compare.as_ref().unwrap().noisy_observations);
        assert_eq!(
            spec.model_keys(),
            vec![
                ("circle".to_string(), 8),
                ("circle".to_string(), 16),
                ("box".to_string(), 8),
                ("box".to_string(), 16)
            ]
        );
        assert_eq!(spec.hash().len(), 64);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        std::fs::write(a.path().join("s.toml"), SPEC).unwrap();
        std::fs::write(b.path().join("s.toml"), SPEC).unwrap();
        let (sa, sb) = (
            ExperimentSpec::load(&a.path().join("s.toml")).unwrap(),
            ExperimentSpec::load(&b.path().join("s.toml")).unwrap(),
        );
        assert_ne!(sa.output_dir, sb.output_dir);
        assert_eq!(sa.hash(), sb.hash());
        assert_eq!(sa.hash(), spec.hash());
        assert!(ExperimentSpec::parse(&SPEC.replace("n_hypotheses = 3", "n_hypotheses = 0")).is_err());
        assert!(ExperimentSpec::parse(&SPEC.replace("n_contacts", "n_kontacts")).is_err());
    }

    #[test]
    fn smoke_experiment_writes_deterministic_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("smoke.toml");
        std::fs::write(&path, SPEC).unwrap();
        let spec = ExperimentSpec::load(&path).unwrap();
        let err = run_experiment(&spec, RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        let opts = RunOptions {
            train_missing: true,
            verbose: false,
        };
        let first = run_experiment(&spec, opts).unwrap();
        assert_eq!(first.compare.len(), 2 * 2 * 2);
        let tables: Vec<Vec<u8>> = first.files.iter().map(|f| std::fs::read(f).unwrap()).collect();
        let compare = String::from_utf8(tables[0].clone()).unwrap();
        assert!(compare.starts_with("# experiment: smoke\n# spec_sha256: "));
        assert_eq!(compare.lines().filter(|l| !l.starts_with('#')).count(), 1 + 8);

        // Second run loads the checkpoints written by the first.
        let second = run_experiment(&spec, RunOptions::default()).unwrap();
        for (f, t) in second.files.iter().zip(&tables) {
            assert_eq!(&std::fs::read(f).unwrap(), t);
        }
        let runs = &second.convergence;
        assert_eq!(runs.len(), 4);
        assert_eq!(runs[0].ground_truth, runs[1].ground_truth);
        assert_eq!(runs[0].run.prior, runs[1].run.prior);
    }
}
