//! Task-by-task orchestration: normalize, place priors, train, update the
//! null space, generate, adapt the classifier, evaluate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    evaluate, memory_account, memory_enumerate, AccuracyMatrix, AiaMode, ClassifierConfig, CosineClassifier,
    MemoryReport, MemoryShape, ReplayMemory, SampleSource, TrainingSource,
};
use crate::codec::{Container, Reader, Writer};
use crate::cvae::{generate, relative_drift, train_task, update_nullspace, TrainConfig, VaeDims, VaeModel, Variant};
use crate::dataio::{
    encode_binary, load_feature_dataset, split_tasks, synth_clusters, uniform_schedule, ClassStats, ClasswiseStats,
    Dataset, FileFormat, TaskStream, STD_FLOOR,
};
use crate::error::{Error, Result};
use crate::nullspace::{sym_eigen_jacobi, LayerDiagnostics, NullSpaceState, JACOBI_MAX_SWEEPS, JACOBI_TOL};
use crate::priors::{run_fpi, sample_means, separation_report, Anchors, FpiConfig, PriorBank, PriorInit, SeparationReport};
use crate::rng::{derive_seed, rng_for, std_normal};

pub const ENV_PREFIX: &str = "NSVAE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Adapt and evaluate the classifier after every task.
    #[default]
    EveryTask,
    /// Adapt once, after the last task.
    FinalOnly,
}

/// Every knob of one experiment. Serialized flat, one `key = value` per field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,

    /// Feature file (`.csv` or binary). Synthetic clusters are used when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_per_class: usize,
    pub synth_spread: f64,
    pub data_seed: u64,
    pub test_fraction: f64,

    pub tasks: usize,
    /// Explicit class sets per task; overrides `tasks`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<Vec<u32>>>,

    pub prior_init: PriorInit,
    pub lambda: f64,
    pub eps_conv: f64,
    pub max_iter: usize,
    pub pair_floor: f64,

    pub nullspace: bool,
    pub threshold_factor: f64,
    pub eig_floor: f64,
    pub cov_passes: usize,
    pub frozen_decoder: bool,

    pub epochs: usize,
    pub lr: f64,
    pub lr_projected: f64,
    pub batch_size: usize,
    pub kappa: f64,
    pub hidden: usize,
    pub latent: usize,
    pub embed: usize,
    pub normalize: bool,

    pub samples_per_class: usize,
    pub clf_beta: f64,
    pub clf_epochs: usize,
    pub clf_lr: f64,
    pub clf_batch: usize,
    pub resample: bool,
    pub adapt: AdaptMode,
    pub aia_mode: AiaMode,

    pub drift_samples: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Fo,
            data_path: None,
            synth_classes: 20,
            synth_dim: 64,
            synth_per_class: 250,
            synth_spread: 2.5,
            data_seed: 2024,
            test_fraction: 0.2,
            tasks: 4,
            schedule: None,
            prior_init: PriorInit::Fpi,
            lambda: 900.0,
            eps_conv: 1e-5,
            max_iter: 10_000,
            pair_floor: 1e-8,
            nullspace: true,
            threshold_factor: 100.0,
            eig_floor: 1e-12,
            cov_passes: 8,
            frozen_decoder: false,
            epochs: 100,
            lr: 5e-4,
            lr_projected: 5e-5,
            batch_size: 64,
            kappa: 1.0,
            hidden: 64,
            latent: 16,
            embed: 10,
            normalize: true,
            samples_per_class: 500,
            clf_beta: 0.05,
            clf_epochs: 30,
            clf_lr: 1e-2,
            clf_batch: 64,
            resample: false,
            adapt: AdaptMode::EveryTask,
            aia_mode: AiaMode::Pooled,
            drift_samples: 256,
            seeds: vec![0, 1, 2],
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    /// Every key accepted in a config file.
    pub fn keys() -> Vec<String> {
        let mut keys: Vec<String> = match toml::Value::try_from(ExperimentConfig::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => Vec::new(),
        };
        keys.extend(["data_path".to_string(), "schedule".to_string()]);
        keys.sort();
        keys
    }

    /// Parses a flat `key = value` document; missing keys keep defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(config_err)?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, then applies `NSVAE_<KEY>` overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => fs::read_to_string(p)?.parse().map_err(config_err)?,
            None => toml::Table::new(),
        };
        apply_env(&mut table, env)?;
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn dims(&self, input: usize) -> VaeDims {
        VaeDims {
            input,
            hidden: self.hidden,
            latent: self.latent,
            embed: self.embed,
        }
    }

    pub fn fpi(&self) -> FpiConfig {
        FpiConfig {
            lambda: self.lambda,
            eps_conv: self.eps_conv,
            max_iter: self.max_iter,
            pair_floor: self.pair_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("synth_classes", self.synth_classes),
            ("synth_dim", self.synth_dim),
            ("synth_per_class", self.synth_per_class),
            ("tasks", self.tasks),
            ("max_iter", self.max_iter),
            ("cov_passes", self.cov_passes),
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("latent", self.latent),
            ("samples_per_class", self.samples_per_class),
            ("clf_batch", self.clf_batch),
            ("drift_samples", self.drift_samples),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        let positive_f = [
            ("synth_spread", self.synth_spread),
            ("eps_conv", self.eps_conv),
            ("pair_floor", self.pair_floor),
            ("threshold_factor", self.threshold_factor),
            ("lr", self.lr),
            ("lr_projected", self.lr_projected),
            ("clf_beta", self.clf_beta),
            ("clf_lr", self.clf_lr),
        ];
        for (k, v) in positive_f {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive and finite")));
            }
        }
        if !(self.lambda >= 0.0 && self.kappa >= 0.0 && self.eig_floor >= 0.0) {
            return Err(Error::Config("lambda, kappa and eig_floor must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.variant.uses_embeddings() && self.embed == 0 {
            return Err(Error::Config("embedding variants need embed > 0".into()));
        }
        if self.frozen_decoder && self.nullspace {
            return Err(Error::Config(
                "frozen_decoder excludes nullspace: a projected decoder is retrained".into(),
            ));
        }
        if !self.variant.is_shared_vae() && (self.nullspace || self.frozen_decoder) {
            return Err(Error::Config(format!(
                "variant {} supports neither nullspace nor frozen_decoder",
                self.variant
            )));
        }
        if self.prior_init != PriorInit::Fpi && !self.variant.uses_class_prior() {
            return Err(Error::Config(format!(
                "prior_init {} needs a variant with class priors",
                self.prior_init
            )));
        }
        if let Some(s) = &self.schedule {
            if s.is_empty() || s.iter().any(Vec::is_empty) {
                return Err(Error::Config("schedule tasks must be non-empty".into()));
            }
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_projected: self.lr_projected,
            kappa: self.kappa,
            frozen_decoder: self.frozen_decoder,
            seed,
        }
    }

    fn classifier_config(&self, seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            beta: self.clf_beta,
            epochs: self.clf_epochs,
            lr: self.clf_lr,
            batch_size: self.clf_batch,
            samples_per_class: self.samples_per_class,
            resample: self.resample,
            seed,
        }
    }

    /// Settings that must agree for runs to be compared.
    fn shared_settings(&self) -> impl PartialEq + std::fmt::Debug {
        (
            self.data_path.clone(),
            self.synth_classes,
            self.synth_dim,
            self.synth_per_class,
            self.synth_spread.to_bits(),
            self.data_seed,
            self.test_fraction.to_bits(),
            self.tasks,
            self.schedule.clone(),
            self.seeds.clone(),
        )
    }
}

fn apply_env(table: &mut toml::Table, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let keys: BTreeSet<String> = ExperimentConfig::keys().into_iter().collect();
    for (name, raw) in env {
        let Some(key) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let key = key.to_ascii_lowercase();
        if !keys.contains(&key) {
            continue;
        }
        // values are read as toml literals, falling back to plain strings
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(raw));
        table.insert(key, value);
    }
    Ok(())
}

/// Train splits per task and test splits per task.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dim: usize,
    pub train: TaskStream,
    pub test: Vec<Dataset>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data_path {
        Some(p) => load_feature_dataset(p, FileFormat::from_path(p)),
        None => Ok(synth_clusters(
            cfg.synth_classes,
            cfg.synth_dim,
            cfg.synth_per_class,
            cfg.synth_spread,
            cfg.data_seed,
        )?
        .dataset),
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let full = load_dataset(cfg)?;
    let (train, test) = full.holdout_split(cfg.test_fraction, cfg.data_seed)?;
    let schedule: Vec<BTreeSet<u32>> = match &cfg.schedule {
        Some(s) => s.iter().map(|t| t.iter().copied().collect()).collect(),
        None => uniform_schedule(&full.classes(), cfg.tasks)?,
    };
    let train = split_tasks(&train, &schedule)?;
    let test_stream = split_tasks(&test, &schedule)?;
    if let Some(t) = test_stream.tasks.iter().position(Dataset::is_empty) {
        return Err(Error::invalid(format!("task {t} has an empty test split")));
    }
    Ok(PreparedData {
        dim: full.dim(),
        train,
        test: test_stream.tasks,
    })
}

/// What each method keeps to regenerate old classes.
#[derive(Debug, Clone)]
pub enum Replay {
    Shared(VaeModel),
    PerClass(BTreeMap<u32, VaeModel>),
    Stored(Vec<Dataset>),
}

/// A bank holding `N(0, I)` for one class.
pub fn standard_bank(class: u32, latent: usize) -> PriorBank {
    let mut bank = PriorBank::new(latent);
    bank.init_means(&Anchors::from([(class, Array1::zeros(latent))]))
        .expect("fresh bank");
    bank
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpiSummary {
    pub task: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionRow {
    pub task: usize,
    #[serde(flatten)]
    pub layer: LayerDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task: usize,
    pub first_epoch: f64,
    pub last_epoch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub accuracy_matrix: Option<AccuracyMatrix>,
    pub final_accuracies: Vec<f64>,
    pub faa: f64,
    pub aia: Option<f64>,
    pub proportions: Vec<ProportionRow>,
    pub fpi: Vec<FpiSummary>,
    pub separation: Vec<(usize, SeparationReport)>,
    /// Relative change of decoder outputs on fixed first-task prior samples,
    /// measured after each later task against the post-first-task decoder.
    pub drift: Vec<f64>,
    pub losses: Vec<TaskLoss>,
    pub memory: MemoryReport,
    pub memory_enumerated: usize,
}

/// Wall-clock seconds per phase, summed over tasks and seeds. Kept out of
/// the report so that reports stay byte-reproducible.
pub type Timings = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub faa_mean: f64,
    pub faa_std: f64,
    pub aia_mean: Option<f64>,
    pub aia_std: Option<f64>,
    pub mean_proportion: Option<f64>,
    pub final_drift_mean: Option<f64>,
    pub memory_total: usize,
    pub memory_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub summary: Summary,
    pub runs: Vec<SeedRun>,
    #[serde(skip)]
    pub timings: Timings,
}

/// `(mean, sample std)`; the std of a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// State of one seed's run, advanced one task at a time.
pub struct SeedRunner<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a PreparedData,
    seed: u64,
    pub stats: Option<ClasswiseStats>,
    pub bank: PriorBank,
    pub replay: Replay,
    pub nullspace: Option<NullSpaceState>,
    pub classifier: Option<CosineClassifier>,
    task_of: BTreeMap<u32, usize>,
    next_task: usize,
    accuracy: AccuracyMatrix,
    final_row: Vec<usize>,
    drift_ref: Option<(Array2<f64>, Vec<u32>, Array2<f64>)>,
    drift: Vec<f64>,
    proportions: Vec<ProportionRow>,
    fpi: Vec<FpiSummary>,
    separation: Vec<(usize, SeparationReport)>,
    losses: Vec<TaskLoss>,
    timings: Timings,
}

struct ReplaySampler<'r, 'a> {
    runner: &'r SeedRunner<'a>,
}

impl SampleSource for ReplaySampler<'_, '_> {
    fn classes(&self) -> BTreeSet<u32> {
        self.runner.task_of.keys().copied().collect()
    }

    fn sample(&self, class: u32, n: usize, seed: u64) -> Result<Array2<f64>> {
        self.runner.sample_class(class, n, seed)
    }
}

impl<'a> SeedRunner<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a PreparedData, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims(data.dim);
        let (replay, nullspace) = match cfg.variant {
            Variant::UpperBound => (Replay::Stored(Vec::new()), None),
            Variant::CgilPerClass => (Replay::PerClass(BTreeMap::new()), None),
            v => {
                let model = VaeModel::new(v, dims, seed)?;
                let ns = if cfg.nullspace {
                    Some(NullSpaceState::new(
                        &model.protected_layer_dims(),
                        cfg.threshold_factor,
                        cfg.eig_floor,
                    )?)
                } else {
                    None
                };
                (Replay::Shared(model), ns)
            }
        };
        Ok(Self {
            cfg,
            data,
            seed,
            stats: cfg.normalize.then(|| ClasswiseStats::with_floor(data.dim, STD_FLOOR)),
            bank: PriorBank::new(cfg.latent),
            replay,
            nullspace,
            classifier: None,
            task_of: BTreeMap::new(),
            next_task: 0,
            accuracy: AccuracyMatrix::new(data.test.iter().map(Dataset::len).collect())?,
            final_row: Vec::new(),
            drift_ref: None,
            drift: Vec::new(),
            proportions: Vec::new(),
            fpi: Vec::new(),
            separation: Vec::new(),
            losses: Vec::new(),
            timings: Timings::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tasks_done(&self) -> usize {
        self.next_task
    }

    pub fn is_done(&self) -> bool {
        self.next_task == self.data.train.len()
    }

    pub fn task_of(&self) -> &BTreeMap<u32, usize> {
        &self.task_of
    }

    pub fn model(&self) -> Option<&VaeModel> {
        match &self.replay {
            Replay::Shared(m) => Some(m),
            _ => None,
        }
    }

    pub fn drift(&self) -> &[f64] {
        &self.drift
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        *self.timings.entry(phase.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
        out
    }

    fn normalized(&self, data: &Dataset) -> Result<Array2<f64>> {
        let mut x = data.matrix();
        if let Some(st) = &self.stats {
            for (mut row, r) in x.rows_mut().into_iter().zip(data.records()) {
                let n = st.normalize(row.view(), r.label)?;
                row.assign(&n);
            }
        }
        Ok(x)
    }

    fn sample_class(&self, class: u32, n: usize, seed: u64) -> Result<Array2<f64>> {
        let task = *self.task_of.get(&class).ok_or(Error::UnknownClass(class))?;
        match &self.replay {
            Replay::Shared(model) => generate(model, &self.bank, self.stats.as_ref(), class, n, seed, task),
            Replay::PerClass(models) => {
                let m = models.get(&class).ok_or(Error::UnknownClass(class))?;
                generate(m, &standard_bank(class, self.cfg.latent), self.stats.as_ref(), class, n, seed, 0)
            }
            Replay::Stored(parts) => {
                let rows: Vec<&[f32]> = parts
                    .iter()
                    .flat_map(|d| d.records())
                    .filter(|r| r.label == class)
                    .map(|r| r.features.as_slice())
                    .collect();
                if rows.is_empty() {
                    return Err(Error::UnknownClass(class));
                }
                let mut rng = rng_for(seed, "stored-draw", u64::from(class));
                let mut x = Array2::zeros((n, self.data.dim));
                for mut row in x.rows_mut() {
                    let r = rows[rng.random_range(0..rows.len())];
                    row.iter_mut().zip(r).for_each(|(d, &v)| *d = f64::from(v));
                }
                Ok(x)
            }
        }
    }

    /// Runs the next task through every phase.
    pub fn run_task(&mut self) -> Result<()> {
        let t = self.next_task;
        if t >= self.data.train.len() {
            return Err(Error::UnknownTask(t));
        }
        let data = self.data;
        let task = &data.train.tasks[t];
        let classes = data.train.label_spaces[t].clone();
        let labels = task.labels();

        let x_norm = self
            .time("normalize", |s| {
                if let Some(st) = s.stats.as_mut() {
                    st.update(task)?;
                }
                s.normalized(task)
            })
            .map_err(|e| e.in_phase(t, "normalize"))?;
        for &c in &classes {
            self.task_of.insert(c, t);
        }

        self.time("prior", |s| s.place_priors(t, &classes, &x_norm, &labels))
            .map_err(|e| e.in_phase(t, "prior"))?;
        self.time("train", |s| s.train(t, task, &x_norm, &labels))
            .map_err(|e| e.in_phase(t, "train"))?;
        self.time("nullspace", |s| s.update_null_space(t, &x_norm, &labels))
            .map_err(|e| e.in_phase(t, "nullspace"))?;
        self.bank.freeze_all();
        self.time("drift", |s| s.track_drift(t)).map_err(|e| e.in_phase(t, "drift"))?;

        let last = t + 1 == data.train.len();
        if self.cfg.adapt == AdaptMode::EveryTask || last {
            self.time("classifier", |s| s.adapt_classifier(t))
                .map_err(|e| e.in_phase(t, "classifier"))?;
            let clf = self.classifier.as_ref().expect("fitted above");
            let row = evaluate(clf, &data.test, t).map_err(|e| e.in_phase(t, "evaluate"))?;
            if self.cfg.adapt == AdaptMode::EveryTask {
                self.accuracy.push_row(row.clone())?;
            }
            if last {
                self.final_row = row;
            }
        }
        self.next_task += 1;
        Ok(())
    }

    fn place_priors(&mut self, t: usize, classes: &BTreeSet<u32>, x_norm: &Array2<f64>, labels: &[u32]) -> Result<()> {
        let Replay::Shared(model) = &mut self.replay else {
            return Ok(());
        };
        let latent = self.cfg.latent;
        if !model.variant().uses_class_prior() {
            let zeros: Anchors = classes.iter().map(|&c| (c, Array1::zeros(latent))).collect();
            return self.bank.init_means(&zeros);
        }
        model.ensure_embeddings(classes, self.seed);
        match self.cfg.prior_init {
            PriorInit::Fpi => {
                let post = model.encode(x_norm.view(), labels)?;
                let anchors = class_means(&post.mu, labels);
                self.bank.init_means(&anchors)?;
                let trace = run_fpi(&mut self.bank, &anchors, &self.cfg.fpi())?;
                self.fpi.push(FpiSummary {
                    task: t,
                    iterations: trace.iterations,
                    converged: trace.converged,
                    final_displacement: trace.displacements.last().copied().unwrap_or(0.0),
                });
            }
            mode => {
                let mut rng = rng_for(self.seed, "prior-init", t as u64);
                let means = sample_means(classes, latent, mode, &mut rng)?;
                self.bank.init_means(&means)?;
            }
        }
        if self.bank.len() >= 2 {
            self.separation.push((t, separation_report(&self.bank)?));
        }
        Ok(())
    }

    fn train(&mut self, t: usize, task: &Dataset, x_norm: &Array2<f64>, labels: &[u32]) -> Result<()> {
        let tc = self.cfg.train_config(derive_seed(self.seed, "train", t as u64));
        match &mut self.replay {
            Replay::Shared(model) => {
                let stats = train_task(model, t, x_norm, labels, &self.bank, self.nullspace.as_ref(), &tc)?;
                self.losses.push(TaskLoss {
                    task: t,
                    first_epoch: stats.epoch_losses.first().map_or(0.0, |l| l.total),
                    last_epoch: stats.epoch_losses.last().map_or(0.0, |l| l.total),
                });
            }
            Replay::PerClass(models) => {
                let classes: BTreeSet<u32> = labels.iter().copied().collect();
                for c in classes {
                    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                    let x = x_norm.select(Axis(0), &idx);
                    let y = vec![c; idx.len()];
                    let bank = standard_bank(c, self.cfg.latent);
                    let mut m = VaeModel::new(
                        Variant::CgilPerClass,
                        self.cfg.dims(self.data.dim),
                        derive_seed(self.seed, "cgil", u64::from(c)),
                    )?;
                    let ctc = TrainConfig {
                        epochs: (tc.epochs / 4).max(1),
                        seed: derive_seed(tc.seed, "cgil", u64::from(c)),
                        ..tc
                    };
                    train_task(&mut m, 0, &x, &y, &bank, None, &ctc)?;
                    models.insert(c, m);
                }
            }
            Replay::Stored(parts) => parts.push(task.clone()),
        }
        Ok(())
    }

    fn update_null_space(&mut self, t: usize, x_norm: &Array2<f64>, labels: &[u32]) -> Result<()> {
        let (Replay::Shared(model), Some(ns)) = (&self.replay, self.nullspace.as_mut()) else {
            return Ok(());
        };
        let seed = derive_seed(self.seed, "nullspace", t as u64);
        update_nullspace(model, t, x_norm, labels, &self.bank, ns, self.cfg.cov_passes, seed)?;
        for layer in ns.diagnostics() {
            self.proportions.push(ProportionRow { task: t, layer });
        }
        Ok(())
    }

    fn track_drift(&mut self, t: usize) -> Result<()> {
        let Replay::Shared(model) = &self.replay else {
            return Ok(());
        };
        match &self.drift_ref {
            None => {
                let first: Vec<u32> = self.data.train.label_spaces[0].iter().copied().collect();
                let (z, labels) = fixed_prior_samples(&self.bank, &first, self.cfg.drift_samples, self.seed)?;
                let out = model.decode(z.view(), 0, &labels)?;
                self.drift_ref = Some((z, labels, out));
            }
            Some((z, labels, before)) => {
                debug_assert!(t > 0);
                let after = model.decode(z.view(), 0, labels)?;
                self.drift.push(relative_drift(before, &after)?);
            }
        }
        Ok(())
    }

    fn adapt_classifier(&mut self, t: usize) -> Result<()> {
        let seen: BTreeSet<u32> = self.task_of.keys().copied().collect();
        let cc = self.cfg.classifier_config(derive_seed(self.seed, "classifier", t as u64));
        let dim = self.data.dim;
        let (clf, _) = if self.cfg.resample {
            CosineClassifier::fit(&seen, dim, TrainingSource::Resample(&ReplaySampler { runner: self }), &cc)?
        } else {
            let (x, y) = self.materialize(t, &seen)?;
            CosineClassifier::fit(&seen, dim, TrainingSource::Materialized { x: &x, labels: &y }, &cc)?
        };
        self.classifier = Some(clf);
        Ok(())
    }

    /// The synthetic set for task `t`; the upper bound uses its stored data.
    fn materialize(&self, t: usize, seen: &BTreeSet<u32>) -> Result<(Array2<f64>, Vec<u32>)> {
        if let Replay::Stored(parts) = &self.replay {
            let all = Dataset::concat(self.data.dim, parts)?;
            return Ok((all.matrix(), all.labels()));
        }
        let n = self.cfg.samples_per_class;
        let mut blocks = Vec::with_capacity(seen.len());
        let mut labels = Vec::with_capacity(n * seen.len());
        for &c in seen {
            let seed = derive_seed(derive_seed(self.seed, "dgen", t as u64), "class", u64::from(c));
            blocks.push(self.sample_class(c, n, seed)?);
            labels.extend(std::iter::repeat_n(c, n));
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
        Ok((x, labels))
    }

    pub fn memory(&self) -> Option<(MemoryReport, usize)> {
        let clf = self.classifier.as_ref()?;
        let stored = match &self.replay {
            Replay::Stored(parts) => parts.iter().map(Dataset::len).sum(),
            _ => 0,
        };
        let shape = MemoryShape {
            variant: self.cfg.variant,
            dims: self.cfg.dims(self.data.dim),
            n_classes: self.task_of.len(),
            n_tasks: self.next_task,
            normalized: self.stats.is_some(),
            n_stored: stored,
        };
        let all_stored;
        let mem = match &self.replay {
            Replay::Shared(model) => ReplayMemory::Shared {
                model,
                bank: &self.bank,
                stats: self.stats.as_ref(),
            },
            Replay::PerClass(models) => ReplayMemory::PerClass {
                models,
                stats: self.stats.as_ref(),
            },
            Replay::Stored(parts) => {
                all_stored = Dataset::concat(self.data.dim, parts).ok()?;
                ReplayMemory::Stored(&all_stored)
            }
        };
        Some((memory_account(&shape), memory_enumerate(&mem, clf)))
    }

    pub fn finish(self) -> Result<(SeedRun, Timings)> {
        if !self.is_done() {
            return Err(Error::invalid("run stopped before the last task"));
        }
        let (memory, memory_enumerated) = self
            .memory()
            .ok_or_else(|| Error::invalid("classifier was never fitted"))?;
        let final_accuracies: Vec<f64> = self
            .final_row
            .iter()
            .zip(&self.accuracy.test_sizes)
            .map(|(&c, &n)| c as f64 / n as f64)
            .collect();
        let faa = final_accuracies.iter().sum::<f64>() / final_accuracies.len() as f64;
        let (accuracy_matrix, aia) = if self.cfg.adapt == AdaptMode::EveryTask {
            let aia = self.accuracy.avg_incremental_accuracy(self.cfg.aia_mode)?;
            (Some(self.accuracy), Some(aia))
        } else {
            (None, None)
        };
        Ok((
            SeedRun {
                seed: self.seed,
                accuracy_matrix,
                final_accuracies,
                faa,
                aia,
                proportions: self.proportions,
                fpi: self.fpi,
                separation: self.separation,
                drift: self.drift,
                losses: self.losses,
                memory,
                memory_enumerated,
            },
            self.timings,
        ))
    }

    /// Everything needed to resume generation or diagnose this point.
    pub fn checkpoint(&self) -> Result<Container> {
        let mut c = Container::new();
        let meta = CheckpointMeta {
            task: self.next_task.checked_sub(1).ok_or_else(|| Error::invalid("no task finished"))?,
            seed: self.seed,
            variant: self.cfg.variant,
            dims: self.cfg.dims(self.data.dim),
            task_of: self.task_of.clone(),
        };
        c.push(b"META", serde_json::to_vec(&meta)?);
        let mut w = Writer::new();
        match &self.replay {
            Replay::Shared(m) => m.encode_checkpoint(&mut w, self.bank.content_hash()),
            Replay::PerClass(models) => {
                w.len_prefixed(models.len());
                for (&cl, m) in models {
                    w.u32(cl);
                    m.encode_checkpoint(&mut w, 0);
                }
            }
            Replay::Stored(parts) => w.bytes(&encode_binary(&Dataset::concat(self.data.dim, parts)?)),
        }
        c.push(b"MODL", w.into_bytes());
        let mut w = Writer::new();
        self.bank.encode(&mut w);
        c.push(b"BANK", w.into_bytes());
        if let Some(st) = &self.stats {
            let mut w = Writer::new();
            encode_stats(st, &mut w);
            c.push(b"STAT", w.into_bytes());
        }
        if let Some(ns) = &self.nullspace {
            let mut w = Writer::new();
            ns.encode(&mut w);
            c.push(b"NULL", w.into_bytes());
        }
        if let Some(clf) = &self.classifier {
            let mut w = Writer::new();
            encode_classifier(clf, &mut w);
            c.push(b"CLSF", w.into_bytes());
        }
        Ok(c)
    }
}

fn class_means(mu: &Array2<f64>, labels: &[u32]) -> Anchors {
    let mut sums: BTreeMap<u32, (Array1<f64>, usize)> = BTreeMap::new();
    for (row, &y) in mu.rows().into_iter().zip(labels) {
        let e = sums.entry(y).or_insert_with(|| (Array1::zeros(mu.ncols()), 0));
        e.0 += &row;
        e.1 += 1;
    }
    sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
}

/// `n` latent draws `z ∼ N(μ_y, I)`, classes dealt round-robin.
pub fn fixed_prior_samples(bank: &PriorBank, classes: &[u32], n: usize, seed: u64) -> Result<(Array2<f64>, Vec<u32>)> {
    if classes.is_empty() {
        return Err(Error::invalid("no classes to sample"));
    }
    let mut rng = rng_for(seed, "drift-probe", 0);
    let labels: Vec<u32> = (0..n).map(|i| classes[i % classes.len()]).collect();
    let mut z = Array2::zeros((n, bank.latent_dim()));
    for (mut row, y) in z.rows_mut().into_iter().zip(&labels) {
        let mean = bank.mean(*y).ok_or(Error::UnknownClass(*y))?;
        for (v, m) in row.iter_mut().zip(mean) {
            *v = m + std_normal(&mut rng);
        }
    }
    Ok((z, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: usize,
    pub seed: u64,
    pub variant: Variant,
    pub dims: VaeDims,
    pub task_of: BTreeMap<u32, usize>,
}

pub fn encode_stats(st: &ClasswiseStats, w: &mut Writer) {
    w.len_prefixed(st.dim());
    w.f64(st.std_floor());
    w.len_prefixed(st.len());
    for c in st.classes() {
        let s = st.get(c).unwrap();
        w.u32(c);
        for v in s.mean.iter().chain(&s.std) {
            w.f64(*v);
        }
    }
}

pub fn decode_stats(r: &mut Reader<'_>) -> Result<ClasswiseStats> {
    let dim = r.len_prefixed()?;
    let floor = r.f64()?;
    if !(floor > 0.0) {
        return Err(Error::Malformed("std floor".into()));
    }
    let mut st = ClasswiseStats::with_floor(dim, floor);
    for _ in 0..r.len_prefixed()? {
        let c = r.u32()?;
        let mean = (0..dim).map(|_| r.f64()).collect::<Result<Array1<f64>>>()?;
        let std = (0..dim).map(|_| r.f64()).collect::<Result<Array1<f64>>>()?;
        st.insert(c, ClassStats { mean, std })?;
    }
    Ok(st)
}

pub fn encode_classifier(clf: &CosineClassifier, w: &mut Writer) {
    w.f64(clf.beta());
    w.len_prefixed(clf.classes().len());
    for &c in clf.classes() {
        w.u32(c);
    }
    w.matrix(clf.weights());
}

pub fn decode_classifier(r: &mut Reader<'_>) -> Result<CosineClassifier> {
    let beta = r.f64()?;
    let classes = (0..r.len_prefixed()?).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let weights = r.matrix()?;
    if weights.nrows() != classes.len() {
        return Err(Error::Malformed("classifier rows".into()));
    }
    let map = classes
        .iter()
        .zip(weights.rows())
        .map(|(&c, w)| (c, w.to_owned()))
        .collect();
    CosineClassifier::from_weights(map, beta)
}

fn run_seed(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(SeedRun, Timings)> {
    let mut runner = SeedRunner::new(cfg, data, seed)?;
    while !runner.is_done() {
        runner.run_task()?;
        if let Some(dir) = checkpoint_dir {
            let t = runner.tasks_done() - 1;
            let path = checkpoint_path(dir, seed, t);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, runner.checkpoint()?.to_bytes()).map_err(|e| Error::from(e).in_phase(t, "checkpoint"))?;
        }
    }
    runner.finish()
}

pub fn checkpoint_path(dir: &Path, seed: u64, task: usize) -> PathBuf {
    dir.join(format!("seed-{seed}")).join(format!("task-{task}.nsvc"))
}

/// Runs every seed (in parallel) and aggregates the report.
pub fn run_experiment(cfg: &ExperimentConfig, checkpoint_dir: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let results: Vec<Result<(SeedRun, Timings)>> = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, &data, s, checkpoint_dir))
        .collect();
    let mut runs = Vec::with_capacity(results.len());
    let mut timings = Timings::new();
    for r in results {
        let (run, t) = r?;
        for (k, v) in t {
            *timings.entry(k).or_insert(0.0) += v;
        }
        runs.push(run);
    }
    Ok(RunReport {
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        summary: summarize(&runs),
        runs,
        timings,
    })
}

fn summarize(runs: &[SeedRun]) -> Summary {
    let (faa_mean, faa_std) = mean_std(&runs.iter().map(|r| r.faa).collect::<Vec<_>>());
    let aias: Option<Vec<f64>> = runs.iter().map(|r| r.aia).collect();
    let (aia_mean, aia_std) = match aias {
        Some(v) => {
            let (m, s) = mean_std(&v);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    let rs: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.proportions.iter().map(|p| p.layer.proportion))
        .collect();
    let drifts: Vec<f64> = runs.iter().filter_map(|r| r.drift.last().copied()).collect();
    Summary {
        faa_mean,
        faa_std,
        aia_mean,
        aia_std,
        mean_proportion: (!rs.is_empty()).then(|| mean_std(&rs).0),
        final_drift_mean: (!drifts.is_empty()).then(|| mean_std(&drifts).0),
        memory_total: runs[0].memory.replay_total,
        memory_per_class: runs[0].memory.per_class,
    }
}

impl RunReport {
    /// Pretty JSON; identical inputs give identical bytes.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn metrics(&self) -> Metrics {
        let matrices: Vec<Vec<Vec<f64>>> = self
            .runs
            .iter()
            .filter_map(|r| r.accuracy_matrix.as_ref().map(AccuracyMatrix::rows))
            .collect();
        let accuracy_matrix = matrices.first().map(|first| {
            first
                .iter()
                .enumerate()
                .map(|(t, row)| {
                    (0..row.len())
                        .map(|i| matrices.iter().map(|m| m[t][i]).sum::<f64>() / matrices.len() as f64)
                        .collect()
                })
                .collect()
        });
        Metrics {
            variant: self.config.variant,
            seeds: self.seeds.clone(),
            accuracy_matrix,
            faa_mean: self.summary.faa_mean,
            faa_std: self.summary.faa_std,
            aia_mean: self.summary.aia_mean,
            aia_std: self.summary.aia_std,
            memory_total: self.summary.memory_total,
            memory_per_class: self.summary.memory_per_class,
        }
    }

    /// `seed,after_task,eval_task,accuracy` rows.
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("seed,after_task,eval_task,accuracy\n");
        for r in &self.runs {
            if let Some(m) = &r.accuracy_matrix {
                for (t, row) in m.rows().iter().enumerate() {
                    for (i, a) in row.iter().enumerate() {
                        out.push_str(&format!("{},{t},{i},{a}\n", r.seed));
                    }
                }
            }
        }
        out
    }

    /// `seed,task,layer_id,n_l,lambda_min,lambda_max,selected,proportion` rows.
    pub fn proportion_csv(&self) -> String {
        let mut out = String::from("seed,task,layer_id,n_l,lambda_min,lambda_max,selected,proportion\n");
        for r in &self.runs {
            for p in &r.proportions {
                let d = &p.layer;
                out.push_str(&format!(
                    "{},{},{},{},{:e},{:e},{},{}\n",
                    r.seed, p.task, d.layer, d.count, d.lambda_min, d.lambda_max, d.selected, d.proportion
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Mean over seeds of `A[t][i]`.
    pub accuracy_matrix: Option<Vec<Vec<f64>>>,
    pub faa_mean: f64,
    pub faa_std: f64,
    pub aia_mean: Option<f64>,
    pub aia_std: Option<f64>,
    pub memory_total: usize,
    pub memory_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub variant: Variant,
    pub prior_init: PriorInit,
    pub nullspace: bool,
    pub frozen_decoder: bool,
    pub faa_mean: f64,
    pub faa_std: f64,
    pub aia_mean: Option<f64>,
    pub memory_total: usize,
    pub memory_per_class: usize,
    pub mean_proportion: Option<f64>,
    pub final_drift: Option<f64>,
}

/// The comparison grid derived from `base`: conditioning × decoder handling,
/// dynamic heads, baselines and prior-initialization modes.
pub fn standard_grid(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let with = |variant, nullspace, frozen, init| ExperimentConfig {
        variant,
        nullspace,
        frozen_decoder: frozen,
        prior_init: init,
        ..base.clone()
    };
    let mut grid = Vec::new();
    for (v, name) in [(Variant::Ceo, "ceo"), (Variant::Fo, "fo")] {
        grid.push((format!("{name}-frozen"), with(v, false, true, PriorInit::Fpi)));
        grid.push((format!("{name}-retrained"), with(v, false, false, PriorInit::Fpi)));
        grid.push((format!("{name}-nullspace"), with(v, true, false, PriorInit::Fpi)));
    }
    grid.push(("fod-nullspace".into(), with(Variant::Fod, true, false, PriorInit::Fpi)));
    grid.push(("fodce-nullspace".into(), with(Variant::Fodce, true, false, PriorInit::Fpi)));
    grid.push(("cgil".into(), with(Variant::CgilPerClass, false, false, PriorInit::Fpi)));
    grid.push(("upper-bound".into(), with(Variant::UpperBound, false, false, PriorInit::Fpi)));
    grid.push(("fo-nullspace-normal".into(), with(Variant::Fo, true, false, PriorInit::Normal)));
    grid.push(("fo-nullspace-uniform".into(), with(Variant::Fo, true, false, PriorInit::Uniform)));
    grid
}

/// Runs every configuration of `grid`; all must share data and seeds.
pub fn run_ablation(grid: &[(String, ExperimentConfig)]) -> Result<(Vec<AblationRow>, Vec<RunReport>)> {
    let Some((_, first)) = grid.first() else {
        return Err(Error::Config("empty ablation grid".into()));
    };
    let shared = first.shared_settings();
    if let Some((name, _)) = grid.iter().find(|(_, c)| c.shared_settings() != shared) {
        return Err(Error::Config(format!("grid entry '{name}' does not share data and seeds")));
    }
    let reports: Vec<Result<RunReport>> = grid.par_iter().map(|(_, c)| run_experiment(c, None)).collect();
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let rows = grid
        .iter()
        .zip(&reports)
        .map(|((name, c), r)| AblationRow {
            name: name.clone(),
            variant: c.variant,
            prior_init: c.prior_init,
            nullspace: c.nullspace,
            frozen_decoder: c.frozen_decoder,
            faa_mean: r.summary.faa_mean,
            faa_std: r.summary.faa_std,
            aia_mean: r.summary.aia_mean,
            memory_total: r.summary.memory_total,
            memory_per_class: r.summary.memory_per_class,
            mean_proportion: r.summary.mean_proportion,
            final_drift: r.summary.final_drift_mean,
        })
        .collect();
    Ok((rows, reports))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut out = String::from(
        "name,variant,prior_init,nullspace,frozen_decoder,faa_mean,faa_std,aia_mean,memory_total,memory_per_class,mean_proportion,final_drift\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.name,
            r.variant,
            r.prior_init,
            r.nullspace,
            r.frozen_decoder,
            r.faa_mean,
            r.faa_std,
            opt(r.aia_mean),
            r.memory_total,
            r.memory_per_class,
            opt(r.mean_proportion),
            opt(r.final_drift)
        ));
    }
    out
}

/// One decoded checkpoint of a shared-model run.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub model: Option<VaeModel>,
    pub bank: PriorBank,
    pub stats: Option<ClasswiseStats>,
    pub nullspace: Option<NullSpaceState>,
    pub classifier: Option<CosineClassifier>,
}

pub fn load_checkpoint(c: &Container) -> Result<LoadedCheckpoint> {
    let meta: CheckpointMeta = serde_json::from_slice(c.require(b"META")?)?;
    let bank = {
        let mut r = Reader::new(c.require(b"BANK")?);
        let b = PriorBank::decode(&mut r)?;
        r.finish()?;
        b
    };
    let model = if meta.variant.is_shared_vae() {
        let mut r = Reader::new(c.require(b"MODL")?);
        let (m, hash) = VaeModel::decode_checkpoint(&mut r)?;
        r.finish()?;
        if hash != bank.content_hash() {
            return Err(Error::Incompatible(format!(
                "model of task {} was saved with a different prior bank",
                meta.task
            )));
        }
        Some(m)
    } else {
        None
    };
    let section = |tag: &[u8; 4]| c.get(tag).map(Reader::new);
    let stats = section(b"STAT").map(|mut r| decode_stats(&mut r)).transpose()?;
    let nullspace = section(b"NULL").map(|mut r| NullSpaceState::decode(&mut r)).transpose()?;
    let classifier = section(b"CLSF").map(|mut r| decode_classifier(&mut r)).transpose()?;
    Ok(LoadedCheckpoint {
        meta,
        model,
        bank,
        stats,
        nullspace,
        classifier,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub from_task: usize,
    pub to_task: usize,
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Consecutive checkpoints, then first against last.
    pub drift: Vec<DriftRow>,
    pub proportions: Vec<ProportionRow>,
    pub separation: Vec<(usize, SeparationReport)>,
    /// `class_id,pc1,pc2` rows of prior samples from the last checkpoint.
    #[serde(skip)]
    pub pca_csv: String,
}

/// Compares checkpoints of one run, ordered by task.
pub fn diagnose(checkpoints: &[Container], samples: usize, seed: u64) -> Result<Diagnostics> {
    if checkpoints.len() < 2 {
        return Err(Error::Incompatible("diagnosis needs at least two checkpoints".into()));
    }
    let loaded = checkpoints.iter().map(load_checkpoint).collect::<Result<Vec<_>>>()?;
    let first = &loaded[0].meta;
    for w in loaded.windows(2) {
        let (a, b) = (&w[0].meta, &w[1].meta);
        if a.variant != b.variant || a.dims != b.dims || a.seed != b.seed {
            return Err(Error::Incompatible(format!(
                "checkpoints of tasks {} and {} come from different runs",
                a.task, b.task
            )));
        }
        if b.task < a.task {
            return Err(Error::Incompatible("checkpoints are not ordered by task".into()));
        }
    }
    if !first.variant.is_shared_vae() {
        return Err(Error::Incompatible(format!("variant {} has no shared decoder", first.variant)));
    }

    let probe_classes: Vec<u32> = first.task_of.iter().filter(|(_, &t)| t == 0).map(|(&c, _)| c).collect();
    let (z, labels) = fixed_prior_samples(&loaded[0].bank, &probe_classes, samples, seed)?;
    let outputs = loaded
        .iter()
        .map(|l| l.model.as_ref().expect("shared variant").decode(z.view(), 0, &labels))
        .collect::<Result<Vec<_>>>()?;
    let mut drift = Vec::new();
    for i in 1..outputs.len() {
        drift.push(DriftRow {
            from_task: loaded[i - 1].meta.task,
            to_task: loaded[i].meta.task,
            drift: relative_drift(&outputs[i - 1], &outputs[i])?,
        });
    }
    if outputs.len() > 2 {
        drift.push(DriftRow {
            from_task: loaded[0].meta.task,
            to_task: loaded[outputs.len() - 1].meta.task,
            drift: relative_drift(&outputs[0], &outputs[outputs.len() - 1])?,
        });
    }

    let mut proportions = Vec::new();
    let mut separation = Vec::new();
    for l in &loaded {
        if let Some(ns) = &l.nullspace {
            for layer in ns.diagnostics() {
                proportions.push(ProportionRow { task: l.meta.task, layer });
            }
        }
        if l.bank.len() >= 2 {
            separation.push((l.meta.task, separation_report(&l.bank)?));
        }
    }
    let pca_csv = prior_pca_csv(&loaded[loaded.len() - 1].bank, 50, seed)?;
    Ok(Diagnostics {
        drift,
        proportions,
        separation,
        pca_csv,
    })
}

/// Projects `per_class` prior draws of every class onto the top two
/// principal axes of the pooled draws.
pub fn prior_pca_csv(bank: &PriorBank, per_class: usize, seed: u64) -> Result<String> {
    let classes: Vec<u32> = bank.classes().collect();
    if classes.is_empty() {
        return Err(Error::invalid("empty prior bank"));
    }
    let (z, labels) = fixed_prior_samples(bank, &classes, per_class * classes.len(), seed)?;
    let mean = z.mean_axis(Axis(0)).expect("non-empty");
    let centered = &z - &mean;
    let cov = centered.t().dot(&centered) / z.nrows() as f64;
    let eig = sym_eigen_jacobi(&cov, JACOBI_TOL, JACOBI_MAX_SWEEPS).ok_or(Error::EigenNoConvergence {
        layer: usize::MAX,
        sweeps: JACOBI_MAX_SWEEPS,
    })?;
    let k = cov.nrows();
    let axes = ndarray::stack![Axis(1), eig.vectors.column(k - 1), eig.vectors.column(k.saturating_sub(2))];
    let proj = centered.dot(&axes);
    let mut out = String::from("class_id,pc1,pc2\n");
    for (row, y) in proj.rows().into_iter().zip(&labels) {
        out.push_str(&format!("{y},{},{}\n", row[0], row[1]));
    }
    Ok(out)
}

/// Re-evaluates a checkpoint's classifier on the test splits it has seen.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Container) -> Result<Vec<f64>> {
    let loaded = load_checkpoint(checkpoint)?;
    let clf = loaded
        .classifier
        .ok_or_else(|| Error::Incompatible("checkpoint holds no classifier".into()))?;
    let data = prepare_data(cfg)?;
    let t = loaded.meta.task;
    let row = evaluate(&clf, &data.test, t)?;
    Ok(row
        .iter()
        .zip(&data.test)
        .map(|(&c, d)| c as f64 / d.len() as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            synth_classes: 4,
            synth_dim: 8,
            synth_per_class: 40,
            synth_spread: 0.3,
            tasks: 2,
            lambda: 20.0,
            epochs: 5,
            hidden: 16,
            latent: 4,
            embed: 3,
            samples_per_class: 40,
            clf_epochs: 5,
            cov_passes: 2,
            drift_samples: 16,
            seeds: vec![0],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_keys_and_overrides() {
        let cfg = ExperimentConfig::load(
            None,
            [
                ("NSVAE_LAMBDA".to_string(), "12.5".to_string()),
                ("NSVAE_VARIANT".to_string(), "fod".to_string()),
                ("NSVAE_SEEDS".to_string(), "[4, 5]".to_string()),
                ("OTHER_LAMBDA".to_string(), "1".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.lambda, 12.5);
        assert_eq!(cfg.variant, Variant::Fod);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert!(ExperimentConfig::keys().contains(&"threshold_factor".to_string()));
    }

    #[test]
    fn config_text_roundtrip() {
        let cfg = tiny();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml_str("lamda = 3").is_err());
    }

    #[test]
    fn invalid_combinations() {
        let frozen_ns = ExperimentConfig {
            frozen_decoder: true,
            nullspace: true,
            ..tiny()
        };
        assert!(matches!(frozen_ns.validate(), Err(Error::Config(_))));
        let ceo_normal = ExperimentConfig {
            variant: Variant::Ceo,
            prior_init: PriorInit::Normal,
            ..tiny()
        };
        assert!(ceo_normal.validate().is_err());
    }

    #[test]
    fn single_task_has_no_projection() {
        let cfg = ExperimentConfig {
            tasks: 1,
            ..tiny()
        };
        let r = run_experiment(&cfg, None).unwrap();
        let run = &r.runs[0];
        assert!(run.drift.is_empty());
        assert_eq!(run.aia, Some(run.faa));
        assert_eq!(run.final_accuracies.len(), 1);
        assert_eq!(run.faa, run.final_accuracies[0]);
    }

    #[test]
    fn every_variant_runs() {
        for v in Variant::ALL {
            let cfg = ExperimentConfig {
                variant: v,
                nullspace: v.is_shared_vae(),
                ..tiny()
            };
            let r = run_experiment(&cfg, None).unwrap_or_else(|e| panic!("{v}: {e}"));
            assert!((0.0..=1.0).contains(&r.summary.faa_mean));
            assert_eq!(r.runs[0].memory.replay_total + r.runs[0].memory.classifier_total, r.runs[0].memory_enumerated, "{v}");
        }
    }

    #[test]
    fn checkpoints_feed_diagnosis() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        run_experiment(&cfg, Some(dir.path())).unwrap();
        let read = |t| Container::from_bytes(&fs::read(checkpoint_path(dir.path(), 0, t)).unwrap()).unwrap();
        let (a, b) = (read(0), read(1));
        let same = diagnose(&[a.clone(), a.clone()], 32, 0).unwrap();
        assert_eq!(same.drift[0].drift, 0.0);
        let d = diagnose(&[a.clone(), b.clone()], 32, 0).unwrap();
        assert!(d.proportions.iter().all(|p| (0.0..=1.0).contains(&p.layer.proportion)));
        assert!(d.pca_csv.lines().count() > 1);
        assert!(diagnose(&[a.clone()], 8, 0).is_err());
        assert!(diagnose(&[b, a], 8, 0).is_err());
        let acc = evaluate_checkpoint(&cfg, &read(1)).unwrap();
        assert_eq!(acc.len(), 2);
    }

    #[test]
    fn grid_requires_shared_settings() {
        let a = tiny();
        let b = ExperimentConfig {
            data_seed: 99,
            ..tiny()
        };
        assert!(run_ablation(&[("a".into(), a), ("b".into(), b)]).is_err());
    }
}
