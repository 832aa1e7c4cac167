//! Experiment configuration, run directories, metrics logging, reports and
//! the command implementations behind the `mosaic-kd` binary.
//!
//! A run directory looks like
//!
//! ```text
//! <run>/config.resolved      fully resolved TOML configuration
//! <run>/metrics.log          one JSON record per line, flushed per record
//! <run>/timing.log           wall-clock per record (kept apart so that
//!                            metrics.log is byte-reproducible)
//! <run>/checkpoints/step-<n>.mkd
//! <run>/samples/step-<n>.png
//! <run>/report/
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use mosaic_nn::Tensor;

use crate::datakit::{
    load_dataset, make_synthetic_domain, resize_dataset, save_dataset, select_ood_subset, DataError, DatasetDescriptor,
    Domain, LabeledDataset,
};
use crate::engine::{
    run_mosaic_from, run_vanilla_kd, sample_generator, train_teacher, EngineError, EvalPoint, PlayerSpecs, RunObserver,
    Snapshot, TrainerConfig,
};
use crate::evalkit::{self, ClassFid, EvalError, FeatureExtractor};
use crate::imageio::{self, tile_grid, ImageError};
use crate::losses::{LossReport, LossWeights};
use crate::netzoo::{load_checkpoint, save_checkpoint, ClassifierSpec, DiscriminatorSpec, GeneratorSpec, ModelHandle, NetError};

/// Element type of every network the CLI trains.
pub type Real = f32;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad configuration or arguments (exit status 2).
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("cannot read config {path}: {reason}")]
    ConfigFile { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt run directory {path}: {reason}")]
    CorruptRun { path: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl HarnessError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::ConfigFile { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Procedurally generated target/OOD pair.
    Synthetic,
    /// Dataset directories (`images/*.png` + optional `labels.csv`).
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Images are resized to this (H, W) after loading.
    pub resolution: (usize, usize),
    pub target_classes: usize,
    pub ood_classes: usize,
    pub synthetic_seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_per_class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood: Option<PathBuf>,
    /// Keep only the `k` most teacher-uncertain OOD images (0 keeps all).
    pub ood_subset: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            resolution: (32, 32),
            target_classes: 10,
            ood_classes: 10,
            synthetic_seed: 1,
            train_per_class: 500,
            test_per_class: 100,
            ood_per_class: 500,
            target_train: None,
            target_test: None,
            ood: None,
            ood_subset: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub spec: ClassifierSpec,
    pub steps: u64,
    pub batch_size: usize,
    /// Load this checkpoint instead of training a teacher.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            spec: ClassifierSpec::teacher(10),
            steps: 1500,
            batch_size: 64,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Teacher,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub extractor: ExtractorKind,
    pub patch_sizes: Vec<usize>,
    pub patch_budget: usize,
    /// Generated images used for per-class FID and the category histogram.
    pub generated_samples: usize,
    /// Images per sample grid.
    pub grid_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorKind::Teacher,
            patch_sizes: vec![1, 2, 4, 8, 16, 32],
            patch_budget: evalkit::DEFAULT_PATCH_BUDGET,
            generated_samples: 2000,
            grid_samples: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferSet {
    Ood,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub transfer: TransferSet,
    /// Add cross-entropy on ground-truth labels (in-domain transfer only).
    pub use_labels: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            transfer: TransferSet::Ood,
            use_labels: false,
        }
    }
}

/// Trainer settings as they appear in the config file; the seed and loss
/// weights live at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub steps: u64,
    pub j: usize,
    pub batch_size: usize,
    pub eval_every: u64,
    pub generator_opt: mosaic_nn::AdamConfig,
    pub discriminator_opt: mosaic_nn::AdamConfig,
    pub classifier_opt: mosaic_nn::SgdConfig,
    pub student_batch_stats: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainerConfig::default();
        Self {
            steps: t.steps,
            j: t.j,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            generator_opt: t.generator_opt,
            discriminator_opt: t.discriminator_opt,
            classifier_opt: t.classifier_opt,
            student_batch_stats: t.student_batch_stats,
        }
    }
}

/// Every knob of every module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub student: ClassifierSpec,
    pub trainer: TrainerSection,
    pub loss: LossWeights,
    pub eval: EvalConfig,
    pub kd: KdConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            student: ClassifierSpec::student(10),
            trainer: TrainerSection::default(),
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
            kd: KdConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.trainer;
        TrainerConfig {
            steps: t.steps,
            j: t.j,
            batch_size: t.batch_size,
            seed: self.seed,
            eval_every: t.eval_every,
            generator_opt: t.generator_opt,
            discriminator_opt: t.discriminator_opt,
            classifier_opt: t.classifier_opt,
            student_batch_stats: t.student_batch_stats,
            weights: self.loss,
        }
    }

    pub fn teacher_trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            steps: self.teacher.steps,
            batch_size: self.teacher.batch_size,
            ..self.trainer_config()
        }
    }

    pub fn player_specs(&self) -> PlayerSpecs {
        PlayerSpecs {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            student: self.student.clone(),
        }
    }

    /// Cross-field checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        self.loss.validate().map_err(|e| config_err("loss", e.to_string()))?;
        self.generator.validate().map_err(|e| config_err("generator", e.to_string()))?;
        self.discriminator.validate().map_err(|e| config_err("discriminator", e.to_string()))?;
        self.student.validate().map_err(|e| config_err("student", e.to_string()))?;
        self.teacher.spec.validate().map_err(|e| config_err("teacher.spec", e.to_string()))?;
        if self.generator.output_resolution != self.data.resolution {
            return Err(config_err(
                "generator.output_resolution",
                format!("{:?} differs from data.resolution {:?}", self.generator.output_resolution, self.data.resolution),
            ));
        }
        let k = self.data.target_classes;
        if self.teacher.spec.class_count != k {
            return Err(config_err("teacher.spec.class_count", format!("must equal data.target_classes = {k}")));
        }
        if self.student.class_count != k {
            return Err(config_err("student.class_count", format!("must equal data.target_classes = {k}")));
        }
        if self.trainer.batch_size == 0 {
            return Err(config_err("trainer.batch_size", "must be >= 1"));
        }
        if self.teacher.batch_size == 0 {
            return Err(config_err("teacher.batch_size", "must be >= 1"));
        }
        if self.data.source == DataSource::Directory {
            for (key, v) in [
                ("data.target_train", &self.data.target_train),
                ("data.target_test", &self.data.target_test),
                ("data.ood", &self.data.ood),
            ] {
                if v.is_none() {
                    return Err(config_err(key, "required when data.source = \"directory\""));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses a TOML document on top of the defaults, then applies dotted
    /// `key=value` overrides. Unknown keys are rejected with their path.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err("<document>", e.to_string()))?;
        let mut table: toml::Table = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut table, user, "")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(table).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| HarnessError::ConfigFile {
                path: p.display().to_string(),
                reason: e.to_string(),
            })?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }
}

/// Deep-merges `user` into `base`. Keys absent from the defaults are kept so
/// that deserialization reports them as unknown.
fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path)?,
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    Ok(())
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(assignment, "override must look like `section.key=value`"))?;
    let key = key.trim();
    // values are TOML literals; bare words fall back to strings
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(config_err(&parts[..=i].join("."), "is not a section")),
        };
    }
    Err(config_err(key, "empty key"))
}

/// One line of `metrics.log`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    TeacherStep {
        step: u64,
        ce_loss: f64,
    },
    Step {
        step: u64,
        #[serde(flatten)]
        losses: LossReport,
    },
    Eval {
        step: u64,
        accuracy: Option<f64>,
    },
    Checkpoint {
        step: u64,
        model: String,
        path: String,
        crc32: u32,
    },
    Accuracy {
        model: String,
        dataset: String,
        value: f64,
    },
    Final {
        best_step: u64,
        best_accuracy: Option<f64>,
        final_accuracy: Option<f64>,
        teacher_accuracy: Option<f64>,
    },
    ClassFid {
        source: String,
        class: usize,
        extractor: String,
        #[serde(flatten)]
        value: ClassFid,
    },
    Histogram {
        source: String,
        counts: Vec<usize>,
    },
    Fid {
        a: String,
        b: String,
        extractor: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        patch_size: Option<usize>,
        value: f64,
    },
    OodSubset {
        k: usize,
        indices: Vec<usize>,
    },
}

/// Writer side of a run directory.
pub struct RunDir {
    pub root: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    started: Instant,
}

impl RunDir {
    pub fn create(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        for sub in ["checkpoints", "samples", "report"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        let cfg_path = root.join("config.resolved");
        fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = root.join(name);
            Ok(BufWriter::new(File::create(&p).map_err(io_err(&p))?))
        };
        Ok(Self {
            root: root.to_path_buf(),
            metrics: open("metrics.log")?,
            timing: open("timing.log")?,
            started: Instant::now(),
        })
    }

    pub fn log(&mut self, record: &Record) -> Result<()> {
        let line = serde_json::to_string(record).expect("records serialize");
        let p = self.root.join("metrics.log");
        writeln!(self.metrics, "{line}").and_then(|_| self.metrics.flush()).map_err(io_err(&p))?;
        let t = self.started.elapsed().as_secs_f64();
        let p = self.root.join("timing.log");
        writeln!(self.timing, "{t:.3}").and_then(|_| self.timing.flush()).map_err(io_err(&p))?;
        Ok(())
    }

    pub fn checkpoint(&mut self, model: &ModelHandle<Real>, step: u64, suffix: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let path = self.root.join("checkpoints").join(format!("step-{step}{suffix}.mkd"));
        let snapshot = serde_json::to_value(cfg).expect("config serializes");
        let ck = save_checkpoint(model, &path, step, snapshot)?;
        self.log(&Record::Checkpoint {
            step,
            model: model.name.clone(),
            path: path.strip_prefix(&self.root).unwrap_or(&path).display().to_string(),
            crc32: ck.payload_crc32,
        })?;
        Ok(path)
    }
}

/// Writes `images` as a square-ish PNG grid.
pub fn write_grid(path: &Path, images: &Tensor<Real>) -> Result<()> {
    let (n, c, h, w) = images.dims4();
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let grid = tile_grid(images.data(), n, c, h, w, cols);
    imageio::write_png(path, &grid)?;
    Ok(())
}

/// Target train/test and OOD sets, resized to the configured resolution.
pub struct Datasets {
    pub target_train: LabeledDataset<Real>,
    pub target_test: LabeledDataset<Real>,
    pub ood: LabeledDataset<Real>,
}

/// Offset separating the synthetic test split from the train split.
const TEST_SEED_OFFSET: u64 = 0x5eed_7e57;

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let (train, test, ood) = match d.source {
        DataSource::Synthetic => (
            make_synthetic_domain(Domain::Target, d.synthetic_seed, d.target_classes, d.train_per_class, d.resolution)?,
            {
                let mut t = make_synthetic_domain(
                    Domain::Target,
                    d.synthetic_seed.wrapping_add(TEST_SEED_OFFSET),
                    d.target_classes,
                    d.test_per_class,
                    d.resolution,
                )?;
                t.name = "synthetic-target-test".into();
                t
            },
            make_synthetic_domain(Domain::Ood, d.synthetic_seed, d.ood_classes, d.ood_per_class, d.resolution)?,
        ),
        DataSource::Directory => {
            let load = |p: &Option<PathBuf>, name: &str, k: usize, labels: bool| -> Result<LabeledDataset<Real>> {
                let p = p.as_ref().expect("validated");
                let desc = DatasetDescriptor {
                    name: name.into(),
                    class_count: k,
                    require_labels: labels,
                };
                Ok(resize_dataset(&load_dataset(p, &desc)?, d.resolution)?)
            };
            (
                load(&d.target_train, "target-train", d.target_classes, true)?,
                load(&d.target_test, "target-test", d.target_classes, true)?,
                load(&d.ood, "ood", d.ood_classes, false)?,
            )
        }
    };
    Ok(Datasets {
        target_train: train,
        target_test: test,
        ood,
    })
}

/// Loads the teacher named by `cfg.teacher.checkpoint`, or trains one and
/// logs its learning curve.
pub fn obtain_teacher(cfg: &ExperimentConfig, data: &Datasets, run: &mut RunDir) -> Result<ModelHandle<Real>> {
    let mut teacher = match &cfg.teacher.checkpoint {
        Some(p) => {
            let (m, _) = load_checkpoint::<Real>(p)?;
            if m.class_count() != Some(cfg.data.target_classes) {
                return Err(config_err(
                    "teacher.checkpoint",
                    format!("{} is not a {}-class classifier", p.display(), cfg.data.target_classes),
                ));
            }
            m
        }
        None => {
            let (m, rep) = train_teacher(&data.target_train, &cfg.teacher.spec, &cfg.teacher_trainer_config())?;
            for (i, &l) in rep.losses.iter().enumerate() {
                run.log(&Record::TeacherStep {
                    step: i as u64 + 1,
                    ce_loss: l,
                })?;
            }
            run.log(&Record::Accuracy {
                model: "teacher".into(),
                dataset: data.target_train.name.clone(),
                value: rep.train_accuracy,
            })?;
            m
        }
    };
    teacher.name = "teacher".into();
    teacher.net.set_frozen(true);
    Ok(teacher)
}

fn maybe_ood_subset(cfg: &ExperimentConfig, teacher: &ModelHandle<Real>, ood: LabeledDataset<Real>, run: &mut RunDir) -> Result<LabeledDataset<Real>> {
    let k = cfg.data.ood_subset;
    if k == 0 || k >= ood.len() {
        return Ok(ood);
    }
    let (subset, indices) = select_ood_subset(&ood, &mut teacher.clone(), k, evalkit::EVAL_BATCH)?;
    run.log(&Record::OodSubset { k, indices })?;
    Ok(subset)
}

fn feature_extractor(cfg: &ExperimentConfig, teacher: &ModelHandle<Real>) -> Result<FeatureExtractor<Real>> {
    Ok(match cfg.eval.extractor {
        ExtractorKind::Teacher => FeatureExtractor::teacher(teacher, cfg.data.resolution)?,
        ExtractorKind::Raw => FeatureExtractor::RawPixels,
    })
}

/// Streams training progress into a run directory and evaluates the
/// student on the held-out split at every evaluation step.
struct HarnessObserver<'a> {
    run: &'a mut RunDir,
    cfg: &'a ExperimentConfig,
    test: &'a LabeledDataset<Real>,
    best: Option<(u64, f64)>,
}

impl<'a> HarnessObserver<'a> {
    fn new(run: &'a mut RunDir, cfg: &'a ExperimentConfig, test: &'a LabeledDataset<Real>) -> Self {
        Self { run, cfg, test, best: None }
    }
}

impl RunObserver<Real> for HarnessObserver<'_> {
    fn on_step(&mut self, step: u64, report: &LossReport) -> std::result::Result<(), String> {
        self.run
            .log(&Record::Step {
                step,
                losses: *report,
            })
            .map_err(|e| e.to_string())
    }

    fn on_eval(&mut self, point: &EvalPoint, snap: &Snapshot<'_, Real>) -> std::result::Result<(), String> {
        let mut inner = || -> Result<()> {
            let acc = evalkit::accuracy(&mut snap.student.clone(), self.test)?;
            if self.best.is_none_or(|(_, b)| acc > b) {
                self.best = Some((point.step, acc));
            }
            self.run.log(&Record::Eval {
                step: point.step,
                accuracy: Some(acc),
            })?;
            self.run.checkpoint(snap.student, point.step, "", self.cfg)?;
            if let Some(g) = snap.generator {
                self.run.checkpoint(g, point.step, ".generator", self.cfg)?;
                let imgs = sample_generator(&mut g.clone(), self.cfg.eval.grid_samples, SAMPLE_SEED)?;
                write_grid(&self.run.root.join("samples").join(format!("step-{}.png", point.step)), &imgs)?;
            }
            Ok(())
        };
        inner().map_err(|e| e.to_string())
    }
}

/// Latent stream for sample grids and post-hoc evaluation; independent of
/// the training streams.
const SAMPLE_SEED: u64 = 0x6e17;

/// Logs the `final` record and returns the last student's accuracy.
fn log_final(
    run: &mut RunDir,
    student: &ModelHandle<Real>,
    teacher: &ModelHandle<Real>,
    data: &Datasets,
    best: Option<(u64, f64)>,
) -> Result<f64> {
    let final_accuracy = evalkit::accuracy(&mut student.clone(), &data.target_test)?;
    let teacher_accuracy = evalkit::accuracy(&mut teacher.clone(), &data.target_test)?;
    run.log(&Record::Final {
        best_step: best.map_or(0, |b| b.0),
        best_accuracy: best.map(|b| b.1),
        final_accuracy: Some(final_accuracy),
        teacher_accuracy: Some(teacher_accuracy),
    })?;
    Ok(final_accuracy)
}

fn log_class_fids(run: &mut RunDir, source: &str, extractor: &str, fids: &BTreeMap<usize, ClassFid>) -> Result<()> {
    for (&class, &value) in fids {
        run.log(&Record::ClassFid {
            source: source.into(),
            class,
            extractor: extractor.into(),
            value,
        })?;
    }
    Ok(())
}

/// What a distillation command produced besides its run directory.
pub struct DistillOutcome {
    /// The student after the last step.
    pub student: ModelHandle<Real>,
    pub final_accuracy: f64,
    /// `(step, accuracy)` of the best evaluation point, if any.
    pub best: Option<(u64, f64)>,
    /// Per-class FID of generated vs target-test images (MosaicKD only).
    pub generated_class_fid: BTreeMap<usize, ClassFid>,
    /// Per-class FID of the OOD set vs target-test images (MosaicKD only).
    pub ood_class_fid: BTreeMap<usize, ClassFid>,
}

pub fn cmd_distill_mosaic(cfg: &ExperimentConfig, out: &Path) -> Result<DistillOutcome> {
    let mut run = RunDir::create(out, cfg)?;
    let data = load_datasets(cfg)?;
    let teacher = obtain_teacher(cfg, &data, &mut run)?;
    let ood = maybe_ood_subset(cfg, &teacher, data.ood.clone(), &mut run)?;
    let tcfg = cfg.trainer_config();
    let specs = cfg.player_specs();
    let state = crate::engine::TrainState::new(teacher.clone(), &specs, &tcfg)?;
    let mut obs = HarnessObserver::new(&mut run, cfg, &data.target_test);
    let (student, _, last) = run_mosaic_from(state, &ood, &tcfg, None, &mut obs)?;
    let best = obs.best;
    let final_accuracy = log_final(&mut run, &student, &teacher, &data, best)?;

    // synthesized data vs target data, class by class
    let mut g = last.generator;
    let images = sample_generator(&mut g, cfg.eval.generated_samples, SAMPLE_SEED)?;
    let shown = cfg.eval.grid_samples.min(images.shape()[0]);
    write_grid(&run.root.join("samples").join("final.png"), &images.slice_items(0, shown))?;
    let generated = LabeledDataset::new("generated", images, None, cfg.data.target_classes)?;
    for (source, imgs) in [("generated", &generated.images), ("ood", &ood.images)] {
        let counts = evalkit::class_histogram(&mut teacher.clone(), imgs)?;
        run.log(&Record::Histogram {
            source: source.into(),
            counts,
        })?;
    }
    let mut fx = feature_extractor(cfg, &teacher)?;
    let generated_class_fid = evalkit::per_class_fid(&generated, &data.target_test, &mut teacher.clone(), &mut fx)?;
    log_class_fids(&mut run, "generated", fx.id(), &generated_class_fid)?;
    let ood_class_fid = evalkit::per_class_fid(&ood, &data.target_test, &mut teacher.clone(), &mut fx)?;
    log_class_fids(&mut run, "ood", fx.id(), &ood_class_fid)?;
    Ok(DistillOutcome {
        student,
        final_accuracy,
        best,
        generated_class_fid,
        ood_class_fid,
    })
}

pub fn cmd_distill_kd(cfg: &ExperimentConfig, out: &Path) -> Result<DistillOutcome> {
    if cfg.kd.use_labels && cfg.kd.transfer == TransferSet::Ood {
        return Err(config_err("kd.use_labels", "labels are only meaningful for the in-domain transfer set"));
    }
    let mut run = RunDir::create(out, cfg)?;
    let data = load_datasets(cfg)?;
    let teacher = obtain_teacher(cfg, &data, &mut run)?;
    let transfer = match cfg.kd.transfer {
        TransferSet::Ood => maybe_ood_subset(cfg, &teacher, data.ood.clone(), &mut run)?,
        TransferSet::Target => data.target_train.clone(),
    };
    let tcfg = cfg.trainer_config();
    let student = crate::engine::init_student::<Real>(&cfg.student, cfg.seed)?;
    let mut obs = HarnessObserver::new(&mut run, cfg, &data.target_test);
    let (student, _) = run_vanilla_kd(&teacher, &transfer, student, &tcfg, cfg.kd.use_labels, None, &mut obs)?;
    let best = obs.best;
    let final_accuracy = log_final(&mut run, &student, &teacher, &data, best)?;
    Ok(DistillOutcome {
        student,
        final_accuracy,
        best,
        generated_class_fid: BTreeMap::new(),
        ood_class_fid: BTreeMap::new(),
    })
}

pub fn cmd_train_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let mut run = RunDir::create(out, cfg)?;
    let data = load_datasets(cfg)?;
    let mut no_ckpt = cfg.clone();
    no_ckpt.teacher.checkpoint = None;
    let teacher = obtain_teacher(&no_ckpt, &data, &mut run)?;
    let acc = evalkit::accuracy(&mut teacher.clone(), &data.target_test)?;
    run.log(&Record::Accuracy {
        model: "teacher".into(),
        dataset: data.target_test.name.clone(),
        value: acc,
    })?;
    let path = run.checkpoint(&teacher, cfg.teacher.steps, "", cfg)?;
    let stable = run.root.join("teacher.mkd");
    fs::copy(&path, &stable).map_err(io_err(&stable))?;
    Ok(stable)
}

pub fn cmd_select_ood_subset(cfg: &ExperimentConfig, out: &Path, k: usize) -> Result<Vec<usize>> {
    let mut run = RunDir::create(out, cfg)?;
    let data = load_datasets(cfg)?;
    let teacher = obtain_teacher(cfg, &data, &mut run)?;
    let (subset, indices) = select_ood_subset(&data.ood, &mut teacher.clone(), k, evalkit::EVAL_BATCH)?;
    run.log(&Record::OodSubset {
        k,
        indices: indices.clone(),
    })?;
    save_dataset(&subset, &run.root.join("ood-subset"))?;
    Ok(indices)
}

pub fn cmd_make_synthetic_pair(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut synthetic = cfg.clone();
    synthetic.data.source = DataSource::Synthetic;
    let data = load_datasets(&synthetic)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    save_dataset(&data.target_train, &out.join("target-train"))?;
    save_dataset(&data.target_test, &out.join("target-test"))?;
    save_dataset(&data.ood, &out.join("ood"))?;
    let p = out.join("config.resolved");
    fs::write(&p, synthetic.to_toml()).map_err(io_err(&p))?;
    Ok(())
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<f64> {
    let data = load_datasets(cfg)?;
    let (mut m, _) = load_checkpoint::<Real>(checkpoint)?;
    Ok(evalkit::accuracy(&mut m, &data.target_test)?)
}

fn load_teacher_only(cfg: &ExperimentConfig) -> Result<Option<ModelHandle<Real>>> {
    match &cfg.teacher.checkpoint {
        Some(p) => Ok(Some(load_checkpoint::<Real>(p)?.0)),
        None => Ok(None),
    }
}

fn extractor_for_cli(cfg: &ExperimentConfig) -> Result<FeatureExtractor<Real>> {
    match cfg.eval.extractor {
        ExtractorKind::Raw => Ok(FeatureExtractor::RawPixels),
        ExtractorKind::Teacher => {
            let t = load_teacher_only(cfg)?
                .ok_or_else(|| config_err("teacher.checkpoint", "the teacher extractor needs a teacher checkpoint"))?;
            Ok(FeatureExtractor::teacher(&t, cfg.data.resolution)?)
        }
    }
}

/// Dataset FID between target-test and OOD, or two dataset directories.
pub fn cmd_fid(cfg: &ExperimentConfig, a: Option<&Path>, b: Option<&Path>) -> Result<(f64, &'static str)> {
    let mut fx = extractor_for_cli(cfg)?;
    let load = |p: &Path, name: &str| -> Result<LabeledDataset<Real>> {
        let desc = DatasetDescriptor {
            name: name.into(),
            class_count: cfg.data.target_classes.max(cfg.data.ood_classes),
            require_labels: false,
        };
        Ok(resize_dataset(&load_dataset(p, &desc)?, cfg.data.resolution)?)
    };
    let (da, db) = match (a, b) {
        (Some(a), Some(b)) => (load(a, "a")?, load(b, "b")?),
        (None, None) => {
            let d = load_datasets(cfg)?;
            (d.target_test, d.ood)
        }
        _ => return Err(config_err("--a/--b", "give both dataset directories or neither")),
    };
    Ok((evalkit::dataset_fid(&da, &db, &mut fx)?, fx.id()))
}

/// Patch FID between target-test and OOD for every configured patch size.
pub fn cmd_patch_fid(cfg: &ExperimentConfig) -> Result<(Vec<(usize, f64)>, &'static str)> {
    let mut fx = extractor_for_cli(cfg)?;
    let d = load_datasets(cfg)?;
    let mut out = Vec::new();
    for &l in &cfg.eval.patch_sizes {
        out.push((l, evalkit::patch_fid(&d.target_test, &d.ood, l, &mut fx, cfg.eval.patch_budget)?));
    }
    Ok((out, fx.id()))
}

/// Machine-readable summary assembled purely from `metrics.log`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub loss_curves: BTreeMap<String, Vec<(u64, f64)>>,
    pub teacher_curve: Vec<(u64, f64)>,
    pub accuracy_series: Vec<(u64, f64)>,
    pub final_record: Option<Record>,
    pub class_fid: BTreeMap<String, BTreeMap<usize, Option<f64>>>,
    pub category_histogram: BTreeMap<String, Vec<usize>>,
    pub category_percentage: BTreeMap<String, Vec<f64>>,
    pub fids: Vec<Record>,
    pub checkpoints: Vec<String>,
}

pub fn read_metrics(run_dir: &Path) -> Result<Vec<Record>> {
    let p = run_dir.join("metrics.log");
    let text = fs::read_to_string(&p).map_err(|e| HarnessError::CorruptRun {
        path: run_dir.display().to_string(),
        reason: format!("metrics.log: {e}"),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::CorruptRun {
                path: run_dir.display().to_string(),
                reason: format!("metrics.log line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn build_report(records: &[Record]) -> Report {
    let mut r = Report::default();
    for rec in records {
        match rec {
            Record::TeacherStep { step, ce_loss } => r.teacher_curve.push((*step, *ce_loss)),
            Record::Step { step, losses } => {
                for (name, v) in losses.terms() {
                    r.loss_curves.entry(name.to_string()).or_default().push((*step, v));
                }
            }
            Record::Eval { step, accuracy: Some(a) } => r.accuracy_series.push((*step, *a)),
            Record::Final { .. } => r.final_record = Some(rec.clone()),
            Record::ClassFid { source, class, value, .. } => {
                r.class_fid.entry(source.clone()).or_default().insert(*class, value.value());
            }
            Record::Histogram { source, counts } => {
                let total: usize = counts.iter().sum();
                let pct = counts.iter().map(|&c| 100.0 * c as f64 / total.max(1) as f64).collect();
                r.category_histogram.insert(source.clone(), counts.clone());
                r.category_percentage.insert(source.clone(), pct);
            }
            Record::Fid { .. } => r.fids.push(rec.clone()),
            Record::Checkpoint { path, .. } => r.checkpoints.push(path.clone()),
            _ => {}
        }
    }
    r
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Plain-text table: one row per logged step plus the final accuracies.
pub fn summary_table(r: &Report) -> String {
    let mut s = String::new();
    let names = ["d_loss", "g_adv", "g_entropy", "g_balance", "g_adv_student", "kd_loss"];
    if let Some(first) = r.loss_curves.get("kd_loss") {
        s.push_str(&format!("{:>6}", "step"));
        for n in names {
            s.push_str(&format!(" {n:>13}"));
        }
        s.push('\n');
        for (i, (step, _)) in first.iter().enumerate() {
            s.push_str(&format!("{step:>6}"));
            for n in names {
                s.push_str(&format!(" {:>13.6}", r.loss_curves[n][i].1));
            }
            s.push('\n');
        }
    } else if let Some((step, loss)) = r.teacher_curve.last() {
        s.push_str(&format!("teacher steps {step}, last ce_loss {loss:.6}\n"));
    }
    for (step, acc) in &r.accuracy_series {
        s.push_str(&format!("eval step {step}: accuracy {acc:.4}\n"));
    }
    if let Some(Record::Final {
        best_step,
        best_accuracy,
        final_accuracy,
        teacher_accuracy,
    }) = &r.final_record
    {
        s.push_str(&format!(
            "final accuracy {} (best {} at step {best_step}; teacher {})\n",
            fmt_opt(*final_accuracy),
            fmt_opt(*best_accuracy),
            fmt_opt(*teacher_accuracy)
        ));
    }
    s
}

/// Writes `report/summary.json`, `report/summary.txt`, CSV series and the
/// latest sample grid. Errors on a run without any training rows.
pub fn emit_report(run_dir: &Path) -> Result<Report> {
    let records = read_metrics(run_dir)?;
    let report = build_report(&records);
    if report.loss_curves.is_empty() && report.teacher_curve.is_empty() {
        return Err(HarnessError::CorruptRun {
            path: run_dir.display().to_string(),
            reason: "no training rows in metrics.log".into(),
        });
    }
    let dir = run_dir.join("report");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let write = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };
    write("summary.json", serde_json::to_string_pretty(&report).expect("report serializes"))?;
    write("summary.txt", summary_table(&report))?;
    let mut csv = String::from("step,d_loss,g_adv,g_entropy,g_balance,g_adv_student,kd_loss\n");
    if let Some(kd) = report.loss_curves.get("kd_loss") {
        for (i, (step, _)) in kd.iter().enumerate() {
            let vals: Vec<String> = ["d_loss", "g_adv", "g_entropy", "g_balance", "g_adv_student", "kd_loss"]
                .iter()
                .map(|n| report.loss_curves[*n][i].1.to_string())
                .collect();
            csv.push_str(&format!("{step},{}\n", vals.join(",")));
        }
    }
    write("losses.csv", csv)?;
    let mut acc = String::from("step,accuracy\n");
    for (step, a) in &report.accuracy_series {
        acc.push_str(&format!("{step},{a}\n"));
    }
    write("accuracy.csv", acc)?;
    let mut cls = String::from("source,class,fid\n");
    for (source, m) in &report.class_fid {
        for (c, v) in m {
            cls.push_str(&format!("{source},{c},{}\n", v.map_or_else(|| "absent".into(), |x| x.to_string())));
        }
    }
    write("class_fid.csv", cls)?;
    let mut hist = String::from("source,class,count,percent\n");
    for (source, counts) in &report.category_histogram {
        for (c, (n, p)) in counts.iter().zip(&report.category_percentage[source]).enumerate() {
            hist.push_str(&format!("{source},{c},{n},{p}\n"));
        }
    }
    write("category_histogram.csv", hist)?;
    // newest sample grid (final grid if present)
    let samples = run_dir.join("samples");
    let latest = if samples.join("final.png").exists() {
        Some(samples.join("final.png"))
    } else {
        report
            .accuracy_series
            .iter()
            .map(|(s, _)| *s)
            .chain(records.iter().filter_map(|r| match r {
                Record::Eval { step, .. } => Some(*step),
                _ => None,
            }))
            .max()
            .map(|s| samples.join(format!("step-{s}.png")))
            .filter(|p| p.exists())
    };
    if let Some(src) = latest {
        let dst = dir.join("samples.png");
        fs::copy(&src, &dst).map_err(io_err(&dst))?;
    }
    Ok(report)
}
