//! Optimization loops: teacher pre-training, the four-player MosaicKD loop
//! and the vanilla KD baseline on a transfer set.
//!
//! One master seed fans out to independent ChaCha streams (one per player
//! initialization, one for data order, one for latent noise), so changing a
//! single component of an experiment leaves every other stream untouched.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use mosaic_nn::{cosine_lr, Adam, AdamConfig, Pass, Scalar, Sgd, SgdConfig, Tensor};

use crate::datakit::LabeledDataset;
use crate::evalkit::{self, EvalError};
use crate::losses::{
    align_entropy_loss_grad, balance_loss_grad, cross_entropy_grad, disc_loss_grad, gen_adv_loss_grad, kd_loss_grad,
    mix_batch, ood_count, LossError, LossReport, LossWeights,
};
use crate::netzoo::{
    build_classifier, build_generator, build_patch_discriminator, Architecture, ClassifierSpec, DiscriminatorSpec,
    GeneratorSpec, ModelHandle, NetError,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("step {step}: non-finite value in loss term `{term}`")]
    NonFinite { step: u64, term: &'static str },
    #[error("teacher parameters changed during step {0}")]
    TeacherModified(u64),
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("dataset `{0}` has no labels")]
    Unlabeled(String),
    #[error("data does not match the players: {0}")]
    Data(String),
    #[error("run observer failed: {0}")]
    Observer(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Outer iterations.
    pub steps: u64,
    /// Student updates per outer iteration.
    pub j: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate (and notify the observer) every this many steps; 0 disables.
    pub eval_every: u64,
    pub generator_opt: AdamConfig,
    pub discriminator_opt: AdamConfig,
    /// Used for the student and for teacher pre-training.
    pub classifier_opt: SgdConfig,
    /// Train-mode batch norm in the student during distillation. When false
    /// the student normalizes with its running statistics throughout.
    pub student_batch_stats: bool,
    pub weights: LossWeights,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            j: 5,
            batch_size: 64,
            seed: 0,
            eval_every: 50,
            generator_opt: AdamConfig::default(),
            discriminator_opt: AdamConfig::default(),
            classifier_opt: SgdConfig::default(),
            student_batch_stats: true,
            weights: LossWeights::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(EngineError::Config("batch_size must be >= 1".into()));
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Student updates performed over the whole run.
    pub fn student_updates(&self) -> u64 {
        self.steps * self.j as u64
    }
}

/// Architectures of the trainable players.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlayerSpecs {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub student: ClassifierSpec,
}

/// Stream ids under the master seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    TeacherInit = 1,
    GeneratorInit = 2,
    DiscriminatorInit = 3,
    StudentInit = 4,
    Data = 5,
    Latent = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn stream_seed(seed: u64, stream: Stream) -> u64 {
    stream_rng(seed, stream).next_u64()
}

pub fn init_student<T: Scalar>(spec: &ClassifierSpec, seed: u64) -> Result<ModelHandle<T>> {
    Ok(build_classifier(spec, stream_seed(seed, Stream::StudentInit))?.with_name("student"))
}

pub fn init_teacher<T: Scalar>(spec: &ClassifierSpec, seed: u64) -> Result<ModelHandle<T>> {
    Ok(build_classifier(spec, stream_seed(seed, Stream::TeacherInit))?.with_name("teacher"))
}

fn sample_latent<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, z_dim: usize) -> Tensor<T> {
    let data = (0..n * z_dim).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::from_vec(&[n, z_dim], data).expect("shape matches data")
}

/// `b` distinct indices below `n` (with replacement when `n < b`).
fn sample_indices(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    if n >= b {
        index::sample(rng, n, b).into_vec()
    } else {
        (0..b).map(|_| rng.random_range(0..n)).collect()
    }
}

fn finite<T: Scalar>(v: T, step: u64, term: &'static str) -> Result<f64> {
    let x = v.to_f64_lossy();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(EngineError::NonFinite { step, term })
    }
}

fn scaled<T: Scalar>(mut t: Tensor<T>, c: f64) -> Tensor<T> {
    t.scale(T::lit(c));
    t
}

fn generator_spec<T>(g: &ModelHandle<T>) -> Option<&GeneratorSpec> {
    match &g.arch {
        Architecture::Generator(s) => Some(s),
        _ => None,
    }
}

/// Everything the MosaicKD loop mutates. Optimizer step counters are public
/// so callers can verify how often each player was updated.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub step: u64,
    pub generator: ModelHandle<T>,
    pub discriminator: ModelHandle<T>,
    pub student: ModelHandle<T>,
    pub teacher: ModelHandle<T>,
    pub g_opt: Adam<T>,
    pub d_opt: Adam<T>,
    pub s_opt: Sgd<T>,
    latent_rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
    teacher_checksum: u32,
    z_dim: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(mut teacher: ModelHandle<T>, specs: &PlayerSpecs, cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        teacher.net.set_frozen(true);
        let student = init_student(&specs.student, cfg.seed)?;
        Self::with_student(teacher, student, specs, cfg)
    }

    /// Like [`TrainState::new`] but starting from a given student.
    pub fn with_student(mut teacher: ModelHandle<T>, student: ModelHandle<T>, specs: &PlayerSpecs, cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        teacher.net.set_frozen(true);
        if teacher.class_count() != student.class_count() || teacher.class_count().is_none() {
            return Err(EngineError::Config("teacher and student must be classifiers over the same classes".into()));
        }
        let g = &specs.generator;
        if specs.discriminator.in_channels != g.out_channels {
            return Err(EngineError::Config(format!(
                "discriminator expects {} channels, generator emits {}",
                specs.discriminator.in_channels, g.out_channels
            )));
        }
        let generator = build_generator(g, stream_seed(cfg.seed, Stream::GeneratorInit))?;
        let discriminator = build_patch_discriminator(&specs.discriminator, stream_seed(cfg.seed, Stream::DiscriminatorInit))?;
        Ok(Self {
            step: 0,
            teacher_checksum: teacher.checksum(),
            generator,
            discriminator,
            student,
            teacher,
            g_opt: Adam::new(cfg.generator_opt),
            d_opt: Adam::new(cfg.discriminator_opt),
            s_opt: Sgd::new(cfg.classifier_opt),
            latent_rng: stream_rng(cfg.seed, Stream::Latent),
            data_rng: stream_rng(cfg.seed, Stream::Data),
            z_dim: g.z_dim,
        })
    }

    /// Generated images in eval mode from a caller-supplied stream, leaving
    /// the training streams untouched.
    pub fn sample_images(&mut self, n: usize, seed: u64) -> Result<Tensor<T>> {
        sample_generator(&mut self.generator, n, seed)
    }
}

/// `n` eval-mode generator samples from latent noise drawn with `seed`.
pub fn sample_generator<T: Scalar>(generator: &mut ModelHandle<T>, n: usize, seed: u64) -> Result<Tensor<T>> {
    let z_dim = generator_spec(generator)
        .ok_or_else(|| EngineError::Config(format!("{} is not a generator", generator.name)))?
        .z_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    for start in (0..n).step_by(evalkit::EVAL_BATCH) {
        let b = (n - start).min(evalkit::EVAL_BATCH);
        parts.push(generator.forward(sample_latent(&mut rng, b, z_dim), Pass::EVAL)?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::concat_items(&refs).map_err(|e| EngineError::Net(e.into()))
}

/// One outer iteration: a discriminator update, a generator update, then
/// `j` student updates on fresh generated samples mixed with OOD images.
pub fn mosaic_step<T: Scalar>(state: &mut TrainState<T>, ood_batch: &Tensor<T>, cfg: &TrainerConfig) -> Result<LossReport> {
    let step = state.step + 1;
    let w = &cfg.weights;
    let b = cfg.batch_size;
    let no_record = Pass {
        record: false,
        ..Pass::TRAIN
    };
    let mut report = LossReport::default();

    // Discriminator: real OOD patches vs generated patches.
    let z = sample_latent(&mut state.latent_rng, b, state.z_dim);
    let fake = state.generator.forward(z, no_record)?;
    let d = &mut state.discriminator;
    d.net.zero_grad();
    // each half of the loss depends only on its own score grid, so the two
    // branches are back-propagated one after the other
    let real_scores = d.forward(ood_batch.clone(), Pass::TRAIN)?;
    let (_, g_real, _) = disc_loss_grad(&real_scores, &real_scores)?;
    d.backward(g_real)?;
    let fake_scores = d.forward(fake, Pass::TRAIN)?;
    let (d_loss, _, g_fake) = disc_loss_grad(&real_scores, &fake_scores)?;
    report.d_loss = finite(d_loss, step, "d_loss")?;
    d.backward(g_fake)?;
    state.d_opt.step(&mut d.net);

    // Generator: fool D, align with the teacher's label space, fool S.
    let c = w.generator_coefficients();
    let z = sample_latent(&mut state.latent_rng, b, state.z_dim);
    let x = state.generator.forward(z, Pass::TRAIN)?;
    state.discriminator.net.set_frozen(true);
    state.student.net.set_frozen(true);
    // D and S only serve as critics here, so their running statistics stay put
    let student_pass = if cfg.student_batch_stats { Pass::TRAIN } else { Pass::EVAL.recording() };
    let student_pass = student_pass.without_stat_updates();
    let scores = state.discriminator.forward(x.clone(), Pass::TRAIN.without_stat_updates())?;
    let t_logits = state.teacher.forward(x.clone(), Pass::EVAL.recording())?;
    let s_logits = state.student.forward(x, student_pass)?;
    let (adv, g_adv) = gen_adv_loss_grad(&scores, w.adv_mode)?;
    let (ent, g_ent) = align_entropy_loss_grad(&t_logits)?;
    let (bal, g_bal) = balance_loss_grad(&t_logits)?;
    let (kd, g_kd_t, g_kd_s) = kd_loss_grad(&t_logits, &s_logits, w.temperature)?;
    report.g_adv = finite(adv, step, "g_adv")?;
    report.g_entropy = finite(ent, step, "g_entropy")?;
    report.g_balance = finite(bal, step, "g_balance")?;
    report.g_adv_student = finite(kd, step, "g_adv_student")?;

    let mut grad_t = scaled(g_ent, c[1]);
    grad_t.add_assign(&scaled(g_bal, c[2]));
    grad_t.add_assign(&scaled(g_kd_t, c[3]));
    let mut grad_x = state.teacher.backward(grad_t)?;
    grad_x.add_assign(&state.discriminator.backward(scaled(g_adv, c[0]))?);
    grad_x.add_assign(&state.student.backward(scaled(g_kd_s, c[3]))?);
    state.discriminator.net.set_frozen(false);
    state.student.net.set_frozen(false);
    state.generator.net.zero_grad();
    state.generator.backward(grad_x)?;
    state.g_opt.step(&mut state.generator.net);

    // Student: j KD updates on fresh samples.
    let n_ood = ood_count(b, w.ood_mix_ratio);
    let n_gen = b - n_ood;
    let total = cfg.student_updates();
    let mut kd_sum = 0.0;
    for _ in 0..cfg.j {
        let z = sample_latent(&mut state.latent_rng, n_gen, state.z_dim);
        let gen = if n_gen > 0 {
            state.generator.forward(z, no_record)?
        } else {
            ood_batch.slice_items(0, 0)
        };
        let pick = sample_indices(&mut state.data_rng, ood_batch.shape()[0], n_ood);
        let ood = ood_batch.select_items(&pick);
        let mixed = mix_batch(&gen, &ood, b, w.ood_mix_ratio)?;
        kd_sum += student_kd_update(state, &mixed, cfg, total, step)?;
    }
    report.kd_loss = if cfg.j > 0 { kd_sum / cfg.j as f64 } else { 0.0 };

    if state.teacher.checksum() != state.teacher_checksum {
        return Err(EngineError::TeacherModified(step));
    }
    state.step = step;
    Ok(report)
}

fn student_kd_update<T: Scalar>(state: &mut TrainState<T>, batch: &Tensor<T>, cfg: &TrainerConfig, total: u64, step: u64) -> Result<f64> {
    let t_logits = state.teacher.forward(batch.clone(), Pass::EVAL)?;
    let s = &mut state.student;
    s.net.zero_grad();
    let pass = if cfg.student_batch_stats { Pass::TRAIN } else { Pass::EVAL.recording() };
    let s_logits = s.forward(batch.clone(), pass)?;
    let (kd, _, g) = kd_loss_grad(&t_logits, &s_logits, cfg.weights.temperature)?;
    let kd = finite(kd, step, "kd_loss")?;
    s.backward(g)?;
    state.s_opt.set_lr(cosine_lr(cfg.classifier_opt.lr, state.s_opt.steps(), total));
    state.s_opt.step(&mut s.net);
    Ok(kd)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub accuracy: Option<f64>,
}

/// Per-step losses and evaluation points of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<(u64, LossReport)>,
    pub evals: Vec<EvalPoint>,
    /// Step whose student was returned.
    pub best_step: u64,
    pub best_accuracy: Option<f64>,
}

/// Players visible to an observer at an evaluation boundary.
pub struct Snapshot<'a, T> {
    pub step: u64,
    pub student: &'a ModelHandle<T>,
    pub generator: Option<&'a ModelHandle<T>>,
    pub discriminator: Option<&'a ModelHandle<T>>,
}

/// Receives progress from the training loops (metrics logging, checkpoints,
/// sample grids). Observers see parameter snapshots only.
pub trait RunObserver<T> {
    fn on_step(&mut self, _step: u64, _report: &LossReport) -> std::result::Result<(), String> {
        Ok(())
    }
    fn on_eval(&mut self, _point: &EvalPoint, _snapshot: &Snapshot<'_, T>) -> std::result::Result<(), String> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;
impl<T> RunObserver<T> for NoObserver {}

struct BestTracker<T> {
    best: Option<(u64, f64, ModelHandle<T>)>,
}

impl<T: Scalar> BestTracker<T> {
    fn offer(&mut self, step: u64, acc: f64, student: &ModelHandle<T>) {
        if self.best.as_ref().is_none_or(|(_, a, _)| acc > *a) {
            self.best = Some((step, acc, student.clone()));
        }
    }

    fn finish(self, log: &mut RunLog, last_step: u64, last: ModelHandle<T>) -> ModelHandle<T> {
        match self.best {
            Some((step, acc, m)) => {
                log.best_step = step;
                log.best_accuracy = Some(acc);
                m
            }
            None => {
                log.best_step = last_step;
                last
            }
        }
    }
}

fn check_images<T: Scalar>(d: &LabeledDataset<T>, c: usize, res: (usize, usize)) -> Result<()> {
    let (dc, h, w) = d.dims();
    if (dc, h, w) != (c, res.0, res.1) {
        return Err(EngineError::Data(format!(
            "`{}` holds {dc}x{h}x{w} images, expected {c}x{}x{}",
            d.name, res.0, res.1
        )));
    }
    if d.is_empty() {
        return Err(EngineError::Data(format!("`{}` is empty", d.name)));
    }
    Ok(())
}

fn is_eval_step(step: u64, cfg: &TrainerConfig) -> bool {
    cfg.eval_every > 0 && step % cfg.eval_every == 0
}

/// The full MosaicKD loop for `cfg.steps` outer iterations. Returns the
/// student with the best held-out accuracy (the final one without `eval`).
pub fn run_mosaic<T: Scalar>(
    teacher: &ModelHandle<T>,
    ood: &LabeledDataset<T>,
    specs: &PlayerSpecs,
    cfg: &TrainerConfig,
    eval: Option<&LabeledDataset<T>>,
    observer: &mut dyn RunObserver<T>,
) -> Result<(ModelHandle<T>, RunLog)> {
    let state = TrainState::new(teacher.clone(), specs, cfg)?;
    let (student, log, _) = run_mosaic_from(state, ood, cfg, eval, observer)?;
    Ok((student, log))
}

/// Like [`run_mosaic`] from an existing state; also hands back the final
/// state (generator, discriminator, last student).
pub fn run_mosaic_from<T: Scalar>(
    mut state: TrainState<T>,
    ood: &LabeledDataset<T>,
    cfg: &TrainerConfig,
    eval: Option<&LabeledDataset<T>>,
    observer: &mut dyn RunObserver<T>,
) -> Result<(ModelHandle<T>, RunLog, TrainState<T>)> {
    let g = generator_spec(&state.generator).expect("state holds a generator").clone();
    check_images(ood, g.out_channels, g.output_resolution)?;
    let mut log = RunLog::default();
    let mut best = BestTracker { best: None };
    for _ in 0..cfg.steps {
        let idx = sample_indices(&mut state.data_rng, ood.len(), cfg.batch_size);
        let batch = ood.batch(&idx);
        let report = mosaic_step(&mut state, &batch, cfg)?;
        let step = state.step;
        log.rows.push((step, report));
        observer.on_step(step, &report).map_err(EngineError::Observer)?;
        if is_eval_step(step, cfg) {
            let accuracy = match eval {
                Some(test) => Some(evalkit::accuracy(&mut state.student.clone(), test)?),
                None => None,
            };
            let point = EvalPoint { step, accuracy };
            if let Some(acc) = accuracy {
                best.offer(step, acc, &state.student);
            }
            log.evals.push(point);
            let snap = Snapshot {
                step,
                student: &state.student,
                generator: Some(&state.generator),
                discriminator: Some(&state.discriminator),
            };
            observer.on_eval(&point, &snap).map_err(EngineError::Observer)?;
        }
    }
    let student = best.finish(&mut log, state.step, state.student.clone());
    Ok((student, log, state))
}

/// KD on a fixed transfer set. Each outer step performs `max(j, 1)` student
/// updates so that a run matches MosaicKD's student update budget.
#[allow(clippy::too_many_arguments)]
pub fn run_vanilla_kd<T: Scalar>(
    teacher: &ModelHandle<T>,
    transfer: &LabeledDataset<T>,
    student: ModelHandle<T>,
    cfg: &TrainerConfig,
    use_labels: bool,
    eval: Option<&LabeledDataset<T>>,
    observer: &mut dyn RunObserver<T>,
) -> Result<(ModelHandle<T>, RunLog)> {
    cfg.validate()?;
    if use_labels && transfer.labels.is_none() {
        return Err(EngineError::Unlabeled(transfer.name.clone()));
    }
    if transfer.is_empty() {
        return Err(EngineError::Data(format!("`{}` is empty", transfer.name)));
    }
    let mut teacher = teacher.clone();
    teacher.net.set_frozen(true);
    let checksum = teacher.checksum();
    let mut student = student;
    let mut opt = Sgd::new(cfg.classifier_opt);
    let mut rng = stream_rng(cfg.seed, Stream::Data);
    let inner = cfg.j.max(1);
    let total = cfg.steps * inner as u64;
    let pass = if cfg.student_batch_stats { Pass::TRAIN } else { Pass::EVAL.recording() };
    let mut log = RunLog::default();
    let mut best = BestTracker { best: None };
    for step in 1..=cfg.steps {
        let mut kd_sum = 0.0;
        for _ in 0..inner {
            let idx = sample_indices(&mut rng, transfer.len(), cfg.batch_size);
            let x = transfer.batch(&idx);
            let t_logits = teacher.forward(x.clone(), Pass::EVAL)?;
            student.net.zero_grad();
            let s_logits = student.forward(x, pass)?;
            let (kd, _, mut g) = kd_loss_grad(&t_logits, &s_logits, cfg.weights.temperature)?;
            kd_sum += finite(kd, step, "kd_loss")?;
            if use_labels {
                let labels: Vec<usize> = idx.iter().map(|&i| transfer.labels.as_ref().expect("checked")[i]).collect();
                let (ce, g_ce) = cross_entropy_grad(&s_logits, &labels)?;
                finite(ce, step, "ce_loss")?;
                g.add_assign(&g_ce);
            }
            student.backward(g)?;
            opt.set_lr(cosine_lr(cfg.classifier_opt.lr, opt.steps(), total));
            opt.step(&mut student.net);
        }
        if teacher.checksum() != checksum {
            return Err(EngineError::TeacherModified(step));
        }
        let report = LossReport {
            kd_loss: kd_sum / inner as f64,
            ..LossReport::default()
        };
        log.rows.push((step, report));
        observer.on_step(step, &report).map_err(EngineError::Observer)?;
        if is_eval_step(step, cfg) {
            let accuracy = match eval {
                Some(test) => Some(evalkit::accuracy(&mut student.clone(), test)?),
                None => None,
            };
            let point = EvalPoint { step, accuracy };
            if let Some(acc) = accuracy {
                best.offer(step, acc, &student);
            }
            log.evals.push(point);
            let snap = Snapshot {
                step,
                student: &student,
                generator: None,
                discriminator: None,
            };
            observer.on_eval(&point, &snap).map_err(EngineError::Observer)?;
        }
    }
    let student = best.finish(&mut log, cfg.steps, student);
    Ok((student, log))
}

/// Outcome of teacher pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Cross-entropy training with SGD and a cosine schedule over `cfg.steps`
/// mini-batches. Zero steps returns the initialized model.
pub fn train_teacher<T: Scalar>(
    data: &LabeledDataset<T>,
    spec: &ClassifierSpec,
    cfg: &TrainerConfig,
) -> Result<(ModelHandle<T>, TeacherReport)> {
    cfg.validate()?;
    let labels = data.labels.as_ref().ok_or_else(|| EngineError::Unlabeled(data.name.clone()))?;
    if spec.class_count != data.class_count {
        return Err(EngineError::Config(format!(
            "classifier has {} classes, `{}` has {}",
            spec.class_count, data.name, data.class_count
        )));
    }
    if data.is_empty() {
        return Err(EngineError::Data(format!("`{}` is empty", data.name)));
    }
    let mut model = init_teacher::<T>(spec, cfg.seed)?;
    let mut opt = Sgd::new(cfg.classifier_opt);
    let mut rng = stream_rng(cfg.seed, Stream::Data);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let idx = sample_indices(&mut rng, data.len(), cfg.batch_size);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        model.net.zero_grad();
        let logits = model.forward(data.batch(&idx), Pass::TRAIN)?;
        let (ce, g) = cross_entropy_grad(&logits, &y)?;
        losses.push(finite(ce, step, "ce_loss")?);
        model.backward(g)?;
        opt.set_lr(cosine_lr(cfg.classifier_opt.lr, opt.steps(), cfg.steps));
        opt.step(&mut model.net);
    }
    let train_accuracy = evalkit::accuracy(&mut model, data)?;
    Ok((model, TeacherReport { losses, train_accuracy }))
}
