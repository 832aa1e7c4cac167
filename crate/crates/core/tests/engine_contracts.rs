use mosaic_kd::datakit::LabeledDataset;
use mosaic_kd::engine::*;
use mosaic_kd::mathcore::ConvLayerSpec;
use mosaic_kd::netzoo::*;
use mosaic_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const K: usize = 3;

fn specs() -> PlayerSpecs {
    PlayerSpecs {
        generator: GeneratorSpec {
            z_dim: 8,
            base_grid: 4,
            channel_schedule: vec![8, 4],
            output_resolution: (8, 8),
            out_channels: 3,
        },
        discriminator: DiscriminatorSpec {
            in_channels: 3,
            layers: vec![ConvLayerSpec::new(3, 1, 1), ConvLayerSpec::new(3, 1, 1)],
            hidden_channels: vec![4],
            final_stride: 1,
            batch_norm: true,
        },
        student: small_classifier(),
    }
}

fn small_classifier() -> ClassifierSpec {
    ClassifierSpec {
        in_channels: 3,
        widths: vec![6, 6],
        strides: vec![1, 2],
        class_count: K,
    }
}

/// Class c brightens column band c; easy enough for a tiny net.
fn toy_data(n: usize, seed: u64) -> LabeledDataset<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 3 * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % K;
        labels.push(c);
        for _ch in 0..3 {
            for _y in 0..8 {
                for x in 0..8 {
                    let band = x * K / 8 == c;
                    let base = if band { 0.8 } else { 0.2 };
                    data.push(base + rng.random_range(-0.1f32..0.1));
                }
            }
        }
    }
    let images = Tensor::from_vec(&[n, 3, 8, 8], data).unwrap();
    LabeledDataset::new("toy", images, Some(labels), K).unwrap()
}

fn cfg(steps: u64, j: usize) -> TrainerConfig {
    TrainerConfig {
        steps,
        j,
        batch_size: 8,
        eval_every: 0,
        ..TrainerConfig::default()
    }
}

fn teacher() -> ModelHandle<f32> {
    let data = toy_data(96, 11);
    let c = TrainerConfig {
        steps: 60,
        batch_size: 16,
        ..TrainerConfig::default()
    };
    train_teacher(&data, &small_classifier(), &c).unwrap().0
}

fn ood() -> LabeledDataset<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 40;
    let data: Vec<f32> = (0..n * 3 * 64).map(|_| rng.random::<f32>()).collect();
    LabeledDataset::new("noise", Tensor::from_vec(&[n, 3, 8, 8], data).unwrap(), None, K).unwrap()
}

fn run_steps(state: &mut TrainState<f32>, ood: &LabeledDataset<f32>, c: &TrainerConfig) -> Vec<mosaic_kd::losses::LossReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..c.steps)
        .map(|_| {
            let idx: Vec<usize> = (0..c.batch_size).map(|_| rng.random_range(0..ood.len())).collect();
            mosaic_step(state, &ood.batch(&idx), c).unwrap()
        })
        .collect()
}

#[test]
fn hundred_steps_keep_teacher_and_count_updates() {
    let t = teacher();
    let before = t.checksum();
    let j = 3;
    let c = cfg(100, j);
    let mut state = TrainState::new(t, &specs(), &c).unwrap();
    let rows = run_steps(&mut state, &ood(), &c);
    assert_eq!(rows.len(), 100);
    assert_eq!(state.teacher.checksum(), before);
    assert_eq!(
        (state.d_opt.steps(), state.g_opt.steps(), state.s_opt.steps()),
        (100, 100, 100 * j as u64)
    );
    assert_eq!(state.step, 100);
}

#[test]
fn zero_inner_steps_freeze_the_student() {
    let c = cfg(5, 0);
    let mut state = TrainState::new(teacher(), &specs(), &c).unwrap();
    let s0 = state.student.checksum();
    let g0 = state.generator.checksum();
    let rows = run_steps(&mut state, &ood(), &c);
    assert_eq!(state.student.checksum(), s0);
    assert_ne!(state.generator.checksum(), g0);
    assert!(rows.iter().all(|r| r.kd_loss == 0.0));
    assert_eq!(state.s_opt.steps(), 0);
}

#[test]
fn runs_are_deterministic_per_seed() {
    let t = teacher();
    let o = ood();
    let go = |seed| {
        let c = TrainerConfig { seed, ..cfg(6, 2) };
        let (s, log) = run_mosaic(&t, &o, &specs(), &c, None, &mut NoObserver).unwrap();
        (s.checksum(), log.rows)
    };
    let a = go(4);
    assert_eq!(a, go(4));
    assert_ne!(a.0, go(5).0);
}

#[test]
fn eval_points_follow_eval_every() {
    let t = teacher();
    let test = toy_data(12, 3);
    let c = TrainerConfig {
        eval_every: 10,
        ..cfg(50, 1)
    };
    let (_, log) = run_mosaic(&t, &ood(), &specs(), &c, Some(&test), &mut NoObserver).unwrap();
    assert_eq!(log.rows.len(), 50);
    let steps: Vec<u64> = log.evals.iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![10, 20, 30, 40, 50]);
    assert!(log.evals.iter().all(|e| e.accuracy.is_some()));

    let (_, log) = run_mosaic(&t, &ood(), &specs(), &cfg(1, 1), None, &mut NoObserver).unwrap();
    assert_eq!(log.rows.len(), 1);
    assert!(log.evals.is_empty());
}

#[test]
fn student_identical_to_teacher_has_zero_kd() {
    let t = teacher();
    let c = TrainerConfig {
        student_batch_stats: false,
        ..cfg(1, 1)
    };
    let (_, log) = run_vanilla_kd(&t, &ood(), t.clone(), &c, false, None, &mut NoObserver).unwrap();
    assert!(log.rows[0].1.kd_loss.abs() < 1e-6, "{}", log.rows[0].1.kd_loss);
}

#[test]
fn vanilla_kd_matches_the_student_update_budget() {
    let t = teacher();
    for j in [0usize, 1, 4] {
        let c = cfg(3, j);
        let mut counter = Counter(0);
        let (_, log) = run_vanilla_kd(&t, &ood(), init_student(&small_classifier(), 0).unwrap(), &c, false, None, &mut counter).unwrap();
        assert_eq!(log.rows.len(), 3);
        assert_eq!(counter.0, 3);
    }
}

struct Counter(u64);
impl RunObserver<f32> for Counter {
    fn on_step(&mut self, _step: u64, _r: &mosaic_kd::losses::LossReport) -> std::result::Result<(), String> {
        self.0 += 1;
        Ok(())
    }
}

#[test]
fn toy_teacher_learns_and_zero_steps_is_init() {
    let train = toy_data(96, 11);
    let test = toy_data(60, 12);
    let spec = small_classifier();
    let c = TrainerConfig {
        steps: 60,
        batch_size: 16,
        ..TrainerConfig::default()
    };
    let (mut t, rep) = train_teacher(&train, &spec, &c).unwrap();
    assert!(rep.train_accuracy > 0.95, "{}", rep.train_accuracy);
    assert_eq!(rep.losses.len(), 60);
    assert!(mosaic_kd::evalkit::accuracy(&mut t, &test).unwrap() > 0.95);

    let c0 = TrainerConfig { steps: 0, ..c };
    let (t0, rep0) = train_teacher(&train, &spec, &c0).unwrap();
    assert!(rep0.losses.is_empty());
    assert_eq!(t0.checksum(), init_teacher::<f32>(&spec, c0.seed).unwrap().checksum());
}

#[test]
fn non_finite_input_halts_the_run() {
    let mut o = ood();
    let data: Vec<f32> = o.images.data().iter().map(|_| f32::NAN).collect();
    o.images = Tensor::from_vec(&o.images.shape().to_vec(), data).unwrap();
    let err = run_mosaic(&teacher(), &o, &specs(), &cfg(3, 1), None, &mut NoObserver).unwrap_err();
    assert!(matches!(err, EngineError::NonFinite { step: 1, .. }), "{err}");
}

#[test]
fn mismatched_ood_resolution_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..4 * 3 * 16 * 16).map(|_| rng.random()).collect();
    let big = LabeledDataset::new("big", Tensor::from_vec(&[4, 3, 16, 16], data).unwrap(), None, K).unwrap();
    assert!(matches!(
        run_mosaic(&teacher(), &big, &specs(), &cfg(1, 1), None, &mut NoObserver),
        Err(EngineError::Data(_))
    ));
}
