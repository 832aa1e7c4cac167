//! Analytic gradients of every objective, pushed through small networks,
//! against central finite differences in f64. Each check returns the worst
//! relative error it saw; callers compare against [`TOL`].

use mosaic_kd::losses::{
    align_entropy_loss_grad, balance_loss_grad, disc_loss_grad, gen_adv_loss_grad, generator_total_loss, kd_loss_grad,
    student_total_loss, AdvMode, LossWeights,
};
use mosaic_kd::mathcore::ConvLayerSpec;
use mosaic_kd::netzoo::{
    build_classifier, build_generator, build_patch_discriminator, ClassifierSpec, DiscriminatorSpec, GeneratorSpec,
    ModelHandle,
};
use mosaic_nn::{Layer, Pass, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Replaces the tiny default init with O(1) weights so that every
/// nonlinearity is exercised, and swaps piecewise-linear activations for
/// sigmoids: a 1e-3 difference step routinely straddles a ReLU kink, which
/// measures the kink rather than the loss gradient. The activations' own
/// backward passes are checked separately at a finer step.
fn scramble(m: &mut ModelHandle<f64>, rng: &mut ChaCha8Rng) {
    for layer in m.net.layers_mut() {
        if matches!(layer, Layer::Relu { .. } | Layer::LeakyRelu { .. }) {
            *layer = Layer::sigmoid();
        }
    }
    let theta: Vec<f64> = (0..m.net.num_params()).map(|_| rng.random_range(-0.6..0.6)).collect();
    m.net.set_flat_params(&theta).unwrap();
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    assert!(den > 1e-8, "degenerate gradient");
    num / den
}

fn fd(x0: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + STEP;
            let up = f(&x);
            x[i] = orig - STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn tiny_classifier(seed: u64, rng: &mut ChaCha8Rng) -> ModelHandle<f64> {
    let spec = ClassifierSpec {
        in_channels: 2,
        widths: vec![3, 4],
        strides: vec![2, 1],
        class_count: 4,
    };
    let mut m = build_classifier(&spec, seed).unwrap();
    assert!(m.num_params() < 5_000);
    scramble(&mut m, rng);
    m
}

fn tiny_discriminator(rng: &mut ChaCha8Rng) -> ModelHandle<f64> {
    let spec = DiscriminatorSpec {
        in_channels: 2,
        layers: vec![ConvLayerSpec::new(3, 1, 1), ConvLayerSpec::new(3, 2, 1)],
        hidden_channels: vec![3],
        final_stride: 1,
        batch_norm: true,
    };
    let mut m = build_patch_discriminator(&spec, 0).unwrap();
    scramble(&mut m, rng);
    m
}

/// Loss of `softmax`-based terms as a function of the classifier parameters.
fn check_logit_loss(loss: fn(&Tensor<f64>) -> (f64, Tensor<f64>), seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = tiny_classifier(seed, &mut rng);
    let x = rand_tensor(&[5, 2, 5, 5], 0.0, 1.0, &mut rng);
    let theta = net.net.flat_params();

    net.net.zero_grad();
    let logits = net.forward(x.clone(), Pass::TRAIN).unwrap();
    let (_, g) = loss(&logits);
    net.backward(g).unwrap();
    let analytic = net.net.flat_grads();

    let numeric = fd(&theta, |th| {
        let mut m = net.clone();
        m.net.set_flat_params(th).unwrap();
        loss(&m.forward(x.clone(), Pass::TRAIN).unwrap()).0
    });
    rel_err(&analytic, &numeric)
}

pub fn align_entropy() -> f64 {
    check_logit_loss(|l| align_entropy_loss_grad(l).unwrap(), 1)
}

pub fn balance() -> f64 {
    check_logit_loss(|l| balance_loss_grad(l).unwrap(), 2)
}

pub fn disc_loss() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut d = tiny_discriminator(&mut rng);
    let real = rand_tensor(&[3, 2, 6, 6], 0.0, 1.0, &mut rng);
    let fake = rand_tensor(&[2, 2, 6, 6], 0.0, 1.0, &mut rng);
    let theta = d.net.flat_params();

    d.net.zero_grad();
    let sr = d.forward(real.clone(), Pass::TRAIN).unwrap();
    let sf_probe = d.clone().forward(fake.clone(), Pass::TRAIN).unwrap();
    let (_, gr, gf) = disc_loss_grad(&sr, &sf_probe).unwrap();
    d.backward(gr).unwrap();
    d.forward(fake.clone(), Pass::TRAIN).unwrap();
    d.backward(gf).unwrap();
    let analytic = d.net.flat_grads();

    let numeric = fd(&theta, |th| {
        let mut m = d.clone();
        m.net.set_flat_params(th).unwrap();
        let sr = m.forward(real.clone(), Pass::TRAIN).unwrap();
        let sf = m.forward(fake.clone(), Pass::TRAIN).unwrap();
        disc_loss_grad(&sr, &sf).unwrap().0
    });
    rel_err(&analytic, &numeric)
}

pub fn gen_adv(mode: AdvMode) -> f64 {
    let seed = if mode == AdvMode::Nonsaturating { 4 } else { 5 };
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = tiny_discriminator(&mut rng);
        d.net.set_frozen(true);
        let x = rand_tensor(&[3, 2, 6, 6], 0.0, 1.0, &mut rng);
        let s = d.forward(x.clone(), Pass::TRAIN).unwrap();
        let (_, g) = gen_adv_loss_grad(&s, mode).unwrap();
        let analytic = d.backward(g).unwrap();
        let numeric = fd(x.data(), |xs| {
            let xt = Tensor::from_vec(x.shape(), xs.to_vec()).unwrap();
            gen_adv_loss_grad(&d.clone().forward(xt, Pass::TRAIN).unwrap(), mode).unwrap().0
        });
        rel_err(analytic.data(), &numeric)
    }
}

/// KD through both networks for τ ∈ {1, 3}, input and student parameters.
pub fn kd() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut teacher = tiny_classifier(6, &mut rng);
    let mut student = tiny_classifier(7, &mut rng);
    teacher.net.set_frozen(true);
    let x = rand_tensor(&[4, 2, 5, 5], 0.0, 1.0, &mut rng);
    for tau in [1.0, 3.0] {
        let loss = |t: &mut ModelHandle<f64>, s: &mut ModelHandle<f64>, x: &Tensor<f64>| {
            let lt = t.forward(x.clone(), Pass::EVAL).unwrap();
            let ls = s.forward(x.clone(), Pass::TRAIN).unwrap();
            kd_loss_grad(&lt, &ls, tau).unwrap().0
        };

        // input gradient: both branches contribute
        student.net.zero_grad();
        let lt = teacher.forward(x.clone(), Pass::EVAL.recording()).unwrap();
        let ls = student.forward(x.clone(), Pass::TRAIN).unwrap();
        let (_, gt, gs) = kd_loss_grad(&lt, &ls, tau).unwrap();
        let mut gx = teacher.backward(gt).unwrap();
        gx.add_assign(&student.backward(gs).unwrap());
        let numeric = fd(x.data(), |xs| {
            let xt = Tensor::from_vec(x.shape(), xs.to_vec()).unwrap();
            loss(&mut teacher.clone(), &mut student.clone(), &xt)
        });
        worst = worst.max(rel_err(gx.data(), &numeric));

        // student parameter gradient
        let analytic = student.net.flat_grads();
        let theta = student.net.flat_params();
        let numeric = fd(&theta, |th| {
            let mut s = student.clone();
            s.net.set_flat_params(th).unwrap();
            loss(&mut teacher.clone(), &mut s, &x)
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// The student's objective is KD on the mixed batch; its gradient is the
/// student half of `kd_loss_grad`.
pub fn student_total() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut teacher = tiny_classifier(12, &mut rng);
    let mut student = tiny_classifier(13, &mut rng);
    teacher.net.set_frozen(true);
    let x = rand_tensor(&[6, 2, 5, 5], 0.0, 1.0, &mut rng);
    let tau = 2.0;
    let lt = teacher.forward(x.clone(), Pass::EVAL).unwrap();
    student.net.zero_grad();
    let ls = student.forward(x.clone(), Pass::TRAIN).unwrap();
    let (_, _, gs) = kd_loss_grad(&lt, &ls, tau).unwrap();
    student.backward(gs).unwrap();
    let analytic = student.net.flat_grads();
    let theta = student.net.flat_params();
    let numeric = fd(&theta, |th| {
        let mut s = student.clone();
        s.net.set_flat_params(th).unwrap();
        student_total_loss(&lt, &s.forward(x.clone(), Pass::TRAIN).unwrap(), tau).unwrap()
    });
    rel_err(&analytic, &numeric)
}

/// Full generator objective, differentiated into the generator parameters
/// through discriminator, teacher and student at once.
pub fn generator_total() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gspec = GeneratorSpec {
        z_dim: 3,
        base_grid: 2,
        channel_schedule: vec![3, 2],
        output_resolution: (4, 4),
        out_channels: 2,
    };
    let mut g = build_generator::<f64>(&gspec, 0).unwrap();
    scramble(&mut g, &mut rng);
    let mut d = tiny_discriminator(&mut rng);
    let mut t = tiny_classifier(9, &mut rng);
    let mut s = tiny_classifier(10, &mut rng);
    for m in [&mut d, &mut t, &mut s] {
        m.net.set_frozen(true);
    }
    let w = LossWeights {
        lambda_reg: 0.7,
        w_align_entropy: 1.3,
        w_balance: 0.9,
        w_adv_student: 1.1,
        temperature: 2.0,
        ..LossWeights::default()
    };
    let c = w.generator_coefficients();
    let z = rand_tensor(&[4, 3], -1.0, 1.0, &mut rng);

    let total = |g: &mut ModelHandle<f64>, grads: bool| -> f64 {
        let (mut d, mut t, mut s) = (d.clone(), t.clone(), s.clone());
        let pass = if grads { Pass::TRAIN } else { Pass::TRAIN.recording() };
        let x = g.forward(z.clone(), pass).unwrap();
        let ev = Pass::EVAL.recording();
        let sf = d.forward(x.clone(), ev).unwrap();
        let lt = t.forward(x.clone(), ev).unwrap();
        let ls = s.forward(x.clone(), ev).unwrap();
        let (adv, g_adv) = gen_adv_loss_grad(&sf, w.adv_mode).unwrap();
        let (ent, g_ent) = align_entropy_loss_grad(&lt).unwrap();
        let (bal, g_bal) = balance_loss_grad(&lt).unwrap();
        let (kd, g_kt, g_ks) = kd_loss_grad(&lt, &ls, w.temperature).unwrap();
        if grads {
            let mut gt = g_ent;
            gt.scale(c[1]);
            let mut tmp = g_bal;
            tmp.scale(c[2]);
            gt.add_assign(&tmp);
            let mut tmp = g_kt;
            tmp.scale(c[3]);
            gt.add_assign(&tmp);
            let mut gx = t.backward(gt).unwrap();
            let mut gd = g_adv;
            gd.scale(c[0]);
            gx.add_assign(&d.backward(gd).unwrap());
            let mut gs = g_ks;
            gs.scale(c[3]);
            gx.add_assign(&s.backward(gs).unwrap());
            g.net.zero_grad();
            g.backward(gx).unwrap();
        }
        generator_total_loss(adv, ent, bal, kd, &w).unwrap()
    };

    total(&mut g, true);
    let analytic = g.net.flat_grads();
    let theta = g.net.flat_params();
    let numeric = fd(&theta, |th| {
        let mut gm = g.clone();
        gm.net.set_flat_params(th).unwrap();
        total(&mut gm, false)
    });
    rel_err(&analytic, &numeric)
}
