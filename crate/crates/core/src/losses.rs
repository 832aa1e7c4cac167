//! Training objectives. Every loss comes in a value form and a `*_grad` form
//! that also returns the gradient with respect to the network outputs it
//! consumes (score grids or logits), ready to feed into `Sequential::backward`.
//!
//! All reductions are means, so gradients carry the `1/N` factor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use mosaic_nn::{Scalar, Tensor};

use crate::mathcore::{entropy_unchecked, log_softmax, softmax, MathError, ProbVector};

/// Scores are kept at least this far from 0 and 1 before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty input")]
    Empty,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("non-finite loss term `{0}`")]
    NonFinite(&'static str),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Prob(#[from] MathError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    /// `−mean ln D(G(z))`.
    #[default]
    Nonsaturating,
    /// `mean ln(1 − D(G(z)))`.
    Minimax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub w_align_entropy: f64,
    pub w_balance: f64,
    pub w_adv_student: f64,
    pub temperature: f64,
    pub ood_mix_ratio: f64,
    pub adv_mode: AdvMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 1.0,
            w_align_entropy: 1.0,
            w_balance: 1.0,
            w_adv_student: 1.0,
            temperature: 1.0,
            ood_mix_ratio: 0.5,
            adv_mode: AdvMode::Nonsaturating,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_reg", self.lambda_reg),
            ("w_align_entropy", self.w_align_entropy),
            ("w_balance", self.w_balance),
            ("w_adv_student", self.w_adv_student),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::Weights(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(LossError::Weights(format!("temperature = {} must be > 0", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.ood_mix_ratio) {
            return Err(LossError::Weights(format!("ood_mix_ratio = {} must lie in [0, 1]", self.ood_mix_ratio)));
        }
        Ok(())
    }

    /// Multipliers applied to `(g_adv, g_entropy, g_balance, kd_term)` in
    /// [`generator_total_loss`]; also the factors for their gradients.
    pub fn generator_coefficients(&self) -> [f64; 4] {
        [
            self.lambda_reg,
            self.lambda_reg * self.w_align_entropy,
            self.w_balance,
            -self.w_adv_student,
        ]
    }
}

/// Scalars produced by one training step, in nats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_entropy: f64,
    pub g_balance: f64,
    /// KD divergence on generated samples, as seen by the generator.
    pub g_adv_student: f64,
    /// Student objective (mean over the inner steps).
    pub kd_loss: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("d_loss", self.d_loss),
            ("g_adv", self.g_adv),
            ("g_entropy", self.g_entropy),
            ("g_balance", self.g_balance),
            ("g_adv_student", self.g_adv_student),
            ("kd_loss", self.kd_loss),
        ]
    }

    /// Names the first non-finite term, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.terms().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(LossError::NonFinite(name)),
            None => Ok(()),
        }
    }
}

fn clamp_score<T: Scalar>(s: T) -> T {
    let eps = T::lit(SCORE_CLAMP);
    // max/min would turn NaN into a bound and hide a diverged discriminator
    if s.is_nan() {
        return s;
    }
    s.max(eps).min(T::one() - eps)
}

fn nonempty<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    if t.is_empty() {
        Err(LossError::Empty)
    } else {
        Ok(())
    }
}

/// `−mean ln real − mean ln(1 − fake)`. The two grids may differ in size.
pub fn disc_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<T> {
    disc_loss_grad(real, fake).map(|(v, _, _)| v)
}

/// Loss plus gradients w.r.t. the real and fake score grids. At clamped
/// units the gradient is evaluated at the clamped score rather than zeroed,
/// so a saturated discriminator still receives a signal.
pub fn disc_loss_grad<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<(T, Tensor<T>, Tensor<T>)> {
    nonempty(real)?;
    nonempty(fake)?;
    let nr = T::from_usize_lossy(real.len());
    let nf = T::from_usize_lossy(fake.len());
    let mut value = T::zero();
    let mut gr = Tensor::zeros(real.shape());
    for (g, &s) in gr.data_mut().iter_mut().zip(real.data()) {
        let s = clamp_score(s);
        value -= s.ln() / nr;
        *g = -T::one() / (s * nr);
    }
    let mut gf = Tensor::zeros(fake.shape());
    for (g, &s) in gf.data_mut().iter_mut().zip(fake.data()) {
        let s = clamp_score(s);
        value -= (T::one() - s).ln() / nf;
        *g = T::one() / ((T::one() - s) * nf);
    }
    Ok((value, gr, gf))
}

pub fn gen_adv_loss<T: Scalar>(fake: &Tensor<T>, mode: AdvMode) -> Result<T> {
    gen_adv_loss_grad(fake, mode).map(|(v, _)| v)
}

pub fn gen_adv_loss_grad<T: Scalar>(fake: &Tensor<T>, mode: AdvMode) -> Result<(T, Tensor<T>)> {
    nonempty(fake)?;
    let n = T::from_usize_lossy(fake.len());
    let mut value = T::zero();
    let mut g = Tensor::zeros(fake.shape());
    for (gi, &s) in g.data_mut().iter_mut().zip(fake.data()) {
        let s = clamp_score(s);
        match mode {
            AdvMode::Nonsaturating => {
                value -= s.ln() / n;
                *gi = -T::one() / (s * n);
            }
            AdvMode::Minimax => {
                value += (T::one() - s).ln() / n;
                *gi = -T::one() / ((T::one() - s) * n);
            }
        }
    }
    Ok((value, g))
}

/// Mean per-sample entropy of the given predictions.
pub fn align_entropy_loss<T: Scalar>(probs: &[ProbVector<T>]) -> Result<T> {
    if probs.is_empty() {
        return Err(LossError::Empty);
    }
    let n = T::from_usize_lossy(probs.len());
    Ok(probs.iter().map(|p| entropy_unchecked(p.as_slice())).sum::<T>() / n)
}

/// [`align_entropy_loss`] of `softmax(logits)` with its logit gradient
/// `∂H/∂lᵢ = −pᵢ(ln pᵢ + H)` per row.
pub fn align_entropy_loss_grad<T: Scalar>(logits: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    nonempty(logits)?;
    let (n, k) = logits.dims2();
    let nf = T::from_usize_lossy(n);
    let mut value = T::zero();
    let mut g = Tensor::zeros(logits.shape());
    for (row, grow) in logits.data().chunks(k).zip(g.data_mut().chunks_mut(k)) {
        let logp = log_softmax(row);
        let h = -logp.iter().map(|&l| l.exp() * l).sum::<T>();
        value += h / nf;
        for (gi, &l) in grow.iter_mut().zip(&logp) {
            *gi = -l.exp() * (l + h) / nf;
        }
    }
    Ok((value, g))
}

/// `−H(mean pᵢ)`: lowest when the batch-mean prediction is uniform.
pub fn balance_loss<T: Scalar>(probs: &[ProbVector<T>]) -> Result<T> {
    let Some(first) = probs.first() else {
        return Err(LossError::Empty);
    };
    let k = first.len();
    let n = T::from_usize_lossy(probs.len());
    let mut mean = vec![T::zero(); k];
    for p in probs {
        if p.len() != k {
            return Err(LossError::Shape(vec![k], vec![p.len()]));
        }
        for (m, &v) in mean.iter_mut().zip(p.as_slice()) {
            *m += v / n;
        }
    }
    Ok(-entropy_unchecked(&mean))
}

/// [`balance_loss`] of `softmax(logits)` with gradient
/// `(1/N)·p_{n,i}·(gᵢ − Σₖ p_{n,k} gₖ)` where `g = ln(mean p)`.
pub fn balance_loss_grad<T: Scalar>(logits: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    nonempty(logits)?;
    let (n, k) = logits.dims2();
    let nf = T::from_usize_lossy(n);
    let probs: Vec<Vec<T>> = logits.data().chunks(k).map(softmax).collect();
    let mut mean = vec![T::zero(); k];
    for p in &probs {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v / nf;
        }
    }
    let value = -entropy_unchecked(&mean);
    // a component of the mean is 0 only if every row underflowed there, in
    // which case every p_{n,i} factor below is 0 too
    let gvec: Vec<T> = mean.iter().map(|&m| if m > T::zero() { m.ln() } else { T::zero() }).collect();
    let mut g = Tensor::zeros(logits.shape());
    for (p, grow) in probs.iter().zip(g.data_mut().chunks_mut(k)) {
        let dot: T = p.iter().zip(&gvec).map(|(&a, &b)| a * b).sum();
        for ((gi, &pi), &gk) in grow.iter_mut().zip(p).zip(&gvec) {
            *gi = pi * (gk - dot) / nf;
        }
    }
    Ok((value, g))
}

/// Mean over rows of `KL(softmax(t/τ) ‖ softmax(s/τ))`.
pub fn kd_loss<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>, temperature: f64) -> Result<T> {
    kd_loss_grad(teacher, student, temperature).map(|(v, _, _)| v)
}

/// KD loss with gradients w.r.t. teacher logits and student logits.
pub fn kd_loss_grad<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>, temperature: f64) -> Result<(T, Tensor<T>, Tensor<T>)> {
    if teacher.shape() != student.shape() || teacher.shape().len() != 2 {
        return Err(LossError::Shape(teacher.shape().to_vec(), student.shape().to_vec()));
    }
    nonempty(teacher)?;
    if !(temperature > 0.0) {
        return Err(LossError::Weights(format!("temperature = {temperature} must be > 0")));
    }
    let tau = T::lit(temperature);
    let (n, k) = teacher.dims2();
    let nf = T::from_usize_lossy(n);
    let mut value = T::zero();
    let mut gt = Tensor::zeros(teacher.shape());
    let mut gs = Tensor::zeros(student.shape());
    let rows = teacher.data().chunks(k).zip(student.data().chunks(k));
    let grads = gt.data_mut().chunks_mut(k).zip(gs.data_mut().chunks_mut(k));
    for ((trow, srow), (gtrow, gsrow)) in rows.zip(grads) {
        let lt = log_softmax(&trow.iter().map(|&v| v / tau).collect::<Vec<_>>());
        let ls = log_softmax(&srow.iter().map(|&v| v / tau).collect::<Vec<_>>());
        let kl = lt.iter().zip(&ls).map(|(&a, &b)| a.exp() * (a - b)).sum::<T>();
        value += kl / nf;
        for i in 0..k {
            let (pt, ps) = (lt[i].exp(), ls[i].exp());
            gsrow[i] = (ps - pt) / (tau * nf);
            gtrow[i] = pt * (lt[i] - ls[i] - kl) / (tau * nf);
        }
    }
    Ok((value, gt, gs))
}

/// Mean cross-entropy of `softmax(logits)` against integer labels, with its
/// logit gradient `(p − onehot)/N`.
pub fn cross_entropy_grad<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    nonempty(logits)?;
    let (n, k) = logits.dims2();
    if labels.len() != n || labels.iter().any(|&l| l >= k) {
        return Err(LossError::Shape(logits.shape().to_vec(), vec![labels.len()]));
    }
    let nf = T::from_usize_lossy(n);
    let mut value = T::zero();
    let mut g = Tensor::zeros(logits.shape());
    for ((row, grow), &y) in logits.data().chunks(k).zip(g.data_mut().chunks_mut(k)).zip(labels) {
        let logp = log_softmax(row);
        value -= logp[y] / nf;
        for (i, (gi, &l)) in grow.iter_mut().zip(&logp).enumerate() {
            let target = if i == y { T::one() } else { T::zero() };
            *gi = (l.exp() - target) / nf;
        }
    }
    Ok((value, g))
}

/// Weighted generator objective. The KD term enters with a negative sign so
/// that minimizing the total pushes the generator toward samples on which
/// the student disagrees with the teacher.
pub fn generator_total_loss(g_adv: f64, g_entropy: f64, g_balance: f64, kd_term: f64, w: &LossWeights) -> Result<f64> {
    let parts = [("g_adv", g_adv), ("g_entropy", g_entropy), ("g_balance", g_balance), ("g_adv_student", kd_term)];
    if let Some((name, _)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(LossError::NonFinite(name));
    }
    let c = w.generator_coefficients();
    Ok(c[0] * g_adv + c[1] * g_entropy + c[2] * g_balance + c[3] * kd_term)
}

/// Student objective on a (generated ∪ OOD) batch: KD only, no labels.
pub fn student_total_loss<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>, temperature: f64) -> Result<T> {
    kd_loss(teacher, student, temperature)
}

/// How many of `batch` samples come from the OOD pool.
pub fn ood_count(batch: usize, ood_mix_ratio: f64) -> usize {
    ((batch as f64) * ood_mix_ratio.clamp(0.0, 1.0)).round() as usize
}

/// Stacks the first `batch − ood_count` generated items on top of the first
/// `ood_count` OOD items.
pub fn mix_batch<T: Scalar>(generated: &Tensor<T>, ood: &Tensor<T>, batch: usize, ood_mix_ratio: f64) -> Result<Tensor<T>> {
    let n_ood = ood_count(batch, ood_mix_ratio);
    let n_gen = batch - n_ood;
    if generated.shape()[0] < n_gen || ood.shape()[0] < n_ood {
        return Err(LossError::Shape(generated.shape().to_vec(), ood.shape().to_vec()));
    }
    let g = generated.slice_items(0, n_gen);
    let o = ood.slice_items(0, n_ood);
    Tensor::concat_items(&[&g, &o]).map_err(|_| LossError::Shape(generated.shape().to_vec(), ood.shape().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn disc_loss_examples() {
        let half = Tensor::<f64>::full(&[2, 1, 3, 3], 0.5);
        close(disc_loss(&half, &half).unwrap(), 2.0 * LN2, 1e-12);
        let real = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0 - 1e-7);
        let fake = Tensor::<f64>::full(&[1, 1, 2, 2], 1e-7);
        close(disc_loss(&real, &fake).unwrap(), 0.0, 1e-6);
        assert_eq!(disc_loss(&Tensor::<f64>::zeros(&[0]), &half), Err(LossError::Empty));
    }

    #[test]
    fn disc_loss_matches_per_unit_bce() {
        let real = t(&[1, 1, 2, 3], vec![0.9, 0.2, 0.55, 0.7, 0.31, 0.999]);
        let fake = t(&[1, 1, 1, 2], vec![0.1, 0.64]);
        let mut oracle = 0.0;
        for &r in real.data() {
            oracle += -f64::ln(r) / 6.0;
        }
        for &f in fake.data() {
            oracle += -f64::ln(1.0 - f) / 2.0;
        }
        close(disc_loss(&real, &fake).unwrap(), oracle, 1e-12);
        // permutation invariance
        let mut rev = real.data().to_vec();
        rev.reverse();
        close(disc_loss(&t(&[1, 1, 2, 3], rev), &fake).unwrap(), oracle, 1e-12);
    }

    #[test]
    fn gen_adv_examples_and_signs() {
        let half = Tensor::<f64>::full(&[1, 1, 2, 2], 0.5);
        close(gen_adv_loss(&half, AdvMode::Nonsaturating).unwrap(), LN2, 1e-12);
        close(gen_adv_loss(&half, AdvMode::Minimax).unwrap(), -LN2, 1e-12);
        for mode in [AdvMode::Nonsaturating, AdvMode::Minimax] {
            let (_, g) = gen_adv_loss_grad(&half, mode).unwrap();
            assert!(g.data().iter().all(|&v| v < 0.0));
        }
    }

    #[test]
    fn entropy_examples() {
        let uni = vec![ProbVector::<f64>::uniform(10); 3];
        close(align_entropy_loss(&uni).unwrap(), 10f64.ln(), 1e-12);
        let one = vec![ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap(); 2];
        close(align_entropy_loss(&one).unwrap(), 0.0, 1e-15);
        let mixed = vec![
            ProbVector::new(vec![0.7, 0.2, 0.1]).unwrap(),
            ProbVector::new(vec![0.9, 0.1, 0.0]).unwrap(),
        ];
        // H([0.7,0.2,0.1]) and H([0.9,0.1]) from a 40-digit reference
        let oracle = (0.801_818_552_543_337_3 + 0.325_082_973_391_448_2) / 2.0;
        close(align_entropy_loss(&mixed).unwrap(), oracle, 1e-12);
    }

    #[test]
    fn balance_examples() {
        let uni = vec![ProbVector::<f64>::uniform(10); 4];
        close(balance_loss(&uni).unwrap(), -(10f64.ln()), 1e-12);
        let same = vec![ProbVector::new(vec![1.0, 0.0, 0.0]).unwrap(); 3];
        close(balance_loss(&same).unwrap(), 0.0, 1e-15);
        let two = vec![
            ProbVector::new(vec![1.0, 0.0]).unwrap(),
            ProbVector::new(vec![0.0, 1.0]).unwrap(),
        ];
        close(balance_loss(&two).unwrap(), -LN2, 1e-12);
        assert_eq!(balance_loss::<f64>(&[]), Err(LossError::Empty));
    }

    #[test]
    fn kd_examples() {
        let a = t(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]);
        close(kd_loss(&a, &a, 1.0).unwrap(), 0.0, 1e-15);
        let teacher = t(&[1, 2], vec![LN2, 0.0]);
        let student = t(&[1, 2], vec![0.0, 0.0]);
        close(kd_loss(&teacher, &student, 1.0).unwrap(), 0.056_633_012_265_132_49, 1e-12);
        let b = t(&[2, 3], vec![1.0, 0.2, -0.4, 0.0, 0.0, 3.0]);
        let tau = 4.0;
        let scaled = |x: &Tensor<f64>| x.map(|v| v * tau);
        close(kd_loss(&scaled(&a), &scaled(&b), tau).unwrap(), kd_loss(&a, &b, 1.0).unwrap(), 1e-12);
        assert!(matches!(kd_loss(&a, &teacher, 1.0), Err(LossError::Shape(..))));
    }

    #[test]
    fn generator_total_composition() {
        let w = LossWeights::default();
        assert_eq!(generator_total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        close(generator_total_loss(1.0, 1.0, 1.0, 1.0, &w).unwrap(), 2.0, 1e-15);
        let lo = generator_total_loss(0.3, 0.2, -0.5, 0.1, &w).unwrap();
        let hi = generator_total_loss(0.3, 0.2, -0.5, 0.4, &w).unwrap();
        assert!(hi < lo);
        assert_eq!(
            generator_total_loss(f64::NAN, 0.0, 0.0, 0.0, &w),
            Err(LossError::NonFinite("g_adv"))
        );
        // linear in each part with the stated signs
        let w = LossWeights {
            lambda_reg: 0.5,
            w_align_entropy: 2.0,
            w_balance: 3.0,
            w_adv_student: 0.25,
            ..LossWeights::default()
        };
        let base = [0.1, 0.2, 0.3, 0.4];
        let expected_slope = [0.5, 1.0, 3.0, -0.25];
        for i in 0..4 {
            let mut p1 = base;
            let mut p2 = base;
            p1[i] = 1.0;
            p2[i] = 3.0;
            let f = |p: [f64; 4]| generator_total_loss(p[0], p[1], p[2], p[3], &w).unwrap();
            close((f(p2) - f(p1)) / 2.0, expected_slope[i], 1e-12);
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            temperature: 0.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            ood_mix_ratio: 1.5,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn student_mixture_degenerate_ratios() {
        let gen_t = t(&[4, 2], vec![1.0, 0.0, 0.5, 0.5, -1.0, 2.0, 0.0, 0.3]);
        let gen_s = t(&[4, 2], vec![0.0, 0.0, 0.1, 0.9, 0.0, 1.0, 1.0, 0.0]);
        let ood_t = t(&[4, 2], vec![3.0, 0.0, 0.0, 3.0, 1.0, 1.0, 2.0, 0.0]);
        let ood_s = t(&[4, 2], vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        for (ratio, (tt, ss)) in [(0.0, (&gen_t, &gen_s)), (1.0, (&ood_t, &ood_s))] {
            let mt = mix_batch(&gen_t, &ood_t, 4, ratio).unwrap();
            let ms = mix_batch(&gen_s, &ood_s, 4, ratio).unwrap();
            close(student_total_loss(&mt, &ms, 1.0).unwrap(), kd_loss(tt, ss, 1.0).unwrap(), 1e-15);
        }
        assert_eq!(ood_count(64, 0.5), 32);
        let half = mix_batch(&gen_t, &ood_t, 4, 0.5).unwrap();
        assert_eq!(&half.data()[4..], &ood_t.data()[..4]);
    }

    #[test]
    fn cross_entropy_value_and_gradient() {
        let logits = t(&[2, 3], vec![1.0, 2.0, 0.5, 0.0, 0.0, 0.0]);
        let (v, g) = cross_entropy_grad(&logits, &[1, 2]).unwrap();
        let p0 = softmax(&[1.0f64, 2.0, 0.5]);
        close(v, (-(p0[1].ln()) + 3f64.ln()) / 2.0, 1e-12);
        close(g.data()[1], (p0[1] - 1.0) / 2.0, 1e-12);
        close(g.data()[3], 1.0 / 6.0, 1e-12);
        assert!(cross_entropy_grad(&logits, &[1, 3]).is_err());
    }

    #[test]
    fn report_names_non_finite_term() {
        let r = LossReport {
            g_balance: f64::INFINITY,
            ..LossReport::default()
        };
        assert_eq!(r.check_finite(), Err(LossError::NonFinite("g_balance")));
    }
}
