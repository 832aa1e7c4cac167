//! Numerical kernels shared by the losses and metrics: information measures
//! (in nats), PSD matrix square root, Fréchet distance between Gaussians, and
//! receptive-field arithmetic for convolution stacks.

use nalgebra::{DMatrix, DVector, RealField};
use num_traits::Float;
use thiserror::Error;

use mosaic_nn::Scalar;

/// Normalization and symmetry tolerance.
pub const NORM_TOL: f64 = 1e-6;

/// Scalars that additionally support dense eigendecomposition.
pub trait Real: Scalar + RealField + Copy {}
impl<T: Scalar + RealField + Copy> Real for T {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("probability vector is empty")]
    Empty,
    #[error("probability component {index} is {value} (must be finite and >= 0)")]
    NegativeComponent { index: usize, value: f64 },
    #[error("probability vector sums to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("support mismatch: q[{index}] = 0 while p[{index}] > 0")]
    SupportMismatch { index: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is indefinite (min eigenvalue {min_eigenvalue})")]
    Indefinite { min_eigenvalue: f64 },
    #[error("Frechet distance came out at {value}, beyond the clamping tolerance")]
    NegativeDistance { value: f64 },
    #[error("receptive field of an empty layer stack")]
    EmptyLayers,
    #[error("invalid conv layer (kernel {kernel}, stride {stride})")]
    InvalidLayer { kernel: usize, stride: usize },
}

/// A discrete distribution over `K` outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector<T>(Vec<T>);

impl<T: Scalar> ProbVector<T> {
    pub fn new(p: Vec<T>) -> Result<Self, MathError> {
        if p.is_empty() {
            return Err(MathError::Empty);
        }
        for (index, &v) in p.iter().enumerate() {
            if !v.is_finite() || v < T::zero() {
                return Err(MathError::NegativeComponent {
                    index,
                    value: v.to_f64_lossy(),
                });
            }
        }
        let sum = p.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(MathError::NotNormalized { sum });
        }
        Ok(Self(p))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![T::one() / T::from_usize_lossy(k); k])
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[T]) -> Self {
        Self(softmax(logits))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    /// Index of the largest component; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// First index of the maximum.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), Float::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), Float::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Shannon entropy `−Σ pᵢ ln pᵢ` with `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &ProbVector<T>) -> T {
    entropy_unchecked(p.as_slice())
}

pub(crate) fn entropy_unchecked<T: Scalar>(p: &[T]) -> T {
    -p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| x * x.ln())
        .sum::<T>()
}

fn same_len<T>(p: &ProbVector<T>, q: &ProbVector<T>) -> Result<(), MathError> {
    if p.0.len() != q.0.len() {
        return Err(MathError::LengthMismatch {
            left: p.0.len(),
            right: q.0.len(),
        });
    }
    Ok(())
}

/// `KL(p‖q) = Σ pᵢ ln(pᵢ/qᵢ)`. Requires `qᵢ = 0 ⇒ pᵢ = 0`.
pub fn kl_divergence<T: Scalar>(p: &ProbVector<T>, q: &ProbVector<T>) -> Result<T, MathError> {
    same_len(p, q)?;
    let mut acc = T::zero();
    for (index, (&pi, &qi)) in p.0.iter().zip(&q.0).enumerate() {
        if pi == T::zero() {
            continue;
        }
        if qi == T::zero() {
            return Err(MathError::SupportMismatch { index });
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc.max(T::zero()))
}

/// Jensen–Shannon divergence, bounded by `ln 2`.
pub fn js_divergence<T: Scalar>(p: &ProbVector<T>, q: &ProbVector<T>) -> Result<T, MathError> {
    same_len(p, q)?;
    let half = T::lit(0.5);
    let m = ProbVector(p.0.iter().zip(&q.0).map(|(&a, &b)| half * (a + b)).collect());
    Ok(half * kl_divergence(p, &m)? + half * kl_divergence(q, &m)?)
}

/// GAN value `E_data[ln D*] + E_G[ln(1 − D*)]` at the optimal discriminator
/// `D* = p_data / (p_data + p_G)` for discrete distributions.
pub fn optimal_gan_value<T: Scalar>(data: &ProbVector<T>, generated: &ProbVector<T>) -> Result<T, MathError> {
    same_len(data, generated)?;
    let mut v = T::zero();
    for (&pd, &pg) in data.0.iter().zip(&generated.0) {
        let total = pd + pg;
        if pd > T::zero() {
            v += pd * (pd / total).ln();
        }
        if pg > T::zero() {
            v += pg * (pg / total).ln();
        }
    }
    Ok(v)
}

/// Mean vector and covariance matrix of a feature distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats<T: Real> {
    pub mu: DVector<T>,
    pub sigma: DMatrix<T>,
}

impl<T: Real> GaussianStats<T> {
    pub fn new(mu: DVector<T>, sigma: DMatrix<T>) -> Result<Self, MathError> {
        check_symmetric_psd(&sigma)?;
        if mu.len() != sigma.nrows() {
            return Err(MathError::LengthMismatch {
                left: mu.len(),
                right: sigma.nrows(),
            });
        }
        Ok(Self { mu, sigma })
    }

    /// Sample mean and unbiased (`N − 1`) covariance of row-major samples.
    pub fn from_samples(rows: &[Vec<T>]) -> Result<Self, MathError> {
        let n = rows.len();
        let d = rows.first().map(Vec::len).ok_or(MathError::Empty)?;
        if n < 2 {
            return Err(MathError::Empty);
        }
        let mut mu = DVector::<T>::zeros(d);
        for r in rows {
            if r.len() != d {
                return Err(MathError::LengthMismatch { left: d, right: r.len() });
            }
            for (m, &v) in mu.iter_mut().zip(r) {
                *m += v;
            }
        }
        mu /= T::from_usize_lossy(n);
        let mut centered = DMatrix::<T>::zeros(n, d);
        for (i, r) in rows.iter().enumerate() {
            for j in 0..d {
                centered[(i, j)] = r[j] - mu[j];
            }
        }
        let mut sigma = centered.transpose() * &centered;
        sigma /= T::from_usize_lossy(n - 1);
        let sym = (&sigma + sigma.transpose()) * T::lit(0.5);
        Ok(Self { mu, sigma: sym })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn scale_of<T: Real>(a: &DMatrix<T>) -> f64 {
    a.iter().map(|v| Float::abs(v.to_f64_lossy())).fold(1.0, f64::max)
}

fn check_symmetric_psd<T: Real>(a: &DMatrix<T>) -> Result<(), MathError> {
    if a.nrows() != a.ncols() {
        return Err(MathError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let scale = scale_of(a);
    let mut max_asym = 0.0f64;
    for i in 0..a.nrows() {
        for j in i + 1..a.ncols() {
            max_asym = max_asym.max(Float::abs((a[(i, j)] - a[(j, i)]).to_f64_lossy()));
        }
    }
    if max_asym > NORM_TOL * scale {
        return Err(MathError::NotSymmetric {
            max_asymmetry: max_asym,
        });
    }
    Ok(())
}

/// Principal square root of a symmetric PSD matrix via symmetric
/// eigendecomposition; eigenvalues within `−1e-6·scale` of zero are clamped.
pub fn sqrtm_psd<T: Real>(a: &DMatrix<T>) -> Result<DMatrix<T>, MathError> {
    check_symmetric_psd(a)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(a.clone());
    }
    let sym = (a + a.transpose()) * T::lit(0.5);
    let eig = sym.symmetric_eigen();
    let scale = scale_of(a);
    let min_eig = eig
        .eigenvalues
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::INFINITY, f64::min);
    if min_eig < -NORM_TOL * scale {
        return Err(MathError::Indefinite {
            min_eigenvalue: min_eig,
        });
    }
    let roots = eig.eigenvalues.map(|v| Float::sqrt(Float::max(v, T::zero())));
    let v = &eig.eigenvectors;
    let scaled = v * DMatrix::from_diagonal(&roots);
    let s = scaled * v.transpose();
    Ok((&s + s.transpose()) * T::lit(0.5))
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with the product root taken
/// as `(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}` (equal trace, symmetric argument).
pub fn frechet_distance<T: Real>(s1: &GaussianStats<T>, s2: &GaussianStats<T>) -> Result<T, MathError> {
    if s1.dim() != s2.dim() {
        return Err(MathError::LengthMismatch {
            left: s1.dim(),
            right: s2.dim(),
        });
    }
    let diff = &s1.mu - &s2.mu;
    let mean_term = diff.dot(&diff);
    let root1 = sqrtm_psd(&s1.sigma)?;
    let inner = &root1 * &s2.sigma * &root1;
    let inner = (&inner + inner.transpose()) * T::lit(0.5);
    let cross = sqrtm_psd(&inner)?;
    let d = mean_term + s1.sigma.trace() + s2.sigma.trace() - cross.trace() * T::lit(2.0);
    let tol = NORM_TOL * scale_of(&s1.sigma).max(scale_of(&s2.sigma));
    let value = d.to_f64_lossy();
    if value < -tol {
        return Err(MathError::NegativeDistance { value });
    }
    Ok(Float::max(d, T::zero()))
}

/// One convolution layer's spatial geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayerSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    pub fn validate(&self) -> Result<(), MathError> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(MathError::InvalidLayer {
                kernel: self.kernel,
                stride: self.stride,
            });
        }
        Ok(())
    }
}

/// Receptive-field size and jump (effective output stride) of a layer stack.
pub fn receptive_field(layers: &[ConvLayerSpec]) -> Result<(usize, usize), MathError> {
    if layers.is_empty() {
        return Err(MathError::EmptyLayers);
    }
    let (mut size, mut jump) = (1usize, 1usize);
    for l in layers {
        l.validate()?;
        size += (l.kernel - 1) * jump;
        jump *= l.stride;
    }
    Ok((size, jump))
}

/// Input coordinate of the first pixel seen by output unit `unit` along one
/// axis. Negative values reach into the zero padding.
pub fn receptive_window_start(layers: &[ConvLayerSpec], unit: usize, valid_padding: bool) -> Result<isize, MathError> {
    let (_, jump) = receptive_field(layers)?;
    let mut offset = 0isize;
    let mut j = 1isize;
    for l in layers {
        if !valid_padding {
            offset -= l.padding as isize * j;
        }
        j *= l.stride as isize;
    }
    Ok(unit as isize * jump as isize + offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector<f64> {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&pv(&[0.25; 4])) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&pv(&[1.0, 0.0, 0.0])), 0.0);
        // 40-digit term-by-term summation
        assert!((entropy(&pv(&[0.7, 0.2, 0.1])) - 0.801_818_552_543_337_3).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&pv(&[0.3, 0.7]), &pv(&[0.3, 0.7])).unwrap(), 0.0);
        let v = kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = kl_divergence(&pv(&[0.2, 0.8]), &pv(&[0.6, 0.4])).unwrap();
        assert!((v - 0.334_795_286_714_334_3).abs() < 1e-12);
    }

    #[test]
    fn kl_support_mismatch_is_distinct() {
        let err = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap_err();
        assert_eq!(err, MathError::SupportMismatch { index: 1 });
        assert!(matches!(
            ProbVector::new(vec![0.5, 0.6]),
            Err(MathError::NotNormalized { .. })
        ));
        assert!(matches!(
            ProbVector::new(vec![1.5, -0.5]),
            Err(MathError::NegativeComponent { index: 1, .. })
        ));
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(js_divergence(&pv(&[0.3, 0.7]), &pv(&[0.3, 0.7])).unwrap(), 0.0);
        let v = js_divergence(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sqrtm_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((sqrtm_psd(&id).unwrap() - &id).norm() < 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = sqrtm_psd(&d).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-12 && (s[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(s[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn sqrtm_rejects_bad_input() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sqrtm_psd(&a), Err(MathError::NotSymmetric { .. })));
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(sqrtm_psd(&b), Err(MathError::Indefinite { .. })));
    }

    fn stats1(mu: f64, var: f64) -> GaussianStats<f64> {
        GaussianStats::new(DVector::from_vec(vec![mu]), DMatrix::from_row_slice(1, 1, &[var])).unwrap()
    }

    #[test]
    fn frechet_closed_forms() {
        let s = stats1(0.3, 2.0);
        assert_eq!(frechet_distance(&s, &s).unwrap(), 0.0);
        assert!((frechet_distance(&stats1(0.0, 1.0), &stats1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((frechet_distance(&stats1(0.5, 4.0), &stats1(0.5, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let two = GaussianStats::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            frechet_distance(&two, &s),
            Err(MathError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn receptive_field_examples() {
        let l = |k, s| ConvLayerSpec::new(k, s, 1);
        assert_eq!(receptive_field(&[l(3, 1)]).unwrap(), (3, 1));
        assert_eq!(receptive_field(&[l(1, 1)]).unwrap(), (1, 1));
        assert_eq!(receptive_field(&[l(3, 2), l(3, 2), l(3, 1)]).unwrap(), (15, 4));
        assert_eq!(receptive_field(&[]), Err(MathError::EmptyLayers));
        assert!(receptive_field(&[l(0, 1)]).is_err());
        assert_eq!(receptive_window_start(&[l(3, 2), l(3, 2), l(3, 1)], 2, false).unwrap(), 8 - 7);
        assert_eq!(receptive_window_start(&[l(3, 2), l(3, 2), l(3, 1)], 2, true).unwrap(), 8);
    }

    #[test]
    fn from_samples_unbiased() {
        let rows = vec![vec![1.0], vec![2.0], vec![3.0]];
        let s = GaussianStats::<f64>::from_samples(&rows).unwrap();
        assert!((s.mu[0] - 2.0).abs() < 1e-15);
        assert!((s.sigma[(0, 0)] - 1.0).abs() < 1e-15);
    }
}
