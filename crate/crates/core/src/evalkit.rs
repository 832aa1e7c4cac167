//! Accuracy and Fréchet-distance metrics over datasets, classes and patches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use mosaic_nn::{Pass, Scalar, Tensor};

use crate::datakit::{crop_patches, resize_images, CropMode, DataError, LabeledDataset};
use crate::mathcore::{argmax, frechet_distance, GaussianStats, MathError};
use crate::netzoo::{ModelHandle, NetError};

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 128;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset `{0}` has no labels")]
    Unlabeled(String),
    #[error("{side}: {have} samples, need at least {need} for a full-rank covariance of {dim}-d features")]
    InsufficientSamples {
        side: String,
        have: usize,
        need: usize,
        dim: usize,
    },
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("{0} is not a classifier")]
    NotClassifier(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Maps images to feature vectors for Fréchet distances.
#[derive(Clone, Debug)]
pub enum FeatureExtractor<T> {
    /// Flattened pixels; feature dimension is `C·H·W` of the input.
    RawPixels,
    /// Pooled penultimate activations of a frozen classifier. Inputs of a
    /// different size are bilinearly resized to `resolution` first.
    TeacherPenultimate {
        model: Box<ModelHandle<T>>,
        resolution: (usize, usize),
    },
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn teacher(model: &ModelHandle<T>, resolution: (usize, usize)) -> Result<Self> {
        if model.feature_dim().is_none() {
            return Err(EvalError::NotClassifier(model.name.clone()));
        }
        Ok(Self::TeacherPenultimate {
            model: Box::new(model.clone()),
            resolution,
        })
    }

    /// Logged next to every FID value.
    pub fn id(&self) -> &'static str {
        match self {
            Self::RawPixels => "raw-pixels",
            Self::TeacherPenultimate { .. } => "teacher-penultimate",
        }
    }

    /// Feature dimension for `c × h × w` inputs.
    pub fn feature_dim(&self, c: usize, h: usize, w: usize) -> usize {
        match self {
            Self::RawPixels => c * h * w,
            Self::TeacherPenultimate { model, .. } => model.feature_dim().unwrap_or(0),
        }
    }

    pub fn extract(&mut self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let n = images.shape()[0];
        match self {
            Self::RawPixels => Ok(images.data().chunks(images.item_len().max(1)).take(n).map(to_f64).collect()),
            Self::TeacherPenultimate { model, resolution } => {
                let mut out = Vec::with_capacity(n);
                for start in (0..n).step_by(EVAL_BATCH) {
                    let mut batch = images.slice_items(start, (start + EVAL_BATCH).min(n));
                    let (_, _, h, w) = batch.dims4();
                    if (h, w) != *resolution {
                        batch = resize_images(&batch, resolution.0, resolution.1);
                    }
                    let f = model.features(batch)?;
                    out.extend(f.data().chunks(f.item_len()).map(to_f64));
                }
                Ok(out)
            }
        }
    }
}

fn to_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    row.iter().map(|v| v.to_f64_lossy()).collect()
}

/// Predicted class per image (eval mode; ties go to the lowest index).
pub fn predict<T: Scalar>(model: &mut ModelHandle<T>, images: &Tensor<T>) -> Result<Vec<usize>> {
    let k = model.class_count().ok_or_else(|| EvalError::NotClassifier(model.name.clone()))?;
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_BATCH) {
        let logits = model.forward(images.slice_items(start, (start + EVAL_BATCH).min(n)), Pass::EVAL)?;
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

pub fn accuracy<T: Scalar>(model: &mut ModelHandle<T>, test: &LabeledDataset<T>) -> Result<f64> {
    let labels = test.labels.as_ref().ok_or_else(|| EvalError::Unlabeled(test.name.clone()))?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(model, &test.images)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Teacher-argmax counts per class; sums to the number of images.
pub fn class_histogram<T: Scalar>(teacher: &mut ModelHandle<T>, images: &Tensor<T>) -> Result<Vec<usize>> {
    let k = teacher.class_count().ok_or_else(|| EvalError::NotClassifier(teacher.name.clone()))?;
    let mut hist = vec![0; k];
    for p in predict(teacher, images)? {
        hist[p] += 1;
    }
    Ok(hist)
}

fn stats_of(features: &[Vec<f64>], side: &str) -> Result<GaussianStats<f64>> {
    let dim = features.first().map_or(0, Vec::len);
    if features.len() < dim + 1 || features.is_empty() {
        return Err(EvalError::InsufficientSamples {
            side: side.to_string(),
            have: features.len(),
            need: dim + 1,
            dim,
        });
    }
    Ok(GaussianStats::from_samples(features)?)
}

/// Fréchet distance between two feature populations; `names` label the
/// sides in rank-guard errors.
pub fn features_fid(a: &[Vec<f64>], b: &[Vec<f64>], names: (&str, &str)) -> Result<f64> {
    let sa = stats_of(a, names.0)?;
    let sb = stats_of(b, names.1)?;
    if sa.dim() != sb.dim() {
        return Err(EvalError::DimMismatch(sa.dim(), sb.dim()));
    }
    Ok(frechet_distance(&sa, &sb)?)
}

pub fn dataset_fid<T: Scalar>(a: &LabeledDataset<T>, b: &LabeledDataset<T>, fx: &mut FeatureExtractor<T>) -> Result<f64> {
    let fa = fx.extract(&a.images)?;
    let fb = fx.extract(&b.images)?;
    features_fid(&fa, &fb, (&a.name, &b.name))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ClassFid {
    Value { fid: f64, gen_count: usize, target_count: usize },
    /// Too few samples on at least one side for a covariance estimate.
    Absent { gen_count: usize, target_count: usize },
}

impl ClassFid {
    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Value { fid, .. } => Some(*fid),
            Self::Absent { .. } => None,
        }
    }
}

/// Class-wise FID: `gen` is grouped by teacher argmax, `target` by its
/// ground-truth labels.
pub fn per_class_fid<T: Scalar>(
    gen: &LabeledDataset<T>,
    target: &LabeledDataset<T>,
    teacher: &mut ModelHandle<T>,
    fx: &mut FeatureExtractor<T>,
) -> Result<BTreeMap<usize, ClassFid>> {
    let target_labels = target.labels.as_ref().ok_or_else(|| EvalError::Unlabeled(target.name.clone()))?;
    let k = teacher.class_count().ok_or_else(|| EvalError::NotClassifier(teacher.name.clone()))?;
    let gen_labels = predict(teacher, &gen.images)?;
    let fg = fx.extract(&gen.images)?;
    let ft = fx.extract(&target.images)?;
    let mut out = BTreeMap::new();
    for class in 0..k {
        let pick = |feats: &[Vec<f64>], labels: &[usize]| -> Vec<Vec<f64>> {
            feats.iter().zip(labels).filter(|(_, &l)| l == class).map(|(f, _)| f.clone()).collect()
        };
        let g = pick(&fg, &gen_labels);
        let t = pick(&ft, target_labels);
        let dim = fg.first().or(ft.first()).map_or(0, Vec::len);
        let entry = if g.len() <= dim || t.len() <= dim {
            ClassFid::Absent {
                gen_count: g.len(),
                target_count: t.len(),
            }
        } else {
            ClassFid::Value {
                fid: features_fid(&g, &t, ("generated", "target"))?,
                gen_count: g.len(),
                target_count: t.len(),
            }
        };
        out.insert(class, entry);
    }
    Ok(out)
}

/// Patches per side used by [`patch_fid`] when the aligned grid holds more.
pub const DEFAULT_PATCH_BUDGET: usize = 2048;

/// Crops every image of `images` on a non-overlapping `l × l` grid; keeps a
/// seeded random subset of at most `budget` patches.
pub fn patch_sample<T: Scalar>(images: &Tensor<T>, l: usize, budget: usize, seed: u64) -> Result<Tensor<T>> {
    let set = crop_patches(images, l, l, CropMode::Grid)?;
    if set.positions.len() <= budget {
        return Ok(set.patches);
    }
    Ok(crop_patches(images, l, 1, CropMode::Random { count: budget, seed })?.patches)
}

/// FID between `l × l` patch populations of two image sets.
pub fn patch_fid<T: Scalar>(
    a: &LabeledDataset<T>,
    b: &LabeledDataset<T>,
    l: usize,
    fx: &mut FeatureExtractor<T>,
    budget: usize,
) -> Result<f64> {
    let pa = patch_sample(&a.images, l, budget, 0xa)?;
    let pb = patch_sample(&b.images, l, budget, 0xb)?;
    let fa = fx.extract(&pa)?;
    let fb = fx.extract(&pb)?;
    features_fid(&fa, &fb, (&format!("{} patches (L={l})", a.name), &format!("{} patches (L={l})", b.name)))
}
