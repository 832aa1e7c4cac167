//! Datasets, OOD subset selection by teacher entropy, patch cropping, bilinear
//! resizing and a procedural pair of domains that share local textures but
//! not global layouts.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use mosaic_nn::{Scalar, Tensor};

use crate::imageio::{self, ImageError, PlanarImage};
use crate::mathcore::{entropy, ProbVector};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no images found under {0}")]
    NoImages(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{file}: shape {found:?} differs from {expected:?}")]
    ShapeMismatch {
        file: String,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("labels: {0}")]
    Labels(String),
    #[error("requested {k} samples from a dataset of {len}")]
    SubsetTooLarge { k: usize, len: usize },
    #[error("patch size {patch} exceeds image size {height}x{width}")]
    PatchTooLarge { patch: usize, height: usize, width: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("predictor failed: {0}")]
    Predictor(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Images (NCHW, values in [0, 1]) with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T> {
    pub name: String,
    pub images: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
    /// Human-readable class names; namespaced per domain.
    pub class_names: Vec<String>,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(name: impl Into<String>, images: Tensor<T>, labels: Option<Vec<usize>>, class_count: usize) -> Result<Self> {
        let name = name.into();
        if images.shape().len() != 4 {
            return Err(DataError::Invalid(format!("images must be NCHW, got {:?}", images.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(DataError::Labels(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.shape()[0]
                )));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= class_count) {
                return Err(DataError::Labels(format!("label {bad} outside [0, {class_count})")));
            }
        }
        let class_names = (0..class_count).map(|k| format!("{name}/{k}")).collect();
        Ok(Self {
            name,
            images,
            labels,
            class_count,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor<T> {
        self.images.select_items(indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            images: self.images.select_items(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
            class_names: self.class_names.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LabeledDataset<U> {
        LabeledDataset {
            name: self.name.clone(),
            images: self.images.cast(),
            labels: self.labels.clone(),
            class_count: self.class_count,
            class_names: self.class_names.clone(),
        }
    }
}

/// What to expect when loading a dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetDescriptor {
    pub name: String,
    pub class_count: usize,
    pub require_labels: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, label) = line
            .split_once(',')
            .ok_or_else(|| DataError::Labels(format!("line {}: expected `filename,label`", lineno + 1)))?;
        match label.trim().parse::<usize>() {
            Ok(y) => {
                map.insert(file.trim().to_string(), y);
            }
            Err(_) if lineno == 0 => {} // header
            Err(_) => {
                return Err(DataError::Labels(format!(
                    "line {}: label `{}` is not a nonnegative integer",
                    lineno + 1,
                    label.trim()
                )))
            }
        }
    }
    Ok(map)
}

/// Loads `<root>/images/*.png` (sorted by filename) and, when present,
/// `<root>/labels.csv` with rows `filename,label`.
pub fn load_dataset<T: Scalar>(root: &Path, desc: &DatasetDescriptor) -> Result<LabeledDataset<T>> {
    let dir = root.join("images");
    let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(&dir)(e)),
    };
    if files.is_empty() {
        return Err(DataError::NoImages(dir.display().to_string()));
    }
    files.sort();

    let labels_path = root.join("labels.csv");
    let label_map = if labels_path.exists() {
        Some(parse_labels(&labels_path)?)
    } else if desc.require_labels {
        return Err(DataError::Labels(format!("{} is missing", labels_path.display())));
    } else {
        None
    };

    let mut shape = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let img: PlanarImage = imageio::read_png(f)?;
        let dims = (img.channels, img.height, img.width);
        match shape {
            None => shape = Some(dims),
            Some(expected) if expected != dims => {
                return Err(DataError::ShapeMismatch {
                    file: f.display().to_string(),
                    expected,
                    found: dims,
                })
            }
            _ => {}
        }
        data.extend(img.data.iter().map(|&v| T::lit(f64::from(v))));
        if let Some(map) = &label_map {
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let y = map
                .get(name)
                .ok_or_else(|| DataError::Labels(format!("no label for {name}")))?;
            labels.push(*y);
        }
    }
    let (c, h, w) = shape.expect("at least one image");
    let images = Tensor::from_vec(&[files.len(), c, h, w], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    LabeledDataset::new(desc.name.clone(), images, label_map.map(|_| labels), desc.class_count)
}

/// Writes the dataset in the layout read by [`load_dataset`]. Pixel values
/// are quantized to 8 bits.
pub fn save_dataset<T: Scalar>(d: &LabeledDataset<T>, root: &Path) -> Result<()> {
    let dir = root.join("images");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let (c, h, w) = d.dims();
    let mut csv = String::from("filename,label\n");
    for i in 0..d.len() {
        let name = format!("{i:06}.png");
        let img = PlanarImage {
            channels: c,
            height: h,
            width: w,
            data: d.images.data()[i * c * h * w..(i + 1) * c * h * w]
                .iter()
                .map(|v| v.to_f64_lossy() as f32)
                .collect(),
        };
        imageio::write_png(&dir.join(&name), &img)?;
        if let Some(l) = &d.labels {
            csv.push_str(&format!("{name},{}\n", l[i]));
        }
    }
    if d.labels.is_some() {
        let p = root.join("labels.csv");
        fs::write(&p, csv).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Bilinear resampling with half-pixel centres (edge-clamped).
pub fn resize_images<T: Scalar>(images: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (n, c, h, w) = images.dims4();
    if (h, w) == (out_h, out_w) {
        return images.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, T::lit(src - lo as f64))
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let od = out.data_mut();
    for p in 0..n * c {
        let src = &images.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut od[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_dataset<T: Scalar>(d: &LabeledDataset<T>, target: (usize, usize)) -> Result<LabeledDataset<T>> {
    if target.0 == 0 || target.1 == 0 {
        return Err(DataError::Invalid(format!("resize target {target:?}")));
    }
    Ok(LabeledDataset {
        images: resize_images(&d.images, target.0, target.1),
        ..d.clone()
    })
}

/// Anything that maps an image batch to class probabilities.
pub trait Predictor<T> {
    fn predict_probs(&mut self, images: &Tensor<T>) -> std::result::Result<Vec<ProbVector<T>>, String>;
}

/// Indices of the `k` highest-entropy predictions, in descending entropy;
/// ties go to the lower original index.
pub fn top_entropy_indices<T: Scalar>(probs: &[ProbVector<T>], k: usize) -> Result<Vec<usize>> {
    if k > probs.len() {
        return Err(DataError::SubsetTooLarge { k, len: probs.len() });
    }
    let h: Vec<T> = probs.iter().map(entropy).collect();
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| h[b].partial_cmp(&h[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Keeps the `k` samples on which the teacher is least confident. Returns the
/// subset and the selected original indices.
pub fn select_ood_subset<T: Scalar, P: Predictor<T>>(
    d: &LabeledDataset<T>,
    teacher: &mut P,
    k: usize,
    batch_size: usize,
) -> Result<(LabeledDataset<T>, Vec<usize>)> {
    if k > d.len() {
        return Err(DataError::SubsetTooLarge { k, len: d.len() });
    }
    let mut probs = Vec::with_capacity(d.len());
    let bs = batch_size.max(1);
    for start in (0..d.len()).step_by(bs) {
        let end = (start + bs).min(d.len());
        let p = teacher
            .predict_probs(&d.images.slice_items(start, end))
            .map_err(DataError::Predictor)?;
        probs.extend(p);
    }
    let idx = top_entropy_indices(&probs, k)?;
    Ok((d.subset(&idx), idx))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// Every aligned crop at the given stride.
    Grid,
    /// `count` uniformly positioned crops.
    Random { count: usize, seed: u64 },
}

/// Square crops and where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T> {
    /// `M × C × L × L`.
    pub patches: Tensor<T>,
    /// `(image index, row, col)` of each patch's top-left pixel.
    pub positions: Vec<(usize, usize, usize)>,
    pub patch_size: usize,
}

pub fn crop_patches<T: Scalar>(batch: &Tensor<T>, patch_size: usize, grid_stride: usize, mode: CropMode) -> Result<PatchSet<T>> {
    let (n, c, h, w) = batch.dims4();
    let l = patch_size;
    if l == 0 || l > h || l > w {
        return Err(DataError::PatchTooLarge {
            patch: l,
            height: h,
            width: w,
        });
    }
    if grid_stride == 0 {
        return Err(DataError::Invalid("grid stride must be >= 1".into()));
    }
    let positions: Vec<(usize, usize, usize)> = match mode {
        CropMode::Grid => (0..n)
            .flat_map(|i| {
                (0..=h - l).step_by(grid_stride).flat_map(move |r| (0..=w - l).step_by(grid_stride).map(move |col| (i, r, col)))
            })
            .collect(),
        CropMode::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| (rng.random_range(0..n), rng.random_range(0..=h - l), rng.random_range(0..=w - l)))
                .collect()
        }
    };
    let mut data = Vec::with_capacity(positions.len() * c * l * l);
    for &(i, r, col) in &positions {
        for ch in 0..c {
            let plane = &batch.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for y in r..r + l {
                data.extend_from_slice(&plane[y * w + col..y * w + col + l]);
            }
        }
    }
    let patches = Tensor::from_vec(&[positions.len(), c, l, l], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(PatchSet {
        patches,
        positions,
        patch_size: l,
    })
}

/// Pastes patches back at their recorded positions onto a zero canvas.
pub fn reassemble<T: Scalar>(set: &PatchSet<T>, n: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    let l = set.patch_size;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let od = out.data_mut();
    for (m, &(i, r, col)) in set.positions.iter().enumerate() {
        for ch in 0..c {
            for y in 0..l {
                let src = &set.patches.data()[((m * c + ch) * l + y) * l..((m * c + ch) * l + y + 1) * l];
                let start = ((i * c + ch) * h + r + y) * w + col;
                od[start..start + l].copy_from_slice(src);
            }
        }
    }
    out
}

/// Colours shared by both synthetic domains.
pub const PALETTE: [[f32; 3]; 4] = [
    [0.86, 0.24, 0.20],
    [0.20, 0.38, 0.86],
    [0.92, 0.80, 0.22],
    [0.14, 0.14, 0.16],
];

/// Global layouts of the target domain.
pub const TARGET_LAYOUTS: [&str; 10] = [
    "disk", "square", "triangle", "plus", "cross", "ring", "hbar", "vbar", "diamond", "twin-dots",
];

/// Global layouts of the OOD domain.
pub const OOD_LAYOUTS: [&str; 10] = [
    "left-half",
    "top-half",
    "diagonal",
    "quadrants",
    "frame",
    "corner",
    "wide-bands",
    "anti-diagonal",
    "bottom-strip",
    "right-wedge",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Target,
    Ood,
}

/// A local texture: two palette colours and a 2-pixel-period pattern.
#[derive(Clone, Copy, Debug)]
struct Texture {
    a: usize,
    b: usize,
    pattern: u8,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, avoid: Option<usize>) -> Self {
        let pick = |rng: &mut ChaCha8Rng, avoid: Option<usize>| loop {
            let c = rng.random_range(0..PALETTE.len());
            if Some(c) != avoid {
                return c;
            }
        };
        let a = pick(rng, avoid);
        let b = loop {
            let c = pick(rng, avoid);
            if c != a {
                break c;
            }
        };
        Self {
            a,
            b,
            pattern: rng.random_range(0..3),
        }
    }

    fn color(&self, y: usize, x: usize) -> [f32; 3] {
        let use_b = match self.pattern {
            0 => false,
            1 => (y / 2) % 2 == 1,
            _ => ((y / 2) + (x / 2)) % 2 == 1,
        };
        PALETTE[if use_b { self.b } else { self.a }]
    }
}

struct Jitter {
    cx: f32,
    cy: f32,
    scale: f32,
    t: f32,
}

fn layout_mask(domain: Domain, class: usize, u: f32, v: f32, j: &Jitter) -> bool {
    // u, v in [-1, 1] (x right, y down)
    match domain {
        Domain::Target => {
            let (x, y) = ((u - j.cx) / j.scale, (v - j.cy) / j.scale);
            match class {
                0 => x * x + y * y < 0.36,
                1 => x.abs() < 0.5 && y.abs() < 0.5,
                2 => y < 0.45 && y > -0.55 && x.abs() < (y + 0.55) * 0.6,
                3 => (x.abs() < 0.16 && y.abs() < 0.65) || (y.abs() < 0.16 && x.abs() < 0.65),
                4 => ((x - y).abs() < 0.2 || (x + y).abs() < 0.2) && x.abs() < 0.55 && y.abs() < 0.55,
                5 => {
                    let r2 = x * x + y * y;
                    r2 < 0.42 && r2 > 0.14
                }
                6 => x.abs() < 0.7 && y.abs() < 0.18,
                7 => y.abs() < 0.7 && x.abs() < 0.18,
                8 => x.abs() + y.abs() < 0.6,
                _ => (x - 0.35).powi(2) + y * y < 0.08 || (x + 0.35).powi(2) + y * y < 0.08,
            }
        }
        Domain::Ood => {
            let t = j.t * 0.5;
            match class {
                0 => u < t,
                1 => v < t,
                2 => u + v < t,
                3 => (u < t) == (v < t),
                4 => u.abs() > 0.68 + 0.1 * t || v.abs() > 0.68 + 0.1 * t,
                5 => u < -0.2 + 0.2 * t && v < -0.2 + 0.2 * t,
                6 => ((v + 1.0 + t) * 1.25).floor() as i32 % 2 == 0,
                7 => u - v < t,
                8 => v > 0.5 + 0.2 * t,
                _ => u > 0.1 + 0.2 * t && v.abs() < (u - 0.1 - 0.2 * t) * 0.9,
            }
        }
    }
}

fn render<T: Scalar>(domain: Domain, class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng, out: &mut Vec<T>) {
    let bg = Texture::random(rng, None);
    // foreground avoids the background's base colour so the layout stays visible
    let fg = Texture::random(rng, Some(bg.a));
    let jitter = Jitter {
        cx: rng.random_range(-0.2..0.2),
        cy: rng.random_range(-0.2..0.2),
        scale: rng.random_range(0.75..1.05),
        t: rng.random_range(-1.0..1.0),
    };
    let mut img = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f32 + 0.5) / w as f32 * 2.0 - 1.0;
            let v = (y as f32 + 0.5) / h as f32 * 2.0 - 1.0;
            let tex = if layout_mask(domain, class, u, v, &jitter) { fg } else { bg };
            let col = tex.color(y, x);
            for c in 0..3 {
                let noise: f32 = rng.random_range(-0.04..0.04);
                img[(c * h + y) * w + x] = (col[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    out.extend(img.iter().map(|&v| T::lit(f64::from(v))));
}

/// Renders `n_per_class` labelled images of each of the first `classes`
/// layouts of `domain`, in class-interleaved order.
pub fn make_synthetic_domain<T: Scalar>(
    domain: Domain,
    seed: u64,
    classes: usize,
    n_per_class: usize,
    resolution: (usize, usize),
) -> Result<LabeledDataset<T>> {
    let (layouts, tag, stream) = match domain {
        Domain::Target => (&TARGET_LAYOUTS, "target", 1),
        Domain::Ood => (&OOD_LAYOUTS, "ood", 2),
    };
    if classes == 0 || classes > layouts.len() || n_per_class == 0 {
        return Err(DataError::Invalid(format!(
            "{tag}: {classes} classes x {n_per_class} (at most {} layouts)",
            layouts.len()
        )));
    }
    let (h, w) = resolution;
    if h < 4 || w < 4 {
        return Err(DataError::Invalid(format!("resolution {resolution:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * 3 * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        render(domain, class, h, w, &mut rng, &mut data);
        labels.push(class);
    }
    let images = Tensor::from_vec(&[n, 3, h, w], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut d = LabeledDataset::new(format!("synthetic-{tag}"), images, Some(labels), classes)?;
    d.class_names = layouts[..classes].iter().map(|l| format!("{tag}/{l}")).collect();
    Ok(d)
}

/// Target and OOD datasets drawn from one texture palette. Target classes and
/// OOD classes are disjoint sets of global layouts.
pub fn make_synthetic_domain_pair<T: Scalar>(
    seed: u64,
    k_target: usize,
    k_ood: usize,
    n_per_class: usize,
    resolution: (usize, usize),
) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    Ok((
        make_synthetic_domain(Domain::Target, seed, k_target, n_per_class, resolution)?,
        make_synthetic_domain(Domain::Ood, seed, k_ood, n_per_class, resolution)?,
    ))
}
