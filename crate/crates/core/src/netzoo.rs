//! Architectures for the four players (generator, patch discriminator,
//! teacher/student classifiers) and checkpoint persistence.
//!
//! Checkpoint layout (`.mkd`):
//!
//! ```text
//! "MKD1" | u32 LE manifest length | manifest (UTF-8 JSON)
//!        | tensor payloads, little-endian, in manifest order
//!        | u32 LE CRC-32 of the payload region
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use mosaic_nn::{conv_output_len, BatchNorm2d, Conv2d, Layer, Linear, NnError, Pass, Scalar, Sequential, Tensor};

use crate::datakit::Predictor;
use crate::mathcore::{receptive_field, ConvLayerSpec, ProbVector};

/// Std of the normal initializer for conv/linear weights; biases start at 0.
pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;
const MAGIC: &[u8; 4] = b"MKD1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("inconsistent spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint checksum mismatch: {0}")]
    Checksum(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("tensor `{name}`: checkpoint shape {found:?} does not match model shape {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("checkpoint dtype {found} cannot load into a {expected} model")]
    Dtype { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Noise → image. Linear projection to `base_grid²` cells, then one
/// (upsample 2×, conv 3×3) stage per extra entry of `channel_schedule`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub z_dim: usize,
    pub base_grid: usize,
    pub channel_schedule: Vec<usize>,
    pub output_resolution: (usize, usize),
    pub out_channels: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            z_dim: 100,
            base_grid: 8,
            channel_schedule: vec![64, 32, 16],
            output_resolution: (32, 32),
            out_channels: 3,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 || self.base_grid == 0 || self.out_channels == 0 || self.channel_schedule.is_empty() {
            return Err(NetError::Spec(format!("generator: {self:?}")));
        }
        if self.channel_schedule.contains(&0) {
            return Err(NetError::Spec("generator: zero-width stage".into()));
        }
        let grid = self.base_grid << (self.channel_schedule.len() - 1);
        if (grid, grid) != self.output_resolution {
            return Err(NetError::Spec(format!(
                "generator: base grid {} with {} upsampling stages gives {grid}x{grid}, not {:?}",
                self.base_grid,
                self.channel_schedule.len() - 1,
                self.output_resolution
            )));
        }
        Ok(())
    }
}

/// Fully convolutional discriminator. Each hidden conv is followed by
/// (optional) batch norm and LeakyReLU; the last conv has one output channel,
/// its score grid is subsampled by `final_stride` and squashed by a sigmoid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    /// Output widths of every conv except the last.
    pub hidden_channels: Vec<usize>,
    pub final_stride: usize,
    pub batch_norm: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            layers: vec![
                ConvLayerSpec::new(3, 2, 1),
                ConvLayerSpec::new(3, 2, 1),
                ConvLayerSpec::new(3, 1, 1),
            ],
            hidden_channels: vec![32, 64],
            final_stride: 1,
            batch_norm: true,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.hidden_channels.len() + 1 != self.layers.len() {
            return Err(NetError::Spec(format!(
                "discriminator: {} layers need {} hidden widths, got {}",
                self.layers.len(),
                self.layers.len().saturating_sub(1),
                self.hidden_channels.len()
            )));
        }
        if self.final_stride == 0 || self.in_channels == 0 || self.hidden_channels.contains(&0) {
            return Err(NetError::Spec(format!("discriminator: {self:?}")));
        }
        for l in &self.layers {
            l.validate().map_err(|e| NetError::Spec(e.to_string()))?;
        }
        Ok(())
    }

    /// Side length `L` of the square input region seen by one score unit.
    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.layers).map(|(size, _)| size).unwrap_or(0)
    }

    /// Score-grid size for an `h × w` input (after the final subsampling).
    pub fn score_grid(&self, h: usize, w: usize, valid_padding: bool) -> Option<(usize, usize)> {
        let (mut gh, mut gw) = (h, w);
        for l in &self.layers {
            let p = if valid_padding { 0 } else { l.padding };
            gh = conv_output_len(gh, l.kernel, l.stride, p)?;
            gw = conv_output_len(gw, l.kernel, l.stride, p)?;
        }
        Some((gh.div_ceil(self.final_stride), gw.div_ceil(self.final_stride)))
    }
}

/// Conv(3×3)–BN–ReLU stages followed by global average pooling and a linear
/// head. Penultimate features are the pooled activations. The default stacks
/// reach a 33-pixel receptive field so that pooled features can encode
/// image-level layout, not just local texture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub class_count: usize,
}

impl ClassifierSpec {
    pub fn teacher(class_count: usize) -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64, 64, 64],
            strides: vec![1, 2, 2, 2, 1],
            class_count,
        }
    }

    pub fn student(class_count: usize) -> Self {
        Self {
            in_channels: 3,
            widths: vec![8, 16, 32, 32, 32],
            strides: vec![1, 2, 2, 2, 1],
            class_count,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty()
            || self.widths.len() != self.strides.len()
            || self.class_count == 0
            || self.in_channels == 0
            || self.widths.contains(&0)
            || self.strides.contains(&0)
        {
            return Err(NetError::Spec(format!("classifier: {self:?}")));
        }
        Ok(())
    }

    /// Index of the pooling layer whose output is the feature vector.
    fn feature_layer(&self) -> usize {
        self.widths.len() * 3
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
    Classifier(ClassifierSpec),
}

/// A named network together with the spec that built it.
#[derive(Clone, Debug)]
pub struct ModelHandle<T> {
    pub name: String,
    pub arch: Architecture,
    pub net: Sequential<T>,
}

fn build_net<T: Scalar>(arch: &Architecture, seed: u64) -> Result<Sequential<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Layer<T>> = Vec::new();
    match arch {
        Architecture::Generator(g) => {
            g.validate()?;
            let c0 = g.channel_schedule[0];
            layers.push(Layer::Linear(Linear::new(g.z_dim, c0 * g.base_grid * g.base_grid, INIT_STD, &mut rng)?));
            layers.push(Layer::reshape(&[c0, g.base_grid, g.base_grid]));
            layers.push(Layer::BatchNorm2d(BatchNorm2d::new(c0)));
            layers.push(Layer::leaky_relu(LEAKY_SLOPE));
            for pair in g.channel_schedule.windows(2) {
                layers.push(Layer::upsample2x());
                layers.push(Layer::Conv2d(Conv2d::new(pair[0], pair[1], 3, 1, 1, INIT_STD, &mut rng)?));
                layers.push(Layer::BatchNorm2d(BatchNorm2d::new(pair[1])));
                layers.push(Layer::leaky_relu(LEAKY_SLOPE));
            }
            let last = *g.channel_schedule.last().expect("validated");
            layers.push(Layer::Conv2d(Conv2d::new(last, g.out_channels, 3, 1, 1, INIT_STD, &mut rng)?));
            layers.push(Layer::sigmoid());
        }
        Architecture::Discriminator(d) => {
            d.validate()?;
            let mut in_c = d.in_channels;
            for (i, l) in d.layers.iter().enumerate() {
                let out_c = d.hidden_channels.get(i).copied().unwrap_or(1);
                layers.push(Layer::Conv2d(Conv2d::new(in_c, out_c, l.kernel, l.stride, l.padding, INIT_STD, &mut rng)?));
                if i + 1 < d.layers.len() {
                    if d.batch_norm {
                        layers.push(Layer::BatchNorm2d(BatchNorm2d::new(out_c)));
                    }
                    layers.push(Layer::leaky_relu(LEAKY_SLOPE));
                }
                in_c = out_c;
            }
            layers.push(Layer::subsample(d.final_stride));
            layers.push(Layer::sigmoid());
        }
        Architecture::Classifier(c) => {
            c.validate()?;
            let mut in_c = c.in_channels;
            for (&w, &s) in c.widths.iter().zip(&c.strides) {
                layers.push(Layer::Conv2d(Conv2d::new(in_c, w, 3, s, 1, INIT_STD, &mut rng)?));
                layers.push(Layer::BatchNorm2d(BatchNorm2d::new(w)));
                layers.push(Layer::relu());
                in_c = w;
            }
            layers.push(Layer::global_avg_pool());
            layers.push(Layer::Linear(Linear::new(in_c, c.class_count, INIT_STD, &mut rng)?));
        }
    }
    Ok(Sequential::new(layers))
}

pub fn build_generator<T: Scalar>(spec: &GeneratorSpec, seed: u64) -> Result<ModelHandle<T>> {
    let arch = Architecture::Generator(spec.clone());
    Ok(ModelHandle {
        name: "generator".into(),
        net: build_net(&arch, seed)?,
        arch,
    })
}

pub fn build_patch_discriminator<T: Scalar>(spec: &DiscriminatorSpec, seed: u64) -> Result<ModelHandle<T>> {
    let arch = Architecture::Discriminator(spec.clone());
    Ok(ModelHandle {
        name: "discriminator".into(),
        net: build_net(&arch, seed)?,
        arch,
    })
}

pub fn build_classifier<T: Scalar>(spec: &ClassifierSpec, seed: u64) -> Result<ModelHandle<T>> {
    let arch = Architecture::Classifier(spec.clone());
    Ok(ModelHandle {
        name: "classifier".into(),
        net: build_net(&arch, seed)?,
        arch,
    })
}

impl<T: Scalar> ModelHandle<T> {
    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn forward(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        if let Architecture::Discriminator(d) = &self.arch {
            let (_, _, h, w) = x.dims4();
            if d.score_grid(h, w, pass.valid_padding).is_none() {
                return Err(NetError::Spec(format!(
                    "receptive field {} larger than {h}x{w} input",
                    d.receptive_field()
                )));
            }
        }
        Ok(self.net.forward(x, pass)?)
    }

    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.net.backward(grad)?)
    }

    /// Classifier logits and penultimate features.
    pub fn forward_with_features(&mut self, x: Tensor<T>, pass: Pass) -> Result<(Tensor<T>, Tensor<T>)> {
        let Architecture::Classifier(c) = &self.arch else {
            return Err(NetError::Spec(format!("{} is not a classifier", self.name)));
        };
        let idx = c.feature_layer();
        Ok(self.net.forward_capture(x, pass, idx)?)
    }

    /// Penultimate features only (no head evaluation).
    pub fn features(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let Architecture::Classifier(c) = &self.arch else {
            return Err(NetError::Spec(format!("{} is not a classifier", self.name)));
        };
        let upto = c.feature_layer() + 1;
        Ok(self.net.forward_prefix(x, Pass::EVAL, upto)?)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        match &self.arch {
            Architecture::Classifier(c) => Some(c.feature_dim()),
            _ => None,
        }
    }

    pub fn class_count(&self) -> Option<usize> {
        match &self.arch {
            Architecture::Classifier(c) => Some(c.class_count),
            _ => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// CRC-32 over every parameter and buffer, little-endian.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        for (name, p) in self.net.named_params() {
            h.update(name.as_bytes());
            buf.clear();
            p.value.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        for (name, b) in self.net.named_buffers() {
            h.update(name.as_bytes());
            buf.clear();
            b.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        h.finalize()
    }

    /// Eval-mode logits in batches.
    pub fn logits(&mut self, images: &Tensor<T>, batch_size: usize) -> Result<Tensor<T>> {
        let n = images.shape()[0];
        let bs = batch_size.max(1);
        let mut parts = Vec::new();
        for start in (0..n).step_by(bs) {
            let end = (start + bs).min(n);
            parts.push(self.forward(images.slice_items(start, end), Pass::EVAL)?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::concat_items(&refs)?)
    }
}

impl<T: Scalar> Predictor<T> for ModelHandle<T> {
    fn predict_probs(&mut self, images: &Tensor<T>) -> std::result::Result<Vec<ProbVector<T>>, String> {
        let logits = self.forward(images.clone(), Pass::EVAL).map_err(|e| e.to_string())?;
        let (_, k) = logits.dims2();
        Ok(logits.data().chunks(k).map(ProbVector::from_logits).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: String,
    pub arch: Architecture,
    pub step: u64,
    /// Free-form snapshot of the run configuration.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// What a checkpoint file held.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub payload_crc32: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn collect_tensors<T: Scalar>(m: &ModelHandle<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out: Vec<(String, &Tensor<T>)> = m.net.named_params().into_iter().map(|(n, p)| (n, &p.value)).collect();
    out.extend(m.net.named_buffers());
    out
}

pub fn save_checkpoint<T: Scalar>(m: &ModelHandle<T>, path: &Path, step: u64, config: serde_json::Value) -> Result<Checkpoint> {
    let tensors = collect_tensors(m);
    let manifest = CheckpointManifest {
        model: m.name.clone(),
        arch: m.arch.clone(),
        step,
        config,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                dtype: T::DTYPE.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(|e| NetError::Corrupt(e.to_string()))?;
    let mut payload = Vec::new();
    for (_, t) in &tensors {
        t.data().iter().for_each(|v| v.write_le(&mut payload));
    }
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(8 + manifest_bytes.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, out).map_err(io_err(path))?;
    Ok(Checkpoint {
        manifest,
        payload_crc32: crc,
    })
}

/// Parses and checksum-verifies a checkpoint file.
pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(Checkpoint, Vec<(String, Tensor<T>)>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(NetError::Corrupt("missing MKD1 magic".into()));
    }
    let mlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let manifest_end = 8usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| NetError::Checksum("file truncated inside the manifest".into()))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes[8..manifest_end]).map_err(|e| NetError::Corrupt(format!("manifest: {e}")))?;
    let mut expected_payload = 0usize;
    for t in &manifest.tensors {
        let width = match t.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(NetError::Corrupt(format!("unknown dtype {other}"))),
        };
        expected_payload += width * t.shape.iter().product::<usize>();
    }
    if bytes.len() != manifest_end + expected_payload + 4 {
        return Err(NetError::Checksum(format!(
            "expected {} payload+checksum bytes, file has {}",
            expected_payload + 4,
            bytes.len() - manifest_end
        )));
    }
    let payload = &bytes[manifest_end..manifest_end + expected_payload];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(NetError::Checksum(format!("stored {stored:08x}, computed {actual:08x}")));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut offset = 0;
    for t in &manifest.tensors {
        if t.dtype != T::DTYPE {
            return Err(NetError::Dtype {
                expected: T::DTYPE.into(),
                found: t.dtype.clone(),
            });
        }
        let n: usize = t.shape.iter().product();
        let data = payload[offset..offset + n * T::BYTES].chunks(T::BYTES).map(T::read_le).collect();
        offset += n * T::BYTES;
        tensors.push((t.name.clone(), Tensor::from_vec(&t.shape, data)?));
    }
    Ok((
        Checkpoint {
            manifest,
            payload_crc32: actual,
        },
        tensors,
    ))
}

/// Copies checkpoint tensors into an existing model; every model tensor must
/// be present with a matching shape.
pub fn load_checkpoint_into<T: Scalar>(m: &mut ModelHandle<T>, path: &Path) -> Result<Checkpoint> {
    let (ckpt, tensors) = read_checkpoint::<T>(path)?;
    let lookup = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let assign = |name: &str, dst: &mut Tensor<T>| -> Result<()> {
        let src = lookup(name).ok_or_else(|| NetError::MissingTensor(name.to_string()))?;
        if src.shape() != dst.shape() {
            return Err(NetError::TensorShape {
                name: name.to_string(),
                expected: dst.shape().to_vec(),
                found: src.shape().to_vec(),
            });
        }
        *dst = src.clone();
        Ok(())
    };
    // validate everything before mutating
    let mut staged = m.net.clone();
    for (name, p) in staged.named_params_mut() {
        assign(&name, &mut p.value)?;
    }
    for (name, b) in staged.named_buffers_mut() {
        assign(&name, b)?;
    }
    m.net = staged;
    Ok(ckpt)
}

/// Rebuilds a model from the architecture recorded in the checkpoint.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelHandle<T>, Checkpoint)> {
    let (ckpt, _) = read_checkpoint::<T>(path)?;
    let mut m = ModelHandle {
        name: ckpt.manifest.model.clone(),
        net: build_net(&ckpt.manifest.arch, 0)?,
        arch: ckpt.manifest.arch.clone(),
    };
    let ckpt = load_checkpoint_into(&mut m, path)?;
    Ok((m, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn generator_shape_and_range() {
        let spec = GeneratorSpec::default();
        let mut g = build_generator::<f32>(&spec, 1).unwrap();
        let z = Tensor::zeros(&[4, spec.z_dim]);
        let x = g.forward(z, Pass::TRAIN).unwrap();
        assert_eq!(x.shape(), &[4, 3, 32, 32]);
        assert!(x.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn generator_rejects_grid_mismatch() {
        let spec = GeneratorSpec {
            output_resolution: (28, 28),
            ..GeneratorSpec::default()
        };
        assert!(matches!(build_generator::<f32>(&spec, 0), Err(NetError::Spec(_))));
    }

    #[test]
    fn builders_are_deterministic() {
        let a = build_generator::<f32>(&GeneratorSpec::default(), 9).unwrap();
        let b = build_generator::<f32>(&GeneratorSpec::default(), 9).unwrap();
        let c = build_generator::<f32>(&GeneratorSpec::default(), 10).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn discriminator_score_grid_sizes() {
        let spec = DiscriminatorSpec::default();
        assert_eq!(spec.receptive_field(), 15);
        let mut d = build_patch_discriminator::<f32>(&spec, 0).unwrap();
        let s = d.forward(Tensor::full(&[2, 3, 32, 32], 0.5), Pass::TRAIN).unwrap();
        assert_eq!(s.shape(), &[2, 1, 8, 8]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let strided = DiscriminatorSpec {
            final_stride: 2,
            ..spec.clone()
        };
        let mut d2 = build_patch_discriminator::<f32>(&strided, 0).unwrap();
        let s2 = d2.forward(Tensor::full(&[1, 3, 32, 32], 0.5), Pass::EVAL).unwrap();
        assert_eq!(s2.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn discriminator_rejects_small_input_in_valid_mode() {
        let mut d = build_patch_discriminator::<f32>(&DiscriminatorSpec::default(), 0).unwrap();
        let err = d.forward(Tensor::full(&[1, 3, 8, 8], 0.5), Pass::EVAL.valid()).unwrap_err();
        assert!(matches!(err, NetError::Spec(_)));
    }

    #[test]
    fn classifier_logits_and_features() {
        let spec = ClassifierSpec::teacher(10);
        let mut c = build_classifier::<f32>(&spec, 0).unwrap();
        assert!(c.num_params() <= 200_000);
        let (logits, feats) = c.forward_with_features(Tensor::full(&[8, 3, 32, 32], 0.4), Pass::EVAL).unwrap();
        assert_eq!(logits.shape(), &[8, 10]);
        assert_eq!(feats.shape(), &[8, spec.feature_dim()]);
        let f2 = c.features(Tensor::full(&[8, 3, 32, 32], 0.4)).unwrap();
        assert_eq!(f2, feats);
        let probs = c.predict_probs(&Tensor::full(&[2, 3, 32, 32], 0.4)).unwrap();
        assert!(probs.iter().all(|p| ProbVector::new(p.as_slice().to_vec()).is_ok()));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mkd");
        let mut m = build_classifier::<f32>(&ClassifierSpec::student(10), 4).unwrap();
        // perturb running stats so buffers are non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_vec(&[4, 3, 32, 32], (0..4 * 3 * 32 * 32).map(|_| rng.random::<f32>()).collect()).unwrap();
        m.forward(x, Pass::TRAIN).unwrap();
        save_checkpoint(&m, &path, 17, serde_json::json!({"seed": 4})).unwrap();
        let (loaded, ckpt) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(ckpt.manifest.step, 17);
        assert_eq!(loaded.checksum(), m.checksum());
        for ((_, a), (_, b)) in loaded.net.named_params().iter().zip(m.net.named_params().iter()) {
            assert_eq!(a.value, b.value);
        }

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        let trunc = dir.path().join("t.mkd");
        fs::write(&trunc, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&trunc), Err(NetError::Checksum(_))));

        let mut flipped = fs::read(&path).unwrap();
        let i = flipped.len() - 20;
        flipped[i] ^= 0xff;
        fs::write(&trunc, &flipped).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&trunc), Err(NetError::Checksum(_))));

        let mut other = build_classifier::<f32>(&ClassifierSpec::teacher(10), 0).unwrap();
        match load_checkpoint_into(&mut other, &path) {
            Err(NetError::TensorShape { name, .. }) => assert_eq!(name, "0.conv.weight"),
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(matches!(load_checkpoint::<f64>(&path), Err(NetError::Dtype { .. })));
    }

    #[test]
    fn checkpoint_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.mkd");
        let g = build_generator::<f32>(&GeneratorSpec::default(), 0).unwrap();
        let ck = save_checkpoint(&g, &path, 0, serde_json::Value::Null).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MKD1");
        let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + mlen]).unwrap();
        assert_eq!(manifest["tensors"][0]["dtype"], "f32");
        let payload = &bytes[8 + mlen..bytes.len() - 4];
        let floats: usize = ck.manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        assert_eq!(payload.len(), floats * 4);
        assert_eq!(crc32fast::hash(payload).to_le_bytes(), bytes[bytes.len() - 4..]);
    }
}
