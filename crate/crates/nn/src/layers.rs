//! Layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during a recorded forward
//! pass. `backward` consumes the cache, accumulates parameter gradients
//! (unless the owning network is frozen) and returns the gradient with respect
//! to the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normalization behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Per-forward options.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub mode: Mode,
    /// Forces zero padding in every convolution. Used to evaluate a fully
    /// convolutional network on exact patches.
    pub valid_padding: bool,
    /// Keep caches for a subsequent backward pass.
    pub record: bool,
    /// Let train-mode batch norm fold batch statistics into its running
    /// estimates.
    pub update_stats: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        mode: Mode::Train,
        valid_padding: false,
        record: true,
        update_stats: true,
    };
    pub const EVAL: Pass = Pass {
        mode: Mode::Eval,
        valid_padding: false,
        record: false,
        update_stats: false,
    };

    pub fn recording(self) -> Self {
        Self { record: true, ..self }
    }

    /// Batch statistics are used but running estimates stay untouched.
    pub fn without_stat_updates(self) -> Self {
        Self { update_stats: false, ..self }
    }

    pub fn valid(self) -> Self {
        Self {
            valid_padding: true,
            ..self
        }
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        Self::new(Tensor::from_vec(shape, data).expect("consistent shape"))
    }

    fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }
}

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<(Tensor<T>, usize)>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(NnError::Config(format!(
                "conv {in_channels}->{out_channels} k{kernel} s{stride}"
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::normal(&[out_channels, in_channels, kernel, kernel], init_std, rng),
            bias: Param::zeros(&[out_channels]),
            cache: None,
        })
    }

    fn geometry(&self, h: usize, w: usize, padding: usize) -> Result<(usize, usize)> {
        let oh = conv_output_len(h, self.kernel, self.stride, padding);
        let ow = conv_output_len(w, self.kernel, self.stride, padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(NnError::Shape(format!(
                "{h}x{w} input too small for kernel {} with padding {padding}",
                self.kernel
            ))),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn im2col(&self, img: &[T], h: usize, w: usize, oh: usize, ow: usize, pad: usize, cols: &mut [T]) {
        let k = self.kernel;
        let s = self.stride;
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ohw;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, pad: usize, img: &mut [T]) {
        let k = self.kernel;
        let s = self.stride;
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ohw;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        if c != self.in_channels {
            return Err(NnError::Shape(format!(
                "conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let pad = if pass.valid_padding { 0 } else { self.padding };
        let (oh, ow) = self.geometry(h, w, pad)?;
        let ckk = c * self.kernel * self.kernel;
        let ohw = oh * ow;
        let mut out = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        let mut cols = vec![T::zero(); ckk * ohw];
        let wdata = self.weight.value.data();
        let bdata = self.bias.value.data();
        for i in 0..n {
            self.im2col(&x.data()[i * c * h * w..(i + 1) * c * h * w], h, w, oh, ow, pad, &mut cols);
            let o = &mut out.data_mut()[i * self.out_channels * ohw..(i + 1) * self.out_channels * ohw];
            for (oc, chunk) in o.chunks_mut(ohw).enumerate() {
                chunk.fill(bdata[oc]);
            }
            T::gemm(
                self.out_channels,
                ckk,
                ohw,
                T::one(),
                wdata,
                (ckk as isize, 1),
                &cols,
                (ohw as isize, 1),
                T::one(),
                o,
                (ohw as isize, 1),
            );
        }
        self.cache = pass.record.then_some((x, pad));
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, params: bool) -> Result<Tensor<T>> {
        let (x, pad) = self.cache.take().ok_or(NnError::NoCache("conv2d"))?;
        let (n, c, h, w) = x.dims4();
        let (_, oc, oh, ow) = grad.dims4();
        let ckk = c * self.kernel * self.kernel;
        let ohw = oh * ow;
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); ckk * ohw];
        let mut dcols = vec![T::zero(); ckk * ohw];
        for i in 0..n {
            let g = &grad.data()[i * oc * ohw..(i + 1) * oc * ohw];
            if params {
                self.im2col(&x.data()[i * c * h * w..(i + 1) * c * h * w], h, w, oh, ow, pad, &mut cols);
                // dW += g · colsᵀ
                T::gemm(
                    oc,
                    ohw,
                    ckk,
                    T::one(),
                    g,
                    (ohw as isize, 1),
                    &cols,
                    (1, ohw as isize),
                    T::one(),
                    self.weight.grad.data_mut(),
                    (ckk as isize, 1),
                );
                for (b, row) in self.bias.grad.data_mut().iter_mut().zip(g.chunks(ohw)) {
                    *b += row.iter().copied().sum::<T>();
                }
            }
            // dcols = Wᵀ · g
            T::gemm(
                ckk,
                oc,
                ohw,
                T::one(),
                self.weight.value.data(),
                (1, ckk as isize),
                g,
                (ohw as isize, 1),
                T::zero(),
                &mut dcols,
                (ohw as isize, 1),
            );
            self.col2im(&dcols, h, w, oh, ow, pad, &mut dx.data_mut()[i * c * h * w..(i + 1) * c * h * w]);
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, init_std: f64, rng: &mut R) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(NnError::Config(format!("linear {in_features}->{out_features}")));
        }
        Ok(Self {
            in_features,
            out_features,
            weight: Param::normal(&[out_features, in_features], init_std, rng),
            bias: Param::zeros(&[out_features]),
            cache: None,
        })
    }

    fn forward(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let (n, f) = x.dims2();
        if f != self.in_features {
            return Err(NnError::Shape(format!(
                "linear expects {} features, got {f}",
                self.in_features
            )));
        }
        let o = self.out_features;
        let mut out = Tensor::zeros(&[n, o]);
        for row in out.data_mut().chunks_mut(o) {
            row.copy_from_slice(self.bias.value.data());
        }
        T::gemm(
            n,
            f,
            o,
            T::one(),
            x.data(),
            (f as isize, 1),
            self.weight.value.data(),
            (1, f as isize),
            T::one(),
            out.data_mut(),
            (o as isize, 1),
        );
        self.cache = pass.record.then_some(x);
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, params: bool) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or(NnError::NoCache("linear"))?;
        let (n, f) = x.dims2();
        let o = self.out_features;
        if params {
            // dW += gᵀ · x
            T::gemm(
                o,
                n,
                f,
                T::one(),
                grad.data(),
                (1, o as isize),
                x.data(),
                (f as isize, 1),
                T::one(),
                self.weight.grad.data_mut(),
                (f as isize, 1),
            );
            for row in grad.data().chunks(o) {
                for (b, &g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                    *b += g;
                }
            }
        }
        let mut dx = Tensor::zeros(&[n, f]);
        T::gemm(
            n,
            o,
            f,
            T::one(),
            grad.data(),
            (o as isize, 1),
            self.weight.value.data(),
            (f as isize, 1),
            T::zero(),
            dx.data_mut(),
            (f as isize, 1),
        );
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    // normalized input, per-channel inverse std, mode used
    cache: Option<(Tensor<T>, Vec<T>, Mode)>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn forward(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        if c != self.channels {
            return Err(NnError::Shape(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let eps = T::lit(self.eps);
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let (mean, var) = match pass.mode {
                Mode::Train => {
                    if m < 2 {
                        return Err(NnError::Shape("batchnorm in train mode needs more than one value per channel".into()));
                    }
                    let mut sum = T::zero();
                    for i in 0..n {
                        sum += x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let mean = sum / T::from_usize_lossy(m);
                    let mut sq = T::zero();
                    for i in 0..n {
                        for &v in &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            sq += (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / T::from_usize_lossy(m);
                    if pass.update_stats {
                        let mom = T::lit(self.momentum);
                        let unbiased = sq / T::from_usize_lossy(m - 1);
                        let rm = &mut self.running_mean.data_mut()[ch];
                        *rm = (T::one() - mom) * *rm + mom * mean;
                        let rv = &mut self.running_var.data_mut()[ch];
                        *rv = (T::one() - mom) * *rv + mom * unbiased;
                    }
                    (mean, var)
                }
                Mode::Eval => (self.running_mean.data()[ch], self.running_var.data()[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for (o, &v) in xhat.data_mut()[range.clone()].iter_mut().zip(&x.data()[range]) {
                    *o = (v - mean) * is;
                }
            }
        }
        let mut out = xhat.clone();
        for ch in 0..c {
            let g = self.gamma.value.data()[ch];
            let b = self.beta.value.data()[ch];
            for i in 0..n {
                for v in &mut out.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    *v = *v * g + b;
                }
            }
        }
        self.cache = pass.record.then_some((xhat, inv_std, pass.mode));
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, params: bool) -> Result<Tensor<T>> {
        let (xhat, inv_std, mode) = self.cache.take().ok_or(NnError::NoCache("batchnorm2d"))?;
        let (n, c, h, w) = grad.dims4();
        let hw = h * w;
        let m = T::from_usize_lossy(n * hw);
        let mut dx = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..n {
                let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for (&g, &xh) in grad.data()[range.clone()].iter().zip(&xhat.data()[range]) {
                    sum_g += g;
                    sum_gx += g * xh;
                }
            }
            if params {
                self.gamma.grad.data_mut()[ch] += sum_gx;
                self.beta.grad.data_mut()[ch] += sum_g;
            }
            let scale = self.gamma.value.data()[ch] * inv_std[ch];
            for i in 0..n {
                let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let gs = &grad.data()[range.clone()];
                let xs = &xhat.data()[range.clone()];
                for ((d, &g), &xh) in dx.data_mut()[range].iter_mut().zip(gs).zip(xs) {
                    *d = match mode {
                        Mode::Train => scale * (g - sum_g / m - xh * sum_gx / m),
                        Mode::Eval => scale * g,
                    };
                }
            }
        }
        Ok(dx)
    }
}

/// Every layer kind used by the model zoo.
#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    Linear(Linear<T>),
    BatchNorm2d(BatchNorm2d<T>),
    LeakyRelu { slope: f64, cache: Option<Tensor<T>> },
    Relu { cache: Option<Tensor<T>> },
    Sigmoid { cache: Option<Tensor<T>> },
    /// Nearest-neighbour 2× upsampling.
    Upsample2x { cache: Option<Vec<usize>> },
    /// Reshapes each batch item to `item_shape`.
    Reshape { item_shape: Vec<usize>, cache: Option<Vec<usize>> },
    GlobalAvgPool { cache: Option<Vec<usize>> },
    /// Keeps every `step`-th spatial unit, starting at 0.
    Subsample { step: usize, cache: Option<Vec<usize>> },
}

impl<T: Scalar> Layer<T> {
    pub fn leaky_relu(slope: f64) -> Self {
        Layer::LeakyRelu { slope, cache: None }
    }
    pub fn relu() -> Self {
        Layer::Relu { cache: None }
    }
    pub fn sigmoid() -> Self {
        Layer::Sigmoid { cache: None }
    }
    pub fn upsample2x() -> Self {
        Layer::Upsample2x { cache: None }
    }
    pub fn reshape(item_shape: &[usize]) -> Self {
        Layer::Reshape {
            item_shape: item_shape.to_vec(),
            cache: None,
        }
    }
    pub fn global_avg_pool() -> Self {
        Layer::GlobalAvgPool { cache: None }
    }
    pub fn subsample(step: usize) -> Self {
        Layer::Subsample { step, cache: None }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv",
            Layer::Linear(_) => "linear",
            Layer::BatchNorm2d(_) => "bn",
            Layer::LeakyRelu { .. } => "lrelu",
            Layer::Relu { .. } => "relu",
            Layer::Sigmoid { .. } => "sigmoid",
            Layer::Upsample2x { .. } => "upsample",
            Layer::Reshape { .. } => "reshape",
            Layer::GlobalAvgPool { .. } => "gap",
            Layer::Subsample { .. } => "subsample",
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.forward(x, pass),
            Layer::Linear(l) => l.forward(x, pass),
            Layer::BatchNorm2d(l) => l.forward(x, pass),
            Layer::LeakyRelu { slope, cache } => {
                let s = T::lit(*slope);
                let out = x.map(|v| if v > T::zero() { v } else { v * s });
                *cache = pass.record.then_some(x);
                Ok(out)
            }
            Layer::Relu { cache } => {
                let out = x.map(|v| v.max(T::zero()));
                *cache = pass.record.then_some(x);
                Ok(out)
            }
            Layer::Sigmoid { cache } => {
                let out = x.map(|v| T::one() / (T::one() + (-v).exp()));
                *cache = pass.record.then(|| out.clone());
                Ok(out)
            }
            Layer::Upsample2x { cache } => {
                let (n, c, h, w) = x.dims4();
                let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
                let od = out.data_mut();
                for p in 0..n * c {
                    let src = &x.data()[p * h * w..(p + 1) * h * w];
                    let dst = &mut od[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                        }
                    }
                }
                *cache = pass.record.then(|| x.shape().to_vec());
                Ok(out)
            }
            Layer::Reshape { item_shape, cache } => {
                let in_shape = x.shape().to_vec();
                let mut shape = vec![in_shape[0]];
                shape.extend_from_slice(item_shape);
                let out = x.reshape(&shape)?;
                *cache = pass.record.then_some(in_shape);
                Ok(out)
            }
            Layer::GlobalAvgPool { cache } => {
                let (n, c, h, w) = x.dims4();
                let hw = T::from_usize_lossy(h * w);
                let data = x
                    .data()
                    .chunks(h * w)
                    .map(|plane| plane.iter().copied().sum::<T>() / hw)
                    .collect();
                *cache = pass.record.then(|| x.shape().to_vec());
                Tensor::from_vec(&[n, c], data)
            }
            Layer::Subsample { step, cache } => {
                let s = *step;
                if s == 1 {
                    *cache = pass.record.then(|| x.shape().to_vec());
                    return Ok(x);
                }
                let (n, c, h, w) = x.dims4();
                let oh = h.div_ceil(s);
                let ow = w.div_ceil(s);
                let mut out = Tensor::zeros(&[n, c, oh, ow]);
                let od = out.data_mut();
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            od[(p * oh + y) * ow + xx] = x.data()[(p * h + y * s) * w + xx * s];
                        }
                    }
                }
                *cache = pass.record.then(|| x.shape().to_vec());
                Ok(out)
            }
        }
    }

    pub fn backward(&mut self, grad: Tensor<T>, params: bool) -> Result<Tensor<T>> {
        let kind = self.kind();
        match self {
            Layer::Conv2d(l) => l.backward(grad, params),
            Layer::Linear(l) => l.backward(grad, params),
            Layer::BatchNorm2d(l) => l.backward(grad, params),
            Layer::LeakyRelu { slope, cache } => {
                let x = cache.take().ok_or(NnError::NoCache(kind))?;
                let s = T::lit(*slope);
                let mut g = grad;
                for (d, &v) in g.data_mut().iter_mut().zip(x.data()) {
                    if v <= T::zero() {
                        *d *= s;
                    }
                }
                Ok(g)
            }
            Layer::Relu { cache } => {
                let x = cache.take().ok_or(NnError::NoCache(kind))?;
                let mut g = grad;
                for (d, &v) in g.data_mut().iter_mut().zip(x.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                Ok(g)
            }
            Layer::Sigmoid { cache } => {
                let y = cache.take().ok_or(NnError::NoCache(kind))?;
                let mut g = grad;
                for (d, &v) in g.data_mut().iter_mut().zip(y.data()) {
                    *d *= v * (T::one() - v);
                }
                Ok(g)
            }
            Layer::Upsample2x { cache } => {
                let shape = cache.take().ok_or(NnError::NoCache(kind))?;
                let (h, w) = (shape[2], shape[3]);
                let mut dx = Tensor::zeros(&shape);
                let dd = dx.data_mut();
                for p in 0..shape[0] * shape[1] {
                    let src = &grad.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dd[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                Ok(dx)
            }
            Layer::Reshape { cache, .. } => {
                let shape = cache.take().ok_or(NnError::NoCache(kind))?;
                grad.reshape(&shape)
            }
            Layer::GlobalAvgPool { cache } => {
                let shape = cache.take().ok_or(NnError::NoCache(kind))?;
                let hw = shape[2] * shape[3];
                let scale = T::one() / T::from_usize_lossy(hw);
                let mut dx = Tensor::zeros(&shape);
                for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad.data()) {
                    plane.fill(g * scale);
                }
                Ok(dx)
            }
            Layer::Subsample { step, cache } => {
                let shape = cache.take().ok_or(NnError::NoCache(kind))?;
                let s = *step;
                if s == 1 {
                    return Ok(grad);
                }
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
                let mut dx = Tensor::zeros(&shape);
                let dd = dx.data_mut();
                for p in 0..shape[0] * shape[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dd[(p * h + y * s) * w + xx * s] = grad.data()[(p * oh + y) * ow + xx];
                        }
                    }
                }
                Ok(dx)
            }
        }
    }

    /// Trainable parameters with stable local names.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::BatchNorm2d(l) => vec![("gamma", &mut l.gamma), ("beta", &mut l.beta)],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::BatchNorm2d(l) => vec![("gamma", &l.gamma), ("beta", &l.beta)],
            _ => Vec::new(),
        }
    }

    /// Non-trainable persistent state (normalization running statistics).
    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::BatchNorm2d(l) => vec![
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::BatchNorm2d(l) => vec![("running_mean", &l.running_mean), ("running_var", &l.running_var)],
            _ => Vec::new(),
        }
    }
}
