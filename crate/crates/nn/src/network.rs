use crate::error::{NnError, Result};
use crate::layers::{Layer, Param, Pass};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A feed-forward stack of layers.
///
/// A frozen network still propagates gradients to its input but never
/// accumulates parameter gradients.
#[derive(Clone, Debug)]
pub struct Sequential<T> {
    layers: Vec<Layer<T>>,
    frozen: bool,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers, frozen: false }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn forward(&mut self, x: Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        self.layers.iter_mut().try_fold(x, |acc, layer| layer.forward(acc, pass))
    }

    /// Forward pass that also returns a copy of the activation produced by
    /// layer `capture` (0-based).
    pub fn forward_capture(&mut self, x: Tensor<T>, pass: Pass, capture: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        if capture >= self.layers.len() {
            return Err(NnError::Config(format!(
                "capture index {capture} beyond {} layers",
                self.layers.len()
            )));
        }
        let mut acc = x;
        let mut captured = None;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            acc = layer.forward(acc, pass)?;
            if i == capture {
                captured = Some(acc.clone());
            }
        }
        Ok((acc, captured.expect("capture index checked")))
    }

    /// Forward through the first `upto` layers only.
    pub fn forward_prefix(&mut self, x: Tensor<T>, pass: Pass, upto: usize) -> Result<Tensor<T>> {
        let upto = upto.min(self.layers.len());
        self.layers[..upto]
            .iter_mut()
            .try_fold(x, |acc, layer| layer.forward(acc, pass))
    }

    /// Backpropagates `grad` (gradient w.r.t. the network output) and returns
    /// the gradient w.r.t. the network input.
    pub fn backward(&mut self, grad: Tensor<T>) -> Result<Tensor<T>> {
        let params = !self.frozen;
        self.layers
            .iter_mut()
            .rev()
            .try_fold(grad, |acc, layer| layer.backward(acc, params))
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for (_, p) in layer.params_mut() {
                p.grad.fill(T::zero());
            }
        }
    }

    /// Parameters in a fixed order, named `<layer index>.<kind>.<field>`.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let kind = layer.kind();
            for (field, p) in layer.params() {
                out.push((format!("{i}.{kind}.{field}"), p));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            for (field, p) in layer.params_mut() {
                out.push((format!("{i}.{kind}.{field}"), p));
            }
        }
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let kind = layer.kind();
            for (field, b) in layer.buffers() {
                out.push((format!("{i}.{kind}.{field}"), b));
            }
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let kind = layer.kind();
            for (field, b) in layer.buffers_mut() {
                out.push((format!("{i}.{kind}.{field}"), b));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.named_params()
            .into_iter()
            .flat_map(|(_, p)| p.value.data().to_vec())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<T> {
        self.named_params()
            .into_iter()
            .flat_map(|(_, p)| p.grad.data().to_vec())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(NnError::Shape(format!(
                "expected {total} parameters, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for (_, p) in self.named_params_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
