//! Generator, patch discriminators and perceptual feature extractors.

mod discriminator;
mod features;
mod generator;

pub use discriminator::{patch_grid_size, receptive_field, Critic, Discriminator, DiscriminatorConfig, PatchResponse};
pub use features::{ConvStackExtractor, FeatureExtractor, IdentityExtractor, LayerDims};
pub use generator::{Generator, GeneratorConfig, Translator};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Rounds to the nearest `f32`. Parameters and optimizer moments are kept
/// on the `f32` grid so that checkpoints store them exactly.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub(crate) fn push(&mut self, name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> usize {
        let t = Tensor::parameter(data, shape).expect("parameter shapes are built consistently");
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replaces the values of parameter `idx` with a fresh trainable leaf.
    pub fn set_values(&mut self, idx: usize, data: Vec<f64>) -> Result<()> {
        let shape = self.tensors[idx].shape().to_vec();
        self.tensors[idx] = Tensor::parameter(data, &shape)?;
        Ok(())
    }

    /// Copy whose tensors are cut from the graph (no gradients flow to them).
    pub fn frozen(&self) -> ParamSet {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.detach()).collect() }
    }

    pub fn to_named(&self, prefix: &str) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| NamedTensor::from_f64(format!("{prefix}{n}"), t.shape(), t.data()))
            .collect()
    }

    /// Loads every parameter from `tensors` by name; shapes must match.
    pub fn load_named(&mut self, prefix: &str, tensors: &[NamedTensor]) -> Result<()> {
        for i in 0..self.len() {
            let full = format!("{prefix}{}", self.names[i]);
            let t = tensors
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{full}` missing from checkpoint")))?;
            if t.shape != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{full}` has shape {:?}, network expects {:?}",
                    t.shape,
                    self.tensors[i].shape()
                )));
            }
            self.set_values(i, t.to_f64())?;
        }
        Ok(())
    }
}

/// Seeded Gaussian initialiser shared by all network builders.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    pub fn new(seed: u64, std: f64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), normal: Normal::new(0.0, std).expect("positive std") }
    }

    pub fn gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| round_f32(self.normal.sample(&mut self.rng))).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum ConvKind {
    Forward,
    Transpose { output_pad: usize },
}

/// A convolution whose weight and bias live in a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvLayer {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
    kind: ConvKind,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        kind: ConvKind,
    ) -> Self {
        let shape = match kind {
            ConvKind::Forward => [cout, cin, kernel, kernel],
            ConvKind::Transpose { .. } => [cin, cout, kernel, kernel],
        };
        let weight = params.push(format!("{name}.weight"), init.gaussian(shape.iter().product()), &shape);
        let bias = params.push(format!("{name}.bias"), vec![0.0; cout], &[cout]);
        Self { weight, bias, stride, pad, kind }
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let (w, b) = (params.get(self.weight), params.get(self.bias));
        match self.kind {
            ConvKind::Forward => x.conv2d(w, Some(b), self.stride, self.pad),
            ConvKind::Transpose { output_pad } => x.conv_transpose2d(w, Some(b), self.stride, self.pad, output_pad),
        }
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;
