use serde::{Deserialize, Serialize};

use super::{ConvKind, ConvLayer, Initializer, ParamSet, INIT_STD, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{conv2d_output_size, Tensor};

const KERNEL: usize = 4;
const PAD: usize = 1;
const LEAK: f64 = 0.2;
const MAX_MULT: usize = 8;

/// Per-patch real/fake probabilities, `batch × 1 × h' × w'`.
#[derive(Debug, Clone)]
pub struct PatchResponse {
    pub probs: Tensor,
}

impl PatchResponse {
    pub fn new(probs: Tensor) -> Result<Self> {
        let (_, c, _, _) = probs.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("patch response needs 1 channel, got {c}")));
        }
        Ok(Self { probs })
    }

    /// Arithmetic mean over all patches and batch elements.
    pub fn mean_score(&self) -> f64 {
        let d = self.probs.data();
        d.iter().sum::<f64>() / d.len() as f64
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.probs.shape();
        (s[2], s[3])
    }
}

/// Anything that scores a stacked `[condition, candidate]` input patch-wise.
pub trait Critic {
    fn critique(&self, input: &Tensor) -> Result<PatchResponse>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    pub num_downsamples: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { input_channels: 6, base_channels: 64, num_downsamples: 3 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_channels == 0 || self.num_downsamples == 0 {
            return Err(Error::Config(format!("invalid discriminator config {self:?}")));
        }
        Ok(())
    }
}

fn layer_strides(num_downsamples: usize) -> Vec<usize> {
    let mut s = vec![2; num_downsamples];
    s.extend([1, 1]);
    s
}

/// Side of the square input region seen by one output patch.
pub fn receptive_field(num_downsamples: usize) -> usize {
    layer_strides(num_downsamples)
        .iter()
        .rev()
        .fold(1, |rf, &s| (rf - 1) * s + KERNEL)
}

/// Patch grid extent for an input extent, or `None` if the input is too small.
pub fn patch_grid_size(input: usize, num_downsamples: usize) -> Option<usize> {
    layer_strides(num_downsamples)
        .iter()
        .try_fold(input, |size, &s| conv2d_output_size(size, KERNEL, s, PAD))
}

/// PatchGAN: stride-2 4×4 convs, a stride-1 conv, and a 1-channel stride-1
/// conv with sigmoid. LeakyReLU(0.2); instance norm on all but the first and
/// last layers.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
    layers: Vec<ConvLayer>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut init = Initializer::new(seed, INIT_STD);
        let strides = layer_strides(config.num_downsamples);
        let mut layers = Vec::with_capacity(strides.len());
        let mut cin = config.input_channels;
        for (i, &s) in strides.iter().enumerate() {
            let last = i + 1 == strides.len();
            let cout = if last { 1 } else { config.base_channels * (1 << i).min(MAX_MULT) };
            layers.push(ConvLayer::new(
                &mut params,
                &mut init,
                &format!("layer{i}"),
                cin,
                cout,
                KERNEL,
                s,
                PAD,
                ConvKind::Forward,
            ));
            cin = cout;
        }
        Ok(Self { config, params, layers })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn frozen(&self) -> Discriminator {
        Discriminator { params: self.params.frozen(), ..self.clone() }
    }

    pub fn forward(&self, input: &Tensor) -> Result<PatchResponse> {
        let (_, c, h, w) = input.dims4()?;
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        if patch_grid_size(h, self.config.num_downsamples).is_none()
            || patch_grid_size(w, self.config.num_downsamples).is_none()
        {
            return Err(Error::Shape(format!("input {h}x{w} too small for the patch discriminator")));
        }
        let n = self.layers.len();
        let mut t = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            t = layer.forward(&self.params, &t)?;
            if i + 1 == n {
                t = t.sigmoid();
            } else {
                if i > 0 {
                    t = t.instance_norm2d(NORM_EPS)?;
                }
                t = t.leaky_relu(LEAK);
            }
        }
        PatchResponse::new(t)
    }
}

impl Critic for Discriminator {
    fn critique(&self, input: &Tensor) -> Result<PatchResponse> {
        self.forward(input)
    }
}
