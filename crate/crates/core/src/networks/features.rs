use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::round_f32;
use crate::checkpoint::{Container, NamedTensor};
use crate::error::{Error, Result};
use crate::tensor::{conv2d_output_size, Tensor};

/// Channel count and spatial extent of one tapped feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Deterministic image-to-feature map used by the perceptual loss and by
/// the distribution metrics.
pub trait FeatureExtractor {
    /// Valid tap ids, in network order.
    fn layer_ids(&self) -> Vec<usize>;

    /// Tap used when the caller does not pick one.
    fn default_layer(&self) -> usize;

    /// Feature dims produced at `layer` for an `h × w` input.
    fn dims(&self, layer: usize, height: usize, width: usize) -> Result<LayerDims>;

    /// Differentiable feature map `batch × channels × h × w` at `layer`.
    fn extract(&self, img: &Tensor, layer: usize) -> Result<Tensor>;

    /// One vector per batch element: every tap global-average-pooled and
    /// concatenated in layer order.
    fn embed(&self, img: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = img.dims4()?.0;
        let mut out = vec![Vec::new(); n];
        for layer in self.layer_ids() {
            let f = {
                let _g = crate::tensor::no_grad();
                self.extract(img, layer)?
            };
            let (_, c, h, w) = f.dims4()?;
            let hw = h * w;
            for (i, row) in out.iter_mut().enumerate() {
                for ch in 0..c {
                    let start = (i * c + ch) * hw;
                    row.push(f.data()[start..start + hw].iter().sum::<f64>() / hw as f64);
                }
            }
        }
        Ok(out)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if self.layer_ids().contains(&layer) {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown feature layer {layer}; valid: {:?}", self.layer_ids())))
        }
    }
}

/// Returns the image itself as the only tap (id 0).
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn layer_ids(&self) -> Vec<usize> {
        vec![0]
    }

    fn default_layer(&self) -> usize {
        0
    }

    fn dims(&self, layer: usize, height: usize, width: usize) -> Result<LayerDims> {
        self.check_layer(layer)?;
        Ok(LayerDims { channels: 3, height, width })
    }

    fn extract(&self, img: &Tensor, layer: usize) -> Result<Tensor> {
        self.check_layer(layer)?;
        Ok(img.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackRecord {
    kind: String,
    input_channels: usize,
    channels: Vec<usize>,
    default_layer: usize,
}

const STACK_KIND: &str = "conv_stack";

/// Stack of 3×3 stride-2 convolutions with `tanh`, one tap per stage.
/// [`ConvStackExtractor::random`] draws fixed-seed projections; [`load`]
/// reads weights produced elsewhere (for example exported from a trained
/// network) so the same code path serves both.
///
/// [`load`]: ConvStackExtractor::load
#[derive(Debug, Clone)]
pub struct ConvStackExtractor {
    record: StackRecord,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl ConvStackExtractor {
    pub const DEFAULT_CHANNELS: [usize; 3] = [8, 16, 32];

    /// Default toy extractor: channels 8/16/32, tap 1.
    pub fn toy(seed: u64) -> Self {
        Self::random(3, &Self::DEFAULT_CHANNELS, 1, seed).expect("default stack is valid")
    }

    pub fn random(input_channels: usize, channels: &[usize], default_layer: usize, seed: u64) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) || input_channels == 0 {
            return Err(Error::Config(format!("invalid conv stack channels {channels:?}")));
        }
        if default_layer >= channels.len() {
            return Err(Error::Config(format!("default layer {default_layer} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut cin = input_channels;
        for &cout in channels {
            let fan_in = (cin * 9) as f64;
            let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("positive std");
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| round_f32(normal.sample(&mut rng))).collect();
            weights.push(Tensor::from_vec(w, &[cout, cin, 3, 3])?);
            biases.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
        let record = StackRecord {
            kind: STACK_KIND.into(),
            input_channels,
            channels: channels.to_vec(),
            default_layer,
        };
        Ok(Self { record, weights, biases })
    }

    pub fn channels(&self) -> &[usize] {
        &self.record.channels
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.biases[layer]
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::to_value(&self.record).expect("record serializes"));
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            c.tensors.push(NamedTensor::from_f64(format!("stage{i}.weight"), w.shape(), w.data()));
            c.tensors.push(NamedTensor::from_f64(format!("stage{i}.bias"), b.shape(), b.data()));
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let record: StackRecord = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::Load(format!("feature extractor record: {e}")))?;
        if record.kind != STACK_KIND {
            return Err(Error::Load(format!("unsupported extractor kind `{}`", record.kind)));
        }
        if record.channels.is_empty() || record.default_layer >= record.channels.len() {
            return Err(Error::Load("feature extractor record has no valid layers".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut cin = record.input_channels;
        for (i, &cout) in record.channels.iter().enumerate() {
            let w = c.require(&format!("stage{i}.weight"))?;
            let b = c.require(&format!("stage{i}.bias"))?;
            if w.shape != [cout, cin, 3, 3] || b.shape != [cout] {
                return Err(Error::Load(format!(
                    "stage {i}: weight {:?} / bias {:?} do not match {cout}x{cin}x3x3",
                    w.shape, b.shape
                )));
            }
            weights.push(Tensor::from_vec(w.to_f64(), &w.shape)?);
            biases.push(Tensor::from_vec(b.to_f64(), &b.shape)?);
            cin = cout;
        }
        Ok(Self { record, weights, biases })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl FeatureExtractor for ConvStackExtractor {
    fn layer_ids(&self) -> Vec<usize> {
        (0..self.record.channels.len()).collect()
    }

    fn default_layer(&self) -> usize {
        self.record.default_layer
    }

    fn dims(&self, layer: usize, height: usize, width: usize) -> Result<LayerDims> {
        self.check_layer(layer)?;
        let (mut h, mut w) = (height, width);
        for _ in 0..=layer {
            h = conv2d_output_size(h, 3, 2, 1).ok_or_else(|| Error::Shape("input too small".into()))?;
            w = conv2d_output_size(w, 3, 2, 1).ok_or_else(|| Error::Shape("input too small".into()))?;
        }
        Ok(LayerDims { channels: self.record.channels[layer], height: h, width: w })
    }

    fn extract(&self, img: &Tensor, layer: usize) -> Result<Tensor> {
        self.check_layer(layer)?;
        let c = img.dims4()?.1;
        if c != self.record.input_channels {
            return Err(Error::Shape(format!(
                "extractor expects {} channels, got {c}",
                self.record.input_channels
            )));
        }
        let mut t = img.clone();
        for i in 0..=layer {
            t = t.conv2d(&self.weights[i], Some(&self.biases[i]), 2, 1)?.tanh();
        }
        Ok(t)
    }
}
