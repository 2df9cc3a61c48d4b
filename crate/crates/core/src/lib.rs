//! Structure-conditioned image-to-image translation.
//!
//! A single generator receives a conditional image together with a target
//! structure map (rendered skeleton, keypoints, semantic map) and produces the
//! image in that structure. Training pairs it with a structure-aware patch
//! discriminator, optionally a second plain one, and a weighted set of
//! reconstruction, cycle, content, perceptual and smoothness losses. The
//! [`metrics`] module carries the evaluation suite, including the per-pair
//! discrete Fréchet feature distance.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod tensor;
pub mod training;

pub use data::{ImageTensor, PairedSample, StructureKind, StructureMap, ToyDatasetSpec};
pub use error::{Error, Result};
pub use losses::{LossReport, LossWeights};
pub use metrics::{FeatureMatrix, GaussianStats};
pub use networks::{Discriminator, Generator, PatchResponse};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainState};
