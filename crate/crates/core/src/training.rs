//! Alternating generator/discriminator optimisation, presets, the ablation
//! ladder, checkpoints and inference.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Container, NamedTensor};
use crate::data::{augment_sample, epoch_batches, Augmentation, Batch, ImageTensor, PairedSample, StructureMap};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_d, generator_terms, total_objective, ColorTarget, Critics, Direction, LossReport, LossWeights, Norm,
    NumCycles, Perceptual,
};
use crate::metrics::{evaluate_pairs, Metric, MetricReport};
use crate::networks::{
    round_f32, ConvStackExtractor, Discriminator, DiscriminatorConfig, FeatureExtractor, Generator, GeneratorConfig,
    ParamSet,
};
use crate::tensor::{no_grad, Gradients};

pub const CHECKPOINT_NAME: &str = "checkpoint.bin";
pub const LOG_NAME: &str = "train_log.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Gesture,
    #[default]
    Crossview,
    /// λ values taken from `weights` as given.
    Custom,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gesture" => Ok(Preset::Gesture),
            "crossview" => Ok(Preset::Crossview),
            "custom" => Ok(Preset::Custom),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected gesture, crossview or custom)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorMode {
    /// Structure-conditioned discriminator only.
    #[default]
    Structure,
    /// Image-conditioned discriminator only.
    Plain,
    /// Both.
    Dual,
}

/// Rows of the ablation ladder. `F14` is the full model with the colour L1
/// loss alone in place of colour L1 plus plain L1; `Custom` applies no
/// toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AblationRow {
    A,
    B,
    C,
    D,
    E11,
    E12,
    E13,
    E14,
    E15,
    E16,
    E21,
    E22,
    E3,
    E41,
    E42,
    #[default]
    F,
    F14,
    Custom,
}

impl AblationRow {
    pub const ALL: [AblationRow; 18] = [
        AblationRow::A,
        AblationRow::B,
        AblationRow::C,
        AblationRow::D,
        AblationRow::E11,
        AblationRow::E12,
        AblationRow::E13,
        AblationRow::E14,
        AblationRow::E15,
        AblationRow::E16,
        AblationRow::E21,
        AblationRow::E22,
        AblationRow::E3,
        AblationRow::E41,
        AblationRow::E42,
        AblationRow::F,
        AblationRow::F14,
        AblationRow::Custom,
    ];
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.to_ascii_uppercase();
        AblationRow::ALL
            .into_iter()
            .find(|r| format!("{r:?}").to_ascii_uppercase() == up)
            .ok_or_else(|| Error::Config(format!("unknown ablation row `{s}`")))
    }
}

/// Loss and discriminator switches of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub use_structure: bool,
    pub discriminators: DiscriminatorMode,
    pub cycle: bool,
    pub num_cycles: NumCycles,
    pub color_target: ColorTarget,
    pub color_norm: Norm,
    pub plain_pixel: Option<Norm>,
    pub self_content: bool,
    pub perceptual: bool,
    pub tv: bool,
}

/// Toggles for `row`; `A` (unpaired training) and `Custom` have none.
pub fn configure_ablation(row: AblationRow) -> Result<AblationToggles> {
    use AblationRow::*;
    let c = AblationToggles {
        use_structure: true,
        discriminators: DiscriminatorMode::Structure,
        cycle: false,
        num_cycles: NumCycles::One,
        color_target: ColorTarget::Off,
        color_norm: Norm::L1,
        plain_pixel: Some(Norm::L1),
        self_content: false,
        perceptual: false,
        tv: false,
    };
    let d = AblationToggles { cycle: true, ..c };
    let e16 = AblationToggles { color_target: ColorTarget::Generated, ..d };
    let f = AblationToggles {
        discriminators: DiscriminatorMode::Dual,
        num_cycles: NumCycles::Two,
        self_content: true,
        perceptual: true,
        tv: true,
        ..e16
    };
    Ok(match row {
        A => return Err(Error::Unsupported("ablation row A (unpaired training) is not supported".into())),
        Custom => return Err(Error::Unsupported("the custom row has no fixed toggles".into())),
        B => AblationToggles { use_structure: false, discriminators: DiscriminatorMode::Plain, ..c },
        C => c,
        D | E12 | E21 => d,
        E11 => AblationToggles { color_target: ColorTarget::Reconstruction, plain_pixel: None, ..d },
        E13 => AblationToggles { plain_pixel: Some(Norm::L2), ..d },
        E14 => AblationToggles { plain_pixel: None, ..e16 },
        E15 => AblationToggles { color_norm: Norm::L2, ..e16 },
        E16 => e16,
        E22 => AblationToggles { discriminators: DiscriminatorMode::Dual, ..d },
        E3 => AblationToggles { self_content: true, ..d },
        E41 => AblationToggles { perceptual: true, ..d },
        E42 => AblationToggles { perceptual: true, tv: true, ..d },
        F => f,
        F14 => AblationToggles { plain_pixel: None, ..f },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_res_blocks: usize,
    pub gen_base_channels: usize,
    pub disc_base_channels: usize,
    pub disc_downsamples: usize,
    pub structure_channels: usize,
    /// Used only by the `Custom` row; other rows set it.
    pub use_structure: bool,
    /// Used only by the `Custom` row; other rows set it.
    pub discriminators: DiscriminatorMode,
    pub perceptual_layer: Option<usize>,
    pub extractor_seed: u64,
    /// Feature-extractor weights file; the fixed-seed toy stack otherwise.
    pub extractor_path: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_res_blocks: 9,
            gen_base_channels: 64,
            disc_base_channels: 64,
            disc_downsamples: 3,
            structure_channels: 3,
            use_structure: true,
            discriminators: DiscriminatorMode::Structure,
            perceptual_layer: None,
            extractor_seed: 0,
            extractor_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub preset: Preset,
    pub ablation: AblationRow,
    /// λ values for the `Custom` preset and every switch for the `Custom`
    /// row; otherwise overridden.
    pub weights: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Crossview,
            ablation: AblationRow::F,
            weights: LossWeights::crossview(),
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 4,
            epochs: 20,
            max_steps: None,
            seed: 0,
            augmentation: Augmentation::default(),
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

/// Effective switches after applying the ablation row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub weights: LossWeights,
    pub use_structure: bool,
    pub discriminators: DiscriminatorMode,
}

impl TrainConfig {
    /// Small networks for desk-scale runs.
    pub fn toy(row: AblationRow, seed: u64) -> Self {
        Self {
            ablation: row,
            seed,
            model: ModelConfig {
                num_res_blocks: 2,
                gen_base_channels: 8,
                disc_base_channels: 8,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{n} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.weights.validate()?;
        let r = self.resolve()?;
        if !r.use_structure && r.discriminators != DiscriminatorMode::Plain {
            return Err(Error::Config("a structure discriminator needs a structure-conditioned generator".into()));
        }
        self.generator_config(&r).validate()?;
        Ok(())
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let mut w = match self.preset {
            Preset::Gesture => LossWeights::gesture(),
            Preset::Crossview => LossWeights::crossview(),
            Preset::Custom => self.weights,
        };
        if self.ablation == AblationRow::Custom {
            if self.preset != Preset::Custom {
                let custom = self.weights;
                w.color_norm = custom.color_norm;
                w.color_target = custom.color_target;
                w.plain_pixel = custom.plain_pixel;
                w.num_cycles = custom.num_cycles;
            }
            return Ok(Resolved {
                weights: w,
                use_structure: self.model.use_structure,
                discriminators: self.model.discriminators,
            });
        }
        let t = configure_ablation(self.ablation)?;
        if !t.cycle {
            w.lambda_cyc = 0.0;
        }
        if !t.self_content {
            w.lambda_con = 0.0;
        }
        if !t.perceptual {
            w.lambda_vgg = 0.0;
        }
        if !t.tv {
            w.lambda_tv = 0.0;
        }
        w.num_cycles = t.num_cycles;
        w.color_target = t.color_target;
        w.color_norm = t.color_norm;
        w.plain_pixel = t.plain_pixel;
        Ok(Resolved { weights: w, use_structure: t.use_structure, discriminators: t.discriminators })
    }

    fn generator_config(&self, r: &Resolved) -> GeneratorConfig {
        GeneratorConfig {
            num_res_blocks: self.model.num_res_blocks,
            base_channels: self.model.gen_base_channels,
            image_channels: 3,
            structure_channels: if r.use_structure { self.model.structure_channels } else { 0 },
        }
    }

    fn discriminator_config(&self, input_channels: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            input_channels,
            base_channels: self.model.disc_base_channels,
            num_downsamples: self.model.disc_downsamples,
        }
    }
}

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

/// Adam with bias correction. Moments and updated parameters are rounded to
/// `f32` so checkpoints hold them exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { lr, beta1, beta2, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let p = params.get(i);
            let Some(g) = grads.get(p) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.to_vec();
            for j in 0..data.len() {
                m[j] = round_f32(self.beta1 * m[j] + (1.0 - self.beta1) * g[j]);
                v[j] = round_f32(self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j]);
                let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                data[j] = round_f32(data[j] - update);
            }
            params.set_values(i, data)?;
        }
        Ok(())
    }

    fn to_named(&self, prefix: &str, params: &ParamSet) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, (name, t)) in params.names().iter().zip(params.tensors()).enumerate() {
            out.push(NamedTensor::from_f64(format!("{prefix}m.{name}"), t.shape(), &self.m[i]));
            out.push(NamedTensor::from_f64(format!("{prefix}v.{name}"), t.shape(), &self.v[i]));
        }
        out
    }

    fn load_named(&mut self, prefix: &str, params: &ParamSet, c: &Container) -> Result<()> {
        for (i, name) in params.names().iter().enumerate() {
            for (kind, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let t = c.require(&format!("{prefix}{kind}.{name}"))?;
                if t.data.len() != slot.len() {
                    return Err(Error::Checkpoint(format!("optimizer moment `{prefix}{kind}.{name}` has wrong size")));
                }
                *slot = t.to_f64();
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub d_struct: Option<Discriminator>,
    pub d_plain: Option<Discriminator>,
    pub adam_g: Adam,
    pub adam_struct: Option<Adam>,
    pub adam_plain: Option<Adam>,
    pub step: u64,
    extractor: Option<Box<dyn FeatureExtractor>>,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("config", &self.config)
            .field("step", &self.step)
            .field("generator_params", &self.generator.params().numel())
            .finish_non_exhaustive()
    }
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let r = config.resolve()?;
        let generator = Generator::new(config.generator_config(&r), config.seed)?;
        let sc = config.model.structure_channels;
        let d_struct = match r.discriminators {
            DiscriminatorMode::Structure | DiscriminatorMode::Dual => Some(Discriminator::new(
                config.discriminator_config(3 + sc + 3),
                config.seed.wrapping_add(1),
            )?),
            DiscriminatorMode::Plain => None,
        };
        let d_plain = match r.discriminators {
            DiscriminatorMode::Plain | DiscriminatorMode::Dual => {
                Some(Discriminator::new(config.discriminator_config(6), config.seed.wrapping_add(2))?)
            }
            DiscriminatorMode::Structure => None,
        };
        let adam = |p: &ParamSet| Adam::new(p, config.lr, config.beta1, config.beta2);
        let adam_g = adam(generator.params());
        let adam_struct = d_struct.as_ref().map(|d| adam(d.params()));
        let adam_plain = d_plain.as_ref().map(|d| adam(d.params()));
        let extractor: Option<Box<dyn FeatureExtractor>> = if r.weights.lambda_vgg > 0.0 {
            Some(match &config.model.extractor_path {
                Some(p) => Box::new(ConvStackExtractor::load(p)?),
                None => Box::new(ConvStackExtractor::toy(config.model.extractor_seed)),
            })
        } else {
            None
        };
        Ok(Self { config, generator, d_struct, d_plain, adam_g, adam_struct, adam_plain, step: 0, extractor })
    }

    pub fn resolved(&self) -> Resolved {
        self.config.resolve().expect("validated at construction")
    }

    fn perceptual(&self) -> Option<Perceptual<'_>> {
        self.extractor.as_deref().map(|e| Perceptual {
            extractor: e,
            layer: self.config.model.perceptual_layer.unwrap_or_else(|| e.default_layer()),
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "train_config": self.config,
            "step": self.step,
            "adam_t": [self.adam_g.t, self.adam_struct.as_ref().map_or(0, |a| a.t), self.adam_plain.as_ref().map_or(0, |a| a.t)],
        }));
        c.tensors.extend(self.generator.params().to_named("g."));
        c.tensors.extend(self.adam_g.to_named("adam.g.", self.generator.params()));
        if let (Some(d), Some(a)) = (&self.d_struct, &self.adam_struct) {
            c.tensors.extend(d.params().to_named("ds."));
            c.tensors.extend(a.to_named("adam.ds.", d.params()));
        }
        if let (Some(d), Some(a)) = (&self.d_plain, &self.adam_plain) {
            c.tensors.extend(d.params().to_named("dp."));
            c.tensors.extend(a.to_named("adam.dp.", d.params()));
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(c.config["train_config"].clone())
            .map_err(|e| Error::Checkpoint(format!("config record: {e}")))?;
        let step = c.config["step"].as_u64().ok_or_else(|| Error::Checkpoint("missing step".into()))?;
        let ts: Vec<u64> = serde_json::from_value(c.config["adam_t"].clone())
            .map_err(|e| Error::Checkpoint(format!("optimizer record: {e}")))?;
        if ts.len() != 3 {
            return Err(Error::Checkpoint("optimizer record needs three step counters".into()));
        }
        let mut s = Self::new(config)?;
        s.step = step;
        s.generator.params_mut().load_named("g.", &c.tensors)?;
        s.adam_g.load_named("adam.g.", s.generator.params(), c)?;
        s.adam_g.t = ts[0];
        if let (Some(d), Some(a)) = (&mut s.d_struct, &mut s.adam_struct) {
            d.params_mut().load_named("ds.", &c.tensors)?;
            a.load_named("adam.ds.", d.params(), c)?;
            a.t = ts[1];
        }
        if let (Some(d), Some(a)) = (&mut s.d_plain, &mut s.adam_plain) {
            d.params_mut().load_named("dp.", &c.tensors)?;
            a.load_named("adam.dp.", d.params(), c)?;
            a.t = ts[2];
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// `G(image, structure)` without recording a graph.
    pub fn generate(&self, image: &ImageTensor, structure: &StructureMap) -> Result<ImageTensor> {
        check_inference_inputs(&self.generator, image, structure)?;
        let _g = no_grad();
        let out = self.generator.forward(&image.to_tensor(), Some(&structure.to_tensor()))?;
        ImageTensor::from_tensor(&out)
    }
}

fn check_inference_inputs(g: &Generator, image: &ImageTensor, structure: &StructureMap) -> Result<()> {
    let sc = g.config().structure_channels;
    if sc > 0 && structure.channels() != sc {
        return Err(Error::Validation(format!(
            "checkpoint expects {sc}-channel structure maps, got {}",
            structure.channels()
        )));
    }
    if (image.height(), image.width()) != (structure.height(), structure.width())
        || image.batch() != structure.shape()[0]
    {
        return Err(Error::Validation(format!(
            "image {:?} and structure {:?} are not aligned",
            image.shape(),
            structure.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

/// One generator update with the discriminators frozen, then one update of
/// every discriminator on the (detached) images generated before the
/// generator moved.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let r = state.resolved();
    let w = r.weights;

    // generator phase
    let ds_frozen = state.d_struct.as_ref().map(|d| d.frozen());
    let dp_frozen = state.d_plain.as_ref().map(|d| d.frozen());
    let frozen = Critics {
        structure: ds_frozen.as_ref().map(|d| d as _),
        plain: dp_frozen.as_ref().map(|d| d as _),
    };
    let terms = generator_terms(&state.generator, &frozen, state.perceptual(), batch, &w)?;
    let parts = terms.parts(&batch.y)?;
    total_objective(&w, &parts)?;
    let grads = terms.total.backward()?;
    state.adam_g.step(state.generator.params_mut(), &grads)?;

    // discriminator phase
    let y_fake = terms.y_fake.detach();
    let x_fake = terms.x_fake.as_ref().map(|t| t.detach());
    let mut dirs = vec![Direction { source: &batch.x, target_structure: &batch.c_y, real: &batch.y, fake: &y_fake }];
    if let Some(xf) = &x_fake {
        dirs.push(Direction { source: &batch.y, target_structure: &batch.c_x, real: &batch.x, fake: xf });
    }
    let live = Critics {
        structure: state.d_struct.as_ref().map(|d| d as _),
        plain: state.d_plain.as_ref().map(|d| d as _),
    };
    let adv_d = adversarial_d(&live, &dirs)?;
    let report = total_objective(&w, &LossReport { adv_d: adv_d.item()?, ..parts })?;
    let grads = adv_d.backward()?;
    if let (Some(d), Some(a)) = (&mut state.d_struct, &mut state.adam_struct) {
        a.step(d.params_mut(), &grads)?;
    }
    if let (Some(d), Some(a)) = (&mut state.d_plain, &mut state.adam_plain) {
        a.step(d.params_mut(), &grads)?;
    }
    state.step += 1;
    Ok(report)
}

/// Batch for global step `step`: epochs follow each other, each a seeded
/// shuffle of the dataset.
pub fn batch_for_step(dataset: &[PairedSample], cfg: &TrainConfig, step: u64) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    let per_epoch = dataset.len().div_ceil(cfg.batch_size) as u64;
    let (epoch, idx) = (step / per_epoch, (step % per_epoch) as usize);
    let batches = epoch_batches(dataset.len(), cfg.batch_size, cfg.seed, epoch);
    let samples = batches[idx]
        .iter()
        .enumerate()
        .map(|(slot, &i)| augment_sample(&dataset[i], cfg.augmentation, cfg.seed, epoch, (idx * cfg.batch_size + slot) as u64))
        .collect::<Result<Vec<_>>>()?;
    Batch::collate(&samples.iter().collect::<Vec<_>>())
}

pub fn total_steps(dataset_len: usize, cfg: &TrainConfig) -> u64 {
    let per_epoch = dataset_len.div_ceil(cfg.batch_size) as u64;
    let full = per_epoch.saturating_mul(cfg.epochs as u64);
    cfg.max_steps.map_or(full, |m| m.min(full))
}

/// Where [`train`] writes its artefacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_NAME)
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join(LOG_NAME)
    }
}

fn log_header() -> String {
    let mut h = String::from("step");
    for f in LossReport::FIELDS {
        h.push(',');
        h.push_str(f);
    }
    h
}

fn log_row(step: u64, r: &LossReport) -> String {
    let mut s = step.to_string();
    for v in r.values() {
        s.push(',');
        s.push_str(&v.to_string());
    }
    s
}

/// Runs training from `state` until the configured epochs (or `max_steps`)
/// are exhausted. With an output directory every step is appended to the
/// CSV log and checkpoints are written every `checkpoint_every` steps and at
/// the end. A non-finite loss aborts with the offending report; the last
/// checkpoint on disk stays intact.
pub fn train(
    state: &mut TrainState,
    dataset: &[PairedSample],
    out: Option<&RunOutput>,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<Vec<LossReport>> {
    let end = total_steps(dataset.len(), &state.config);
    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir)?;
            let fresh = !o.log().exists();
            let mut f = OpenOptions::new().create(true).append(true).open(o.log())?;
            if fresh {
                writeln!(f, "{}", log_header())?;
            }
            Some(f)
        }
        None => None,
    };
    let mut reports = Vec::new();
    while state.step < end {
        let batch = batch_for_step(dataset, &state.config, state.step)?;
        let report = train_step(state, &batch)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", log_row(state.step, &report))?;
        }
        on_step(state.step, &report);
        reports.push(report);
        let every = state.config.checkpoint_every;
        if let Some(o) = out {
            if every > 0 && state.step % every == 0 && state.step < end {
                state.save(&o.checkpoint())?;
            }
        }
    }
    if let Some(o) = out {
        if let Some(f) = log.as_mut() {
            f.flush()?;
        }
        state.save(&o.checkpoint())?;
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

/// Loads only the generator of a checkpoint.
pub fn load_generator(path: &Path) -> Result<Generator> {
    let c = Container::load(path)?;
    let config: TrainConfig = serde_json::from_value(c.config["train_config"].clone())
        .map_err(|e| Error::Checkpoint(format!("config record: {e}")))?;
    let r = config.resolve()?;
    let mut g = Generator::new(config.generator_config(&r), config.seed)?;
    g.params_mut().load_named("g.", &c.tensors)?;
    Ok(g)
}

/// One output per structure, in order.
pub fn translate_with(g: &Generator, image: &ImageTensor, structures: &[StructureMap]) -> Result<Vec<ImageTensor>> {
    let _g = no_grad();
    let x = image.to_tensor();
    structures
        .iter()
        .map(|s| {
            check_inference_inputs(g, image, s)?;
            ImageTensor::from_tensor(&g.forward(&x, Some(&s.to_tensor()))?)
        })
        .collect()
}

pub fn translate(checkpoint: &Path, image: &ImageTensor, structures: &[StructureMap]) -> Result<Vec<ImageTensor>> {
    translate_with(&load_generator(checkpoint)?, image, structures)
}

/// `y' = G(x, C_y)` for every sample.
pub fn generate_targets(g: &Generator, samples: &[PairedSample]) -> Result<Vec<ImageTensor>> {
    samples
        .iter()
        .map(|s| translate_with(g, &s.x, std::slice::from_ref(&s.c_y)).map(|mut v| v.remove(0)))
        .collect()
}

/// Scores `G(x, C_y)` against `y` over `samples`.
pub fn evaluate_generator(
    g: &Generator,
    samples: &[PairedSample],
    extractor: &dyn FeatureExtractor,
    metrics: &[Metric],
    data_range: f64,
) -> Result<MetricReport> {
    let generated = generate_targets(g, samples)?;
    let real: Vec<ImageTensor> = samples.iter().map(|s| s.y.clone()).collect();
    evaluate_pairs(&real, &generated, extractor, metrics, data_range)
}
