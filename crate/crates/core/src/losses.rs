//! Differentiable training objectives.
//!
//! Pixel losses reduce by mean over batch and pixels; the colour loss sums
//! its three per-channel means. Adversarial terms average log-probabilities
//! over patches.

use serde::{Deserialize, Serialize};

use crate::data::{split_channels, Batch};
use crate::error::{Error, Result};
use crate::networks::{Critic, FeatureExtractor, Translator};
use crate::tensor::Tensor;

/// Probability clamp inside every log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NumCycles {
    One,
    #[default]
    Two,
}

/// Which generated images the colour loss compares against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ColorTarget {
    Off,
    /// `y'` vs `y` (and `x'` vs `x` with two cycles).
    #[default]
    Generated,
    /// `x''` vs `x` (and `y''` vs `y` with two cycles).
    Reconstruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_color: f64,
    pub lambda_cyc: f64,
    pub lambda_con: f64,
    pub lambda_vgg: f64,
    pub lambda_tv: f64,
    pub color_norm: Norm,
    pub color_target: ColorTarget,
    /// Plain (all channels at once) pixel loss on the generated images,
    /// weighted by `lambda_color`. `None` disables it.
    pub plain_pixel: Option<Norm>,
    pub num_cycles: NumCycles,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::crossview()
    }
}

impl LossWeights {
    fn preset(lambda_cyc: f64, lambda_con: f64, lambda_vgg: f64, lambda_color: f64, lambda_tv: f64) -> Self {
        Self {
            lambda_color,
            lambda_cyc,
            lambda_con,
            lambda_vgg,
            lambda_tv,
            color_norm: Norm::L1,
            color_target: ColorTarget::Generated,
            plain_pixel: Some(Norm::L1),
            num_cycles: NumCycles::Two,
        }
    }

    pub fn gesture() -> Self {
        Self::preset(0.1, 0.01, 1000.0, 800.0, 1e-6)
    }

    pub fn crossview() -> Self {
        Self::preset(0.1, 100.0, 100.0, 100.0, 1e-6)
    }

    /// All λ zero: the generator sees the adversarial term only.
    pub fn adversarial_only() -> Self {
        Self { color_target: ColorTarget::Off, plain_pixel: None, ..Self::preset(0.0, 0.0, 0.0, 0.0, 0.0) }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.lambdas() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn lambdas(&self) -> [(&'static str, f64); 5] {
        [
            ("lambda_color", self.lambda_color),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_con", self.lambda_con),
            ("lambda_vgg", self.lambda_vgg),
            ("lambda_tv", self.lambda_tv),
        ]
    }

    fn color_active(&self) -> bool {
        self.color_target != ColorTarget::Off && self.lambda_color > 0.0
    }

    fn pixel_active(&self) -> bool {
        self.plain_pixel.is_some() && self.lambda_color > 0.0
    }
}

/// Unweighted loss values plus the weighted totals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_d: f64,
    pub color: f64,
    pub pixel: f64,
    pub cyc: f64,
    pub con: f64,
    pub vgg: f64,
    pub tv: f64,
    pub total_g: f64,
    pub total_d: f64,
    /// Mean |y' − y| on the batch; diagnostic only, not part of any total.
    pub l1_y: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 11] =
        ["adv_g", "adv_d", "color", "pixel", "cyc", "con", "vgg", "tv", "total_g", "total_d", "l1_y"];

    pub fn values(&self) -> [f64; 11] {
        [
            self.adv_g,
            self.adv_d,
            self.color,
            self.pixel,
            self.cyc,
            self.con,
            self.vgg,
            self.tv,
            self.total_g,
            self.total_d,
            self.l1_y,
        ]
    }

    pub fn max_abs_diff(&self, other: &LossReport) -> f64 {
        self.values().iter().zip(other.values()).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// Builds the report from raw terms: `total_g` is the weighted sum of
/// generator-side terms, `total_d` the discriminator objective.
pub fn total_objective(weights: &LossWeights, parts: &LossReport) -> Result<LossReport> {
    let mut r = LossReport { total_g: 0.0, total_d: 0.0, ..*parts };
    let raw = [
        ("adv_g", r.adv_g),
        ("adv_d", r.adv_d),
        ("color", r.color),
        ("pixel", r.pixel),
        ("cyc", r.cyc),
        ("con", r.con),
        ("vgg", r.vgg),
        ("tv", r.tv),
    ];
    if let Some((name, _)) = raw.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { term: name.to_string(), report: Box::new(r) });
    }
    r.total_g = r.adv_g
        + weights.lambda_color * (r.color + r.pixel)
        + weights.lambda_cyc * r.cyc
        + weights.lambda_con * r.con
        + weights.lambda_vgg * r.vgg
        + weights.lambda_tv * r.tv;
    r.total_d = r.adv_d;
    Ok(r)
}

// ---------------------------------------------------------------------------
// Elementary terms
// ---------------------------------------------------------------------------

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean |a − b| (L1) or mean (a − b)² (L2) over every element.
pub fn pixel_loss(a: &Tensor, b: &Tensor, norm: Norm) -> Result<Tensor> {
    check_same(a, b, "pixel loss")?;
    let d = a.sub(b)?;
    Ok(match norm {
        Norm::L1 => d.abs().mean(),
        Norm::L2 => d.sqr().mean(),
    })
}

fn color_term(fake: &Tensor, real: &Tensor, norm: Norm) -> Result<Tensor> {
    check_same(fake, real, "color loss")?;
    let f = split_channels(fake)?;
    let r = split_channels(real)?;
    let mut total = pixel_loss(&f[0], &r[0], norm)?;
    for c in 1..3 {
        total = total.add(&pixel_loss(&f[c], &r[c], norm)?)?;
    }
    Ok(total)
}

/// Per-channel colour loss: Σ_c mean‖y'_c − y_c‖ plus the same for
/// `(x', x)` when that direction is present.
pub fn color_loss(y_fake: &Tensor, y: &Tensor, x_pair: Option<(&Tensor, &Tensor)>, norm: Norm) -> Result<Tensor> {
    let mut total = color_term(y_fake, y, norm)?;
    if let Some((x_fake, x)) = x_pair {
        total = total.add(&color_term(x_fake, x, norm)?)?;
    }
    Ok(total)
}

/// Sum of absolute forward differences along width and height, summed over
/// channels and averaged over the batch.
pub fn tv_loss(img: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = img.dims4()?;
    let mut total = Tensor::scalar(0.0);
    if w > 1 {
        let dx = img.narrow(3, 1, w - 1)?.sub(&img.narrow(3, 0, w - 1)?)?;
        total = total.add(&dx.abs().sum())?;
    }
    if h > 1 {
        let dy = img.narrow(2, 1, h - 1)?.sub(&img.narrow(2, 0, h - 1)?)?;
        total = total.add(&dy.abs().sum())?;
    }
    Ok(total.mul_scalar(1.0 / n as f64))
}

fn perceptual_term(extractor: &dyn FeatureExtractor, layer: usize, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    check_same(real, fake, "perceptual loss")?;
    let fr = extractor.extract(real, layer)?;
    let ff = extractor.extract(fake, layer)?;
    let (n, _, h, w) = ff.dims4()?;
    Ok(fr.sub(&ff)?.abs().sum().mul_scalar(1.0 / (n * h * w) as f64))
}

/// Feature-space L1 at `layer`, normalised by the tapped map's spatial size
/// and averaged over the batch; `(x, x')` adds the second direction.
pub fn perceptual_loss(
    extractor: &dyn FeatureExtractor,
    layer: usize,
    y: &Tensor,
    y_fake: &Tensor,
    x_pair: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    let mut total = perceptual_term(extractor, layer, y, y_fake)?;
    if let Some((x, x_fake)) = x_pair {
        total = total.add(&perceptual_term(extractor, layer, x, x_fake)?)?;
    }
    Ok(total)
}

/// `‖x − G(G(x, C_y), C_x)‖₁` plus, with two cycles, the `y` counterpart.
pub fn cycle_loss(
    g: &dyn Translator,
    x: &Tensor,
    c_x: &Tensor,
    y: &Tensor,
    c_y: &Tensor,
    cycles: NumCycles,
) -> Result<Tensor> {
    let x_rec = g.translate(&g.translate(x, c_y)?, c_x)?;
    let mut total = pixel_loss(x, &x_rec, Norm::L1)?;
    if cycles == NumCycles::Two {
        let y_rec = g.translate(&g.translate(y, c_x)?, c_y)?;
        total = total.add(&pixel_loss(y, &y_rec, Norm::L1)?)?;
    }
    Ok(total)
}

/// `‖x − G(x, C_x)‖₁ + ‖y − G(y, C_y)‖₁`.
pub fn self_content_loss(g: &dyn Translator, x: &Tensor, c_x: &Tensor, y: &Tensor, c_y: &Tensor) -> Result<Tensor> {
    pixel_loss(x, &g.translate(x, c_x)?, Norm::L1)?.add(&pixel_loss(y, &g.translate(y, c_y)?, Norm::L1)?)
}

// ---------------------------------------------------------------------------
// Adversarial terms
// ---------------------------------------------------------------------------

/// The discriminators taking part in a step.
#[derive(Clone, Copy, Default)]
pub struct Critics<'a> {
    /// Sees `[image, target structure, candidate]`.
    pub structure: Option<&'a dyn Critic>,
    /// Sees `[image, candidate]`.
    pub plain: Option<&'a dyn Critic>,
}

/// One translation direction: source image, its target structure, the real
/// target and the generated candidate.
pub struct Direction<'a> {
    pub source: &'a Tensor,
    pub target_structure: &'a Tensor,
    pub real: &'a Tensor,
    pub fake: &'a Tensor,
}

fn clamped_log(p: &Tensor) -> Tensor {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

fn critic_inputs(critics: &Critics<'_>, dir: &Direction<'_>, candidate: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let mut out = Vec::new();
    if critics.structure.is_some() {
        out.push((0, Tensor::cat(&[dir.source, dir.target_structure, candidate], 1)?));
    }
    if critics.plain.is_some() {
        out.push((1, Tensor::cat(&[dir.source, candidate], 1)?));
    }
    Ok(out)
}

fn critic_of<'a>(critics: &Critics<'a>, idx: usize) -> &'a dyn Critic {
    if idx == 0 {
        critics.structure.expect("present")
    } else {
        critics.plain.expect("present")
    }
}

fn probs(critic: &dyn Critic, input: &Tensor) -> Result<Tensor> {
    let p = critic.critique(input)?.probs;
    if !p.all_finite() {
        return Err(Error::Numeric("discriminator produced non-finite probabilities".into()));
    }
    Ok(p)
}

/// Non-saturating generator term: −Σ mean log D(fake) over every active
/// discriminator and direction.
pub fn adversarial_g(critics: &Critics<'_>, dirs: &[Direction<'_>]) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for dir in dirs {
        for (idx, input) in critic_inputs(critics, dir, dir.fake)? {
            let p = probs(critic_of(critics, idx), &input)?;
            total = total.sub(&clamped_log(&p).mean())?;
        }
    }
    Ok(total)
}

/// Discriminator objective to minimise:
/// −½ Σ [mean log D(real) + mean log(1 − D(fake))].
pub fn adversarial_d(critics: &Critics<'_>, dirs: &[Direction<'_>]) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for dir in dirs {
        let reals = critic_inputs(critics, dir, dir.real)?;
        let fakes = critic_inputs(critics, dir, dir.fake)?;
        for ((idx, real_in), (_, fake_in)) in reals.into_iter().zip(fakes) {
            let critic = critic_of(critics, idx);
            let pr = probs(critic, &real_in)?;
            let pf = probs(critic, &fake_in)?;
            let term = clamped_log(&pr).mean().add(&clamped_log(&pf.neg().add_scalar(1.0)).mean())?;
            total = total.add(&term)?;
        }
    }
    Ok(total.mul_scalar(-0.5))
}

/// `(adv_g, adv_d)` for the given directions.
pub fn adversarial_terms(critics: &Critics<'_>, dirs: &[Direction<'_>]) -> Result<(Tensor, Tensor)> {
    Ok((adversarial_g(critics, dirs)?, adversarial_d(critics, dirs)?))
}

// ---------------------------------------------------------------------------
// Composed generator objective
// ---------------------------------------------------------------------------

/// Perceptual network and tap used by the objective.
#[derive(Clone, Copy)]
pub struct Perceptual<'a> {
    pub extractor: &'a dyn FeatureExtractor,
    pub layer: usize,
}

/// Generator-side terms of one step, as graph tensors, plus the generated
/// images for the discriminator phase.
pub struct GeneratorTerms {
    pub adv_g: Tensor,
    pub color: Tensor,
    pub pixel: Tensor,
    pub cyc: Tensor,
    pub con: Tensor,
    pub vgg: Tensor,
    pub tv: Tensor,
    pub total: Tensor,
    pub y_fake: Tensor,
    pub x_fake: Option<Tensor>,
}

impl GeneratorTerms {
    /// Unweighted values with `adv_d` left at zero.
    pub fn parts(&self, y: &Tensor) -> Result<LossReport> {
        let l1_y = {
            let _g = crate::tensor::no_grad();
            pixel_loss(&self.y_fake, y, Norm::L1)?.item()?
        };
        Ok(LossReport {
            adv_g: self.adv_g.item()?,
            color: self.color.item()?,
            pixel: self.pixel.item()?,
            cyc: self.cyc.item()?,
            con: self.con.item()?,
            vgg: self.vgg.item()?,
            tv: self.tv.item()?,
            l1_y,
            ..Default::default()
        })
    }
}

/// Evaluates every enabled generator term, sharing forward passes: `y' =
/// G(x, C_y)` and `x'' = G(y', C_x)` always (the latter only with the cycle
/// or reconstruction colour on), `x' = G(y, C_x)` and `y'' = G(x', C_y)`
/// with two cycles, and `G(x, C_x)`, `G(y, C_y)` with the self-content term.
/// Terms whose weight is zero are not computed and read as 0.
pub fn generator_terms(
    g: &dyn Translator,
    critics: &Critics<'_>,
    perceptual: Option<Perceptual<'_>>,
    batch: &Batch,
    w: &LossWeights,
) -> Result<GeneratorTerms> {
    let (x, c_x, y, c_y) = (&batch.x, &batch.c_x, &batch.y, &batch.c_y);
    let two = w.num_cycles == NumCycles::Two;
    let zero = || Tensor::scalar(0.0);
    let need_rec = w.lambda_cyc > 0.0 || (w.color_active() && w.color_target == ColorTarget::Reconstruction);

    let y_fake = g.translate(x, c_y)?;
    let x_rec = if need_rec { Some(g.translate(&y_fake, c_x)?) } else { None };
    let (x_fake, y_rec) = if two {
        let xf = g.translate(y, c_x)?;
        let yr = if need_rec { Some(g.translate(&xf, c_y)?) } else { None };
        (Some(xf), yr)
    } else {
        (None, None)
    };

    let mut dirs = vec![Direction { source: x, target_structure: c_y, real: y, fake: &y_fake }];
    if let Some(xf) = &x_fake {
        dirs.push(Direction { source: y, target_structure: c_x, real: x, fake: xf });
    }
    let adv_g = adversarial_g(critics, &dirs)?;

    let color = if w.color_active() {
        match w.color_target {
            ColorTarget::Generated => color_loss(&y_fake, y, x_fake.as_ref().map(|xf| (xf, x)), w.color_norm)?,
            ColorTarget::Reconstruction => {
                let xr = x_rec.as_ref().expect("computed when needed");
                color_loss(xr, x, y_rec.as_ref().map(|yr| (yr, y)), w.color_norm)?
            }
            ColorTarget::Off => unreachable!(),
        }
    } else {
        zero()
    };

    let pixel = match w.plain_pixel {
        Some(norm) if w.pixel_active() => {
            let mut t = pixel_loss(&y_fake, y, norm)?;
            if let Some(xf) = &x_fake {
                t = t.add(&pixel_loss(xf, x, norm)?)?;
            }
            t
        }
        _ => zero(),
    };

    let cyc = if w.lambda_cyc > 0.0 {
        let mut t = pixel_loss(x, x_rec.as_ref().expect("computed"), Norm::L1)?;
        if let Some(yr) = &y_rec {
            t = t.add(&pixel_loss(y, yr, Norm::L1)?)?;
        }
        t
    } else {
        zero()
    };

    let con = if w.lambda_con > 0.0 { self_content_loss(g, x, c_x, y, c_y)? } else { zero() };

    let vgg = match perceptual {
        Some(p) if w.lambda_vgg > 0.0 => {
            perceptual_loss(p.extractor, p.layer, y, &y_fake, x_fake.as_ref().map(|xf| (x, xf)))?
        }
        _ => zero(),
    };

    let tv = if w.lambda_tv > 0.0 {
        let mut t = tv_loss(&y_fake)?;
        if let Some(xf) = &x_fake {
            t = t.add(&tv_loss(xf)?)?;
        }
        t
    } else {
        zero()
    };

    let total = adv_g
        .add(&color.add(&pixel)?.mul_scalar(w.lambda_color))?
        .add(&cyc.mul_scalar(w.lambda_cyc))?
        .add(&con.mul_scalar(w.lambda_con))?
        .add(&vgg.mul_scalar(w.lambda_vgg))?
        .add(&tv.mul_scalar(w.lambda_tv))?;

    Ok(GeneratorTerms { adv_g, color, pixel, cyc, con, vgg, tv, total, y_fake, x_fake })
}
