//! Image and structure-map data model, paired dataset ingestion and the
//! deterministic toy shape dataset.
//!
//! On disk a dataset is `root/{train,test}/pairs.csv` plus lossless 8-bit RGB
//! PNG rasters. The manifest header is
//! `image_a,struct_a,image_b,struct_b,identity`; paths are relative to the
//! split directory. Pixels map affinely from `0..=255` onto `[-1, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "pairs.csv";
pub const TOY_SPEC_NAME: &str = "spec.json";
const MANIFEST_HEADER: [&str; 5] = ["image_a", "struct_a", "image_b", "struct_b", "identity"];

pub fn normalize_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn denormalize_to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn check_range(data: &[f64], what: &str) -> Result<()> {
    if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("{what} value {v} outside [-1, 1]")));
    }
    Ok(())
}

/// Batched RGB raster, `batch × 3 × height × width`, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(data: Vec<f64>, shape: [usize; 4]) -> Result<Self> {
        let [n, c, h, w] = shape;
        if c != 3 {
            return Err(Error::Validation(format!("image needs 3 channels, got {c}")));
        }
        if n == 0 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Validation(format!(
                "image height and width must be non-zero multiples of 4, got {h}x{w}"
            )));
        }
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!("{} values for image shape {shape:?}", data.len())));
        }
        check_range(&data, "image")?;
        Ok(Self { shape, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        Self::new(t.to_vec(), [n, c, h, w])
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::new(planar_from_rgb8(img), [1, 3, h, w])
    }

    /// Sample `index` of the batch as an 8-bit raster.
    pub fn to_rgb8(&self, index: usize) -> RgbImage {
        rgb8_from_planar(self.sample_slice(index), 3, self.height(), self.width())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &self.shape).expect("shape checked at construction")
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn sample_slice(&self, index: usize) -> &[f64] {
        let per = self.data.len() / self.batch();
        &self.data[index * per..(index + 1) * per]
    }

    /// One batch element as its own batch-1 image.
    pub fn sample(&self, index: usize) -> ImageTensor {
        let [_, c, h, w] = self.shape;
        ImageTensor { shape: [1, c, h, w], data: self.sample_slice(index).to_vec() }
    }

    pub fn stack(items: &[&ImageTensor]) -> Result<ImageTensor> {
        let (data, shape) = stack_raw(items.iter().map(|i| (i.shape, i.data.as_slice())))?;
        Ok(ImageTensor { shape, data })
    }

    pub fn flip_horizontal(&self) -> ImageTensor {
        ImageTensor { shape: self.shape, data: flip_planes(&self.data, self.width()) }
    }
}

/// Encoding of the controllable structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Keypoint,
    #[default]
    Skeleton,
    SemanticMap,
    ClassLabelBroadcast,
}

/// Batched structure raster, `batch × c_s × height × width`, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMap {
    kind: StructureKind,
    shape: [usize; 4],
    data: Vec<f64>,
}

impl StructureMap {
    pub fn new(data: Vec<f64>, shape: [usize; 4], kind: StructureKind) -> Result<Self> {
        let [n, c, h, w] = shape;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!("empty structure map shape {shape:?}")));
        }
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!("{} values for structure shape {shape:?}", data.len())));
        }
        check_range(&data, "structure")?;
        if kind == StructureKind::ClassLabelBroadcast {
            for plane in data.chunks(h * w) {
                if plane.iter().any(|v| *v != plane[0]) {
                    return Err(Error::Validation(
                        "class-label structure must be spatially constant per channel".into(),
                    ));
                }
            }
        }
        Ok(Self { kind, shape, data })
    }

    /// Broadcasts a label vector (one value per channel) over the plane.
    pub fn from_class_label(label: &[f64], height: usize, width: usize) -> Result<Self> {
        let data = label.iter().flat_map(|&v| std::iter::repeat_n(v, height * width)).collect();
        Self::new(data, [1, label.len(), height, width], StructureKind::ClassLabelBroadcast)
    }

    /// Reads a rendered structure raster. With one channel the RGB values are
    /// averaged; with three they are kept as-is.
    pub fn from_rgb8(img: &RgbImage, channels: usize, kind: StructureKind) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let rgb = planar_from_rgb8(img);
        let data = match channels {
            3 => rgb,
            1 => (0..h * w)
                .map(|i| (rgb[i] + rgb[h * w + i] + rgb[2 * h * w + i]) / 3.0)
                .collect(),
            c => {
                return Err(Error::Config(format!(
                    "structure rasters load as 1 or 3 channels, {c} requested"
                )))
            }
        };
        Self::new(data, [1, channels, h, w], kind)
    }

    pub fn to_rgb8(&self, index: usize) -> RgbImage {
        let [_, c, h, w] = self.shape;
        let per = c * h * w;
        rgb8_from_planar(&self.data[index * per..(index + 1) * per], c, h, w)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &self.shape).expect("shape checked at construction")
    }

    pub fn kind(&self) -> StructureKind {
        self.kind
    }
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn stack(items: &[&StructureMap]) -> Result<StructureMap> {
        let kind = items.first().map(|s| s.kind).unwrap_or_default();
        let (data, shape) = stack_raw(items.iter().map(|i| (i.shape, i.data.as_slice())))?;
        Ok(StructureMap { kind, shape, data })
    }

    pub fn flip_horizontal(&self) -> StructureMap {
        StructureMap { kind: self.kind, shape: self.shape, data: flip_planes(&self.data, self.width()) }
    }
}

fn planar_from_rgb8(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = normalize_u8(px[c]);
        }
    }
    data
}

/// Channels beyond the third are dropped; a single channel is replicated.
fn rgb8_from_planar(data: &[f64], channels: usize, h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let ch = |c: usize| denormalize_to_u8(data[c.min(channels - 1) * h * w + i]);
        Rgb([ch(0), ch(1), ch(2)])
    })
}

fn stack_raw<'a>(items: impl Iterator<Item = ([usize; 4], &'a [f64])>) -> Result<(Vec<f64>, [usize; 4])> {
    let mut shape: Option<[usize; 4]> = None;
    let mut data = Vec::new();
    for (s, d) in items {
        match shape.as_mut() {
            None => shape = Some(s),
            Some(acc) => {
                if acc[1..] != s[1..] {
                    return Err(Error::Shape(format!("cannot stack {:?} with {:?}", acc, s)));
                }
                acc[0] += s[0];
            }
        }
        data.extend_from_slice(d);
    }
    let shape = shape.ok_or_else(|| Error::Shape("stack of zero items".into()))?;
    Ok((data, shape))
}

fn flip_planes(data: &[f64], width: usize) -> Vec<f64> {
    data.chunks(width).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Splits a `b × 3 × h × w` tensor into its r, g and b planes.
pub fn split_channels(img: &Tensor) -> Result<[Tensor; 3]> {
    let (_, c, _, _) = img.dims4()?;
    if c != 3 {
        return Err(Error::Validation(format!("split_channels needs 3 channels, got {c}")));
    }
    Ok([img.narrow(1, 0, 1)?, img.narrow(1, 1, 1)?, img.narrow(1, 2, 1)?])
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    Tensor::cat(parts, 1)
}

/// A conditional image and a target image of the same identity, each with
/// its structure map.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub x: ImageTensor,
    pub c_x: StructureMap,
    pub y: ImageTensor,
    pub c_y: StructureMap,
    pub identity_tag: String,
}

impl PairedSample {
    pub fn new(
        x: ImageTensor,
        c_x: StructureMap,
        y: ImageTensor,
        c_y: StructureMap,
        identity_tag: impl Into<String>,
    ) -> Result<Self> {
        for (img, s, name) in [(&x, &c_x, "x"), (&y, &c_y, "y")] {
            if img.batch() != 1 || s.shape()[0] != 1 {
                return Err(Error::Validation(format!("sample {name} must have batch 1")));
            }
            if (img.height(), img.width()) != (s.height(), s.width()) {
                return Err(Error::Validation(format!(
                    "structure for {name} is {}x{}, image is {}x{}",
                    s.height(),
                    s.width(),
                    img.height(),
                    img.width()
                )));
            }
        }
        if x.shape() != y.shape() {
            return Err(Error::Validation(format!(
                "paired images differ in shape: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        if c_x.channels() != c_y.channels() {
            return Err(Error::Validation("paired structures differ in channel count".into()));
        }
        Ok(Self { x, c_x, y, c_y, identity_tag: identity_tag.into() })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.x.height(), self.x.width())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train|test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub structure_channels: usize,
    pub structure_kind: StructureKind,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { structure_channels: 3, structure_kind: StructureKind::Skeleton }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRow {
    image_a: String,
    struct_a: String,
    image_b: String,
    struct_b: String,
    identity: String,
}

fn read_raster(dir: &Path, rel: &str, row: usize) -> Result<RgbImage> {
    let path = dir.join(rel);
    if !path.is_file() {
        return Err(Error::Load(format!("row {row}: file `{}` not found", path.display())));
    }
    let img = image::open(&path)
        .map_err(|e| Error::Load(format!("row {row}: cannot decode `{}`: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

/// Loads `root/<split>/pairs.csv` and the rasters it names, in manifest order.
/// Rows are numbered from 1, not counting the header.
pub fn load_paired_dataset(root: &Path, split: Split, opts: LoadOptions) -> Result<Vec<PairedSample>> {
    let dir = root.join(split.dir_name());
    let manifest = dir.join(MANIFEST_NAME);
    let mut reader = csv::Reader::from_path(&manifest)
        .map_err(|e| Error::Load(format!("cannot open manifest `{}`: {e}", manifest.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Load(format!("manifest `{}`: {e}", manifest.display())))?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Load(format!(
            "manifest `{}` header must be `{}`",
            manifest.display(),
            MANIFEST_HEADER.join(",")
        )));
    }
    let mut samples = Vec::new();
    for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Load(format!("row {row}: {e}")))?;
        let load_img = |rel: &str| -> Result<ImageTensor> {
            ImageTensor::from_rgb8(&read_raster(&dir, rel, row)?)
                .map_err(|e| Error::Validation(format!("row {row}: {e}")))
        };
        let load_struct = |rel: &str| -> Result<StructureMap> {
            StructureMap::from_rgb8(&read_raster(&dir, rel, row)?, opts.structure_channels, opts.structure_kind)
        };
        let sample = PairedSample::new(
            load_img(&rec.image_a)?,
            load_struct(&rec.struct_a)?,
            load_img(&rec.image_b)?,
            load_struct(&rec.struct_b)?,
            rec.identity,
        )
        .map_err(|e| Error::Validation(format!("row {row}: {e}")))?;
        samples.push(sample);
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Toy shape dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
    Diamond,
}

impl ShapeKind {
    fn covers(self, dx: i64, dy: i64, r: i64) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub shape: ShapeKind,
    pub color: [u8; 3],
}

pub fn default_palette() -> Vec<PaletteEntry> {
    use ShapeKind::*;
    [
        (Square, [230, 40, 40]),
        (Disk, [40, 200, 60]),
        (Diamond, [50, 90, 240]),
        (Square, [240, 210, 40]),
        (Disk, [210, 60, 220]),
        (Diamond, [40, 210, 220]),
    ]
    .into_iter()
    .map(|(shape, color)| PaletteEntry { shape, color })
    .collect()
}

fn default_test_pairs() -> usize {
    0
}

/// Parameters of the synthetic dataset. Generation is a pure function of
/// this value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDatasetSpec {
    pub num_pairs: usize,
    pub image_size: usize,
    pub shape_palette: Vec<PaletteEntry>,
    pub rng_seed: u64,
    /// Held-out pairs; 0 picks `max(1, num_pairs / 4)`.
    #[serde(default = "default_test_pairs")]
    pub test_pairs: usize,
}

impl ToyDatasetSpec {
    pub fn new(num_pairs: usize, image_size: usize, rng_seed: u64) -> Self {
        Self { num_pairs, image_size, shape_palette: default_palette(), rng_seed, test_pairs: 0 }
    }

    pub fn with_test_pairs(mut self, n: usize) -> Self {
        self.test_pairs = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 {
            return Err(Error::Validation("toy dataset needs at least one pair".into()));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::Validation(format!(
                "image size {} is not a multiple of 4",
                self.image_size
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Validation(format!(
                "image size {} is too small to place two shapes (minimum 16)",
                self.image_size
            )));
        }
        if self.shape_palette.is_empty() {
            return Err(Error::Validation("shape palette is empty".into()));
        }
        Ok(())
    }

    pub fn effective_test_pairs(&self) -> usize {
        if self.test_pairs == 0 {
            (self.num_pairs / 4).max(1)
        } else {
            self.test_pairs
        }
    }

    /// Half-extent of a drawn shape and of the marker arms, in pixels.
    pub fn shape_radius(&self) -> usize {
        (self.image_size / 8).max(2)
    }
}

/// Width of the rendered skeleton strokes.
pub const MARKER_LINE_WIDTH: usize = 4;

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

#[derive(Debug, Clone)]
struct RenderedPair {
    image_a: RgbImage,
    struct_a: RgbImage,
    image_b: RgbImage,
    struct_b: RgbImage,
    identity: String,
}

fn render_shape(size: usize, entry: &PaletteEntry, cx: i64, cy: i64, r: i64) -> RgbImage {
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        if entry.shape.covers(x as i64 - cx, y as i64 - cy, r) {
            Rgb(entry.color)
        } else {
            Rgb([0, 0, 0])
        }
    })
}

/// White-on-black skeleton: a horizontal and a vertical stroke of width
/// [`MARKER_LINE_WIDTH`] joining the four arm keypoints through the centre.
fn render_marker(size: usize, cx: i64, cy: i64, r: i64) -> RgbImage {
    let half = MARKER_LINE_WIDTH as i64 / 2;
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let (dx, dy) = (x as i64 - cx, y as i64 - cy);
        let horizontal = dx.abs() <= r && (-half..half).contains(&dy);
        let vertical = dy.abs() <= r && (-half..half).contains(&dx);
        if horizontal || vertical {
            Rgb([255, 255, 255])
        } else {
            Rgb([0, 0, 0])
        }
    })
}

fn render_pairs(spec: &ToyDatasetSpec, rng: &mut ChaCha8Rng, count: usize) -> Vec<RenderedPair> {
    let size = spec.image_size as i64;
    let r = spec.shape_radius() as i64;
    let lo = r + 1;
    let hi = size - r - 2;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let idx = rng.random_range(0..spec.shape_palette.len());
        let entry = spec.shape_palette[idx];
        let a = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let b = loop {
            let b = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            if (a.0 - b.0).abs().max((a.1 - b.1).abs()) >= r {
                break b;
            }
        };
        out.push(RenderedPair {
            image_a: render_shape(spec.image_size, &entry, a.0, a.1, r),
            struct_a: render_marker(spec.image_size, a.0, a.1, r),
            image_b: render_shape(spec.image_size, &entry, b.0, b.1, r),
            struct_b: render_marker(spec.image_size, b.0, b.1, r),
            identity: format!("id{idx:02}"),
        });
    }
    out
}

fn render_all(spec: &ToyDatasetSpec) -> Result<(Vec<RenderedPair>, Vec<RenderedPair>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let train = render_pairs(spec, &mut rng, spec.num_pairs);
    let test = render_pairs(spec, &mut rng, spec.effective_test_pairs());
    Ok((train, test))
}

fn to_samples(pairs: &[RenderedPair]) -> Result<Vec<PairedSample>> {
    pairs
        .iter()
        .map(|p| {
            PairedSample::new(
                ImageTensor::from_rgb8(&p.image_a)?,
                StructureMap::from_rgb8(&p.struct_a, 3, StructureKind::Skeleton)?,
                ImageTensor::from_rgb8(&p.image_b)?,
                StructureMap::from_rgb8(&p.struct_b, 3, StructureKind::Skeleton)?,
                p.identity.clone(),
            )
        })
        .collect()
}

/// Renders the toy dataset in memory.
pub fn generate_toy_dataset(spec: &ToyDatasetSpec) -> Result<ToyDataset> {
    let (train, test) = render_all(spec)?;
    Ok(ToyDataset { train: to_samples(&train)?, test: to_samples(&test)? })
}

/// Renders the toy dataset and persists it under `root` in the standard
/// layout, with the spec recorded in `root/spec.json`.
pub fn write_toy_dataset(spec: &ToyDatasetSpec, root: &Path) -> Result<ToyDataset> {
    let (train, test) = render_all(spec)?;
    for (split, pairs) in [(Split::Train, &train), (Split::Test, &test)] {
        let dir = root.join(split.dir_name());
        fs::create_dir_all(&dir)?;
        let mut w = csv::Writer::from_path(dir.join(MANIFEST_NAME))
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for (i, p) in pairs.iter().enumerate() {
            let names = [
                format!("img_{i:03}_a.png"),
                format!("struct_{i:03}_a.png"),
                format!("img_{i:03}_b.png"),
                format!("struct_{i:03}_b.png"),
            ];
            for (name, img) in names.iter().zip([&p.image_a, &p.struct_a, &p.image_b, &p.struct_b]) {
                save_png(img, &dir.join(name))?;
            }
            let [image_a, struct_a, image_b, struct_b] = names;
            w.serialize(ManifestRow { image_a, struct_a, image_b, struct_b, identity: p.identity.clone() })
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
    }
    let json = serde_json::to_string_pretty(spec).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    fs::write(root.join(TOY_SPEC_NAME), json + "\n")?;
    Ok(ToyDataset { train: to_samples(&train)?, test: to_samples(&test)? })
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(format!("writing `{}`: {e}", path.display()))))
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    if !path.is_file() {
        return Err(Error::Load(format!("file `{}` not found", path.display())));
    }
    Ok(image::open(path)
        .map_err(|e| Error::Load(format!("cannot decode `{}`: {e}", path.display())))?
        .to_rgb8())
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// A collated training batch in graph form.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub c_x: Tensor,
    pub y: Tensor,
    pub c_y: Tensor,
}

impl Batch {
    pub fn collate(samples: &[&PairedSample]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let x: Vec<_> = samples.iter().map(|s| &s.x).collect();
        let y: Vec<_> = samples.iter().map(|s| &s.y).collect();
        let cx: Vec<_> = samples.iter().map(|s| &s.c_x).collect();
        let cy: Vec<_> = samples.iter().map(|s| &s.c_y).collect();
        Ok(Batch {
            x: ImageTensor::stack(&x)?.to_tensor(),
            c_x: StructureMap::stack(&cx)?.to_tensor(),
            y: ImageTensor::stack(&y)?.to_tensor(),
            c_y: StructureMap::stack(&cy)?.to_tensor(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    /// Mirror the whole sample left-right with probability 1/2.
    pub flip: bool,
    /// Reflect-pad by this many pixels, then crop back at a random offset.
    pub crop_pad: usize,
}

impl Augmentation {
    pub fn is_enabled(&self) -> bool {
        self.flip || self.crop_pad > 0
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample visiting order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch, 0));
    order.shuffle(&mut rng);
    order
}

/// Batches of one epoch in deterministic order; the last batch may be short.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    epoch_order(len, seed, epoch)
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

fn crop_planes(data: &[f64], planes: usize, h: usize, w: usize, pad: usize, oy: usize, ox: usize) -> Vec<f64> {
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let r = if i < 0 { -i } else if i >= len { 2 * len - 2 - i } else { i };
        r.clamp(0, len - 1) as usize
    };
    let mut out = Vec::with_capacity(data.len());
    for p in 0..planes {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let sy = reflect((y + oy) as isize - pad as isize, h);
            for x in 0..w {
                let sx = reflect((x + ox) as isize - pad as isize, w);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    out
}

/// Applies the same random flip and crop to all four rasters of a sample.
/// The draw depends only on `(seed, epoch, slot)`.
pub fn augment_sample(sample: &PairedSample, aug: Augmentation, seed: u64, epoch: u64, slot: u64) -> Result<PairedSample> {
    if !aug.is_enabled() {
        return Ok(sample.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch, slot + 1));
    let mut s = sample.clone();
    if aug.flip && rng.random_bool(0.5) {
        s.x = s.x.flip_horizontal();
        s.y = s.y.flip_horizontal();
        s.c_x = s.c_x.flip_horizontal();
        s.c_y = s.c_y.flip_horizontal();
    }
    if aug.crop_pad > 0 {
        let (h, w) = s.image_size();
        let pad = aug.crop_pad.min(h - 1).min(w - 1);
        let oy = rng.random_range(0..=2 * pad);
        let ox = rng.random_range(0..=2 * pad);
        let crop_img = |img: &ImageTensor| ImageTensor::new(crop_planes(img.data(), 3, h, w, pad, oy, ox), img.shape());
        let crop_st = |st: &StructureMap| {
            StructureMap::new(crop_planes(st.data(), st.channels(), h, w, pad, oy, ox), st.shape(), st.kind())
        };
        s.x = crop_img(&s.x)?;
        s.y = crop_img(&s.y)?;
        s.c_x = crop_st(&s.c_x)?;
        s.c_y = crop_st(&s.c_y)?;
    }
    Ok(s)
}

/// Uniformly draws `count` sample indices (with replacement) from a split of
/// `len` samples, for choosing random target structures at inference time.
pub fn random_target_selection(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

/// Collects every file below `root`, sorted, for byte-level comparisons.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_u8(255), 1.0);
        assert_eq!(normalize_u8(0), -1.0);
        for v in 0..=255u8 {
            assert_eq!(denormalize_to_u8(normalize_u8(v)), v);
        }
    }

    proptest! {
        #[test]
        fn denormalize_then_normalize_within_one_level(v in -1.0f64..=1.0) {
            let back = normalize_u8(denormalize_to_u8(v));
            prop_assert!((back - v).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn image_tensor_rejects_bad_shapes_and_ranges() {
        assert!(ImageTensor::new(vec![0.0; 2 * 6 * 6], [1, 2, 6, 6]).is_err());
        assert!(ImageTensor::new(vec![0.0; 3 * 6 * 8], [1, 3, 6, 8]).is_err());
        assert!(ImageTensor::new(vec![1.5; 3 * 4 * 4], [1, 3, 4, 4]).is_err());
        assert!(ImageTensor::new(vec![0.5; 3 * 4 * 4], [1, 3, 4, 4]).is_ok());
    }

    #[test]
    fn class_label_structure_must_be_constant() {
        let s = StructureMap::from_class_label(&[1.0, -1.0], 4, 4).unwrap();
        assert_eq!(s.channels(), 2);
        let mut data = s.data().to_vec();
        data[3] = 0.0;
        assert!(StructureMap::new(data, [1, 2, 4, 4], StructureKind::ClassLabelBroadcast).is_err());
    }

    #[test]
    fn split_channels_shapes_and_roundtrip() {
        let vals: Vec<f64> = (0..12).map(|v| v as f64 / 12.0).collect();
        let t = Tensor::from_vec(vals.clone(), &[1, 3, 2, 2]).unwrap();
        let [r, g, b] = split_channels(&t).unwrap();
        assert_eq!(r.shape(), &[1, 1, 2, 2]);
        assert_eq!(r.data(), &vals[0..4]);
        let back = concat_channels(&[&r, &g, &b]).unwrap();
        assert_eq!(back.data(), t.data());

        let ones = Tensor::from_vec([vec![1.0; 4], vec![0.0; 8]].concat(), &[1, 3, 2, 2]).unwrap();
        assert!(split_channels(&ones).unwrap()[0].data().iter().all(|v| *v == 1.0));
        assert!(split_channels(&Tensor::zeros(&[1, 4, 2, 2])).is_err());
    }

    #[test]
    fn toy_rejects_bad_size() {
        let err = generate_toy_dataset(&ToyDatasetSpec::new(4, 63, 1)).unwrap_err();
        assert!(err.to_string().contains("multiple of 4"));
        assert!(generate_toy_dataset(&ToyDatasetSpec::new(0, 64, 1)).is_err());
    }

    #[test]
    fn toy_shapes_and_pairing() {
        let ds = generate_toy_dataset(&ToyDatasetSpec::new(16, 64, 7)).unwrap();
        assert_eq!(ds.train.len(), 16);
        assert_eq!(ds.test.len(), 4);
        for s in &ds.train {
            assert_eq!(s.x.shape(), [1, 3, 64, 64]);
            assert_eq!(s.c_y.shape(), [1, 3, 64, 64]);
            assert_ne!(s.c_x, s.c_y);
        }
    }

    #[test]
    fn epoch_order_is_a_permutation_and_deterministic() {
        let a = epoch_order(10, 3, 0);
        assert_eq!(a, epoch_order(10, 3, 0));
        assert_ne!(a, epoch_order(10, 3, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(epoch_batches(16, 4, 1, 0).len(), 4);
        assert_eq!(epoch_batches(17, 4, 1, 0).len(), 5);
    }

    #[test]
    fn augmentation_keeps_pairs_aligned() {
        let ds = generate_toy_dataset(&ToyDatasetSpec::new(2, 32, 5)).unwrap();
        let aug = Augmentation { flip: true, crop_pad: 3 };
        for slot in 0..8 {
            let a = augment_sample(&ds.train[0], aug, 9, 0, slot).unwrap();
            assert_eq!(a.x.shape(), ds.train[0].x.shape());
            assert_eq!(a, augment_sample(&ds.train[0], aug, 9, 0, slot).unwrap());
        }
        let none = augment_sample(&ds.train[0], Augmentation::default(), 9, 0, 0).unwrap();
        assert_eq!(none, ds.train[0]);
    }

    #[test]
    fn random_targets_are_seeded() {
        let a = random_target_selection(10, 5, 42);
        assert_eq!(a, random_target_selection(10, 5, 42));
        assert!(a.iter().all(|&i| i < 10));
    }
}
