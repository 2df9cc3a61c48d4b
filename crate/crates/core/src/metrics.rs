//! Evaluation metrics: discrete Fréchet / FRD, FID, PSNR, SSIM and
//! sharpness difference.
//!
//! Pixel metrics take rasters already on the `[0, data_range]` scale; use
//! [`to_range_scale`] to map normalised images there.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::networks::FeatureExtractor;

/// Upper bound reported by PSNR-style metrics for (near-)identical inputs.
pub const PSNR_CAP: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-12;
const EIG_CLIP: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Discrete Fréchet distance and FRD
// ---------------------------------------------------------------------------

/// Discrete Fréchet distance between two point sequences under `d`, by the
/// Eiter–Mannila recurrence with two rolling rows.
pub fn discrete_frechet<T>(a: &[T], b: &[T], d: impl Fn(&T, &T) -> f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("discrete Fréchet distance needs nonempty sequences".into()));
    }
    let m = b.len();
    let mut prev = vec![0.0; m];
    let mut cur = vec![0.0; m];
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            let dij = d(ai, bj);
            cur[j] = match (i, j) {
                (0, 0) => dij,
                (0, _) => dij.max(cur[j - 1]),
                (_, 0) => dij.max(prev[0]),
                _ => dij.max(prev[j].min(cur[j - 1]).min(prev[j - 1])),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Scalar sequences under absolute difference.
pub fn discrete_frechet_abs(a: &[f64], b: &[f64]) -> Result<f64> {
    discrete_frechet(a, b, |x, y| (x - y).abs())
}

/// `N × d` matrix of per-image feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

pub const FEATURE_MAGIC: &[u8; 8] = b"CTRLFEAT";
pub const FEATURE_VERSION: u32 = 1;

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Validation("feature matrix needs at least one row and column".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::Validation(format!("{} values for a {rows}x{dim} feature matrix", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite feature in row {}", i / dim)));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Validation("feature rows differ in length".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    /// Embeds every image with `extractor`.
    pub fn from_images(images: &[ImageTensor], extractor: &dyn FeatureExtractor) -> Result<Self> {
        let mut rows = Vec::new();
        for img in images {
            rows.extend(extractor.embed(&img.to_tensor())?);
        }
        Self::from_rows(&rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Magic, version, `N`, `d` (u32 LE) then `N·d` f32 LE values row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Load(format!("feature file: {m}"));
        if bytes.len() < 20 || &bytes[..8] != FEATURE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        if u(8) as u32 != FEATURE_VERSION {
            return Err(bad(&format!("unsupported version {}", u(8))));
        }
        let (rows, dim) = (u(12), u(16));
        if bytes.len() != 20 + 4 * rows * dim {
            return Err(bad("payload length does not match header"));
        }
        let data = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(rows, dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::Load(format!("cannot read feature file `{}`: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Per-pair discrete Fréchet distances, each feature vector read as a scalar
/// sequence in coordinate order.
pub fn frd_per_pair(real: &FeatureMatrix, generated: &FeatureMatrix) -> Result<Vec<f64>> {
    if real.rows() != generated.rows() {
        return Err(Error::Validation(format!(
            "FRD needs index-aligned pairs: {} real vs {} generated",
            real.rows(),
            generated.rows()
        )));
    }
    (0..real.rows()).map(|i| discrete_frechet_abs(real.row(i), generated.row(i))).collect()
}

/// Mean per-pair discrete Fréchet distance.
pub fn frd(real: &FeatureMatrix, generated: &FeatureMatrix) -> Result<f64> {
    let v = frd_per_pair(real, generated)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

// ---------------------------------------------------------------------------
// FID
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::Validation(format!("covariance must be {d}x{d}")));
        }
        let s = Self { mu, sigma };
        s.validate()?;
        Ok(s)
    }

    /// Sample mean and unbiased covariance; a single row gives zero
    /// covariance.
    pub fn from_features(f: &FeatureMatrix) -> Result<Self> {
        let (n, d) = (f.rows(), f.dim());
        let x = DMatrix::from_row_slice(n, d, f.data());
        let mu = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mu.transpose();
        }
        let sigma = if n > 1 { centered.transpose() * &centered / (n - 1) as f64 } else { DMatrix::zeros(d, d) };
        Self::new(mu, sigma)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let asym = (&self.sigma - self.sigma.transpose()).amax();
        if asym > PSD_TOL {
            return Err(Error::Numeric(format!("covariance not symmetric (max asymmetry {asym:e})")));
        }
        let min_eig = self.sigma.clone().symmetric_eigenvalues().min();
        if min_eig < -PSD_TOL {
            return Err(Error::Numeric(format!("covariance not PSD (eigenvalue {min_eig:e})")));
        }
        Ok(())
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| if v < EIG_CLIP { 0.0 } else { v.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2 (Σ₁Σ₂)^{1/2})`, with the trace of the
/// product root taken as `Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!("FID dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    a.validate()?;
    b.validate()?;
    let dmu = (&a.mu - &b.mu).norm_squared();
    let s1 = psd_sqrt(&a.sigma);
    let inner = &s1 * &b.sigma * &s1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 =
        SymmetricEigen::new(sym).eigenvalues.iter().map(|&v| if v < EIG_CLIP { 0.0 } else { v.sqrt() }).sum();
    Ok(dmu + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_cross)
}

// ---------------------------------------------------------------------------
// Pixel metrics
// ---------------------------------------------------------------------------

/// Maps normalised `[-1, 1]` values to `[0, data_range]`.
pub fn to_range_scale(img: &ImageTensor, data_range: f64) -> Vec<f64> {
    img.data().iter().map(|v| (v + 1.0) * 0.5 * data_range).collect()
}

fn check_range(data_range: f64) -> Result<()> {
    if data_range == 255.0 || data_range == 2.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("data_range must be 255 or 2, got {data_range}")))
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!("metric inputs differ in size: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Validation("metric inputs are empty".into()));
    }
    Ok(())
}

fn capped_db(data_range: f64, mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP
    } else {
        (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    check_len(a, b)?;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(capped_db(data_range, mse))
}

fn check_shape(a: &[f64], b: &[f64], shape: [usize; 4]) -> Result<()> {
    check_len(a, b)?;
    if a.len() != shape.iter().product::<usize>() {
        return Err(Error::Validation(format!("{} values do not fill shape {shape:?}", a.len())));
    }
    Ok(())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            tmp[i * ow + j] = (0..n).map(|t| k[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * tmp[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5), channels and
/// batch. Images smaller than the window use a window of their size.
pub fn ssim(a: &[f64], b: &[f64], shape: [usize; 4], data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    check_shape(a, b, shape)?;
    let [n, c, h, w] = shape;
    let k = gaussian_window(SSIM_WINDOW.min(h).min(w), SSIM_SIGMA);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..n * c {
        let pa = &a[p * hw..(p + 1) * hw];
        let pb = &b[p * hw..(p + 1) * hw];
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(pb).map(|(x, y)| f(*x, *y)).collect() };
        let (mu_a, _, _) = filter_valid(pa, h, w, &k);
        let (mu_b, _, _) = filter_valid(pb, h, w, &k);
        let (e_aa, _, _) = filter_valid(&prod(|x, _| x * x), h, w, &k);
        let (e_bb, _, _) = filter_valid(&prod(|_, y| y * y), h, w, &k);
        let (e_ab, _, _) = filter_valid(&prod(|x, y| x * y), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gradient_map(x: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let mut out = Vec::with_capacity(n * c * h.saturating_sub(1) * w.saturating_sub(1));
    for p in 0..n * c {
        let pl = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h.saturating_sub(1) {
            for j in 0..w.saturating_sub(1) {
                let v = pl[i * w + j];
                out.push((pl[i * w + j + 1] - v).abs() + (pl[(i + 1) * w + j] - v).abs());
            }
        }
    }
    out
}

/// `10 log10(range² / MSE)` between the `|∂x| + |∂y|` forward-gradient maps,
/// capped like PSNR.
pub fn sharpness_difference(a: &[f64], b: &[f64], shape: [usize; 4], data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    check_shape(a, b, shape)?;
    if shape[2] < 2 || shape[3] < 2 {
        return Err(Error::Validation("sharpness difference needs images of at least 2x2".into()));
    }
    let (ga, gb) = (gradient_map(a, shape), gradient_map(b, shape));
    let mse = ga.iter().zip(&gb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ga.len() as f64;
    Ok(capped_db(data_range, mse))
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
    Sd,
    Fid,
    Frd,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Psnr, Metric::Ssim, Metric::Sd, Metric::Fid, Metric::Frd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Sd => "sd",
            Metric::Fid => "fid",
            Metric::Frd => "frd",
        }
    }

    /// Parses a comma-separated list, keeping order and dropping repeats.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Metric = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no metrics selected".into()));
        }
        Ok(out)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}` (expected psnr, ssim, sd, fid or frd)")))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<(Metric, f64)>,
    pub warnings: Vec<String>,
    /// Per-pair values for the per-image metrics, in pair order.
    pub per_pair: Vec<(Metric, Vec<f64>)>,
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.rows.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (m, v) in &self.rows {
            let _ = writeln!(s, "{},{}", m.name(), v);
        }
        s
    }

    pub fn per_pair_csv(&self) -> String {
        let mut s = String::from("pair");
        for (m, _) in &self.per_pair {
            let _ = write!(s, ",{}", m.name());
        }
        s.push('\n');
        let n = self.per_pair.first().map_or(0, |(_, v)| v.len());
        for i in 0..n {
            let _ = write!(s, "{i}");
            for (_, v) in &self.per_pair {
                let _ = write!(s, ",{}", v[i]);
            }
            s.push('\n');
        }
        s
    }
}

/// Scores index-aligned `(real, generated)` images. Pixel metrics and FRD are
/// averaged over pairs; FID compares the two embedding distributions.
pub fn evaluate_pairs(
    real: &[ImageTensor],
    generated: &[ImageTensor],
    extractor: &dyn FeatureExtractor,
    metrics: &[Metric],
    data_range: f64,
) -> Result<MetricReport> {
    check_range(data_range)?;
    if real.len() != generated.len() || real.is_empty() {
        return Err(Error::Validation(format!(
            "evaluation needs equal nonempty image lists, got {} and {}",
            real.len(),
            generated.len()
        )));
    }
    let mut report = MetricReport::default();
    let needs_features = metrics.iter().any(|m| matches!(m, Metric::Fid | Metric::Frd));
    let features = if needs_features {
        Some((FeatureMatrix::from_images(real, extractor)?, FeatureMatrix::from_images(generated, extractor)?))
    } else {
        None
    };
    for &m in metrics {
        let value = match m {
            Metric::Psnr | Metric::Ssim | Metric::Sd => {
                let mut vals = Vec::with_capacity(real.len());
                for (r, g) in real.iter().zip(generated) {
                    if r.shape() != g.shape() {
                        return Err(Error::Validation(format!(
                            "image shapes differ: {:?} vs {:?}",
                            r.shape(),
                            g.shape()
                        )));
                    }
                    let (a, b) = (to_range_scale(r, data_range), to_range_scale(g, data_range));
                    vals.push(match m {
                        Metric::Psnr => psnr(&a, &b, data_range)?,
                        Metric::Ssim => ssim(&a, &b, r.shape(), data_range)?,
                        _ => sharpness_difference(&a, &b, r.shape(), data_range)?,
                    });
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                report.per_pair.push((m, vals));
                mean
            }
            Metric::Fid => {
                let (fr, fg) = features.as_ref().expect("computed above");
                if fr.rows() < fr.dim() {
                    report.warnings.push(format!(
                        "FID from {} samples in {} dimensions: covariance is rank-deficient, value is unreliable",
                        fr.rows(),
                        fr.dim()
                    ));
                }
                fid(&GaussianStats::from_features(fr)?, &GaussianStats::from_features(fg)?)?
            }
            Metric::Frd => {
                let (fr, fg) = features.as_ref().expect("computed above");
                let vals = frd_per_pair(fr, fg)?;
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                report.per_pair.push((m, vals));
                mean
            }
        };
        report.rows.push((m, value));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ConvStackExtractor;
    use crate::tensor::testing::lcg_vec;
    use proptest::prelude::*;

    #[test]
    fn frechet_small_cases() {
        assert_eq!(discrete_frechet_abs(&[0.0], &[5.0]).unwrap(), 5.0);
        assert_eq!(discrete_frechet_abs(&[0.0, 1.0, 2.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(discrete_frechet_abs(&[1.0, 3.0, 2.0], &[1.0, 3.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(discrete_frechet_abs(&[], &[1.0]), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn frechet_symmetric_and_endpoint_bound(
            a in proptest::collection::vec(-5.0f64..5.0, 1..12),
            b in proptest::collection::vec(-5.0f64..5.0, 1..12),
        ) {
            let ab = discrete_frechet_abs(&a, &b).unwrap();
            prop_assert_eq!(ab, discrete_frechet_abs(&b, &a).unwrap());
            let lb = (a[0] - b[0]).abs().max((a[a.len() - 1] - b[b.len() - 1]).abs());
            prop_assert!(ab >= lb);
        }
    }

    #[test]
    fn feature_file_roundtrip() {
        let f = FeatureMatrix::new(2, 3, vec![0.5, -1.0, 2.0, 3.25, 0.0, -0.125]).unwrap();
        let back = FeatureMatrix::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(back, f);
        let b = f.to_bytes();
        assert!(FeatureMatrix::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(FeatureMatrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn frd_basics() {
        let a = FeatureMatrix::new(2, 4, lcg_vec(8, 1)).unwrap();
        let b = FeatureMatrix::new(2, 4, lcg_vec(8, 2)).unwrap();
        assert_eq!(frd(&a, &a).unwrap(), 0.0);
        assert_eq!(frd(&a, &b).unwrap(), frd(&b, &a).unwrap());
        assert!(frd(&a, &b).unwrap() > 0.0);
        let c = FeatureMatrix::new(1, 4, lcg_vec(4, 2)).unwrap();
        assert!(matches!(frd(&a, &c), Err(Error::Validation(_))));
    }

    #[test]
    fn fid_diagonal_closed_form() {
        let s1 = GaussianStats::new(
            DVector::from_vec(vec![0.0, 1.0, 2.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.25])),
        )
        .unwrap();
        let s2 = GaussianStats::new(
            DVector::from_vec(vec![1.0, 1.0, 0.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 1.0, 1.0])),
        )
        .unwrap();
        let expect = (1.0 + 0.0 + 4.0) + (1.0f64 - 3.0).powi(2) + (2.0f64 - 1.0).powi(2) + (0.5f64 - 1.0).powi(2);
        assert!((fid(&s1, &s2).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn fid_rejects_non_psd() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(GaussianStats::new(DVector::zeros(2), bad), Err(Error::Numeric(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianStats::new(DVector::zeros(2), asym).is_err());
    }

    #[test]
    fn stats_from_features() {
        let f = FeatureMatrix::new(3, 2, vec![1.0, 0.0, 2.0, 2.0, 3.0, 4.0]).unwrap();
        let s = GaussianStats::from_features(&f).unwrap();
        assert_eq!(s.mu.as_slice(), &[2.0, 2.0]);
        assert_eq!(s.sigma[(0, 0)], 1.0);
        assert_eq!(s.sigma[(0, 1)], 2.0);
        assert_eq!(s.sigma[(1, 1)], 4.0);
    }

    #[test]
    fn pixel_metric_identities() {
        let a: Vec<f64> = lcg_vec(3 * 16 * 16, 4).iter().map(|v| (v + 1.0) * 127.5).collect();
        let shape = [1, 3, 16, 16];
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a, shape, 255.0).unwrap() - 1.0).abs() < 1e-12);
        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        let p = psnr(&a, &b, 255.0).unwrap();
        assert!((p - 10.0 * (255.0f64 * 255.0 / 100.0).log10()).abs() < 1e-10);
        assert_eq!(sharpness_difference(&a, &b, shape, 255.0).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &b, 100.0).is_err());
        assert!(ssim(&a, &b[1..], shape, 255.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a: Vec<f64> = lcg_vec(300, 1).iter().map(|v| (v + 1.0) * 100.0).collect();
        let noise = lcg_vec(300, 2);
        let mut last = f64::INFINITY;
        for amp in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| x + amp * n).collect();
            let p = psnr(&a, &b, 255.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_drops_under_distortion() {
        let a: Vec<f64> = lcg_vec(16 * 16, 4).iter().map(|v| (v + 1.0) * 127.5).collect();
        let b: Vec<f64> = a.iter().rev().copied().collect();
        let s = ssim(&a, &b, [1, 1, 16, 16], 255.0).unwrap();
        assert!(s < 0.5 && s >= -1.0);
    }

    fn images(n: usize, seed: u64) -> Vec<ImageTensor> {
        (0..n)
            .map(|i| ImageTensor::new(lcg_vec(3 * 16 * 16, seed + i as u64), [1, 3, 16, 16]).unwrap())
            .collect()
    }

    #[test]
    fn evaluate_self_and_csv() {
        let real = images(3, 10);
        let e = ConvStackExtractor::toy(0);
        let r = evaluate_pairs(&real, &real, &e, &Metric::ALL, 255.0).unwrap();
        assert_eq!(r.get(Metric::Psnr), Some(PSNR_CAP));
        assert!((r.get(Metric::Ssim).unwrap() - 1.0).abs() < 1e-12);
        assert!(r.get(Metric::Fid).unwrap().abs() < 1e-6);
        assert_eq!(r.get(Metric::Frd), Some(0.0));
        assert_eq!(r.warnings.len(), 1);
        let only = evaluate_pairs(&real, &images(3, 20), &e, &[Metric::Psnr], 255.0).unwrap();
        assert_eq!(only.to_csv().lines().count(), 2);
        assert_eq!(only.to_csv(), evaluate_pairs(&real, &images(3, 20), &e, &[Metric::Psnr], 255.0).unwrap().to_csv());
    }

    #[test]
    fn metric_parsing() {
        assert_eq!(Metric::parse_list("psnr, ssim,psnr").unwrap(), vec![Metric::Psnr, Metric::Ssim]);
        assert!(matches!(Metric::parse_list("psnr,lpips"), Err(Error::Config(_))));
    }
}
