use ctrlgan_core::{Error, ImageTensor, PairedSample, Result};
use image::{imageops, RgbImage};

/// One row per sample with panels `x | C_y | y' | y`.
pub fn render(samples: &[PairedSample], generated: &[ImageTensor]) -> Result<RgbImage> {
    if samples.is_empty() || samples.len() != generated.len() {
        return Err(Error::Validation(format!(
            "grid needs one output per sample, got {} samples and {} outputs",
            samples.len(),
            generated.len()
        )));
    }
    let (h, w) = samples[0].image_size();
    let mut canvas = RgbImage::new(4 * w as u32, (h * samples.len()) as u32);
    for (i, (s, g)) in samples.iter().zip(generated).enumerate() {
        if s.image_size() != (h, w) || (g.height(), g.width()) != (h, w) {
            return Err(Error::Shape(format!("grid row {i} is not {h}x{w}")));
        }
        let panels = [s.x.to_rgb8(0), s.c_y.to_rgb8(0), g.to_rgb8(0), s.y.to_rgb8(0)];
        for (j, p) in panels.iter().enumerate() {
            imageops::replace(&mut canvas, p, (j * w) as i64, (i * h) as i64);
        }
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctrlgan_core::data::generate_toy_dataset;
    use ctrlgan_core::ToyDatasetSpec;

    #[test]
    fn panels_in_order() {
        let ds = generate_toy_dataset(&ToyDatasetSpec::new(3, 16, 2)).unwrap();
        let gen: Vec<ImageTensor> = ds.train.iter().map(|s| s.x.clone()).collect();
        let img = render(&ds.train, &gen).unwrap();
        assert_eq!(img.dimensions(), (64, 48));
        let s = &ds.train[1];
        let y = s.y.to_rgb8(0);
        let c = s.c_y.to_rgb8(0);
        assert_eq!(img.get_pixel(48 + 5, 16 + 7), y.get_pixel(5, 7));
        assert_eq!(img.get_pixel(16 + 9, 16 + 3), c.get_pixel(9, 3));
        assert!(render(&ds.train[..2], &gen).is_err());
    }
}
