//! RGB image carrier with values in [0,1], plus 8-bit PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Planar RGB image; every channel value lives in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage<F> {
    width: usize,
    height: usize,
    planes: [Vec<F>; 3],
}

/// Rec.709 luma weights — the fixed luminance convention for the whole
/// pipeline.
pub const LUMA_R: f64 = 0.2126;
pub const LUMA_G: f64 = 0.7152;
pub const LUMA_B: f64 = 0.0722;

impl<F: Scalar> RgbImage<F> {
    pub fn new(width: usize, height: usize, planes: [Vec<F>; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Contract("image dimensions must be positive".into()));
        }
        let n = width * height;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::Contract(format!(
                "plane length mismatch: expected {n} pixels"
            )));
        }
        Ok(RgbImage {
            width,
            height,
            planes,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [F; 3]) -> Self {
        let n = width * height;
        RgbImage {
            width,
            height,
            planes: [vec![rgb[0]; n], vec![rgb[1]; n], vec![rgb[2]; n]],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn plane(&self, c: usize) -> &[F] {
        &self.planes[c]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [F] {
        &mut self.planes[c]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [F; 3] {
        let i = y * self.width + x;
        [self.planes[0][i], self.planes[1][i], self.planes[2][i]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [F; 3]) {
        let i = y * self.width + x;
        for c in 0..3 {
            self.planes[c][i] = rgb[c];
        }
    }

    /// Per-pixel Rec.709 luminance.
    pub fn luminance(&self) -> Vec<F> {
        let (wr, wg, wb) = (F::of(LUMA_R), F::of(LUMA_G), F::of(LUMA_B));
        (0..self.num_pixels())
            .map(|i| wr * self.planes[0][i] + wg * self.planes[1][i] + wb * self.planes[2][i])
            .collect()
    }

    pub fn mean_luminance(&self) -> F {
        let lum = self.luminance();
        let sum = lum.iter().fold(F::zero(), |acc, &x| acc + x);
        sum / F::of(lum.len() as f64)
    }

    pub fn clamp_unit(&mut self) {
        for plane in &mut self.planes {
            for v in plane.iter_mut() {
                *v = v.max(F::zero()).min(F::one());
            }
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.planes
            .iter()
            .all(|p| p.iter().all(|&v| v >= F::zero() && v <= F::one()))
    }

    pub fn max_abs_diff(&self, other: &RgbImage<F>) -> F {
        assert_eq!(self.width, other.width);
        assert_eq!(self.height, other.height);
        let mut m = F::zero();
        for c in 0..3 {
            for (a, b) in self.planes[c].iter().zip(&other.planes[c]) {
                m = m.max((*a - *b).abs());
            }
        }
        m
    }
}

/// Load an 8-bit PNG, mapping sample values linearly onto [0,1].
/// When `resize_to` is given the image is bilinearly resampled to that
/// square size first.
pub fn load_png<F: Scalar>(path: &Path, resize_to: Option<usize>) -> Result<RgbImage<F>> {
    let mut img = image::open(path)?.to_rgb8();
    if let Some(side) = resize_to {
        if img.width() as usize != side || img.height() as usize != side {
            img = image::imageops::resize(
                &img,
                side as u32,
                side as u32,
                image::imageops::FilterType::Triangle,
            );
        }
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = [
        Vec::with_capacity(w * h),
        Vec::with_capacity(w * h),
        Vec::with_capacity(w * h),
    ];
    for px in img.pixels() {
        for c in 0..3 {
            planes[c].push(F::of(px.0[c] as f64 / 255.0));
        }
    }
    RgbImage::new(w, h, planes)
}

/// Write as 8-bit PNG; values are clamped to [0,1] then scaled to 0..255
/// with round-to-nearest.
pub fn save_png<F: Scalar>(img: &RgbImage<F>, path: &Path) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let mut buf = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        for c in 0..3 {
            let v = img.plane(c)[i].to_f64_lossy().clamp(0.0, 1.0);
            buf.push((v * 255.0).round() as u8);
        }
    }
    let out: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized from dimensions");
    out.save(path)?;
    Ok(())
}

/// Load a grayscale PNG as a binary mask: sample > 0.5 is foreground.
pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = img.pixels().map(|p| p.0[0] as f64 / 255.0 > 0.5).collect();
    Ok((w, h, mask))
}

/// Write a binary mask as an 8-bit grayscale PNG (foreground = 255).
pub fn save_mask_png(width: usize, height: usize, mask: &[bool], path: &Path) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let out: image::GrayImage =
        image::ImageBuffer::from_raw(width as u32, height as u32, buf)
            .expect("buffer sized from dimensions");
    out.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_preserves_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut img = RgbImage::<f64>::filled(4, 3, [0.0, 0.0, 0.0]);
        img.set_pixel(1, 2, [10.0 / 255.0, 128.0 / 255.0, 255.0 / 255.0]);
        save_png(&img, &path).unwrap();
        let back: RgbImage<f64> = load_png(&path, None).unwrap();
        assert_eq!(back.width(), 4);
        assert_eq!(back.height(), 3);
        assert!(img.max_abs_diff(&back) < 1e-12);
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = vec![true, false, false, true, true, false];
        save_mask_png(3, 2, &mask, &path).unwrap();
        let (w, h, back) = load_mask_png(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, mask);
    }

    #[test]
    fn luminance_uses_rec709() {
        let img = RgbImage::<f64>::filled(2, 2, [1.0, 0.0, 0.0]);
        assert!((img.luminance()[0] - 0.2126).abs() < 1e-15);
    }
}
