//! Region-of-interest mask supply.
//!
//! Masks normally arrive precomputed on disk (`<image_id>_mask_<n>.png`,
//! produced offline by any segmenter). For synthetic data and as a
//! degradation path there is a built-in proposer: Otsu threshold on
//! luminance followed by 4-connected component extraction.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::{self, RgbImage};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskSource {
    Ingested,
    Fallback,
}

/// One binary mask; guaranteed to contain at least one foreground pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    fg: Vec<bool>,
}

impl RegionMask {
    pub fn new(width: usize, height: usize, fg: Vec<bool>) -> Result<Self> {
        if fg.len() != width * height {
            return Err(Error::Contract(format!(
                "mask length {} does not match {width}x{height}",
                fg.len()
            )));
        }
        if !fg.iter().any(|&p| p) {
            return Err(Error::Contract(
                "mask must have at least one foreground pixel".into(),
            ));
        }
        Ok(RegionMask { width, height, fg })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn fg(&self) -> &[bool] {
        &self.fg
    }

    pub fn area(&self) -> usize {
        self.fg.iter().filter(|&&p| p).count()
    }
}

/// The mask set for one image; may be empty, downstream tolerates that.
#[derive(Debug, Clone)]
pub struct RegionMaskSet {
    pub masks: Vec<RegionMask>,
    pub source: MaskSource,
}

impl RegionMaskSet {
    pub fn empty(source: MaskSource) -> Self {
        RegionMaskSet {
            masks: Vec::new(),
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Load every `<image_id>_mask_*.png` under `dir` in lexicographic filename
/// order. Masks must match the expected image dimensions.
pub fn load_masks(
    dir: &Path,
    image_id: &str,
    expect_width: usize,
    expect_height: usize,
) -> Result<RegionMaskSet> {
    if !dir.is_dir() {
        return Err(Error::Contract(format!(
            "mask directory {} does not exist",
            dir.display()
        )));
    }
    let prefix = format!("{image_id}_mask_");
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with(&prefix) && n.ends_with(".png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();

    let mut masks = Vec::new();
    for file in files {
        let (w, h, fg) = imageio::load_mask_png(&file)?;
        if w != expect_width || h != expect_height {
            return Err(Error::MaskIngestion {
                file: file.display().to_string(),
                reason: format!("mask is {w}x{h}, image is {expect_width}x{expect_height}"),
            });
        }
        let mask = RegionMask::new(w, h, fg).map_err(|e| Error::MaskIngestion {
            file: file.display().to_string(),
            reason: e.to_string(),
        })?;
        masks.push(mask);
    }
    Ok(RegionMaskSet {
        masks,
        source: MaskSource::Ingested,
    })
}

/// Otsu threshold over a 256-bin luminance histogram. Returns the bin index
/// that maximizes between-class variance, or `None` when no split separates
/// anything (constant image).
fn otsu_threshold<F: Scalar>(lum: &[F]) -> Option<usize> {
    let mut hist = [0usize; 256];
    for &l in lum {
        let bin = (l.to_f64_lossy().clamp(0.0, 1.0) * 255.0).floor() as usize;
        hist[bin.min(255)] += 1;
    }
    let total = lum.len() as f64;
    let total_sum: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();

    let mut best: Option<(usize, f64)> = None;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..255 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_sum - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > 0.0 && best.map(|(_, b)| var > b).unwrap_or(true) {
            best = Some((t, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Deterministic fallback proposer: Otsu split on luminance, 4-connected
/// components of the bright class, keep the k largest by area (ties broken
/// by the smaller first row-major scan index).
pub fn propose_fallback<F: Scalar>(img: &RgbImage<F>, k: usize) -> Result<RegionMaskSet> {
    if k == 0 {
        return Err(Error::Contract("propose_fallback requires k >= 1".into()));
    }
    let lum = img.luminance();
    let Some(t) = otsu_threshold(&lum) else {
        return Ok(RegionMaskSet::empty(MaskSource::Fallback));
    };
    let (w, h) = (img.width(), img.height());
    let fg: Vec<bool> = lum
        .iter()
        .map(|&l| (l.to_f64_lossy().clamp(0.0, 1.0) * 255.0).floor() as usize > t)
        .collect();

    // 4-connected component labeling via scanline flood fill
    let mut label = vec![usize::MAX; w * h];
    let mut components: Vec<(usize, usize)> = Vec::new(); // (area, first scan index)
    for start in 0..w * h {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut area = 0usize;
        let mut stack = vec![start];
        label[start] = id;
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = (i % w, i / w);
            let mut push = |nx: usize, ny: usize, stack: &mut Vec<usize>| {
                let ni = ny * w + nx;
                if fg[ni] && label[ni] == usize::MAX {
                    label[ni] = id;
                    stack.push(ni);
                }
            };
            if x > 0 {
                push(x - 1, y, &mut stack);
            }
            if x + 1 < w {
                push(x + 1, y, &mut stack);
            }
            if y > 0 {
                push(x, y - 1, &mut stack);
            }
            if y + 1 < h {
                push(x, y + 1, &mut stack);
            }
        }
        components.push((area, start));
    }

    let mut order: Vec<usize> = (0..components.len()).collect();
    order.sort_by(|&a, &b| {
        components[b]
            .0
            .cmp(&components[a].0)
            .then(components[a].1.cmp(&components[b].1))
    });
    order.truncate(k);

    let mut masks = Vec::new();
    for id in order {
        let fg_mask: Vec<bool> = label.iter().map(|&l| l == id).collect();
        masks.push(RegionMask::new(w, h, fg_mask)?);
    }
    Ok(RegionMaskSet {
        masks,
        source: MaskSource::Fallback,
    })
}

/// Isolate each region: background pixels zeroed, foreground preserved.
pub fn apply_masks<F: Scalar>(
    img: &RgbImage<F>,
    set: &RegionMaskSet,
) -> Result<Vec<RgbImage<F>>> {
    let mut out = Vec::with_capacity(set.masks.len());
    for mask in &set.masks {
        if mask.width() != img.width() || mask.height() != img.height() {
            return Err(Error::Contract(format!(
                "mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                img.width(),
                img.height()
            )));
        }
        let mut planes: [Vec<F>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for c in 0..3 {
            planes[c] = img
                .plane(c)
                .iter()
                .zip(mask.fg())
                .map(|(&v, &keep)| if keep { v } else { F::zero() })
                .collect();
        }
        out.push(RgbImage::new(img.width(), img.height(), planes)?);
    }
    Ok(out)
}
