//! Synthetic dataset generator: dark scenes with one colored shape each,
//! templated captions, and programmatic region masks keyed to the shape.
//! Everything the acceptance runs need, no external data.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::harness::manifest::{DatasetManifest, ManifestRecord};
use crate::imageio::{save_mask_png, save_png, RgbImage};
use crate::rng::Rng;

const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.55, 0.08, 0.08]),
    ("green", [0.08, 0.50, 0.10]),
    ("blue", [0.10, 0.12, 0.55]),
    ("yellow", [0.50, 0.48, 0.06]),
];

const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

pub const CONTEXTS: [&str; 8] = [
    "tunnel", "cavern", "shaft", "chamber", "gallery", "adit", "drift", "crosscut",
];

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_records: usize,
    pub image_size: usize,
    pub seed: u64,
    /// When set, consecutive record pairs share the exact same scene but
    /// carry different context categories (and captions mentioning them),
    /// so the context pathway is the only way to tell them apart.
    pub context_pairs: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_records: 16,
            image_size: 32,
            seed: 7,
            context_pairs: false,
        }
    }
}

const SIZES: [&str; 2] = ["small", "large"];

struct Scene {
    color_idx: usize,
    shape_idx: usize,
    size_idx: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    noise_seed: u64,
}

fn shape_hit(shape: &str, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= r && dy.abs() <= r,
        "triangle" => {
            // upright triangle: wider toward the bottom
            dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0
        }
        "cross" => (dx.abs() <= r / 2.5 && dy.abs() <= r) || (dy.abs() <= r / 2.5 && dx.abs() <= r),
        _ => unreachable!("unknown shape"),
    }
}

fn render(scene: &Scene, size: usize) -> (RgbImage<f64>, Vec<bool>) {
    let mut noise = Rng::seed_from_u64(scene.noise_seed);
    let n = size * size;
    let mut planes: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut mask = vec![false; n];
    let (_, rgb) = COLORS[scene.color_idx];
    let shape = SHAPES[scene.shape_idx];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let base = 0.03 + 0.05 * noise.next_f64();
            let hit = shape_hit(shape, x as f64 + 0.5, y as f64 + 0.5, scene.cx, scene.cy, scene.radius);
            mask[i] = hit;
            for c in 0..3 {
                planes[c][i] = if hit { rgb[c] } else { base };
            }
        }
    }
    let img = RgbImage::new(size, size, planes).expect("synthetic image shape");
    (img, mask)
}

/// Write images/, masks/, and manifest.json under `out_dir`; returns the
/// manifest path.
pub fn generate_dataset(out_dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&masks_dir)?;

    let mut rng = Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let mut records = Vec::with_capacity(spec.n_records);

    for i in 0..spec.n_records {
        // scene index: paired records reuse the same scene
        let scene_idx = if spec.context_pairs { i / 2 } else { i };
        let mut scene_rng = Rng::seed_from_u64(spec.seed ^ (scene_idx as u64).wrapping_mul(0x9E37));
        let margin = size as f64 / 4.0;
        // size cycles slowest so (size, color, shape) stays unique over 32
        // scenes; the shape radius makes the size word visible
        let size_idx = (scene_idx / (COLORS.len() * SHAPES.len())) % SIZES.len();
        let radius_range = if size_idx == 0 {
            (size as f64 / 8.0, size as f64 / 6.0)
        } else {
            (size as f64 / 5.0, size as f64 / 4.0)
        };
        let scene = Scene {
            color_idx: scene_idx % COLORS.len(),
            shape_idx: (scene_idx / COLORS.len()) % SHAPES.len(),
            size_idx,
            cx: scene_rng.uniform(margin, size as f64 - margin),
            cy: scene_rng.uniform(margin, size as f64 - margin),
            radius: scene_rng.uniform(radius_range.0, radius_range.1),
            noise_seed: scene_rng.next_u64(),
        };
        let ctx_idx = if spec.context_pairs {
            if i % 2 == 0 {
                scene_idx % CONTEXTS.len()
            } else {
                (scene_idx + 3) % CONTEXTS.len()
            }
        } else {
            i % CONTEXTS.len()
        };
        // consume stream position deterministically whether paired or not
        let _ = rng.next_u64();

        let (img, mask) = render(&scene, size);
        let image_id = format!("syn_{i:04}");
        let image_rel = format!("images/{image_id}.png");
        save_png(&img, &images_dir.join(format!("{image_id}.png")))?;
        save_mask_png(size, size, &mask, &masks_dir.join(format!("{image_id}_mask_0.png")))?;

        let (color, _) = COLORS[scene.color_idx];
        let shape = SHAPES[scene.shape_idx];
        let sz = SIZES[scene.size_idx];
        let ctx = CONTEXTS[ctx_idx];
        records.push(ManifestRecord {
            image_id,
            image_path: image_rel,
            captions: vec![format!("a {sz} {color} {shape} in a {ctx}")],
            context_category: ctx.to_string(),
            mask_dir: Some("masks".into()),
        });
    }

    let manifest = DatasetManifest {
        split: "train".into(),
        records,
    };
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::manifest::DatasetManifest;

    #[test]
    fn generates_loadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let path = generate_dataset(dir.path(), &spec).unwrap();
        let (manifest, base) = DatasetManifest::load(&path).unwrap();
        assert_eq!(manifest.records.len(), 16);
        // all 16 (color, shape) combinations distinct
        let mut caps: Vec<&str> = manifest
            .records
            .iter()
            .map(|r| r.captions[0].as_str())
            .collect();
        caps.sort();
        caps.dedup();
        assert_eq!(caps.len(), 16);
        // mask files exist
        for rec in &manifest.records {
            let mask = base
                .join(rec.mask_dir.as_ref().unwrap())
                .join(format!("{}_mask_0.png", rec.image_id));
            assert!(mask.is_file());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let p1 = generate_dataset(d1.path(), &spec).unwrap();
        let p2 = generate_dataset(d2.path(), &spec).unwrap();
        let m1 = std::fs::read_to_string(p1).unwrap();
        let m2 = std::fs::read_to_string(p2).unwrap();
        assert_eq!(m1, m2);
        let i1 = std::fs::read(d1.path().join("images/syn_0003.png")).unwrap();
        let i2 = std::fs::read(d2.path().join("images/syn_0003.png")).unwrap();
        assert_eq!(i1, i2);
    }

    #[test]
    fn paired_64_set_has_distinct_captions() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_records: 64,
            context_pairs: true,
            ..SynthSpec::default()
        };
        let path = generate_dataset(dir.path(), &spec).unwrap();
        let (manifest, _) = DatasetManifest::load(&path).unwrap();
        let mut caps: Vec<&str> = manifest
            .records
            .iter()
            .map(|r| r.captions[0].as_str())
            .collect();
        caps.sort();
        let before = caps.len();
        caps.dedup();
        assert_eq!(caps.len(), before, "all 64 captions must be distinct");
    }

    #[test]
    fn context_pairs_share_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_records: 8,
            context_pairs: true,
            ..SynthSpec::default()
        };
        let path = generate_dataset(dir.path(), &spec).unwrap();
        let (manifest, base) = DatasetManifest::load(&path).unwrap();
        for pair in manifest.records.chunks(2) {
            let a = std::fs::read(base.join(&pair[0].image_path)).unwrap();
            let b = std::fs::read(base.join(&pair[1].image_path)).unwrap();
            assert_eq!(a, b, "paired records must share pixels");
            assert_ne!(
                pair[0].context_category, pair[1].context_category,
                "paired records must differ in context"
            );
            assert_ne!(pair[0].captions[0], pair[1].captions[0]);
        }
    }

    #[test]
    fn scenes_are_dark() {
        let dir = tempfile::tempdir().unwrap();
        let path = generate_dataset(dir.path(), &SynthSpec::default()).unwrap();
        let (manifest, base) = DatasetManifest::load(&path).unwrap();
        let img: RgbImage<f64> =
            crate::imageio::load_png(&base.join(&manifest.records[0].image_path), None).unwrap();
        assert!(img.mean_luminance() < 0.2);
    }
}
