//! Dataset manifests: one UTF-8 JSON file per split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    /// Relative to the manifest's directory (or absolute).
    pub image_path: String,
    pub captions: Vec<String>,
    pub context_category: String,
    /// Optional directory of `<image_id>_mask_*.png` files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Load and validate: image files must exist, every record needs at
    /// least one caption and a context category.
    pub fn load(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
        let body = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&body)?;
        let base = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        manifest.validate(&base)?;
        Ok((manifest, base))
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Manifest("manifest has no records".into()));
        }
        for rec in &self.records {
            if rec.captions.is_empty() {
                return Err(Error::Manifest(format!(
                    "record {} has no captions",
                    rec.image_id
                )));
            }
            if rec.context_category.trim().is_empty() {
                return Err(Error::Manifest(format!(
                    "record {} has an empty context category",
                    rec.image_id
                )));
            }
            let img = resolve(base, &rec.image_path);
            if !img.is_file() {
                return Err(Error::Manifest(format!(
                    "image file {} for record {} does not exist",
                    img.display(),
                    rec.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Sorted unique context categories.
    pub fn context_categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self
            .records
            .iter()
            .map(|r| r.context_category.clone())
            .collect();
        cats.sort();
        cats.dedup();
        cats
    }

    pub fn all_captions(&self) -> impl Iterator<Item = &str> {
        self.records
            .iter()
            .flat_map(|r| r.captions.iter().map(|c| c.as_str()))
    }
}

pub fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
