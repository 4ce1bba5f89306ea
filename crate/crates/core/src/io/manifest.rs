//! Dataset manifest: binds model names to directories of probability maps.
//!
//! ```json
//! {
//!   "version": "cyto-fuse/1",
//!   "classes": { "names": ["background", "cell"], "palette": [[0, 0, 0], [255, 255, 255]] },
//!   "models": [ { "name": "U", "dir": "probs/U" } ],
//!   "ground_truth_dir": "gt",
//!   "images": ["img_0008", "img_0009"],
//!   "train_images": ["img_0000", "..."]
//! }
//! ```
//!
//! Relative directories resolve against the manifest's own directory. Every
//! image id in `images` needs `<model dir>/<id>.npy` for each model and
//! `<ground_truth_dir>/<id>.pgm`. `train_images` is informational.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::probmap::ClassSet;

pub const MANIFEST_VERSION: &str = "cyto-fuse/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub classes: ClassSet,
    pub models: Vec<ModelEntry>,
    pub ground_truth_dir: String,
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_images: Vec<String>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn new(
        classes: ClassSet,
        models: Vec<ModelEntry>,
        ground_truth_dir: impl Into<String>,
        images: Vec<String>,
    ) -> Self {
        Self {
            version: MANIFEST_VERSION.to_string(),
            classes,
            models,
            ground_truth_dir: ground_truth_dir.into(),
            images,
            train_images: Vec::new(),
            root: PathBuf::new(),
        }
    }

    /// Parses and structurally validates a manifest without touching the
    /// filesystem.
    pub fn from_json(text: &str, root: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let mut manifest: Manifest =
            serde_json::from_str(text).map_err(|source| Error::Manifest {
                path: origin.to_path_buf(),
                source,
            })?;
        manifest.root = root.into();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("manifest serializes");
        out.push('\n');
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!(
                "manifest version '{}' (expected '{MANIFEST_VERSION}')",
                self.version
            )));
        }
        self.classes.check()?;
        if self.models.is_empty() {
            return Err(Error::invalid("manifest lists no models"));
        }
        let mut names = HashSet::new();
        for m in &self.models {
            if m.name.is_empty() || m.name.contains([',', '+']) {
                return Err(Error::invalid(format!(
                    "model name '{}' must be non-empty without ',' or '+'",
                    m.name
                )));
            }
            if !names.insert(m.name.as_str()) {
                return Err(Error::Duplicate {
                    kind: "model name",
                    name: m.name.clone(),
                });
            }
        }
        let mut ids = HashSet::new();
        for id in self.images.iter().chain(&self.train_images) {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(Error::invalid(format!(
                    "image id '{id}' is not a plain file stem"
                )));
            }
            if !ids.insert(id.as_str()) {
                return Err(Error::Duplicate {
                    kind: "image id",
                    name: id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn num_classes(&self) -> usize {
        self.classes.num_classes()
    }

    pub fn model(&self, name: &str) -> Result<&ModelEntry> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::UnknownModel(name.to_string()))
    }

    pub fn model_names(&self) -> impl Iterator<Item = &str> {
        self.models.iter().map(|m| m.name.as_str())
    }

    pub fn probmap_path(&self, model: &ModelEntry, image_id: &str) -> PathBuf {
        self.root.join(&model.dir).join(format!("{image_id}.npy"))
    }

    pub fn ground_truth_path(&self, image_id: &str) -> PathBuf {
        self.root
            .join(&self.ground_truth_dir)
            .join(format!("{image_id}.pgm"))
    }

    /// Every referenced file that does not exist, in manifest order.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        let mut missing = Vec::new();
        for id in &self.images {
            for model in &self.models {
                let path = self.probmap_path(model, id);
                if !path.is_file() {
                    missing.push(path);
                }
            }
            let gt = self.ground_truth_path(id);
            if !gt.is_file() {
                missing.push(gt);
            }
        }
        missing
    }
}

/// Reads, validates and cross-checks a manifest against the filesystem.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::parse(e.valid_up_to(), format!("{}: not UTF-8", path.display())))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest::from_json(text, root, path)?;
    let missing = manifest.missing_files();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    write_atomic(path, manifest.to_json().as_bytes())
}
