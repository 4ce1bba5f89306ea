//! File formats: probability-map tensors, class-index masks, RGB images and
//! the dataset manifest.

pub mod manifest;
pub mod npy;
pub mod pnm;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use manifest::{load_manifest, save_manifest, Manifest, ModelEntry, MANIFEST_VERSION};
pub use npy::{read_probmap, write_probmap, write_tensor};
pub use pnm::{
    labels_from_colors, read_mask, read_ppm, render_mask, write_mask, write_ppm, RgbImage,
};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place. Readers never observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn create_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
