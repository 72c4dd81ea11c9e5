//! File formats: binary tensors, TOML model manifests, TOML scale files, plus
//! the calibration-set loader and the seeded toy-model generator.

mod manifest;
mod scales;
mod tensor_file;
mod toy;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::calibration::CalibrationSet;
use crate::error::{Error, Location, Result};

pub use manifest::{load_model, save_model};
pub use scales::{load_scales, save_scales, ConfigEcho, ScaleFile};
pub use tensor_file::{decode_tensor, encode_tensor, load_f32, load_tensor, save_tensor, MAGIC, VERSION};
pub use toy::{generate_calibration_data, generate_toy_model, synthetic_input, ToyLayer, ToySpec};

/// File extension of tensor files.
pub const TENSOR_EXT: &str = "eqtn";

pub(crate) fn toml_error(path: &Path, text: &str, err: &toml::de::Error) -> Error {
    let location = match err.span() {
        Some(span) => Location::Line(text[..span.start.min(text.len())].matches('\n').count() + 1),
        None => Location::Unknown,
    };
    Error::Parse {
        path: path.to_path_buf(),
        location,
        message: err.message().to_string(),
    }
}

/// Tensor files in `dir`, sorted by file name.
pub fn list_tensor_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == TENSOR_EXT))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Draw `n` tensor files from `dir`: sorted by name, shuffled with `seed`, first `n` kept.
pub fn load_calibration(dir: &Path, n: usize, seed: u64) -> Result<CalibrationSet> {
    let mut files = list_tensor_files(dir)?;
    if files.len() < n {
        return Err(Error::data(format!(
            "{} holds {} tensor files, {n} requested",
            dir.display(),
            files.len()
        )));
    }
    files.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let samples = files[..n].iter().map(|p| load_f32(p)).collect::<Result<Vec<_>>>()?;
    CalibrationSet::new(samples)
}
