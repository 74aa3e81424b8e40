//! Dataset assembly and durable file formats.
//!
//! Tensors are stored as `CDT1` files, manifests and configs as TOML.
//! Every write goes to a temporary file that is renamed into place.

pub mod assemble;
pub mod store;
pub mod tensor_file;

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CdmError, Result};

pub use assemble::{assemble_eval_tensor, assemble_training_tensor, eval_example, one_step_examples, CHANNELS};
pub use store::{
    encode_checkpoint, read_checkpoint, read_dataset, write_checkpoint, write_dataset, Checkpoint, CounterfactualSet,
    Dataset, DatasetManifest,
};
pub use tensor_file::{DType, TensorFile};

/// Writes `bytes` to `path` so that readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CdmError::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        CdmError::io(path, e)
    })
}

/// SHA-256 (hex) of the canonical JSON serialisation of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("configs serialise to JSON");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| CdmError::Format(format!("{}: {e}", path.display())))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CdmError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CdmError::Format(format!("{}: {e}", path.display())))
}
