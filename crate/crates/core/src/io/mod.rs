//! File formats, datasets and run configuration.

pub mod artifact;
pub mod binary;
pub mod checkpoint;
pub mod dataset;
pub mod image;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::DobiConfig;
use crate::distill::{DistillConfig, LogEntry};
use crate::error::{Error, Result};

pub use artifact::QuantizedModelArtifact;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use dataset::{downsample, list_images, load_images, random_crops};
pub use image::{read_image, write_image};

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Writes to a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// JSON run configuration: `{"dobi": {...}, "distill": {...}}`, every field
/// optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dobi: DobiConfig,
    pub distill: DistillConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        c.dobi.validate()?;
        c.distill.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_json(&String::from_utf8_lossy(&bytes))
    }
}

/// Training log as one JSON object per line.
pub fn log_to_jsonl(log: &[LogEntry]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).expect("log entries serialize") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let c = RunConfig::from_json(r#"{"distill": {"iterations": 5}}"#).unwrap();
        assert_eq!(c.distill.iterations, 5);
        assert_eq!(c.distill.batch_size, DistillConfig::default().batch_size);
        assert_eq!(c.dobi, DobiConfig::default());
        assert!(RunConfig::from_json(r#"{"distil": {}}"#).is_err());
    }

    #[test]
    fn log_lines_use_short_loss_names() {
        let line = log_to_jsonl(&[LogEntry { iter: 1, loss_o: 0.5, loss_f: 0.25, lr: 0.01, val_psnr: None }]);
        assert_eq!(line, "{\"iter\":1,\"loss_O\":0.5,\"loss_F\":0.25,\"lr\":0.01,\"val_psnr\":null}\n");
    }
}
