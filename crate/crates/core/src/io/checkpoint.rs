//! FP checkpoint: magic `2DQF`, version, model config, then a table of
//! named float32 tensors in name order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::binary::{Reader, Writer};
use crate::io::{read_file, write_atomic};
use crate::model::{canonical_name, ModelWeights};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"2DQF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(weights: &ModelWeights) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.config(weights.config());
    w.u32(weights.len() as u32);
    for (name, t) in weights.iter() {
        w.tensor(name, t);
    }
    w.into_bytes()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let config = r.config()?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        let name = canonical_name(&name);
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    r.finish()?;
    ModelWeights::new(config, tensors)
}

pub fn save_checkpoint(path: &Path, weights: &ModelWeights) -> Result<()> {
    write_atomic(path, &encode_checkpoint(weights))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    decode_checkpoint(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_byte_identical() {
        let w = ModelWeights::random(&ModelConfig::toy(2), 3).unwrap();
        let bytes = encode_checkpoint(&w);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn rejects_trailing_bytes() {
        let w = ModelWeights::random(&ModelConfig::toy(2), 3).unwrap();
        let mut bytes = encode_checkpoint(&w);
        bytes.push(0);
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }
}
