//! Binary checkpoint format.
//!
//! ```text
//! magic      4 bytes   "BPLM"
//! version    u32 LE    CHECKPOINT_VERSION
//! header_len u64 LE    byte length of the header
//! header     UTF-8 JSON {"config": ModelConfig, "vocab": [word, ...]}
//! weights    f64 LE    parameter vector in `Layout` order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::model::{ModelConfig, ModelParams};
use super::tokenizer::Tokenizer;
use super::TinyLm;

pub const MAGIC: &[u8; 4] = b"BPLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
}

pub fn encode_checkpoint(model: &TinyLm) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.params.config().clone(),
        vocab: model.tokenizer.words().to_vec(),
    })?;
    let weights = model.params.as_slice();
    let mut out = Vec::with_capacity(16 + header.len() + weights.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for w in weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TinyLm> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 16 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header extends past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let body = &bytes[header_end..];
    if !body.len().is_multiple_of(8) {
        return Err(corrupt("weight block is not a whole number of f64 values"));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let expected = super::Layout::new(&header.config).total;
    if data.len() != expected {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {expected} weights, found {}",
            data.len()
        )));
    }
    let params = ModelParams::from_raw(header.config, data)?;
    let tokenizer = Tokenizer::from_vocab(header.vocab)?;
    TinyLm::new(params, tokenizer)
}

pub fn save_checkpoint(model: &TinyLm, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TinyLm> {
    decode_checkpoint(&fs::read(path)?)
}

/// Load and require the stored configuration to equal `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<TinyLm> {
    let model = load_checkpoint(path)?;
    if model.params.config() != expected {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint config {:?} differs from expected {:?}",
            model.params.config(),
            expected
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TinyLm {
        let tok = Tokenizer::from_words(["a b c"]);
        let mut cfg = ModelConfig::new(tok.vocab_size(), 9);
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 16;
        cfg.max_context = 8;
        TinyLm::new(ModelParams::init(cfg).unwrap(), tok).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bplm");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        let bits = |x: &TinyLm| x.params.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode_checkpoint(&model()).unwrap();
        for cut in [3, 15, 40, bytes.len() - 3, bytes.len() - 8] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_checkpoint(&model()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::VersionMismatch { found: 7, .. })
        ));
    }

    #[test]
    fn config_expectation_mismatch() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bplm");
        save_checkpoint(&m, &p).unwrap();
        let mut other = m.params.config().clone();
        other.d_model = 16;
        assert!(matches!(
            load_checkpoint_expecting(&p, &other),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(load_checkpoint_expecting(&p, m.params.config()).is_ok());
    }
}
