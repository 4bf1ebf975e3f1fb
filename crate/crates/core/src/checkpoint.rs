//! Binary checkpoints: one JSON header line, then little-endian `f64` data.
//!
//! The header lists every tensor with its shape and byte offset into the
//! payload, plus the SHA-256 of the payload. The frozen word vectors are stored
//! as the tensor `embeddings.word`; all other tensors are learned parameters.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error as ThisError;

use crate::autodiff::{ParamStore, Tensor};
use crate::data::Ontology;
use crate::embeddings::{EmbeddingConfig, EmbeddingTable, Vocabulary};
use crate::model::Tracker;
use crate::train::TrainConfig;
use crate::Error;

pub const FORMAT: &str = "copydst-checkpoint";
pub const VERSION: u32 = 1;
const WORD_TENSOR: &str = "embeddings.word";

#[derive(Debug, ThisError)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error("payload hash mismatch: header says {expected}, data hashes to {found}")]
    Hash { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub embeddings: EmbeddingConfig,
    pub vocab: Vec<String>,
    pub ontology: Ontology,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn payload(tracker: &Tracker) -> (Vec<TensorEntry>, Vec<u8>) {
    let emb = tracker.embeddings();
    let word = emb.word_part_matrix();
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, values: &[f64]| {
        entries.push(TensorEntry {
            name: name.to_owned(),
            shape,
            offset: bytes.len() as u64,
        });
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    push(WORD_TENSOR, vec![emb.vocab().len(), emb.config().word_dim], word);
    for (name, t) in tracker.params().iter() {
        push(name, t.shape().to_vec(), t.values());
    }
    (entries, bytes)
}

/// SHA-256 of the tensor payload alone.
pub fn payload_hash(tracker: &Tracker) -> String {
    sha256_hex(&payload(tracker).1)
}

pub fn to_bytes(tracker: &Tracker) -> Vec<u8> {
    let (tensors, data) = payload(tracker);
    let emb = tracker.embeddings();
    let header = Header {
        format: FORMAT.to_owned(),
        version: VERSION,
        config: tracker.config().clone(),
        embeddings: emb.config(),
        vocab: emb.vocab().tokens().to_vec(),
        ontology: tracker.ontology(),
        tensors,
        payload_bytes: data.len() as u64,
        payload_sha256: sha256_hex(&data),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&data);
    out
}

/// Splits off and parses the header without checking the payload.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8]), CheckpointError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Format("no header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(CheckpointError::Version {
            format: header.format,
            version: header.version,
        });
    }
    Ok((header, &bytes[nl + 1..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tracker, Error> {
    let (header, data) = read_header(bytes)?;
    if data.len() as u64 != header.payload_bytes {
        return Err(CheckpointError::Format(format!(
            "payload is {} bytes, header says {}",
            data.len(),
            header.payload_bytes
        ))
        .into());
    }
    let found = sha256_hex(data);
    if found != header.payload_sha256 {
        return Err(CheckpointError::Hash {
            expected: header.payload_sha256,
            found,
        }
        .into());
    }
    let mut word = None;
    let mut params = ParamStore::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * n;
        let raw = data
            .get(start..end)
            .ok_or_else(|| CheckpointError::Format(format!("tensor {} out of bounds", entry.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if entry.name == WORD_TENSOR {
            word = Some(values);
        } else {
            if params.find(&entry.name).is_some() {
                return Err(CheckpointError::Format(format!("duplicate tensor {}", entry.name)).into());
            }
            params.add(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?);
        }
    }
    let word = word.ok_or_else(|| CheckpointError::Format(format!("missing {WORD_TENSOR}")))?;
    let table = EmbeddingTable::from_parts(header.embeddings, Vocabulary::from_tokens(&header.vocab), word)?;
    if header.config.embedding_config() != header.embeddings {
        return Err(CheckpointError::Format("embedding config disagrees with training config".into()).into());
    }
    Tracker::from_parts(header.config, table, params, &header.ontology)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn save(tracker: &Tracker, path: &Path) -> Result<(), CheckpointError> {
    Ok(write_atomic(path, &to_bytes(tracker))?)
}

pub fn load(path: &Path) -> Result<Tracker, Error> {
    let bytes = std::fs::read(path).map_err(CheckpointError::Io)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Tracker {
        let cfg = TrainConfig {
            hidden_size: 3,
            word_dim: 4,
            ngram_dim: 2,
            ..Default::default()
        };
        let mut ont = Ontology::new();
        ont.add_slot("food", ["thai", "north indian"]).unwrap();
        Tracker::new(&cfg, EmbeddingTable::hashed(cfg.embedding_config()), &ont).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let t = tiny();
        let bytes = to_bytes(&t);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_payload_is_rejected() {
        let mut bytes = to_bytes(&tiny());
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::Hash { .. }))
        ));
    }

    #[test]
    fn extension_keeps_payload() {
        let mut t = tiny();
        let before = payload_hash(&t);
        t.extend_candidates("food", "burmese").unwrap();
        assert_eq!(payload_hash(&t), before);
        let back = from_bytes(&to_bytes(&t)).unwrap();
        assert_eq!(back.decoder("food").unwrap().candidates().len(), 3);
    }

    #[test]
    fn header_is_first_line() {
        let bytes = to_bytes(&tiny());
        let (h, data) = read_header(&bytes).unwrap();
        assert_eq!(h.format, FORMAT);
        assert_eq!(h.tensors[0].name, WORD_TENSOR);
        assert_eq!(data.len() as u64, h.payload_bytes);
    }
}
