//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CCRNN"  u8 version  u64 payload_len  payload  u64 checksum
//! payload = u64 header_len  header (UTF-8 JSON)  matrices (f64 LE, row-major)
//! ```
//!
//! The header holds the training config, vocabularies, n-gram index
//! entries, schedule state and the name and shape of every matrix, which
//! follow in [`Model::matrices`] order. The checksum is the first 8 bytes
//! of the SHA-256 digest of the payload read as a little-endian `u64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CharVocab, WordVocab};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{CharRnn, CondRnn, MixedRnn, Model, ModelKind, Recurrence};
use crate::ngram::{IndexEntry, NGramIndex};
use crate::tensor::Matrix;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 5] = b"CCRNN";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub chars: CharVocab,
    pub words: Option<WordVocab>,
    pub model: Model,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    n_max: usize,
    theta: u64,
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: TrainConfig,
    chars: CharVocab,
    words: Option<WordVocab>,
    index: Option<IndexHeader>,
    lambda: Option<f64>,
    state: TrainState,
    matrices: Vec<(String, usize, usize)>,
}

fn checksum(payload: &[u8]) -> u64 {
    let digest = Sha256::digest(payload);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn header_err(e: impl std::fmt::Display) -> Error {
    CheckpointError::Header(e.to_string()).into()
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mats = self.model.matrices();
        let header = Header {
            kind: self.model.kind(),
            config: self.config.clone(),
            chars: self.chars.clone(),
            words: self.words.clone(),
            index: match &self.model {
                Model::Cond(p) => Some(IndexHeader {
                    n_max: p.index.n_max(),
                    theta: p.index.theta(),
                    entries: p.index.entries().to_vec(),
                }),
                _ => None,
            },
            lambda: match &self.model {
                Model::Mixed(p) => Some(p.lambda),
                _ => None,
            },
            state: self.state.clone(),
            matrices: mats
                .iter()
                .map(|(name, m)| (name.to_string(), m.rows(), m.cols()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(header_err)?;
        let floats: usize = mats.iter().map(|(_, m)| m.data().len()).sum();
        let mut payload = Vec::with_capacity(8 + json.len() + 8 * floats);
        payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
        payload.extend_from_slice(&json);
        for (_, m) in &mats {
            for v in m.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(MAGIC.len() + 1 + 8 + payload.len() + 8);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&checksum(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let prefix = MAGIC.len() + 1 + 8;
        if bytes.len() < MAGIC.len() {
            return Err(CheckpointError::Truncated.into());
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        if bytes.len() < prefix {
            return Err(CheckpointError::Truncated.into());
        }
        let version = bytes[MAGIC.len()];
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let payload_len = read_u64(&bytes[MAGIC.len() + 1..prefix]) as usize;
        let end = prefix.checked_add(payload_len).ok_or(CheckpointError::Truncated)?;
        if bytes.len() < end.saturating_add(8) {
            return Err(CheckpointError::Truncated.into());
        }
        if bytes.len() > end + 8 {
            return Err(header_err("trailing bytes after checksum"));
        }
        let payload = &bytes[prefix..end];
        if checksum(payload) != read_u64(&bytes[end..end + 8]) {
            return Err(CheckpointError::Checksum.into());
        }
        Self::parse_payload(payload)
    }

    fn parse_payload(payload: &[u8]) -> Result<Self> {
        if payload.len() < 8 {
            return Err(header_err("payload too short"));
        }
        let header_len = read_u64(&payload[..8]) as usize;
        let json = payload
            .get(8..8usize.saturating_add(header_len))
            .ok_or_else(|| header_err("header length exceeds payload"))?;
        let header: Header = serde_json::from_slice(json).map_err(header_err)?;
        let mut data = &payload[8 + header_len..];
        let mut mats = Vec::with_capacity(header.matrices.len());
        for (name, rows, cols) in &header.matrices {
            let n = rows
                .checked_mul(*cols)
                .and_then(|n| n.checked_mul(8))
                .filter(|&n| n <= data.len())
                .ok_or_else(|| header_err(format!("matrix {name} runs past the payload")))?;
            let values = data[..n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
            mats.push(Matrix::from_vec(*rows, *cols, values.collect())?);
            data = &data[n..];
        }
        if !data.is_empty() {
            return Err(header_err("unused bytes after the last matrix"));
        }
        let model = assemble(&header, mats).map_err(header_err)?;
        if model.matrices().iter().map(|(n, _)| *n).ne(header.matrices.iter().map(|(n, _, _)| n.as_str())) {
            return Err(header_err("matrix names do not match the model layout"));
        }
        Ok(Checkpoint {
            config: header.config,
            chars: header.chars,
            words: header.words,
            model,
            state: header.state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and rejects checkpoints holding a different architecture.
    pub fn load_expecting(path: impl AsRef<Path>, kind: ModelKind) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.kind() != kind {
            return Err(CheckpointError::KindMismatch {
                expected: kind.to_string(),
                found: ckpt.kind().to_string(),
            }
            .into());
        }
        Ok(ckpt)
    }
}

fn read_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

fn assemble(header: &Header, mats: Vec<Matrix>) -> Result<Model> {
    let mut it = mats.into_iter();
    let mut next = || it.next().ok_or_else(|| Error::Input("missing matrix".into()));
    let d = header.chars.len();
    let model = match header.kind {
        ModelKind::Plain => {
            let core = Recurrence::new(next()?, next()?, d)?;
            Model::Plain(CharRnn::new(core, next()?)?)
        }
        ModelKind::Cond => {
            let ix = header
                .index
                .as_ref()
                .ok_or_else(|| Error::Input("conditional checkpoint without index".into()))?;
            let index = NGramIndex::from_entries(ix.entries.clone(), ix.n_max, ix.theta)?;
            let core = Recurrence::new(next()?, next()?, d)?;
            let bank = (0..index.len()).map(|_| next()).collect::<Result<Vec<_>>>()?;
            Model::Cond(CondRnn::new(core, bank, index)?)
        }
        ModelKind::Mixed => {
            let lambda = header
                .lambda
                .ok_or_else(|| Error::Input("mixed checkpoint without interpolation weight".into()))?;
            let core = Recurrence::new(next()?, next()?, d)?;
            let out = next()?;
            let cond = next()?;
            let embed = next()?;
            let k = embed.rows();
            let word = Recurrence::new(embed, next()?, k)?;
            Model::Mixed(MixedRnn::new(core, out, cond, word, next()?, lambda)?)
        }
    };
    if next().is_ok() {
        return Err(Error::Input("more matrices than the model uses".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::{build_index, count_ngrams};
    use crate::tensor::Rng;

    fn plain() -> Checkpoint {
        let mut rng = Rng::new(3);
        let config = TrainConfig {
            hidden: 3,
            ..TrainConfig::default()
        };
        Checkpoint {
            state: TrainState::new(&config, &rng),
            config,
            chars: CharVocab::build("abc").unwrap(),
            words: None,
            model: Model::Plain(CharRnn::init(3, 3, &mut rng)),
        }
    }

    #[test]
    fn round_trip_all_kinds() {
        let base = plain();
        assert_eq!(Checkpoint::from_bytes(&base.to_bytes().unwrap()).unwrap(), base);

        let mut rng = Rng::new(5);
        let index = build_index(&count_ngrams(&[0, 1, 2, 0, 1], 2).unwrap(), 1, 2).unwrap();
        let cond = Checkpoint {
            model: Model::Cond(CondRnn::init(3, 3, index, &mut rng)),
            ..base.clone()
        };
        assert_eq!(Checkpoint::from_bytes(&cond.to_bytes().unwrap()).unwrap(), cond);

        let mixed = Checkpoint {
            words: Some(WordVocab::build("x y z", 4).unwrap()),
            model: Model::Mixed(MixedRnn::init(3, 3, 4, 2, 3, 0.3, &mut rng).unwrap()),
            ..base
        };
        assert_eq!(Checkpoint::from_bytes(&mixed.to_bytes().unwrap()).unwrap(), mixed);
    }

    #[test]
    fn distinct_load_errors() {
        let bytes = plain().to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));

        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::Version { found: 9, .. }))
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(CheckpointError::Truncated))
        ));

        for pos in [20, bytes.len() / 2, bytes.len() - 9] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(
                matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(CheckpointError::Checksum))),
                "byte {pos}"
            );
        }
    }

    #[test]
    fn kind_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        plain().save(&path).unwrap();
        assert!(Checkpoint::load_expecting(&path, ModelKind::Plain).is_ok());
        assert!(matches!(
            Checkpoint::load_expecting(&path, ModelKind::Cond),
            Err(Error::Checkpoint(CheckpointError::KindMismatch { .. }))
        ));
    }
}
