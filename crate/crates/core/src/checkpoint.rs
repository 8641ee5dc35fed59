//! Versioned binary checkpoints: `PHRD`, a format version, a JSON header,
//! then every parameter as name, shape and little-endian `f64` bits.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::data::{AttributeVocab, Vocab};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PhredModel};
use crate::training::{Progress, TrainConfig};

const MAGIC: &[u8; 4] = b"PHRD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub progress: Progress,
    pub vocab: Vec<String>,
    pub attributes: Vec<String>,
    pub vocab_fingerprint: u64,
    pub attribute_fingerprint: u64,
}

/// A model, its parameters and the vocabularies it was trained with.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: PhredModel,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub attributes: AttributeVocab,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for id in self.store.ids() {
            let name = self.store.name(id).as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            let t = self.store.value(id);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Rebuilds the model from the header, then overwrites every parameter.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = read_u64(&mut r)? as usize;
        if header_len > r.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..header_len])?;
        r = &r[header_len..];

        let vocab = Vocab::from_tokens(header.vocab.iter().cloned())?;
        let attributes = AttributeVocab::from_names(header.attributes.clone())?;
        if vocab.fingerprint() != header.vocab_fingerprint || attributes.fingerprint() != header.attribute_fingerprint {
            return Err(Error::Checkpoint("vocabulary fingerprint mismatch".into()));
        }
        let mut store = ParamStore::new();
        let model = PhredModel::new(header.model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;

        let count = read_u64(&mut r)? as usize;
        if count != store.len() {
            return Err(Error::Checkpoint(format!("{count} tensors stored, model has {}", store.len())));
        }
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(Error::Checkpoint(format!("tensor {name} truncated")));
            }
            let data = (0..n).map(|_| read_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            store
                .set(id, Tensor::new(shape, data)?)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            header,
            model,
            store,
            vocab,
            attributes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn header_for(
    model: &PhredModel,
    train: &TrainConfig,
    progress: Progress,
    vocab: &Vocab,
    attributes: &AttributeVocab,
) -> CheckpointHeader {
    CheckpointHeader {
        model: model.config().clone(),
        train: train.clone(),
        progress,
        vocab: vocab.tokens().to_vec(),
        attributes: attributes.names().to_vec(),
        vocab_fingerprint: vocab.fingerprint(),
        attribute_fingerprint: attributes.fingerprint(),
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
