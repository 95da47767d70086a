//! Checkpoint container: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f64` values in
//! manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{TaskMeta, Vocab};
use crate::error::{Error, Result};
use crate::model::{FastBert, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::Stage;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"EEXCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Which training stages produced the weights, in order, and the seed used.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stages: Vec<Stage>,
    pub seed: u64,
}

impl Provenance {
    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn with(&self, stage: Stage) -> Self {
        let mut next = self.clone();
        next.stages.push(stage);
        next
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocab: Vocab,
    task: TaskMeta,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: FastBert<T>,
    pub vocab: Vocab,
    pub task: TaskMeta,
    pub provenance: Provenance,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(self.model.params.len());
        for p in self.model.params.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += 8 * p.value.numel() as u64;
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            config: self.model.config().clone(),
            vocab: self.vocab.clone(),
            task: self.task.clone(),
            provenance: self.provenance.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.model.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic: not a checkpoint file".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| fail(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| fail(format!("malformed header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(fail(format!(
                "format version {} is not the supported version {FORMAT_VERSION}",
                header.format_version
            )));
        }
        header
            .config
            .validate()
            .map_err(|e| fail(format!("invalid config: {e}")))?;
        if header.vocab.len() > header.config.vocab_size {
            return Err(fail(format!(
                "vocabulary of {} tokens exceeds vocab_size {}",
                header.vocab.len(),
                header.config.vocab_size
            )));
        }
        if header.task.classes != header.config.classes {
            return Err(fail(format!(
                "task has {} classes, config has {}",
                header.task.classes, header.config.classes
            )));
        }

        let payload = &bytes[header_end..];
        let mut expected = 0u64;
        let mut values = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            if t.offset != expected {
                return Err(fail(format!(
                    "tensor {} at offset {}, expected {expected}",
                    t.name, t.offset
                )));
            }
            let count: usize = t.shape.iter().product();
            let end = expected + 8 * count as u64;
            if end > payload.len() as u64 {
                return Err(fail(format!(
                    "manifest needs {end} payload bytes, file has {}",
                    payload.len()
                )));
            }
            let data = payload[expected as usize..end as usize]
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            values.push((t.name.clone(), Tensor::from_vec(t.shape.clone(), data)?));
            expected = end;
        }
        if expected != payload.len() as u64 {
            return Err(fail(format!(
                "manifest covers {expected} payload bytes, file has {}",
                payload.len()
            )));
        }
        let mut model = FastBert::new(header.config, 0)?;
        model.load_values(values)?;
        Ok(Self {
            model,
            vocab: header.vocab,
            task: header.task,
            provenance: header.provenance,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(checkpoint: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Example, Split};

    fn sample() -> Checkpoint<f64> {
        let d = Dataset::new(vec![Example::labeled("a b c", 0)], Split::Train, TaskMeta::binary()).unwrap();
        let vocab = Vocab::build(&d, 16).unwrap();
        let mut cfg = ModelConfig::desk(2, vocab.len());
        cfg.layers = 2;
        cfg.hidden = 8;
        cfg.ffn = 16;
        cfg.cls_hidden = 4;
        cfg.max_len = 8;
        Checkpoint {
            model: FastBert::new(cfg, 3).unwrap(),
            vocab,
            task: TaskMeta::binary(),
            provenance: Provenance::default().with(Stage::FineTune),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.model.config(), ck.model.config());
        assert_eq!(back.provenance, ck.provenance);
        for (a, b) in ck.model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        let err = Checkpoint::<f64>::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        let err = Checkpoint::<f64>::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("payload"), "{err}");
        let mut bytes = sample().to_bytes().unwrap();
        bytes.extend_from_slice(&[0; 8]);
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_other_versions() {
        let bytes = sample().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        let patched = header.replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert_eq!(patched.len(), header.len());
        let mut bad = bytes.clone();
        bad[16..16 + len].copy_from_slice(patched.as_bytes());
        let err = Checkpoint::<f64>::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn rejects_invalid_config() {
        let bytes = sample().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        let patched = header.replacen("\"heads\":2", "\"heads\":3", 1);
        let mut bad = bytes[..8].to_vec();
        bad.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        bad.extend_from_slice(patched.as_bytes());
        bad.extend_from_slice(&bytes[16 + len..]);
        let err = Checkpoint::<f64>::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("config"), "{err}");
    }

    #[test]
    fn f32_models_round_trip_too() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let small = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        let again = Checkpoint::<f32>::from_bytes(&small.to_bytes().unwrap()).unwrap();
        assert_eq!(again.to_bytes().unwrap(), small.to_bytes().unwrap());
    }
}
