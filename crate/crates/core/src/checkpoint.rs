//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "BLFC"  u32 version
//! u32 config_len, config JSON ({"model": ..., "train": ...}), 32-byte SHA-256 of the JSON
//! u64 epoch, f64 metric
//! u32 param_count, then per parameter:
//!     u32 name_len, name (UTF-8), u32 ndim, ndim × u32 extents, f64 values
//! u64 adam_step, then per parameter (same order): f64 first moments, f64 second moments
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::{FusionModel, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BLFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub metric: f64,
    pub params: ParamStore,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Hex SHA-256 of the serialized configuration.
    pub fn config_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&self.config)?)))
    }

    /// Rebuilds the model and loads the stored parameter values into it.
    pub fn restore(&self) -> Result<(FusionModel, ParamStore)> {
        let mut rng = crate::seed::stream(0, "restore");
        let (model, mut store) = FusionModel::new(self.config.model.clone(), &mut rng)?;
        store
            .load_values(&self.params)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match the configured model: {e}")))?;
        Ok((model, store))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, len_u32(json.len())?);
        out.extend_from_slice(&json);
        out.extend_from_slice(&Sha256::digest(&json));
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.metric.to_le_bytes());
        put_u32(&mut out, len_u32(self.params.len())?);
        for (_, name, value) in self.params.iter() {
            put_u32(&mut out, len_u32(name.len())?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, len_u32(value.shape().len())?);
            for &d in value.shape() {
                put_u32(&mut out, len_u32(d)?);
            }
            put_f64s(&mut out, value.data());
        }
        if self.adam.m.len() != self.params.len() || self.adam.v.len() != self.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            put_f64s(&mut out, m.data());
            put_f64s(&mut out, v.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let json_len = r.u32()? as usize;
        let json = r.take(json_len)?;
        let hash = r.take(32)?;
        if Sha256::digest(json).as_slice() != hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let config: RunConfig = serde_json::from_slice(json)?;
        let epoch = r.u64()? as usize;
        let metric = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut shapes = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Checkpoint(format!("extents of `{name}` overflow")))?;
            let data = r.f64s(n)?;
            params.insert(name, Tensor::new(shape.clone(), data)?)?;
            shapes.push(shape);
        }
        let step = r.u64()?;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for shape in shapes {
            let n = shape.iter().product();
            m.push(Tensor::new(shape.clone(), r.f64s(n)?)?);
            v.push(Tensor::new(shape, r.f64s(n)?)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            epoch,
            metric,
            params,
            adam: AdamState { step, m, v },
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

impl crate::trainer::TrainRun {
    /// Checkpoint of the best validation epoch.
    pub fn best_checkpoint(&self) -> Option<Checkpoint> {
        self.best.as_ref().map(|b| Checkpoint {
            config: RunConfig {
                model: self.model.config.clone(),
                train: self.config.clone(),
            },
            epoch: b.epoch,
            metric: b.metric,
            params: b.params.clone(),
            adam: b.adam.clone(),
        })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::TruncatedPayload {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::Checkpoint("tensor too large".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::ModalityDims;
    use crate::data::TaskKind;
    use crate::fusion::Strategy;
    use crate::model::ArchConfig;

    fn checkpoint() -> Checkpoint {
        let model = ModelConfig {
            strategy: Strategy::Mil,
            arch: ArchConfig {
                d_shared: 4,
                d_attn: 2,
                head_channels: Some(2),
                ..ArchConfig::default()
            },
            dims: ModalityDims {
                dna: 3,
                rna: 2,
                protein: 2,
            },
            task: TaskKind::Regression,
            outputs: 1,
        };
        let (_, params) = FusionModel::new(model.clone(), &mut crate::seed::stream(1, "t")).unwrap();
        let mut adam = AdamState::new(&params);
        adam.step = 7;
        adam.m[0].data_mut()[0] = 0.25;
        Checkpoint {
            config: RunConfig {
                model,
                train: TrainConfig::default(),
            },
            epoch: 3,
            metric: 0.5,
            params,
            adam,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = checkpoint();
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.config, c.config);
        assert_eq!(back.adam, c.adam);
        assert_eq!(back.epoch, 3);
        let (_, store) = back.restore().unwrap();
        for ((_, n1, a), (_, n2, b)) in store.iter().zip(c.params.iter()) {
            assert_eq!((n1, a), (n2, b));
        }
        assert_eq!(c.config_hash().unwrap().len(), 64);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = checkpoint().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[14] ^= 1;
        assert!(Checkpoint::decode(&bad).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
