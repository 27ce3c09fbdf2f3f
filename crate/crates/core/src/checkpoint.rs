//! Binary checkpoints: model config, named parameter tensors, optimizer
//! moments and the training position.
//!
//! Layout (little-endian):
//!
//! ```text
//! bytes 0..4  magic "PSCK"
//! u32         version (currently 1)
//! u64         iteration
//! u64         model seed
//! u64         train seed
//! u64         adam step
//! u32         config text length, then that many UTF-8 bytes
//! u32         tensor count, then per tensor:
//!             u32 name length, name bytes,
//!             u32 rank, u32 extents...,
//!             f32 data
//! ```
//!
//! Parameter tensors are stored under their registry names; Adam moments
//! under `adam_m/<name>` and `adam_v/<name>`. All stored values are exactly
//! representable in `f32` (the optimizer rounds after every update), so a
//! round-trip is bitwise lossless and resuming reproduces an uninterrupted
//! run.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::params::ParamId;
use crate::tensor::Tensor;
use crate::training::AdamState;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub iteration: u64,
    pub model_seed: u64,
    pub train_seed: u64,
    pub adam_step: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    adam: &AdamState,
    iteration: u64,
    train_seed: u64,
) -> Result<()> {
    let bytes = encode_checkpoint(model, adam, iteration, train_seed)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn encode_checkpoint(
    model: &Model,
    adam: &AdamState,
    iteration: u64,
    train_seed: u64,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&train_seed.to_le_bytes());
    out.extend_from_slice(&adam.step.to_le_bytes());
    let config_text = model.config.to_text();
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    let count = model.params.len() * 3;
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let mut write_tensor = |name: &str, t: &Tensor| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for (i, (name, tensor)) in model.params.iter().enumerate() {
        write_tensor(name, tensor);
        write_tensor(&format!("adam_m/{}", name), &adam.m[i]);
        write_tensor(&format!("adam_v/{}", name), &adam.v[i]);
    }
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, len: usize| -> Result<&[u8]> {
        if bytes.len() < *pos + len {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated: need {} bytes at offset {}", len, pos),
            ));
        }
        let slice = &bytes[*pos..*pos + len];
        *pos += len;
        Ok(slice)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"PSCK\"".to_string()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {}, expected {}", version, VERSION)));
    }
    let iteration = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let model_seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let train_seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let adam_step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cfg_start = pos as u64;
    let cfg_text = std::str::from_utf8(take(&mut pos, cfg_len)?)
        .map_err(|e| Error::format(cfg_start, format!("config text is not UTF-8: {}", e)))?
        .to_string();
    let config = ModelConfig::parse(&cfg_text)?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name_start = pos as u64;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|e| Error::format(name_start, format!("tensor name is not UTF-8: {}", e)))?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut pos, len * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint { version, config, iteration, model_seed, train_seed, adam_step, tensors })
}

impl Checkpoint {
    /// Rebuild the model and optimizer exactly as saved.
    pub fn restore(&self) -> Result<(Model, AdamState)> {
        let mut model = build_model(&self.config, self.model_seed)?;
        self.load_into(&mut model)?;
        let mut adam = AdamState::new(&model.params);
        adam.step = self.adam_step;
        for i in 0..model.params.len() {
            let name = model.params.name(ParamId(i)).to_string();
            adam.m[i] = self.fetch(&format!("adam_m/{}", name), model.params.get(ParamId(i)).shape())?;
            adam.v[i] = self.fetch(&format!("adam_v/{}", name), model.params.get(ParamId(i)).shape())?;
        }
        Ok((model, adam))
    }

    /// Copy stored parameters into an existing model, verifying that every
    /// tensor matches by name and shape.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        for i in 0..model.params.len() {
            let id = ParamId(i);
            let name = model.params.name(id).to_string();
            let shape = model.params.get(id).shape().to_vec();
            let tensor = self.fetch(&name, &shape)?;
            *model.params.get_mut(id) = tensor;
        }
        Ok(())
    }

    fn fetch(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::shape("checkpoint", format!("missing tensor {:?}", name)))?;
        if t.shape() != shape {
            return Err(Error::shape(
                "checkpoint",
                format!("tensor {:?} is {:?}, model expects {:?}", name, t.shape(), shape),
            ));
        }
        Ok(t.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::config::ModelConfig;

    fn micro(seed: u64, channels: usize) -> Model {
        let cfg = ModelConfig::micro(CellKind::Gru, 16, channels, 2).unwrap();
        build_model(&cfg, seed).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = micro(3, 6);
        let adam = AdamState::new(&model.params);
        let bytes = encode_checkpoint(&model, &adam, 42, 7).unwrap();
        let ckpt = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ckpt.iteration, 42);
        assert_eq!(ckpt.train_seed, 7);
        let (restored, adam2) = ckpt.restore().unwrap();
        for ((na, ta), (nb, tb)) in model.params.iter().zip(restored.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "parameter {} drifted", na);
        }
        assert_eq!(adam2.step, 0);
        // Encoding the restored state reproduces identical bytes.
        let bytes2 = encode_checkpoint(&restored, &adam2, 42, 7).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let model = micro(1, 4);
        let adam = AdamState::new(&model.params);
        let mut bytes = encode_checkpoint(&model, &adam, 0, 0).unwrap();
        bytes[4] = 9;
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{}", err);
    }

    #[test]
    fn mismatched_model_names_the_tensor() {
        let model = micro(1, 4);
        let adam = AdamState::new(&model.params);
        let bytes = encode_checkpoint(&model, &adam, 0, 0).unwrap();
        let ckpt = decode_checkpoint(&bytes).unwrap();
        let mut wider = micro(1, 6);
        let err = ckpt.load_into(&mut wider).unwrap_err();
        match err {
            Error::Shape { detail, .. } => assert!(detail.contains("enc/u0"), "{}", detail),
            other => panic!("expected shape error, got {}", other),
        }
    }

    #[test]
    fn truncation_is_a_format_error() {
        let model = micro(2, 4);
        let adam = AdamState::new(&model.params);
        let mut bytes = encode_checkpoint(&model, &adam, 0, 0).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { .. })));
    }
}
