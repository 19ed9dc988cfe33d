//! Binary checkpoint container and its JSON sidecar.
//!
//! Layout: the 8-byte magic `NMTCKPT1`, then one record per tensor until
//! end of file. Each record is `name_len: u64 LE`, the UTF-8 name bytes,
//! `rank: u64 LE`, `rank` dimensions as u64 LE, and the row-major tensor
//! data as 32-bit little-endian floats. Tensors are written in name
//! order, so save -> load -> save reproduces the file byte for byte.
//! Run metadata travels in a sidecar at `<path>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet};

pub const MAGIC: &[u8; 8] = b"NMTCKPT1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let io = |e| Error::io(path, e);
        f.write_all(MAGIC).map_err(io)?;
        for (name, tensor) in &self.tensors {
            let bytes = name.as_bytes();
            f.write_all(&(bytes.len() as u64).to_le_bytes()).map_err(io)?;
            f.write_all(bytes).map_err(io)?;
            let shape = tensor.shape();
            f.write_all(&(shape.len() as u64).to_le_bytes()).map_err(io)?;
            for &d in shape {
                f.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for &v in tensor.data() {
                f.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > bytes.len() {
                return Err(Error::format(path, "truncated checkpoint"));
            }
            let slice = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(slice)
        };
        let take_u64 = |cursor: &mut usize| -> Result<u64> {
            let slice = take(cursor, 8)?;
            Ok(u64::from_le_bytes(slice.try_into().expect("8 bytes")))
        };

        if take(&mut cursor, 8)? != MAGIC {
            return Err(Error::format(path, "missing NMTCKPT1 magic"));
        }
        let mut tensors = BTreeMap::new();
        while cursor < bytes.len() {
            let name_len = take_u64(&mut cursor)? as usize;
            let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let rank = take_u64(&mut cursor)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(take_u64(&mut cursor)? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                let slice = take(&mut cursor, 4)?;
                data.push(f32::from_le_bytes(slice.try_into().expect("4 bytes")));
            }
            if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
                return Err(Error::DuplicateKey {
                    key: name,
                    context: format!("checkpoint {}", path.display()),
                });
            }
        }
        Ok(Checkpoint { tensors })
    }
}

/// Sidecar location for a checkpoint path.
pub fn sidecar_path(ckpt: impl AsRef<Path>) -> PathBuf {
    let mut s = ckpt.as_ref().as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_meta<T: Serialize>(meta: &T, ckpt: impl AsRef<Path>) -> Result<()> {
    let path = sidecar_path(ckpt);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Domain(format!("cannot serialize metadata: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_meta<T: DeserializeOwned>(ckpt: impl AsRef<Path>) -> Result<T> {
    let path = sidecar_path(ckpt);
    let json = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&json).map_err(|e| Error::format(&path, format!("bad sidecar: {e}")))
}

/// Run state carried in the sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub model: ModelConfig,
    pub step: u64,
    pub epochs_done: u64,
    pub best_score: Option<f64>,
    pub failures: u32,
    #[serde(default)]
    pub languages: Vec<String>,
}

const PARAM_PREFIX: &str = "param.";

/// Writes a serving checkpoint: parameters only, plus the sidecar.
pub fn save_params(params: &ParameterSet<f32>, meta: &TrainMeta, path: impl AsRef<Path>) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    for (name, tensor) in params.iter() {
        ckpt.tensors
            .insert(format!("{PARAM_PREFIX}{name}"), tensor.clone());
    }
    ckpt.save(&path)?;
    save_meta(meta, &path)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(ParameterSet<f32>, TrainMeta)> {
    let meta: TrainMeta = load_meta(&path)?;
    let ckpt = Checkpoint::load(&path)?;
    let mut tensors = BTreeMap::new();
    for (name, tensor) in ckpt.tensors {
        if let Some(stripped) = name.strip_prefix(PARAM_PREFIX) {
            tensors.insert(stripped.to_string(), tensor);
        }
    }
    let params = ParameterSet::from_tensors(&meta.model, tensors)?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a_path = dir.path().join("a.ckpt");
        let b_path = dir.path().join("b.ckpt");
        let mut ckpt = Checkpoint::default();
        ckpt.tensors.insert(
            "w".into(),
            Tensor::from_vec(&[2, 2], vec![0.1f32, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap(),
        );
        ckpt.tensors
            .insert("b".into(), Tensor::from_vec(&[1, 3], vec![0.0, 1.0, -1.0]).unwrap());
        ckpt.save(&a_path).unwrap();
        let loaded = Checkpoint::load(&a_path).unwrap();
        loaded.save(&b_path).unwrap();
        assert_eq!(
            std::fs::read(&a_path).unwrap(),
            std::fs::read(&b_path).unwrap()
        );
        assert_eq!(loaded, ckpt);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOTACKPT").unwrap();
        assert!(Checkpoint::load(&p).is_err());

        let good = dir.path().join("good.ckpt");
        let mut ckpt = Checkpoint::default();
        ckpt.tensors
            .insert("w".into(), Tensor::from_vec(&[1, 2], vec![1.0f32, 2.0]).unwrap());
        ckpt.save(&good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&p, bytes).unwrap();
        let err = Checkpoint::load(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn params_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig {
            emb_dim: 4,
            rnn_dim: 6,
            vocab_size: 12,
            rnn_dropout: 0.1,
            word_dropout_src: 0.0,
            word_dropout_tgt: 0.0,
            layer_norm: true,
            layers: 1,
        };
        let params = ParameterSet::<f32>::init(&cfg, 7).unwrap();
        let meta = TrainMeta {
            model: cfg,
            step: 123,
            epochs_done: 2,
            best_score: Some(41.5),
            failures: 1,
            languages: vec!["eng".into(), "fra".into()],
        };
        save_params(&params, &meta, &path).unwrap();
        let (loaded, loaded_meta) = load_params(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(loaded_meta, meta);
        assert!(sidecar_path(&path).exists());
    }
}
