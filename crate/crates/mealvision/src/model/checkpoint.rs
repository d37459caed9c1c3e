//! Checkpoint archive: named parameter tensors plus the serialized model
//! configuration, with an optional trailing training-state section.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::net::MealNet;
use super::ModelConfig;
use crate::nn::{ParamKind, Scalar, Shape, Tensor};

const MAGIC: &[u8; 6] = b"MVCK1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config in checkpoint is invalid: {0}")]
    BadConfig(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
}

/// Extra state a trainer can attach to a checkpoint; opaque to the model.
#[derive(Debug, Default, PartialEq)]
pub struct TrainerSection {
    pub state_json: String,
    pub momentum: Vec<(String, Tensor<f32>)>,
}

fn w_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn w_bytes(out: &mut Vec<u8>, b: &[u8]) {
    w_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let len = self.u64()? as usize;
        if len > self.buf.len() {
            return Err(CheckpointError::Corrupt("length field too large".into()));
        }
        self.take(len)
    }
}

fn tensor_bytes<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 4 + 32);
    for d in [t.shape.n, t.shape.c, t.shape.h, t.shape.w] {
        w_u64(&mut out, d as u64);
    }
    for &v in &t.data {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    out
}

fn tensor_from_bytes(b: &[u8]) -> Result<Tensor<f32>, CheckpointError> {
    if b.len() < 32 {
        return Err(CheckpointError::Corrupt("tensor header truncated".into()));
    }
    let dim = |i: usize| u64::from_le_bytes(b[i * 8..(i + 1) * 8].try_into().unwrap()) as usize;
    let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
    let expected = shape.numel() * 4 + 32;
    if b.len() != expected {
        return Err(CheckpointError::Corrupt(format!(
            "tensor payload {} bytes, expected {expected}",
            b.len()
        )));
    }
    let data = b[32..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(shape, data))
}

/// Writes the model (and optionally a trainer section) to one archive.
pub fn save_checkpoint_file(
    net: &MealNet<f32>,
    trainer: Option<&TrainerSection>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let config_json = serde_json::to_string(&net.cfg).expect("config serializes");
    w_bytes(&mut out, config_json.as_bytes());
    w_u64(&mut out, net.store.len() as u64);
    for (_, name, tensor, kind) in net.store.iter() {
        w_bytes(&mut out, name.as_bytes());
        out.push(match kind {
            ParamKind::Weight => 0,
            ParamKind::NoDecay => 1,
            ParamKind::Buffer => 2,
        });
        w_bytes(&mut out, &tensor_bytes(tensor));
    }
    match trainer {
        None => out.push(0),
        Some(t) => {
            out.push(1);
            w_bytes(&mut out, t.state_json.as_bytes());
            w_u64(&mut out, t.momentum.len() as u64);
            for (name, tensor) in &t.momentum {
                w_bytes(&mut out, name.as_bytes());
                w_bytes(&mut out, &tensor_bytes(tensor));
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(&out).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Reads an archive back into a model, verifying that the stored parameter
/// set matches the stored configuration exactly.
pub fn load_checkpoint_file(
    path: &Path,
) -> Result<(MealNet<f32>, Option<TrainerSection>), CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        buf: &buf,
        pos: MAGIC.len(),
    };
    let config_json = std::str::from_utf8(r.bytes()?)
        .map_err(|_| CheckpointError::Corrupt("config not utf-8".into()))?;
    let cfg: ModelConfig = serde_json::from_str(config_json)
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let mut net =
        MealNet::<f32>::new(cfg, 0).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let count = r.u64()? as usize;
    if count != net.store.len() {
        return Err(CheckpointError::ParamMismatch(format!(
            "file has {count} parameters, config implies {}",
            net.store.len()
        )));
    }
    for _ in 0..count {
        let name = std::str::from_utf8(r.bytes()?)
            .map_err(|_| CheckpointError::Corrupt("name not utf-8".into()))?
            .to_string();
        let _kind = r.take(1)?;
        let tensor = tensor_from_bytes(r.bytes()?)?;
        let id = net
            .store
            .find(&name)
            .ok_or_else(|| CheckpointError::ParamMismatch(format!("unknown parameter {name}")))?;
        if net.store.value(id).shape != tensor.shape {
            return Err(CheckpointError::ParamMismatch(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                tensor.shape,
                net.store.value(id).shape
            )));
        }
        *net.store.value_mut(id) = tensor;
    }
    let has_trainer = r.take(1)?[0];
    let trainer = if has_trainer == 1 {
        let state_json = std::str::from_utf8(r.bytes()?)
            .map_err(|_| CheckpointError::Corrupt("trainer state not utf-8".into()))?
            .to_string();
        let n = r.u64()? as usize;
        let mut momentum = Vec::with_capacity(n);
        for _ in 0..n {
            let name = std::str::from_utf8(r.bytes()?)
                .map_err(|_| CheckpointError::Corrupt("momentum name not utf-8".into()))?
                .to_string();
            momentum.push((name, tensor_from_bytes(r.bytes()?)?));
        }
        Some(TrainerSection {
            state_json,
            momentum,
        })
    } else {
        None
    };
    Ok((net, trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn temp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("mealvision-ckpt-{tag}-{}.bin", std::process::id()))
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let net = MealNet::<f32>::new(ModelConfig::tiny(32), 42).unwrap();
        let path = temp_path("roundtrip");
        save_checkpoint_file(&net, None, &path).unwrap();
        let (back, trainer) = load_checkpoint_file(&path).unwrap();
        assert!(trainer.is_none());
        assert_eq!(back.cfg, net.cfg);
        for (id, name, tensor, _) in net.store.iter() {
            let other = back.store.value(back.store.find(name).unwrap());
            assert_eq!(tensor.data, other.data, "param {name} ({id:?})");
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn trainer_section_roundtrips() {
        let net = MealNet::<f32>::new(ModelConfig::tiny(32), 1).unwrap();
        let section = TrainerSection {
            state_json: r#"{"iteration":17}"#.to_string(),
            momentum: vec![(
                "backbone.stem.conv1.w".to_string(),
                Tensor::filled(Shape::new(2, 3, 1, 1), 0.25f32),
            )],
        };
        let path = temp_path("trainer");
        save_checkpoint_file(&net, Some(&section), &path).unwrap();
        let (_, back) = load_checkpoint_file(&path).unwrap();
        assert_eq!(back.unwrap(), section);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corrupt_file_is_rejected() {
        let path = temp_path("corrupt");
        std::fs::write(&path, b"MVCK1\nnot really a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint_file(&path),
            Err(CheckpointError::Corrupt(_) | CheckpointError::BadConfig(_))
        ));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(
            load_checkpoint_file(&path),
            Err(CheckpointError::BadMagic)
        ));
        std::fs::remove_file(&path).unwrap();
    }
}
