//! Binary checkpoint format.
//!
//! ```text
//! "DTRAM1"
//! repeated per parameter:
//!     u32 name length | name bytes (UTF-8) | u32 rank | u64 dims[rank] | f64 values
//! u32 0               (end of parameters)
//! model config as UTF-8 `key=value` lines, to end of file
//! ```
//!
//! All integers and floats are little-endian.

use super::{ModelConfig, RamParams, PARAM_NAMES};
use crate::numerics::{ParamSet, Tensor};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 6] = b"DTRAM1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("unexpected parameter {found:?} (expected {expected:?})")]
    UnexpectedParameter { found: String, expected: String },
    #[error("parameter {name} has shape {found:?}, config implies {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("bad config block: {0}")]
    Config(String),
}

pub fn encode(params: &RamParams, config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for (i, name) in PARAM_NAMES.iter().enumerate() {
        let t = &params.param(i).value;
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(config_to_text(config).as_bytes());
    out
}

pub fn config_to_text(config: &ModelConfig) -> String {
    format!(
        "glimpse_size={}\nhidden_dim={}\nnum_classes={}\nmax_steps={}\nlocation_sigma={}\ndynamic={}\n",
        config.glimpse_size,
        config.hidden_dim,
        config.num_classes,
        config.max_steps,
        config.location_sigma,
        config.dynamic
    )
}

pub fn config_from_text(text: &str) -> Result<ModelConfig, CheckpointError> {
    let mut config = ModelConfig::default();
    let bad = |m: String| CheckpointError::Config(m);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line without '=': {line:?}")))?;
        let parse_err = |_| bad(format!("bad value for {key}: {value:?}"));
        match key {
            "glimpse_size" => config.glimpse_size = value.parse().map_err(parse_err)?,
            "hidden_dim" => config.hidden_dim = value.parse().map_err(parse_err)?,
            "num_classes" => config.num_classes = value.parse().map_err(parse_err)?,
            "max_steps" => config.max_steps = value.parse().map_err(parse_err)?,
            "location_sigma" => {
                config.location_sigma = value
                    .parse()
                    .map_err(|_| bad(format!("bad value for {key}: {value:?}")))?
            }
            "dynamic" => {
                config.dynamic = value
                    .parse()
                    .map_err(|_| bad(format!("bad value for {key}: {value:?}")))?
            }
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    config.validate().map_err(|e| bad(e.to_string()))?;
    Ok(config)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(RamParams, ModelConfig), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
    loop {
        let name_len = r.u32()? as usize;
        if name_len == 0 {
            break;
        }
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let expected = PARAM_NAMES.get(tensors.len()).copied().unwrap_or("<end>");
        if name != expected {
            return Err(CheckpointError::UnexpectedParameter {
                found: name,
                expected: expected.to_string(),
            });
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(8).ok_or(CheckpointError::Truncated(bytes.len()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape.clone(), data).map_err(|_| CheckpointError::ShapeMismatch {
            name: name.clone(),
            found: shape,
            expected: vec![],
        })?;
        tensors.push((name, t));
    }
    if tensors.len() != PARAM_NAMES.len() {
        return Err(CheckpointError::UnexpectedParameter {
            found: "<end>".into(),
            expected: PARAM_NAMES[tensors.len()].into(),
        });
    }
    let text = std::str::from_utf8(&bytes[r.pos..])
        .map_err(|_| CheckpointError::Config("config block is not UTF-8".into()))?;
    let config = config_from_text(text)?;
    let mut params = RamParams::zeros(&config);
    for (i, (name, t)) in tensors.into_iter().enumerate() {
        let slot = params.param_mut(i);
        if slot.value.shape() != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: t.shape().to_vec(),
                expected: slot.value.shape().to_vec(),
            });
        }
        slot.value = t;
    }
    Ok((params, config))
}

pub fn save(path: &Path, params: &RamParams, config: &ModelConfig) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params, config))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RamParams, ModelConfig), CheckpointError> {
    decode(&std::fs::read(path)?)
}
