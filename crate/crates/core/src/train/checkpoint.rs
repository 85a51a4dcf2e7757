//! Named-parameter checkpoint files.
//!
//! ```text
//! CSTR-CHECKPOINT 1
//! model <n>
//! <n bytes of TOML model configuration>
//! params <count>
//! <name> <trainable 0|1> <d0>x<d1>x...
//! ...
//! digest <sha256 of the payload, hex>
//! end
//! ```
//!
//! The payload is every tensor in listed order as little-endian `f32`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{CstrModel, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &str = "CSTR-CHECKPOINT 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("payload digest mismatch: header says {expected}, payload hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("parameter {0} is missing from the checkpoint")]
    Missing(String),
    #[error("checkpoint parameter {0} does not exist in the model")]
    Unknown(String),
    #[error("parameter {name} has shape {found:?}, the model expects {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

fn malformed(m: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(m.into())
}

pub fn write_checkpoint<W: Write>(
    mut out: W,
    model: &CstrModel<f32>,
) -> Result<(), CheckpointError> {
    let cfg = toml::to_string(&model.config).expect("model config serialises");
    let mut payload = Vec::new();
    let mut listing = String::new();
    for (_, e) in model.params.iter() {
        let dims: Vec<String> = e.value.shape().iter().map(usize::to_string).collect();
        listing.push_str(&format!(
            "{} {} {}\n",
            e.name,
            e.trainable as u8,
            dims.join("x")
        ));
        for v in e.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    write!(
        out,
        "{MAGIC}\nmodel {}\n{cfg}\nparams {}\n{listing}",
        cfg.len(),
        model.params.len()
    )?;
    write!(
        out,
        "digest {}\nend\n",
        hex::encode(Sha256::digest(&payload))
    )?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

fn line<R: BufRead>(r: &mut R) -> Result<String, CheckpointError> {
    let mut s = String::new();
    if r.read_line(&mut s)? == 0 {
        return Err(malformed("unexpected end of header"));
    }
    Ok(s.trim_end_matches('\n').to_string())
}

fn keyed<R: BufRead>(r: &mut R, key: &str) -> Result<String, CheckpointError> {
    let l = line(r)?;
    l.strip_prefix(key)
        .and_then(|v| v.strip_prefix(' '))
        .map(str::to_string)
        .ok_or_else(|| malformed(format!("expected {key:?}, found {l:?}")))
}

/// Rebuilds the model recorded in a checkpoint.
pub fn read_checkpoint<R: Read>(input: R) -> Result<CstrModel<f32>, CheckpointError> {
    let mut r = BufReader::new(input);
    if line(&mut r)? != MAGIC {
        return Err(malformed("not a checkpoint file"));
    }
    let n: usize = keyed(&mut r, "model")?
        .parse()
        .map_err(|_| malformed("bad model length"))?;
    let mut cfg = vec![0u8; n];
    r.read_exact(&mut cfg)?;
    if !line(&mut r)?.is_empty() {
        return Err(malformed("model block length is wrong"));
    }
    let text = String::from_utf8(cfg).map_err(|e| malformed(e.to_string()))?;
    let config: ModelConfig = toml::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let count: usize = keyed(&mut r, "params")?
        .parse()
        .map_err(|_| malformed("bad parameter count"))?;
    let mut listing = Vec::with_capacity(count);
    for _ in 0..count {
        let l = line(&mut r)?;
        let parts: Vec<&str> = l.split(' ').collect();
        let [name, _trainable, dims] = parts[..] else {
            return Err(malformed(format!("bad parameter line {l:?}")));
        };
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| malformed(format!("bad shape in {l:?}")))?;
        listing.push((name.to_string(), shape));
    }
    let expected = keyed(&mut r, "digest")?;
    if line(&mut r)? != "end" {
        return Err(malformed("missing end marker"));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let actual = hex::encode(Sha256::digest(&payload));
    if actual != expected {
        return Err(CheckpointError::DigestMismatch { expected, actual });
    }

    let mut model = CstrModel::<f32>::new(config, 0).map_err(|e| malformed(e.to_string()))?;
    let mut seen = vec![false; model.params.len()];
    let mut offset = 0;
    for (name, shape) in listing {
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| CheckpointError::Unknown(name.clone()))?;
        let expected = model.params.value(id).shape().to_vec();
        if shape != expected {
            return Err(CheckpointError::Shape {
                name,
                found: shape,
                expected,
            });
        }
        let numel: usize = shape.iter().product();
        let bytes = payload
            .get(offset..offset + 4 * numel)
            .ok_or_else(|| malformed("payload is shorter than the listing"))?;
        offset += 4 * numel;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *model.params.value_mut(id) =
            Tensor::new(&shape, data).map_err(|e| malformed(e.to_string()))?;
        seen[id.0] = true;
    }
    if offset != payload.len() {
        return Err(malformed("payload is longer than the listing"));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = model
            .params
            .iter()
            .nth(i)
            .map(|(_, e)| e.name.clone())
            .unwrap_or_default();
        return Err(CheckpointError::Missing(name));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &CstrModel<f32>) -> Result<(), CheckpointError> {
    write_checkpoint(std::io::BufWriter::new(fs::File::create(path)?), model)
}

pub fn load_checkpoint(path: &Path) -> Result<CstrModel<f32>, CheckpointError> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn roundtrip_restores_every_parameter() {
        let mut model = CstrModel::<f32>::new(ModelConfig::default(), 3).unwrap();
        for e in model.params.iter_mut() {
            e.value
                .data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v += i as f32 * 1e-3);
        }
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.config, model.config);
        for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn tampered_payload_is_rejected() {
        let model = CstrModel::<f32>::new(ModelConfig::for_variant(Variant::Baseline), 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        let last = buf.len() - 1;
        buf[last] ^= 1;
        assert!(matches!(
            read_checkpoint(&buf[..]),
            Err(CheckpointError::DigestMismatch { .. })
        ));
    }
}
