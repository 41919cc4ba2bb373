//! Bit-exact checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!   magic `MTCK` | u32 version=1 | u64 config length + UTF-8 config text
//!   | u32 tensor record count | tensor records
//!   | u32 moment record count | moment records (same record format,
//!     names suffixed `.m` / `.v`)
//!   | u64 step | u32 provenance count | length-prefixed provenance strings
//!
//! A tensor record is: u16 name length, name bytes, u8 dtype code
//! (0 = f32), u8 rank, u32 dims, then the row-major payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::TrainError;
use crate::model::{init, ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTCK";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Model parameters plus optimizer moments, step counter and the
/// append-only list of stages that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// First/second Adam moments, aligned with `params.named_tensors()`.
    pub moments_m: Vec<Vec<f32>>,
    pub moments_v: Vec<Vec<f32>>,
    pub step: u64,
    pub provenance: Vec<String>,
}

impl Checkpoint {
    /// Fresh deterministic initialization with zeroed optimizer state and
    /// empty provenance.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, TrainError> {
        let params = init(config, seed)?;
        let moments_m: Vec<Vec<f32>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        let moments_v = moments_m.clone();
        Ok(Checkpoint {
            params,
            moments_m,
            moments_v,
            step: 0,
            provenance: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config_text = serialize_config(&self.params.config);
        out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(config_text.as_bytes());

        let named = self.params.named_tensors();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, tensor) in &named {
            write_record(&mut out, name, tensor.shape(), tensor.data());
        }
        out.extend_from_slice(&(2 * named.len() as u32).to_le_bytes());
        for (i, (name, tensor)) in named.iter().enumerate() {
            write_record(
                &mut out,
                &format!("{name}.m"),
                tensor.shape(),
                &self.moments_m[i],
            );
            write_record(
                &mut out,
                &format!("{name}.v"),
                tensor.shape(),
                &self.moments_v[i],
            );
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.provenance.len() as u32).to_le_bytes());
        for stage in &self.provenance {
            out.extend_from_slice(&(stage.len() as u16).to_le_bytes());
            out.extend_from_slice(stage.as_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.err_at(0, format!("bad magic {magic:02x?}, expected MTCK")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        let config_len = r.u64("config length")? as usize;
        let config_bytes = r.take(config_len, "config text")?;
        let config_text = std::str::from_utf8(config_bytes)
            .map_err(|e| r.err_here(format!("config text not UTF-8: {e}")))?;
        let config = parse_config(config_text).map_err(|e| r.err_here(e))?;

        let n_tensors = r.u32("tensor count")? as usize;
        let mut tensors: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
        for _ in 0..n_tensors {
            let (name, shape, data) = read_record(&mut r)?;
            tensors.insert(name, (shape, data));
        }
        let n_moments = r.u32("moment count")? as usize;
        let mut moments: HashMap<String, Vec<f32>> = HashMap::new();
        for _ in 0..n_moments {
            let (name, _, data) = read_record(&mut r)?;
            moments.insert(name, data);
        }
        let step = r.u64("step")?;
        let n_prov = r.u32("provenance count")? as usize;
        let mut provenance = Vec::with_capacity(n_prov);
        for _ in 0..n_prov {
            let len = r.u16("provenance length")? as usize;
            let bytes = r.take(len, "provenance string")?;
            provenance.push(
                String::from_utf8(bytes.to_vec())
                    .map_err(|e| r.err_here(format!("provenance not UTF-8: {e}")))?,
            );
        }
        if r.pos != buf.len() {
            return Err(r.err_here(format!("{} trailing bytes", buf.len() - r.pos)));
        }

        // Assemble parameters through the canonical named walk so nothing
        // is partially loaded.
        let mut params = init(&config, 0)?;
        let mut moments_m = Vec::new();
        let mut moments_v = Vec::new();
        for (name, tensor) in params.named_tensors_mut() {
            let (shape, data) = tensors.remove(&name).ok_or_else(|| {
                TrainError::CheckpointFormat {
                    offset: buf.len() as u64,
                    reason: format!("missing tensor {name}"),
                }
            })?;
            if shape != tensor.shape() {
                return Err(TrainError::CheckpointFormat {
                    offset: buf.len() as u64,
                    reason: format!(
                        "tensor {name} has shape {shape:?}, config implies {:?}",
                        tensor.shape()
                    ),
                });
            }
            *tensor = Tensor::new(shape, data).expect("validated shape").with_grad();
            let take = |map: &mut HashMap<String, Vec<f32>>, key: String| {
                map.remove(&key).ok_or_else(|| TrainError::CheckpointFormat {
                    offset: buf.len() as u64,
                    reason: format!("missing moment record {key}"),
                })
            };
            moments_m.push(take(&mut moments, format!("{name}.m"))?);
            moments_v.push(take(&mut moments, format!("{name}.v"))?);
        }
        if !tensors.is_empty() {
            return Err(TrainError::CheckpointFormat {
                offset: buf.len() as u64,
                reason: format!("unexpected tensors: {:?}", tensors.keys().collect::<Vec<_>>()),
            });
        }
        Ok(Checkpoint {
            params,
            moments_m,
            moments_v,
            step,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let buf = fs::read(path)?;
        Self::from_bytes(&buf)
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_record(r: &mut Reader) -> Result<(String, Vec<usize>, Vec<f32>), TrainError> {
    let name_len = r.u16("record name length")? as usize;
    let name_bytes = r.take(name_len, "record name")?;
    let name = String::from_utf8(name_bytes.to_vec())
        .map_err(|e| r.err_here(format!("record name not UTF-8: {e}")))?;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(r.err_here(format!("record {name}: unknown dtype code {dtype}")));
    }
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = r.u32("dim")? as usize;
        numel = numel.saturating_mul(d);
        shape.push(d);
    }
    let payload = r.take(numel * 4, "tensor payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, shape, data))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::CheckpointFormat {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, TrainError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, TrainError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, TrainError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn err_here(&self, reason: String) -> TrainError {
        TrainError::CheckpointFormat {
            offset: self.pos as u64,
            reason,
        }
    }

    fn err_at(&self, offset: u64, reason: String) -> TrainError {
        TrainError::CheckpointFormat { offset, reason }
    }
}

fn serialize_config(cfg: &ModelConfig) -> String {
    format!(
        "vocab_size={}\nd_model={}\nn_heads={}\nd_ff={}\nn_enc_layers={}\nn_dec_layers={}\nmax_context={}\nrel_pos_buckets={}\n",
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.n_enc_layers,
        cfg.n_dec_layers,
        cfg.max_context,
        cfg.rel_pos_buckets
    )
}

fn parse_config(text: &str) -> Result<ModelConfig, String> {
    let mut map = HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("bad config line {line:?}"))?;
        let v: usize = v.parse().map_err(|_| format!("bad value in {line:?}"))?;
        map.insert(k.to_string(), v);
    }
    let mut get = |k: &str| map.remove(k).ok_or_else(|| format!("config missing {k}"));
    Ok(ModelConfig {
        vocab_size: get("vocab_size")?,
        d_model: get("d_model")?,
        n_heads: get("n_heads")?,
        d_ff: get("d_ff")?,
        n_enc_layers: get("n_enc_layers")?,
        n_dec_layers: get("n_dec_layers")?,
        max_context: get("max_context")?,
        rel_pos_buckets: get("rel_pos_buckets")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            vocab_size: 40,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            max_context: 16,
            rel_pos_buckets: 8,
        };
        let mut ckpt = Checkpoint::init(&cfg, 7).unwrap();
        ckpt.step = 42;
        ckpt.provenance = vec!["pretrain".into(), "midtrain".into()];
        ckpt.moments_m[0][3] = 0.25;
        ckpt.moments_v[2][1] = 1.5;
        ckpt
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let ckpt = toy_checkpoint();
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, ckpt);
        // Re-serializing reproduces the file byte for byte.
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.mtck");
        let ckpt = toy_checkpoint();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
    }

    #[test]
    fn corrupt_magic_byte_fails_with_offset() {
        let mut bytes = toy_checkpoint().to_bytes();
        bytes[2] ^= 0xff;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        match err {
            TrainError::CheckpointFormat { offset, reason } => {
                assert_eq!(offset, 0);
                assert!(reason.contains("magic"), "{reason}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_file_fails_cleanly() {
        let bytes = toy_checkpoint().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, TrainError::CheckpointFormat { .. }));
    }

    #[test]
    fn bad_version_is_rejected() {
        let mut bytes = toy_checkpoint().to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        match err {
            TrainError::CheckpointFormat { offset, reason } => {
                assert_eq!(offset, 4);
                assert!(reason.contains("version"), "{reason}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
