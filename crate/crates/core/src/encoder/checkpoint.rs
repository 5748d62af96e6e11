//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, seed, config echo as JSON, then every
//! parameter tensor as (name, shape, little-endian f64 data). Writes are
//! atomic (temp file + rename) and a save/load cycle is bit-exact.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::{Error, Result};

use super::{ModelConfig, Parameters};

const MAGIC: &[u8; 8] = b"TWRECKPT";
const FORMAT_VERSION: u32 = 1;

/// A trained model snapshot: the run seed plus all parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub params: Parameters,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());

        let config = serde_json::to_vec(&self.params.config)?;
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(&config);

        let tensors = self.params.tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let shapes = tensor_shapes(&self.params);
        for ((name, data), shape) in tensors.iter().zip(&shapes) {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in *data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        crate::util::write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {version}"
            )));
        }
        let seed = r.u64()?;
        let config_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;
        config.validate()?;

        let mut params = Parameters::init(config, 0);
        let expected = params.tensors().len();
        let count = r.u32()? as usize;
        if count != expected {
            return Err(Error::Checkpoint(format!(
                "tensor count {count} does not match config (expected {expected})"
            )));
        }
        let shapes = tensor_shapes(&params);
        for ((name, data), shape) in params.tensors_mut().into_iter().zip(&shapes) {
            let name_len = r.u16()? as usize;
            let stored = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            if stored != name {
                return Err(Error::Checkpoint(format!(
                    "tensor {stored:?} out of order (expected {name:?})"
                )));
            }
            let rank = r.u8()? as usize;
            if rank != shape.len() {
                return Err(Error::Checkpoint(format!("tensor {name}: rank mismatch")));
            }
            let mut len = 1usize;
            for &want in shape {
                let got = r.u32()? as usize;
                if got != want {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name}: dimension {got} (expected {want})"
                    )));
                }
                len *= got;
            }
            if len != data.len() {
                return Err(Error::Checkpoint(format!("tensor {name}: size mismatch")));
            }
            for v in data.iter_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if !r.done() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { seed, params })
    }
}

fn tensor_shapes(params: &Parameters) -> Vec<Vec<usize>> {
    let two = |a: &Array2<f64>| vec![a.nrows(), a.ncols()];
    let one = |a: &Array1<f64>| vec![a.len()];
    let mut shapes = vec![two(&params.item_embeddings), two(&params.positions)];
    for b in &params.blocks {
        shapes.push(two(&b.attn_query));
        shapes.push(two(&b.attn_key));
        shapes.push(two(&b.attn_value));
        shapes.push(two(&b.attn_output));
        shapes.push(one(&b.ln1_gain));
        shapes.push(one(&b.ln1_bias));
        shapes.push(two(&b.ffn_w1));
        shapes.push(one(&b.ffn_b1));
        shapes.push(two(&b.ffn_w2));
        shapes.push(one(&b.ffn_b2));
        shapes.push(one(&b.ln2_gain));
        shapes.push(one(&b.ln2_bias));
    }
    shapes
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
