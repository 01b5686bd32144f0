//! Named parameter maps and the binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SCKP" | version u16 | hash_len u16 | config hash (utf-8)
//!        | stage_len u16 | stage tag (utf-8) | seed u64 | records u32
//! record: name_len u16 | name | rank u8 | dims u32 * rank | f32 payload
//! ```
//!
//! Payloads are 32-bit; initialized and trained parameters are kept on the
//! `f32` grid so that a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Module, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Hex SHA-256 digest truncated to 16 characters.
pub fn digest_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    hex::encode(&d[..8])
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StoreMeta {
    pub config_hash: String,
    pub stage: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    pub meta: StoreMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn from_module<M: Module + ?Sized>(m: &M, meta: StoreMeta) -> Self {
        let mut tensors = BTreeMap::new();
        m.visit("", &mut |name, t| {
            let prev = tensors.insert(name.to_string(), t.clone());
            assert!(prev.is_none(), "duplicate parameter name {name}");
        });
        Self { meta, tensors }
    }

    /// Copy every tensor into `m`, requiring identical names and shapes.
    pub fn load_into<M: Module + ?Sized>(&self, m: &mut M) -> Result<()> {
        let mut seen = 0usize;
        let mut err = None;
        m.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                Some(src) if src.shape == t.shape => {
                    t.data.copy_from_slice(&src.data);
                    seen += 1;
                }
                Some(src) => {
                    err = Some(Error::Format(format!(
                        "shape mismatch for {name}: store {:?}, model {:?}",
                        src.shape, t.shape
                    )))
                }
                None => err = Some(Error::Format(format!("missing parameter {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.tensors.len() {
            return Err(Error::Format(format!(
                "store holds {} tensors, model uses {seen}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_str(&mut out, &self.meta.config_hash)?;
        write_str(&mut out, &self.meta.stage)?;
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_str(&mut out, name)?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::Format(format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Format(format!("dimension too large for {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config_hash = read_str(&mut r)?;
        let stage = read_str(&mut r)?;
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let records = u32::from_le_bytes(read_array(&mut r)?);
        let mut tensors = BTreeMap::new();
        for _ in 0..records {
            let name = read_str(&mut r)?;
            let [rank] = read_array::<1>(&mut r)?;
            let shape = (0..rank)
                .map(|_| Ok(u32::from_le_bytes(read_array(&mut r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let need = n * 4;
            if r.len() < need {
                return Err(Error::Truncated {
                    expected: need as u64,
                    found: r.len() as u64,
                });
            }
            let data = r[..need]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            r = &r[need..];
            if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            meta: StoreMeta {
                config_hash,
                stage,
                seed,
            },
            tensors,
        })
    }

    /// Digest of the serialized form; equal stores hash equally.
    pub fn hash(&self) -> Result<String> {
        Ok(digest_hex(&self.to_bytes()?))
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Format(format!("string too long: {} bytes", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Truncated {
            expected: buf.len() as u64,
            found: r.len() as u64,
        });
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_array<const K: usize>(r: &mut &[u8]) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let len = u16::from_le_bytes(read_array(r)?) as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid utf-8 name: {e}")))
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&store.to_bytes()?)?;
    w.flush()?;
    Ok(())
}

/// Load a checkpoint; with `expected_hash`, a different config hash is an error.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<ParameterStore> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let store = ParameterStore::from_bytes(&bytes)?;
    if let Some(expected) = expected_hash {
        if store.meta.config_hash != expected {
            return Err(Error::ConfigHashMismatch {
                expected: expected.to_string(),
                found: store.meta.config_hash,
            });
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::nn::Dense;

    fn sample_store() -> ParameterStore {
        let d = Dense::init(3, 2, &mut math::stream(5));
        ParameterStore::from_module(
            &d,
            StoreMeta {
                config_hash: "abc".into(),
                stage: "stage1".into(),
                seed: 5,
            },
        )
    }

    #[test]
    fn bytes_roundtrip() {
        let s = sample_store();
        let back = ParameterStore::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let bytes = sample_store().to_bytes().unwrap();
        assert!(ParameterStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParameterStore::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn load_into_checks_shapes() {
        let s = sample_store();
        let mut ok = Dense::zeros(3, 2);
        s.load_into(&mut ok).unwrap();
        let mut wrong = Dense::zeros(2, 3);
        assert!(s.load_into(&mut wrong).is_err());
    }
}
