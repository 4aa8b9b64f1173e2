//! Versioned binary checkpoint.
//!
//! Layout (little-endian): magic `SCSAMCKP`, `u32` version, `u32` length and
//! UTF-8 config JSON, 32-byte SHA-256 of that JSON, `u64` epoch, `u64` step,
//! 32-byte encoder fingerprint (zeros when unknown), `u32` parameter count,
//! then per parameter a `u32`-length name, `u32` rows, `u32` cols and `f64`
//! values. A flag byte says whether optimiser state follows (`u64` step and
//! both moment tensors per parameter). A CRC-32 of everything before it
//! closes the file.

use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use super::config::EngineConfig;
use super::model::Model;
use super::train::Progress;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SCSAMCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Adam>,
    pub progress: Progress,
    pub encoder_fingerprint: Option<[u8; 32]>,
}

impl Checkpoint {
    pub fn config(&self) -> &EngineConfig {
        &self.model.config
    }

    pub fn config_hash(&self) -> [u8; 32] {
        self.model.config.hash()
    }

    pub fn count_trainable(&self) -> usize {
        self.model.count_trainable()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = self.model.config.to_json();
        put_bytes(&mut out, json.as_bytes());
        out.extend_from_slice(&Sha256::digest(json.as_bytes()));
        out.extend_from_slice(&self.progress.epoch.to_le_bytes());
        out.extend_from_slice(&self.progress.step.to_le_bytes());
        out.extend_from_slice(&self.encoder_fingerprint.unwrap_or([0; 32]));
        let store = &self.model.store;
        out.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for (name, t) in store.iter() {
            put_bytes(&mut out, name.as_bytes());
            put_tensor(&mut out, t);
        }
        match &self.optimizer {
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step.to_le_bytes());
                let (m, v) = adam.moments();
                for t in m.iter().chain(v) {
                    put_tensor(&mut out, t);
                }
            }
            None => out.push(0),
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(alloc::format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let json = r.bytes()?;
        let hash = r.take(32)?;
        if Sha256::digest(json).as_slice() != hash {
            return Err(Error::Corrupt("config hash does not match stored config".into()));
        }
        let json = core::str::from_utf8(json).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let config: EngineConfig =
            serde_json::from_str(json).map_err(|e| Error::Format(alloc::format!("bad config: {e}")))?;
        let progress = Progress {
            epoch: r.u64()?,
            step: r.u64()?,
        };
        let fp: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut model = Model::new(&config)?;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(Error::Format(alloc::format!(
                "checkpoint holds {count} parameters, config builds {}",
                model.store.len()
            )));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let t = r.tensor()?;
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Format(alloc::format!("unknown parameter {name:?}")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Format(alloc::format!(
                    "parameter {name:?} is {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            shapes.push(t.shape());
            *slot = t;
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut first = Vec::with_capacity(count);
                let mut second = Vec::with_capacity(count);
                for i in 0..2 * count {
                    let t = r.tensor()?;
                    let want = model.store.get(model.store.ids().nth(i % count).expect("id")).shape();
                    if t.shape() != want {
                        return Err(Error::Format("optimiser state shape mismatch".into()));
                    }
                    if i < count {
                        first.push(t)
                    } else {
                        second.push(t)
                    }
                }
                Some(Adam::from_parts(config.train.adam(), step, first, second))
            }
            f => return Err(Error::Format(alloc::format!("bad optimiser flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after checkpoint body".into()));
        }
        Ok(Self {
            model,
            optimizer,
            progress,
            encoder_fingerprint: (fp != [0; 32]).then_some(fp),
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::from_vec(rows, cols, data))
    }
}
