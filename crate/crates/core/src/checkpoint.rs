//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `PMTLCKPT`, version `u32`, then the body,
//! then a CRC-32 of everything before it. Strings and tensors are
//! length-prefixed; tensor data is raw `f64` bits, so round trips are exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamKind;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PMTLCKPT";
pub const VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    /// Adam first and second moments.
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub adam_step: u64,
    pub rng: RngState,
    pub params: Vec<NamedTensor>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity {
                offset: self.pos as u64,
                message: format!("need {n} bytes, {} remain", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bad<T>(&self, message: String) -> Result<T> {
        Err(Error::Integrity {
            offset: self.pos as u64,
            message,
        })
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return self.bad(format!("length {n} exceeds remaining data"));
        }
        Ok(n as usize)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Integrity {
            offset: at as u64,
            message: "invalid UTF-8".into(),
        })
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return self.bad(format!("implausible tensor rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos));
        let Some(numel) = numel else {
            return self.bad(format!("tensor {shape:?} exceeds remaining data"));
        };
        let raw = self.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Tensor::new(&shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.bytes(self.config_text.as_bytes());
        w.u64(self.epoch);
        w.u64(self.adam_step);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.params.len() as u64);
        for p in &self.params {
            w.bytes(p.name.as_bytes());
            w.u8(match p.kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            });
            w.tensor(&p.value);
            w.tensor(&p.m);
            w.tensor(&p.v);
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    /// Parses a checkpoint; nothing is returned unless the whole file checks out.
    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Integrity {
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        if buf.len() < r.pos + 4 {
            return r.bad("missing checksum".into());
        }
        let body_end = buf.len() - 4;
        let stored = u32::from_le_bytes(buf[body_end..].try_into().unwrap());
        if crc32fast::hash(&buf[..body_end]) != stored {
            return Err(Error::Integrity {
                offset: body_end as u64,
                message: "checksum mismatch".into(),
            });
        }
        let mut r = Reader {
            buf: &buf[..body_end],
            pos: r.pos,
        };
        let config_text = r.string()?;
        let epoch = r.u64()?;
        let adam_step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let count = r.u64()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let kind = match r.u8()? {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                k => return r.bad(format!("unknown parameter kind {k}")),
            };
            let value = r.tensor()?;
            let m = r.tensor()?;
            let v = r.tensor()?;
            if m.shape() != value.shape() || v.shape() != value.shape() {
                return r.bad(format!("optimizer state shape mismatch for {name}"));
            }
            params.push(NamedTensor {
                name,
                kind,
                value,
                m,
                v,
            });
        }
        if r.pos != body_end {
            return r.bad(format!("{} trailing bytes", body_end - r.pos));
        }
        Ok(Checkpoint {
            config_text,
            epoch,
            adam_step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&buf)
}
