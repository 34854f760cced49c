//! Binary checkpoints: parameters, optimizer moments and counters.
//!
//! Layout (little-endian): `"KPFC"`, version `u16`, config hash `u64`,
//! config JSON (`u32` length + bytes), epoch `u64`, step `u64`, then
//! `u32` parameter count and per parameter: name, group tag, rank, dims,
//! `f32` data. The optimizer follows as betas/eps `f64`, step `u64` and
//! `m`, `v` per parameter.

use std::path::Path;

use kpt_tensor::nn::{ParamGroup, ParamStore};
use kpt_tensor::optim::{Adam, AdamConfig, AdamSlot};
use kpt_tensor::Tensor;

use super::config::TrainConfig;
use crate::error::{KptError, Result};

pub const MAGIC: [u8; 4] = *b"KPFC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(KptError::Truncated { record: self.section });
        }
        let s = &self.buf[self.pos..self.pos + n];
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(KptError::Truncated { record: self.section })?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u16(&mut out, VERSION);
        put_u64(&mut out, self.config.hash());
        let json = serde_json::to_string(&self.config).expect("config serializes");
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(json.as_bytes());
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.step);
        put_u32(&mut out, self.params.len() as u32);
        for e in self.params.iter() {
            put_u16(&mut out, e.name.len() as u16);
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.group.tag());
            out.push(e.tensor.rank() as u8);
            for &d in e.tensor.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, e.tensor.data());
        }
        let c = &self.optimizer.config;
        for v in [c.beta1, c.beta2, c.eps] {
            put_u64(&mut out, v.to_bits());
        }
        put_u64(&mut out, self.optimizer.step);
        for s in &self.optimizer.slots {
            put_f32s(&mut out, &s.m);
            put_f32s(&mut out, &s.v);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, section: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(KptError::BadMagic { expected: MAGIC, found: magic });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(KptError::VersionMismatch { found: version as u32, expected: VERSION as u32 });
        }
        let hash = r.u64()?;
        r.section = 1;
        let len = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(len)?).map_err(|e| KptError::Parse(format!("checkpoint config: {e}")))?;
        let config: TrainConfig = serde_json::from_str(json).map_err(|e| KptError::Parse(format!("checkpoint config: {e}")))?;
        if config.hash() != hash {
            return Err(KptError::Parse(format!("checkpoint config hash {hash:016x} does not match its config {:016x}", config.hash())));
        }
        let epoch = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for i in 0..count {
            r.section = 2 + i;
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| KptError::Parse(format!("parameter name: {e}")))?;
            let tag = r.u8()?;
            let group = ParamGroup::from_tag(tag).ok_or_else(|| KptError::Parse(format!("unknown parameter group {tag} for {name}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f32s(shape.iter().product())?;
            params.add(name, group, Tensor::new(shape, data)?);
        }
        r.section = 2 + count;
        let config_adam = AdamConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let mut optimizer = Adam::new(&params, config_adam);
        optimizer.step = r.u64()?;
        for (slot, e) in optimizer.slots.iter_mut().zip(params.iter()) {
            let n = e.tensor.numel();
            *slot = AdamSlot { m: r.f32s(n)?, v: r.f32s(n)? };
        }
        if r.pos != buf.len() {
            return Err(KptError::Parse(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
        }
        Ok(Self { config, epoch, step, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename keeps the previous file intact on failure
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| KptError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| KptError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| KptError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
