//! Little-endian binary dataset files: magic `KPF1`, a version byte, a
//! record count, then fixed-order records.

use std::path::Path;

use super::scene::SceneSample;
use super::skeleton::{NUM_ARTICULATED, NUM_JOINTS};
use crate::error::{KptError, Result};

pub const MAGIC: [u8; 4] = *b"KPF1";
pub const VERSION: u8 = 1;

fn put_f64s(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_sample(buf: &mut Vec<u8>, s: &SceneSample) {
    buf.extend_from_slice(&s.rng_seed.to_le_bytes());
    buf.extend_from_slice(&(s.width as u32).to_le_bytes());
    buf.extend_from_slice(&(s.height as u32).to_le_bytes());
    buf.extend(s.hand_present.iter().map(|&b| b as u8));
    buf.push(s.object_present as u8);
    buf.push(s.object_id);
    buf.extend(s.visibility.iter().flatten().map(|&b| b as u8));
    put_f64s(buf, [s.shape_scale]);
    put_f64s(buf, s.intrinsics.iter().flatten().copied());
    put_f64s(buf, s.z_root);
    put_f64s(buf, s.joints3d.iter().flatten().flatten().copied());
    put_f64s(buf, s.joints2d.iter().flatten().flatten().copied());
    put_f64s(buf, s.theta.iter().flatten().flatten().copied());
    put_f64s(buf, s.object_pose.iter().flatten().copied());
    for v in &s.image {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_dataset(samples: &[SceneSample]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        encode_sample(&mut buf, s);
    }
    buf
}

pub fn write_dataset(path: &Path, samples: &[SceneSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(KptError::InvalidConfig("refusing to write an empty dataset".into()));
    }
    std::fs::write(path, encode_dataset(samples)).map_err(|e| KptError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(KptError::Truncated { record: self.record });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn fill<const N: usize>(&mut self) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.f64()?;
        }
        Ok(out)
    }

    fn flag(&mut self) -> Result<bool> {
        Ok(self.take(1)?[0] != 0)
    }
}

fn decode_sample(c: &mut Cursor) -> Result<SceneSample> {
    let rng_seed = u64::from_le_bytes(c.array()?);
    let width = c.u32()? as usize;
    let height = c.u32()? as usize;
    let hand_present = [c.flag()?, c.flag()?];
    let object_present = c.flag()?;
    let object_id = c.take(1)?[0];
    let mut visibility = [[false; NUM_JOINTS]; 2];
    for v in visibility.iter_mut().flatten() {
        *v = c.flag()?;
    }
    let shape_scale = c.f64()?;
    let mut intrinsics = [[0.0; 3]; 3];
    for row in &mut intrinsics {
        *row = c.fill()?;
    }
    let z_root = c.fill()?;
    let mut joints3d = [[[0.0; 3]; NUM_JOINTS]; 2];
    for p in joints3d.iter_mut().flatten() {
        *p = c.fill()?;
    }
    let mut joints2d = [[[0.0; 2]; NUM_JOINTS]; 2];
    for p in joints2d.iter_mut().flatten() {
        *p = c.fill()?;
    }
    let mut theta = [[[0.0; 3]; NUM_ARTICULATED]; 2];
    for p in theta.iter_mut().flatten() {
        *p = c.fill()?;
    }
    let mut object_pose = [[0.0; 4]; 4];
    for row in &mut object_pose {
        *row = c.fill()?;
    }
    let n = 3usize.checked_mul(width).and_then(|v| v.checked_mul(height)).ok_or(KptError::Truncated { record: c.record })?;
    let raw = c.take(n.checked_mul(4).ok_or(KptError::Truncated { record: c.record })?)?;
    let image = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4"))).collect();
    Ok(SceneSample {
        rng_seed,
        width,
        height,
        image,
        joints3d,
        joints2d,
        visibility,
        hand_present,
        intrinsics,
        z_root,
        theta,
        shape_scale,
        object_present,
        object_id,
        object_pose,
    })
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SceneSample>> {
    if bytes.len() < 4 {
        let mut found = [0u8; 4];
        found[..bytes.len()].copy_from_slice(bytes);
        return Err(KptError::BadMagic { expected: MAGIC, found });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if found != MAGIC {
        return Err(KptError::BadMagic { expected: MAGIC, found });
    }
    let mut c = Cursor { bytes, pos: 4, record: 0 };
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(KptError::VersionMismatch { found: version as u32, expected: VERSION as u32 });
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        c.record = i;
        out.push(decode_sample(&mut c)?);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let bytes = std::fs::read(path).map_err(|e| KptError::io(path, e))?;
    decode_dataset(&bytes)
}
