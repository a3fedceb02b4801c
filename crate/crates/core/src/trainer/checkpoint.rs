//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! "NCMFCKPT" | u32 version | u32 element bytes (4 or 8)
//! u32 layer count, then (u32 fan_in, u32 fan_out) per layer
//! f64 omega0 | u64 seed | u64 period | u64 iteration | 16 hex bytes config hash
//! u64 n_params | n_params elements
//! u64 n_views  | per view: 6 f64 pose values, u8 rotation flag, u8 translation flag
//! u64 adam step | u64 n | n f64 first moments | n f64 second moments
//! u64 history length | per entry: u64 iteration, 5 f64 losses
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FieldParams, ARCH};
use crate::geometry::ViewPose;
use crate::losses::LossBreakdown;
use crate::real::Real;

use super::AdamState;

const MAGIC: &[u8; 8] = b"NCMFCKPT";
const VERSION: u32 = 1;
/// Number of recent loss entries kept in a checkpoint.
pub const HISTORY_TAIL: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub params: FieldParams<F>,
    pub poses: Vec<ViewPose>,
    pub adam: AdamState,
    pub iteration: usize,
    pub period: usize,
    pub config_hash: String,
    pub history: Vec<(usize, LossBreakdown)>,
}

/// A checkpoint of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let elem = header(&bytes)?;
        match elem {
            4 => Ok(AnyCheckpoint::F32(Checkpoint::from_bytes(&bytes)?)),
            8 => Ok(AnyCheckpoint::F64(Checkpoint::from_bytes(&bytes)?)),
            n => Err(Error::Checkpoint(format!("unsupported element size {n}"))),
        }
    }

    /// Widen to double precision for post-processing.
    pub fn into_f64(self) -> Checkpoint<f64> {
        match self {
            AnyCheckpoint::F64(c) => c,
            AnyCheckpoint::F32(c) => Checkpoint {
                params: c.params.cast(),
                poses: c.poses,
                adam: c.adam,
                iteration: c.iteration,
                period: c.period,
                config_hash: c.config_hash,
                history: c.history,
            },
        }
    }
}

fn header(bytes: &[u8]) -> Result<u32> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing magic header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    Ok(u32::from_le_bytes(bytes[12..16].try_into().unwrap()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, limit: usize, what: &str) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > limit {
            return Err(Error::Checkpoint(format!("implausible {what} count {n}")));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(F::BYTES as u32).to_le_bytes());
        out.extend_from_slice(&(ARCH.layers.len() as u32).to_le_bytes());
        for l in &ARCH.layers {
            out.extend_from_slice(&(l.fan_in as u32).to_le_bytes());
            out.extend_from_slice(&(l.fan_out as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.params.omega0.to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        out.extend_from_slice(&(self.period as u64).to_le_bytes());
        out.extend_from_slice(&(self.iteration as u64).to_le_bytes());
        let mut hash = [b'0'; 16];
        for (h, b) in hash.iter_mut().zip(self.config_hash.bytes()) {
            *h = b;
        }
        out.extend_from_slice(&hash);
        out.extend_from_slice(&(self.params.values.len() as u64).to_le_bytes());
        for v in &self.params.values {
            v.write_le(&mut out);
        }
        out.extend_from_slice(&(self.poses.len() as u64).to_le_bytes());
        for p in &self.poses {
            for v in p.rotation.iter().chain(&p.translation) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(p.rotation_trainable as u8);
            out.push(p.translation_trainable as u8);
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&(self.adam.m.len() as u64).to_le_bytes());
        for v in self.adam.m.iter().chain(&self.adam.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.history.len() as u64).to_le_bytes());
        for (it, l) in &self.history {
            out.extend_from_slice(&(*it as u64).to_le_bytes());
            for v in [l.image, l.motion, l.cycle, l.reg, l.total] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let elem = header(bytes)?;
        if elem as usize != F::BYTES {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {elem}-byte values, expected {}",
                F::BYTES
            )));
        }
        let mut r = Reader { bytes, at: 16 };
        let n_layers = r.u32()? as usize;
        if n_layers != ARCH.layers.len() {
            return Err(Error::Checkpoint(format!("architecture has {n_layers} layers")));
        }
        for l in &ARCH.layers {
            let (fi, fo) = (r.u32()? as usize, r.u32()? as usize);
            if (fi, fo) != (l.fan_in, l.fan_out) {
                return Err(Error::Checkpoint("architecture mismatch".into()));
            }
        }
        let omega0 = r.f64()?;
        let seed = r.u64()?;
        let period = r.u64()? as usize;
        let iteration = r.u64()? as usize;
        let config_hash = String::from_utf8(r.take(16)?.to_vec())
            .map_err(|_| Error::Checkpoint("config hash is not text".into()))?;
        let n = r.len(ARCH.n_params, "parameter")?;
        if n != ARCH.n_params {
            return Err(Error::Checkpoint(format!("{n} parameters, expected {}", ARCH.n_params)));
        }
        let raw = r.take(n * F::BYTES)?;
        let values = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        let n_views = r.len(1 << 20, "view")?;
        let mut poses = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            let v = r.f64s(6)?;
            let flags = r.take(2)?;
            poses.push(ViewPose {
                rotation: [v[0], v[1], v[2]],
                translation: [v[3], v[4], v[5]],
                rotation_trainable: flags[0] != 0,
                translation_trainable: flags[1] != 0,
            });
        }
        let step = r.u64()?;
        let n_adam = r.len(ARCH.n_params + 6 * n_views, "moment")?;
        let m = r.f64s(n_adam)?;
        let v = r.f64s(n_adam)?;
        let n_hist = r.len(1 << 24, "history")?;
        let mut history = Vec::with_capacity(n_hist);
        for _ in 0..n_hist {
            let it = r.u64()? as usize;
            let l = r.f64s(5)?;
            history.push((
                it,
                LossBreakdown {
                    image: l[0],
                    motion: l[1],
                    cycle: l[2],
                    reg: l[3],
                    total: l[4],
                },
            ));
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            params: FieldParams { omega0, seed, values },
            poses,
            adam: AdamState { step, m, v },
            iteration,
            period,
            config_hash,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub(super) fn push_history(&mut self, iter: usize, loss: LossBreakdown) {
        if self.history.len() == HISTORY_TAIL {
            self.history.remove(0);
        }
        self.history.push((iter, loss));
    }
}
