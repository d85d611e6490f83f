//! Self-describing binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "ITWCKPT\0"
//! version    u32 LE
//! count      u32 LE
//! per entry:
//!   name_len u32 LE, name (UTF-8)
//!   rank     u32 LE, dims (u64 LE each)
//!   values   f64 LE, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ITWCKPT\0";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_STEP: &str = "adam.step";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NnError::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| NnError::Format("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| NnError::Format(format!("dims overflow for {name}")))?;
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| NnError::Format("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| NnError::Format(format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(NnError::Format("trailing bytes after last entry".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Parameter values only.
    pub fn from_params(store: &ParamStore) -> Self {
        Self {
            entries: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Parameter values followed by Adam moments and the step counter, enough
    /// to resume training exactly.
    pub fn with_optimizer(store: &ParamStore, adam_step: u64) -> Self {
        let mut ck = Self::from_params(store);
        for p in store.iter() {
            ck.entries.push((format!("{ADAM_M}{}", p.name), p.adam_m.clone()));
        }
        for p in store.iter() {
            ck.entries.push((format!("{ADAM_V}{}", p.name), p.adam_v.clone()));
        }
        ck.entries.push((ADAM_STEP.into(), Tensor::scalar(adam_step as f64)));
        ck
    }

    /// Loads values (and optimizer state, if present) into a store whose
    /// parameter names and shapes must match. Returns the Adam step count,
    /// or 0 when the checkpoint holds no optimizer state.
    pub fn restore(&self, store: &mut ParamStore) -> Result<u64> {
        for p in store.iter_mut() {
            let v = self
                .get(&p.name)
                .ok_or_else(|| NnError::Format(format!("checkpoint lacks parameter {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(NnError::Format(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
            if let (Some(m), Some(vv)) = (
                self.get(&format!("{ADAM_M}{}", p.name)),
                self.get(&format!("{ADAM_V}{}", p.name)),
            ) {
                p.adam_m = m.clone();
                p.adam_v = vv.clone();
            }
        }
        Ok(self.get(ADAM_STEP).and_then(Tensor::item).map_or(0, |s| s as u64))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NnError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
