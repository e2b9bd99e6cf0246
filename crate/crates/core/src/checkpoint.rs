//! Checkpoint container (little-endian):
//!
//! ```text
//! magic  b"APCK"         4 bytes
//! version u32            currently 1
//! config  u32 len + UTF-8 TOML of the run configuration
//! depth, grid            u32 each: the spec the weights are laid out for
//! steps   u64            optimizer step count
//! count   u32            number of tensors, then per tensor:
//!   name   u32 len + UTF-8
//!   rank   u32, dims u64 × rank
//!   data   f32 × numel
//! ```

use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::SubNetSpec;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"APCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub spec: SubNetSpec,
    pub optimizer_steps: u64,
    pub params: ParamStore,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at.saturating_add(n))
            .ok_or_else(|| Error::Checkpoint(format!("byte {}: truncated while reading {what}", self.at)))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.at;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("byte {at}: {what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_toml());
        out.extend_from_slice(&(self.spec.depth as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.grid as u32).to_le_bytes());
        out.extend_from_slice(&self.optimizer_steps.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("byte 0: not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("byte 4: unsupported version {version}")));
        }
        let config = RunConfig::from_toml(&r.string("config")?)?;
        let spec = SubNetSpec::new(r.u32("depth")? as usize, r.u32("grid")? as usize);
        let optimizer_steps = r.u64("step count")?;
        let count = r.u32("tensor count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.saturating_mul(4), &format!("data of `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "byte {}: {} trailing bytes",
                r.at,
                bytes.len() - r.at
            )));
        }
        Ok(Self {
            config,
            spec,
            optimizer_steps,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}
