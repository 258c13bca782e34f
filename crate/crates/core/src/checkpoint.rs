//! Binary checkpoint files.
//!
//! ```text
//! "HTLN"  u32 version  u32 tensor_count
//! per tensor: u16 name_len, name, u8 ndim, u32 dims[ndim], f32 payload
//! u32 epoch  u64 rng[4]
//! ```
//!
//! All integers and floats are little-endian. The first tensor,
//! `meta.config`, carries the resolved run configuration as text, one byte
//! per element.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HTLN";
pub const VERSION: u32 = 1;
const CONFIG_TENSOR: &str = "meta.config";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams<f32>,
    pub epoch: u32,
    pub rng_state: [u64; 4],
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.params.named();
        let mut out = Vec::with_capacity(4 * self.params.num_scalars() + 4096);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(named.len() as u32 + 1).to_le_bytes());
        let text = self.config.to_text();
        put_tensor(&mut out, CONFIG_TENSOR, &[text.len()], text.bytes().map(f32::from));
        for (name, t) in &named {
            put_tensor(&mut out, name, t.dims(), t.data().iter().copied());
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        for w in self.rng_state {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let count = r.u32("tensor count")? as usize;

        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| bad("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("dims")? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large".into()))?, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, dims, data));
        }
        let epoch = r.u32("epoch")?;
        let mut rng_state = [0u64; 4];
        for w in &mut rng_state {
            *w = r.u64("rng state")?;
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut iter = tensors.into_iter();
        let config = match iter.next() {
            Some((name, _, data)) if name == CONFIG_TENSOR => {
                let text: String = data.iter().map(|&b| b as u8 as char).collect();
                RunConfig::from_text(&text).map_err(|e| bad(format!("config echo: {e}")))?
            }
            _ => return Err(bad(format!("first tensor must be {CONFIG_TENSOR}"))),
        };

        let mut params = init_params::<f32>(0);
        let mut slots = params.named_mut();
        if iter.len() != slots.len() {
            return Err(bad(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                iter.len()
            )));
        }
        for ((name, dims, data), (want, slot)) in iter.zip(slots.iter_mut()) {
            if &name != want {
                return Err(bad(format!("expected tensor {want}, found {name}")));
            }
            if dims != slot.dims() {
                return Err(bad(format!(
                    "tensor {name} has dims {dims:?}, expected {:?}",
                    slot.dims()
                )));
            }
            **slot = Tensor::new(&dims, data)?;
        }
        drop(slots);
        Ok(Checkpoint {
            config,
            params,
            epoch,
            rng_state,
        })
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
        let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the encoded checkpoint.
    pub fn digest(&self) -> String {
        digest_bytes(&self.to_bytes())
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut config = RunConfig::default();
        config.train.seed = 5;
        Checkpoint {
            config,
            params: init_params(3),
            epoch: 12,
            rng_state: [1, u64::MAX, 3, 0x0123_4567_89ab_cdef],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("c.htln")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"HTLN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let n = init_params::<f32>(0).named().len() as u32 + 1;
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), n);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = Path::new("c.htln");
        let bytes = sample().to_bytes();
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let err = Checkpoint::from_bytes(&v2, p).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..100], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        assert!(Checkpoint::from_bytes(b"PNG\0\0\0\0\0", p).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.htln");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(c.digest().len(), 64);
    }
}
