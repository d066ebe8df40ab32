//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "WSHDCKPT" | u32 version | u32 len + config text | u32 count
//! count x ( u32 len + name | u32 ndim | ndim x u64 dim | numel x f64 )
//! u64 FNV-1a of every preceding byte
//! ```

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WSHDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Text of the run configuration that produced the parameters.
    pub config: String,
    pub params: ModelParams,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn put_len(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u32).to_le_bytes());
}

pub fn to_bytes(params: &ModelParams, config: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_len(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    put_len(&mut out, params.len());
    for (name, t) in params.iter() {
        put_len(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.ndim());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} is not supported (this build reads version {VERSION})"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != checksum(body) {
        return Err(Error::Checkpoint("checksum mismatch; file is corrupt".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let config = r.string()?;
    let count = r.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} for `{name}`")))?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint { config, params })
}

pub fn save(path: impl AsRef<Path>, params: &ModelParams, config: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(params, config)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("a.weight", Tensor::from_fn([2, 3], |i| (i as f64).sin() * 1e-7));
        p.insert("b", Tensor::new([1], vec![-0.0]).unwrap());
        p.insert("c", Tensor::new([2], vec![f64::MIN_POSITIVE, 1e300]).unwrap());
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = params();
        let bytes = to_bytes(&p, "seed = 7\n");
        let ck = from_bytes(&bytes).unwrap();
        assert_eq!(ck.config, "seed = 7\n");
        for (name, t) in p.iter() {
            assert!(ck.params.get(name).unwrap().bitwise_eq(t));
        }
        assert_eq!(to_bytes(&ck.params, &ck.config), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = to_bytes(&params(), "");
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        assert!(from_bytes(&bytes[..10]).is_err());
        assert!(from_bytes(b"PNG-something-else").is_err());
    }

    #[test]
    fn other_versions_are_rejected_clearly() {
        let mut bytes = to_bytes(&params(), "");
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2") && err.contains("version 1"), "{err}");
    }
}
