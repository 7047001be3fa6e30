//! Binary checkpoint format.
//!
//! ```text
//! magic   8 bytes  "MDMCKPT\0"
//! version u32 LE   FORMAT_VERSION
//! arch    u32 LE length + UTF-8 JSON of Architecture
//! count   u64 LE   number of parameters
//! params  count x f64 LE, declared order
//! ```

use std::path::Path;

use super::tiny::{Architecture, TinyDenoiser};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MDMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(net: &TinyDenoiser) -> Result<Vec<u8>> {
    let arch = serde_json::to_vec(net.arch())?;
    let mut out = Vec::with_capacity(24 + arch.len() + 8 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&(net.param_count() as u64).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TinyDenoiser> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let arch_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let arch: Architecture = serde_json::from_slice(cur.take(arch_len)?)
        .map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
    let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    if count != arch.param_count() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, architecture needs {}",
            arch.param_count()
        )));
    }
    let params = cur
        .take(count * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if cur.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    TinyDenoiser::from_params(arch, params)
}

pub fn save(net: &TinyDenoiser, path: &Path) -> Result<()> {
    crate::cli::write_atomic(path, &encode(net)?)
}

pub fn load(path: &Path) -> Result<TinyDenoiser> {
    decode(&std::fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{MASK, SEP};
    use crate::seeded_rng;

    #[test]
    fn reload_gives_bit_identical_forward() {
        let arch = Architecture {
            vocab_size: 9,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 8,
            max_len: 6,
        };
        let net = TinyDenoiser::init(arch, &mut seeded_rng(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.ckpt");
        save(&net, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, net);
        let toks = [4, SEP, MASK, 5];
        assert_eq!(net.tiny_forward(&toks, 2).unwrap(), back.tiny_forward(&toks, 2).unwrap());

        let mut bytes = encode(&net).unwrap();
        bytes[8] = 7;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
        let bytes = encode(&net).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
