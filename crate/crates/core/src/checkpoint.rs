//! Binary checkpoint container.
//!
//! ```text
//! "BCMF"  u32 version  [32]u8 config digest  u64 count
//! count × { u32 name_len, name, u32 rank, rank × u64 extent, numel × f64 }
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{NetConfig, Network};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BCMF";
pub const VERSION: u32 = 1;

pub fn encode(digest: &[u8; 32], params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(digest);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, e) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = e.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.buf.len(),
            });
        };
        let s = &self.buf[self.pos..end];
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

/// Decoded container: the stored digest and the tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub digest: [u8; 32],
    pub tensors: Vec<(String, Tensor)>,
}

pub fn decode(buf: &[u8]) -> Result<Decoded> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let count = r.u64()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extent overflow")))?;
        let bytes = numel
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extent overflow")))?;
        let data = r
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(Decoded { digest, tensors })
}

pub fn save(path: &Path, net: &Network) -> Result<()> {
    let bytes = encode(&net.config().digest(), &net.params);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint for `cfg`. The stored digest must match the config.
pub fn load(path: &Path, cfg: &NetConfig) -> Result<Network> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(&decode(&buf)?, cfg)
}

pub fn restore(d: &Decoded, cfg: &NetConfig) -> Result<Network> {
    let want = cfg.digest();
    if d.digest != want {
        return Err(Error::DigestMismatch {
            checkpoint: hex::encode(d.digest),
            config: hex::encode(want),
        });
    }
    let template = Network::build(cfg.clone(), 0)?;
    let mut store = ParamStore::new();
    if template.params.len() != d.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            template.params.len(),
            d.tensors.len()
        )));
    }
    for ((name, e), (got_name, t)) in template.params.iter().zip(&d.tensors) {
        if name != got_name || e.tensor.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "found {got_name} {:?} where {name} {:?} was expected",
                t.shape(),
                e.tensor.shape()
            )));
        }
        store.insert(name, t.clone(), e.trainable)?;
    }
    Network::from_params(cfg.clone(), store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Network {
        let mut c = NetConfig::new(3);
        c.stem_channels = 4;
        c.high_channels = 4;
        c.low_channels = 8;
        c.head_channels = 4;
        c.lmfm = crate::lmfm::LmfmConfig::new(8, 4);
        Network::build(c, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let bytes = encode(&n.config().digest(), &n.params);
        let back = restore(&decode(&bytes).unwrap(), n.config()).unwrap();
        assert_eq!(back.params.checksum(), n.params.checksum());
        assert_eq!(encode(&back.config().digest(), &back.params), bytes);
    }

    #[test]
    fn header_layout() {
        let n = net();
        let bytes = encode(&n.config().digest(), &n.params);
        assert_eq!(&bytes[..4], b"BCMF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..40], &n.config().digest());
        assert_eq!(&bytes[40..48], &(n.params.len() as u64).to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let n = net();
        let bytes = encode(&n.config().digest(), &n.params);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn digest_mismatch_is_reported() {
        let n = net();
        let bytes = encode(&n.config().digest(), &n.params);
        let mut other = n.config().clone();
        other.num_classes = 4;
        assert!(matches!(
            restore(&decode(&bytes).unwrap(), &other),
            Err(Error::DigestMismatch { .. })
        ));
    }
}
