//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MNCK" | u32 version | u64 config length | config JSON (sorted keys)
//! per parameter: u32 name length | name | u8 rank (1 or 4) | dims as u64 | f32 data
//! u32 CRC-32 (IEEE) of everything after the magic
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{MoireNet, NetworkConfig};
use crate::params::{ParamRank, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MNCK";
pub const VERSION: u32 = 1;

pub fn to_bytes(net: &MoireNet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * net.count_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = net.config().canonical_json();
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for p in net.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let s = p.value.shape();
        match p.rank {
            ParamRank::Vector => {
                out.push(1);
                out.extend_from_slice(&(s.c as u64).to_le_bytes());
            }
            ParamRank::Kernel => {
                out.push(4);
                for d in [s.n, s.c, s.h, s.w] {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
            }
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| truncated())
    }
}

fn truncated() -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "checkpoint truncated"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<MoireNet<f32>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(truncated());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&body[MAGIC.len()..]);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 8 };
    let config_len = r.len()?;
    let config: NetworkConfig = serde_json::from_slice(r.take(config_len)?)?;
    let mut store = ParamStore::new();
    while r.pos < body.len() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::ConfigMismatch("parameter name is not UTF-8".into()))?;
        let (rank, shape) = match r.u8()? {
            1 => (ParamRank::Vector, Shape::new(1, r.len()?, 1, 1)),
            4 => (ParamRank::Kernel, Shape::new(r.len()?, r.len()?, r.len()?, r.len()?)),
            other => return Err(Error::ConfigMismatch(format!("parameter {name} has rank {other}"))),
        };
        let n = shape.n.checked_mul(shape.c).and_then(|v| v.checked_mul(shape.h)).and_then(|v| v.checked_mul(shape.w));
        let bytes = n.and_then(|n| n.checked_mul(4)).ok_or_else(truncated)?;
        let data = r.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.insert(name, rank, Tensor::from_vec(shape, data)?)?;
    }
    MoireNet::from_params(&config, store)
}

pub fn save(net: &MoireNet<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<MoireNet<f32>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> MoireNet<f32> {
        let cfg = NetworkConfig { widths: vec![8, 16], scales: 2, groups: 2, seed: 1, ..NetworkConfig::default() };
        MoireNet::build(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = net();
        let bytes = to_bytes(&a);
        let b = from_bytes(&bytes).unwrap();
        assert_eq!(a.config(), b.config());
        for (p, q) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(p.name, q.name);
            assert!(p.value.bit_eq(&q.value));
        }
        assert_eq!(to_bytes(&b), bytes);
    }

    #[test]
    fn payload_length_matches_param_count() {
        let a = net();
        let bytes = to_bytes(&a);
        let config_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let headers: usize =
            a.params().iter().map(|p| 4 + p.name.len() + 1 + 8 * if p.rank == ParamRank::Vector { 1 } else { 4 }).sum();
        assert_eq!(bytes.len() - 16 - config_len - headers - 4, 4 * a.count_params());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_bytes(&net());
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x10;
        assert!(matches!(from_bytes(&bad), Err(Error::CrcMismatch { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(from_bytes(&magic), Err(Error::BadMagic)));
        assert!(matches!(from_bytes(&bytes[..3]), Err(Error::BadMagic)));

        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(from_bytes(&version), Err(Error::VersionUnsupported(2))));

        assert!(from_bytes(&bytes[..bytes.len() / 3]).is_err());
    }

    #[test]
    fn config_mismatch_detected() {
        let a = net();
        let bytes = to_bytes(&a);
        let config_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let records = &bytes[16 + config_len..bytes.len() - 4];
        let other = NetworkConfig { fsas_enabled: false, ..a.config().clone() }.canonical_json();
        let mut forged = bytes[..8].to_vec();
        forged.extend_from_slice(&(other.len() as u64).to_le_bytes());
        forged.extend_from_slice(other.as_bytes());
        forged.extend_from_slice(records);
        let crc = crc32fast::hash(&forged[4..]);
        forged.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(from_bytes(&forged), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mnck");
        save(&net(), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), to_bytes(&net()));
        assert!(load(&path).is_ok());
        assert!(matches!(load(dir.path().join("missing")), Err(Error::Io(_))));
    }
}
