//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "UNETW1\n"
//! u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rank, rank x u32 dims
//! every tensor's f32 data, in manifest order
//! u64 number of bytes preceding this field
//! ```

use std::fs;
use std::path::Path;

use super::{Tensor, UNetConfig, Weights};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"UNETW1\n";
/// Guards against allocating absurd buffers from a damaged manifest.
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

pub fn write_weights(weights: &Weights) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((weights.tensors.len() as u32).to_le_bytes());
    for t in &weights.tensors {
        out.extend((t.name.len() as u32).to_le_bytes());
        out.extend(t.name.as_bytes());
        out.extend((t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend((d as u32).to_le_bytes());
        }
    }
    for t in &weights.tensors {
        for v in &t.data {
            out.extend(v.to_le_bytes());
        }
    }
    let len = out.len() as u64;
    out.extend(len.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Total file size the manifest implies so far, for truncation reports.
    total: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                expected: (self.pos + n).max(self.total) as u64,
                found: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_weights(bytes: &[u8]) -> Result<Weights> {
    if bytes.len() < MAGIC.len() {
        if MAGIC.starts_with(bytes) {
            return Err(Error::Truncated {
                expected: MAGIC.len() as u64,
                found: bytes.len() as u64,
            });
        }
        return Err(Error::CorruptHeader("missing UNETW1 magic".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptHeader("missing UNETW1 magic".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
        total: 0,
    };
    let count = r.u32()?;
    let mut manifest = Vec::new();
    let mut values: usize = 0;
    for i in 0..count {
        let len = r.u32()?;
        if len > MAX_NAME_LEN {
            return Err(Error::CorruptHeader(format!("tensor {i} name length {len}")));
        }
        let name = std::str::from_utf8(r.take(len as usize)?)
            .map_err(|_| Error::CorruptHeader(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32()?;
        if rank > MAX_RANK {
            return Err(Error::CorruptHeader(format!("tensor `{name}` has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| values.checked_add(n).map(|v| (n, v)));
        let Some((n, v)) = n else {
            return Err(Error::CorruptHeader(format!("tensor `{name}` dims {dims:?} overflow")));
        };
        values = v;
        manifest.push((name, dims, n));
    }
    r.total = values
        .checked_mul(4)
        .and_then(|b| b.checked_add(r.pos + 8))
        .ok_or_else(|| Error::CorruptHeader("manifest size overflows".into()))?;
    if bytes.len() < r.total {
        return Err(Error::Truncated {
            expected: r.total as u64,
            found: bytes.len() as u64,
        });
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, dims, n) in manifest {
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }
    let body = r.pos as u64;
    let trailer = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    if trailer != body {
        return Err(Error::CorruptHeader(format!(
            "length trailer says {trailer} bytes, payload has {body}"
        )));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(Weights { tensors })
}

pub fn save_weights(weights: &Weights, path: &Path) -> Result<()> {
    fs::write(path, write_weights(weights)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<Weights> {
    read_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads and checks every tensor against the layout of `config`.
pub fn load_weights_for(path: &Path, config: &UNetConfig) -> Result<Weights> {
    let w = load_weights(path)?;
    w.check_layout(config)?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init;

    #[test]
    fn round_trip_is_byte_exact() {
        let mut w = init(&UNetConfig::default(), 7).unwrap();
        w.tensors[1].data[0] = f32::MIN_POSITIVE / 3.0;
        w.tensors[1].data[1] = -0.0;
        let bytes = write_weights(&w);
        let back = read_weights(&bytes).unwrap();
        assert_eq!(write_weights(&back), bytes);
        for (a, b) in w.tensors.iter().zip(&back.tensors) {
            let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(&bytes[..7], b"UNETW1\n");
        let n = bytes.len();
        let trailer = u64::from_le_bytes(bytes[n - 8..].try_into().unwrap());
        assert_eq!(trailer, (n - 8) as u64);
    }

    #[test]
    fn every_truncation_is_reported() {
        let c = UNetConfig { depth: 1, base_channels: 2, input_size: 8, ..Default::default() };
        let bytes = write_weights(&init(&c, 1).unwrap());
        for cut in 0..bytes.len() {
            match read_weights(&bytes[..cut]) {
                Err(Error::Truncated { found, .. }) => assert_eq!(found, cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corrupt_header_and_trailer() {
        let c = UNetConfig { depth: 1, base_channels: 2, input_size: 8, ..Default::default() };
        let mut bytes = write_weights(&init(&c, 1).unwrap());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_weights(&bad), Err(Error::CorruptHeader(_))));
        assert!(matches!(read_weights(b"PNG"), Err(Error::CorruptHeader(_))));
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        assert!(matches!(read_weights(&bytes), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn depth_mismatch_names_first_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let deep = UNetConfig::default();
        save_weights(&init(&deep, 1).unwrap(), &path).unwrap();
        assert!(load_weights_for(&path, &deep).is_ok());
        let shallow = UNetConfig { depth: 2, ..deep };
        match load_weights_for(&path, &shallow) {
            // The encoders agree; the bottleneck input width is the first to differ.
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "enc2.conv1.w"),
            other => panic!("{other:?}"),
        }
    }
}
