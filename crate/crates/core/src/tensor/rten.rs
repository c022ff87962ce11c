//! `RTEN` binary tensor files.
//!
//! Layout: magic `RTEN`, version `0x01`, dtype `0x01` (f32 little-endian),
//! rank byte, `rank` little-endian u64 dims, then the row-major payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RTEN";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an RTEN byte stream; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 7 {
        return Err(err(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(err(format!("unsupported version {:#04x}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(err(format!("unsupported dtype {:#04x}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 8 * rank;
    if bytes.len() < header {
        return Err(err("truncated dims".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = u64::from_le_bytes(bytes[7 + 8 * i..15 + 8 * i].try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| err(format!("dim {d} too large")))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| err("element count overflows".into()))?;
    let payload = &bytes[header..];
    if Some(payload.len()) != n.checked_mul(4) {
        return Err(err(format!(
            "payload is {} bytes, expected {} for shape {shape:?}",
            payload.len(),
            n.saturating_mul(4)
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data).map_err(|e| err(e.to_string()))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..7], b"RTEN\x01\x01\x02");
        assert_eq!(&b[7..15], &2u64.to_le_bytes());
        assert_eq!(&b[15..23], &1u64.to_le_bytes());
        assert_eq!(&b[23..27], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 31);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let t = Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let b = encode(&t);
        let p = Path::new("x.rten");
        assert!(matches!(decode(&b[..b.len() - 1], p), Err(Error::Format { .. })));
        assert!(matches!(decode(&b[..5], p), Err(Error::Format { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        let e = decode(&bad, p).unwrap_err().to_string();
        assert!(e.contains("magic") && e.contains("x.rten"), "{e}");
        let mut bad = b;
        bad[5] = 0x02;
        assert!(decode(&bad, p).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 97) & 0xBFFF_FFFF))
                .collect();
            let t = Tensor::new(&shape, data).unwrap();
            let back = decode(&encode(&t), Path::new("p")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
