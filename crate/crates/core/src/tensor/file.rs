//! The `.f32t` tensor file: `"F32T"`, version byte `1`, a `u8` rank, `rank`
//! little-endian `u32` dimensions, then the values as little-endian `f32` in
//! raster order.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"F32T";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor<f32>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::arg(format!("rank {} does not fit in a byte", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::arg(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::format("magic", "not an F32T file"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format("version", format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format("dims", "truncated dimension list"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != numel * 4 {
        return Err(Error::format(
            "data",
            format!("expected {} bytes of values, found {}", numel * 4, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes = encode(t)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&t).unwrap();
        let mut want = b"F32T".to_vec();
        want.extend_from_slice(&[1, 2, 1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let b = encode(&t).unwrap();
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut v = b.clone();
        v[4] = 2;
        assert!(matches!(decode(&v), Err(Error::Format { .. })));
        assert!(decode(b"NOPE\x01\x00").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u32>()) {
            let t = Tensor::from_fn(&dims, |i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff));
            let back = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back.to_le_bytes(), t.to_le_bytes());
            prop_assert_eq!(back.shape(), t.shape());
        }
    }
}
