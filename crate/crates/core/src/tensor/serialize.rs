//! Flat binary tensor record:
//! `"RDDT"`, 1-byte rank, `rank` little-endian `u32` dimensions, then the
//! data as little-endian `f64`, row-major.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{LoadError, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"RDDT";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    let rank = u8::try_from(t.rank())
        .map_err(|_| crate::Error::Config(format!("rank {} too large to serialize", t.rank())))?;
    w.write_all(&[rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| crate::Error::Config(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => LoadError::Truncated(what).into(),
        _ => crate::Error::Io(e),
    })
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "tensor magic")?;
    if magic != TENSOR_MAGIC {
        return Err(LoadError::BadMagic { expected: TENSOR_MAGIC, found: magic }.into());
    }
    let mut rank = [0u8; 1];
    read_exact_or(r, &mut rank, "tensor rank")?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut d = [0u8; 4];
        read_exact_or(r, &mut d, "tensor dimensions")?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| LoadError::Malformed(format!("tensor shape {shape:?} overflows")))?;
    if n > (1 << 32) {
        return Err(LoadError::Malformed(format!("tensor of {n} elements is implausibly large")).into());
    }
    let mut raw = vec![0u8; n * 8];
    read_exact_or(r, &mut raw, "tensor data")?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(&[2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expected = b"RDDT".to_vec();
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn truncated_and_bad_magic_are_errors() {
        let t = Tensor::ones(&[3, 3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(
            read_tensor(&mut &cut[..]),
            Err(Error::Load(LoadError::Truncated(_)))
        ));
        buf[0] = b'X';
        assert!(matches!(
            read_tensor(&mut &buf[..]),
            Err(Error::Load(LoadError::BadMagic { .. }))
        ));
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed as f64) * 1e-3 + i as f64).sin()).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut &buf[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
