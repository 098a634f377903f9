//! Binary embedding container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset 0   magic   b"DVE1"
//! offset 4   version u16
//! offset 6   T       u32
//! offset 10  d       u32
//! offset 14  payload T·d × f32, row-major
//! ```
//!
//! Values are stored as 32-bit floats and promoted to `f64` on read.

use std::path::Path;

use crate::error::{Error, ParseErrorKind, Result};
use crate::numerics::Sequence;

pub const MAGIC: [u8; 4] = *b"DVE1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 14;

fn parse_err(offset: usize, kind: ParseErrorKind) -> Error {
    Error::Parse { offset, kind }
}

pub fn encode(seq: &Sequence) -> Result<Vec<u8>> {
    let (t, d) = (seq.steps(), seq.dim());
    let t32 = u32::try_from(t).map_err(|_| Error::Config(format!("sequence length {t} exceeds u32")))?;
    let d32 = u32::try_from(d).map_err(|_| Error::Config(format!("sequence dim {d} exceeds u32")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for (i, &v) in seq.matrix().data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("container value {i} ({v})")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Sequence> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(parse_err(0, ParseErrorKind::BadMagic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(bytes.len(), ParseErrorKind::TruncatedHeader));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(parse_err(4, ParseErrorKind::UnsupportedVersion(version)));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    if t == 0 || d == 0 {
        return Err(parse_err(6, ParseErrorKind::DimensionOverflow));
    }
    let payload_len = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| parse_err(6, ParseErrorKind::DimensionOverflow))?;
    let available = bytes.len() - HEADER_LEN;
    if available < payload_len {
        return Err(parse_err(
            bytes.len(),
            ParseErrorKind::Truncated {
                expected: payload_len,
                got: available,
            },
        ));
    }
    if available > payload_len {
        return Err(parse_err(
            HEADER_LEN + payload_len,
            ParseErrorKind::TrailingBytes(available - payload_len),
        ));
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(parse_err(HEADER_LEN + 4 * i, ParseErrorKind::NonFinite));
        }
        data.push(f64::from(v));
    }
    Sequence::from_vec(t, d, data)
}

pub fn write_container(seq: &Sequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(seq)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Sequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_2x3() -> Sequence {
        Sequence::from_vec(2, 3, vec![0.5, -1.25, 3.0, 1e-3f32 as f64, 7.0, -0.0]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let s = seq_2x3();
        let back = decode(&encode(&s).unwrap()).unwrap();
        assert_eq!(back.matrix().data().len(), 6);
        for (a, b) in s.matrix().data().iter().zip(back.matrix().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dve");
        write_container(&seq_2x3(), &p).unwrap();
        assert_eq!(read_container(&p).unwrap(), seq_2x3());
    }

    #[test]
    fn wrong_magic_fails_at_offset_zero() {
        let mut b = encode(&seq_2x3()).unwrap();
        b[0] = b'X';
        assert!(matches!(
            decode(&b),
            Err(Error::Parse { offset: 0, kind: ParseErrorKind::BadMagic })
        ));
    }

    #[test]
    fn inconsistent_header_is_truncation() {
        let mut b = encode(&seq_2x3()).unwrap();
        b[6..10].copy_from_slice(&3u32.to_le_bytes());
        match decode(&b) {
            Err(Error::Parse { kind: ParseErrorKind::Truncated { expected, got }, .. }) => {
                assert_eq!((expected, got), (36, 24));
            }
            other => panic!("unexpected {other:?}"),
        }
        let short = &encode(&seq_2x3()).unwrap()[..10];
        assert!(matches!(
            decode(short),
            Err(Error::Parse { kind: ParseErrorKind::TruncatedHeader, .. })
        ));
    }

    #[test]
    fn overflowing_dims_are_rejected() {
        let mut b = encode(&seq_2x3()).unwrap();
        b[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        b[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = decode(&b).unwrap_err();
        // 64-bit hosts can represent the product, so this is reported as truncation.
        assert!(matches!(
            err,
            Error::Parse {
                kind: ParseErrorKind::Truncated { .. } | ParseErrorKind::DimensionOverflow,
                ..
            }
        ));
    }

    #[test]
    fn non_finite_values_rejected_on_write() {
        let s = Sequence::from_vec(2, 1, vec![1.0, f64::NAN]).unwrap();
        assert!(encode(&s).is_err());
        let s = Sequence::from_vec(2, 1, vec![1.0, 1e300]).unwrap();
        assert!(encode(&s).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(t in 1usize..8, d in 1usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..t * d).map(|_| f64::from(rng.random_range(-1e6f32..1e6f32))).collect();
            let s = Sequence::from_vec(t, d, data).unwrap();
            let bytes = encode(&s).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
