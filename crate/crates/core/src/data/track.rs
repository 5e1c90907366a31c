//! Binary embedding-track files.
//!
//! Layout (little-endian):
//!
//! | offset | size            | field                               |
//! |--------|-----------------|-------------------------------------|
//! | 0      | 4               | magic `BLF1`                        |
//! | 4      | 1               | modality (0 = DNA, 1 = RNA, 2 = protein) |
//! | 5      | 4               | `length` (u32)                      |
//! | 9      | 4               | `dim` (u32)                         |
//! | 13     | 4·length·dim    | `f32` values, row-major             |

use std::fs;
use std::path::Path;

use crate::alignment::{EmbeddingTrack, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TRACK_MAGIC: &[u8; 4] = b"BLF1";
pub const TRACK_HEADER_LEN: usize = 13;

/// Serializes a track, narrowing values to `f32`.
pub fn encode_track(track: &EmbeddingTrack) -> Result<Vec<u8>> {
    let (len, dim) = (track.len(), track.dim());
    let (l32, d32) = match (u32::try_from(len), u32::try_from(dim)) {
        (Ok(l), Ok(d)) => (l, d),
        _ => {
            return Err(Error::DimOverflow {
                length: len as u64,
                dim: dim as u64,
            })
        }
    };
    let mut out = Vec::with_capacity(TRACK_HEADER_LEN + 4 * len * dim);
    out.extend_from_slice(TRACK_MAGIC);
    out.push(track.modality().code());
    out.extend_from_slice(&l32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for &v in track.values().data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidArgument(format!("value {v} is not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parses a track, widening values to `f64`.
pub fn decode_track(bytes: &[u8]) -> Result<EmbeddingTrack> {
    if bytes.len() < 4 || &bytes[..4] != TRACK_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < TRACK_HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: TRACK_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let modality = Modality::from_code(bytes[4])?;
    let length = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    let dim = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes"));
    if length == 0 || dim == 0 {
        return Err(Error::InvalidShape(format!("track extents {length}x{dim}")));
    }
    let payload = (length as usize)
        .checked_mul(dim as usize)
        .and_then(|n| n.checked_mul(4))
        .ok_or(Error::DimOverflow {
            length: length.into(),
            dim: dim.into(),
        })?;
    let body = &bytes[TRACK_HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::TruncatedPayload {
            expected: payload,
            found: body.len(),
        });
    }
    if body.len() > payload {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after payload",
            body.len() - payload
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let values = Tensor::matrix(length as usize, dim as usize, data)?;
    EmbeddingTrack::new(modality, values)
}

pub fn write_track(path: impl AsRef<Path>, track: &EmbeddingTrack) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_track(track)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_track(path: impl AsRef<Path>) -> Result<EmbeddingTrack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_track(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn track(m: Modality, len: usize, dim: usize, seed: u32) -> EmbeddingTrack {
        let data = (0..len * dim)
            .map(|i| f64::from(((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 4.0e9 - 0.5))
            .collect();
        EmbeddingTrack::new(m, Tensor::matrix(len, dim, data).unwrap()).unwrap()
    }

    #[test]
    fn header_layout_is_exact() {
        let t = EmbeddingTrack::new(Modality::Rna, Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
        let bytes = encode_track(&t).unwrap();
        assert_eq!(
            bytes,
            [
                b'B', b'L', b'F', b'1', 1, 1, 0, 0, 0, 2, 0, 0, 0, //
                0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0
            ]
        );
    }

    #[test]
    fn rna_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.blf");
        let t = track(Modality::Rna, 7, 5, 1);
        write_track(&p, &t).unwrap();
        let back = read_track(&p).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = encode_track(&track(Modality::Dna, 2, 2, 0)).unwrap();
        bytes[0] = b'X';
        let err = decode_track(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn short_payload() {
        let mut bytes = encode_track(&track(Modality::Protein, 3, 2, 0)).unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = decode_track(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("truncated payload"), "{err}");
    }

    #[test]
    fn huge_extents_do_not_allocate() {
        let mut bytes = TRACK_MAGIC.to_vec();
        bytes.push(0);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_track(&bytes).is_err());
        bytes[4] = 9;
        assert!(matches!(decode_track(&bytes), Err(Error::UnknownModality(9))));
    }

    proptest! {
        #[test]
        fn decode_encode_is_identity(len in 1usize..12, dim in 1usize..9, code in 0u8..3,
                                     vals in proptest::collection::vec(-1.0e6f32..1.0e6, 108)) {
            let data: Vec<f64> = vals.iter().cycle().take(len * dim).map(|&v| f64::from(v)).collect();
            let t = EmbeddingTrack::new(Modality::from_code(code).unwrap(), Tensor::matrix(len, dim, data).unwrap()).unwrap();
            let bytes = encode_track(&t).unwrap();
            prop_assert_eq!(bytes.len(), TRACK_HEADER_LEN + 4 * len * dim);
            let back = decode_track(&bytes).unwrap();
            prop_assert_eq!(encode_track(&back).unwrap(), bytes);
            prop_assert_eq!(back, t);
        }
    }
}
