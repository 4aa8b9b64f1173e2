//! Binary container for cached embedding grids (`*.emb`).
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 8    | magic `SCSAMEMB`                       |
//! | 8      | 4    | format version (`1`)                   |
//! | 12     | 1    | source tag (0 sam, 1 mae, 2 aligned, 3 fused, 4 activated) |
//! | 13     | 1    | dtype (0 = f32)                        |
//! | 14     | 2    | reserved, zero                         |
//! | 16     | 12   | height, width, channels (u32 each)     |
//! | 28     | 4·HWC| payload, channel-last f32              |
//! | end-4  | 4    | CRC-32 of every preceding byte         |

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, Source};

pub const MAGIC: &[u8; 8] = b"SCSAMEMB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
const DTYPE_F32: u8 = 0;

pub fn encode_embedding(grid: &FeatureGrid) -> Vec<u8> {
    let (h, w, c) = grid.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data().len() * 4 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(grid.source().tag());
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0, 0]);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn decode_embedding(bytes: &[u8]) -> Result<FeatureGrid> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt(format!(
            "embedding file truncated: {} bytes, header alone needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad embedding magic".into()));
    }
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported embedding version {version}")));
    }
    let source = Source::from_tag(bytes[12])
        .ok_or_else(|| Error::Format(format!("unknown source tag {}", bytes[12])))?;
    if bytes[13] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype tag {}", bytes[13])));
    }
    let (h, w, c) = (
        u32_at(bytes, 16) as usize,
        u32_at(bytes, 20) as usize,
        u32_at(bytes, 24) as usize,
    );
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("header shape ({h},{w},{c}) overflows")))?;
    let actual = bytes.len().saturating_sub(HEADER_LEN + 4);
    if actual != expected {
        return Err(Error::Format(format!(
            "header declares shape ({h},{w},{c}) = {expected} payload bytes, file carries {actual}"
        )));
    }
    let body_end = HEADER_LEN + expected;
    let stored = u32_at(bytes, body_end);
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Corrupt(format!(
            "checksum mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }
    let data = bytes[HEADER_LEN..body_end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FeatureGrid::new(h, w, c, source, data).map_err(|e| Error::Corrupt(format!("{e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(h in 1usize..5, w in 1usize..5, c in 1usize..6, seed in any::<u32>(), tag in 0u8..5) {
            let data: Vec<f32> = (0..h * w * c)
                .map(|i| f32::from_bits((seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503)) & 0x3fff_ffff))
                .collect();
            let grid = FeatureGrid::new(h, w, c, Source::from_tag(tag).unwrap(), data).unwrap();
            let back = decode_embedding(&encode_embedding(&grid)).unwrap();
            prop_assert_eq!(back.shape(), grid.shape());
            prop_assert_eq!(back.source(), grid.source());
            for (a, b) in back.data().iter().zip(grid.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    fn sample() -> FeatureGrid {
        FeatureGrid::new(2, 3, 4, Source::Mae, (0..24).map(|i| i as f32 * 0.25).collect()).unwrap()
    }

    #[test]
    fn truncated_header_is_corrupt() {
        let bytes = encode_embedding(&sample());
        assert!(matches!(decode_embedding(&bytes[..10]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let mut bytes = encode_embedding(&sample());
        bytes[HEADER_LEN + 5] ^= 0x10;
        assert!(matches!(decode_embedding(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn short_payload_names_byte_counts() {
        let grid = FeatureGrid::zeros(64, 64, 512, Source::Mae);
        let mut bytes = encode_embedding(&grid);
        bytes.truncate(HEADER_LEN + 1000);
        let err = decode_embedding(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format(_)));
        assert!(msg.contains(&(64 * 64 * 512 * 4).to_string()), "{msg}");
        assert!(msg.contains("996"), "{msg}");
    }
}
