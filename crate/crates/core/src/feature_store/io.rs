//! On-disk formats.
//!
//! Feature map (`PXF1`), little-endian:
//! - magic `PXF1`
//! - height, width, dim: u32
//! - height * width * dim f32 values, row-major, channel-fastest
//!
//! Label mask (`PXM1`), little-endian:
//! - magic `PXM1`
//! - height, width, label_count: u32
//! - height * width u8 labels

use std::fs;
use std::path::Path;

use super::{FeatureMap, LabelMask};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"PXF1";
pub const MASK_MAGIC: &[u8; 4] = b"PXM1";

const HEADER_LEN: usize = 16;

fn parse_header(path: &Path, bytes: &[u8], magic: &[u8; 4]) -> Result<[u32; 3]> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        let found = &bytes[..bytes.len().min(4)];
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    Ok([field(0), field(1), field(2)])
}

fn check_payload(path: &Path, payload: &[u8], expected: usize) -> Result<()> {
    match payload.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        }),
        std::cmp::Ordering::Greater => Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            found: payload.len() - expected,
        }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let [h, w, d] = parse_header(path, &bytes, FEATURE_MAGIC)?;
    let count = (h as usize)
        .checked_mul(w as usize)
        .and_then(|n| n.checked_mul(d as usize))
        .ok_or_else(|| Error::InvalidShape(format!("{h}x{w}x{d} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    check_payload(path, payload, count * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureMap::new(h as usize, w as usize, d as usize, data)
}

pub fn write_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(HEADER_LEN + map.data().len() * 4);
    bytes.extend_from_slice(FEATURE_MAGIC);
    for v in [map.height(), map.width(), map.dim()] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in map.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_label_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let [h, w, l] = parse_header(path, &bytes, MASK_MAGIC)?;
    let label_count = u8::try_from(l).map_err(|_| Error::LabelOutOfRange {
        label: l,
        label_count: u8::MAX as u32,
    })?;
    let count = (h as usize)
        .checked_mul(w as usize)
        .ok_or_else(|| Error::InvalidShape(format!("{h}x{w} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    check_payload(path, payload, count)?;
    LabelMask::new(h as usize, w as usize, label_count, payload.to_vec())
}

pub fn write_label_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(HEADER_LEN + mask.pixel_count());
    bytes.extend_from_slice(MASK_MAGIC);
    for v in [mask.height(), mask.width(), mask.label_count() as usize] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    bytes.extend_from_slice(mask.labels());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(magic: &[u8; 4], dims: [u32; 3]) -> Vec<u8> {
        let mut b = magic.to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b
    }

    #[test]
    fn zero_file_reads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.pxf");
        let mut bytes = header(FEATURE_MAGIC, [2, 2, 3]);
        bytes.extend(std::iter::repeat_n(0u8, 48));
        fs::write(&path, bytes).unwrap();
        let map = read_feature_map(&path).unwrap();
        assert_eq!(map.data().len(), 12);
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_value_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pxf");
        write_feature_map(&FeatureMap::new(1, 1, 1, vec![1.0]).unwrap(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut expected = header(FEATURE_MAGIC, [1, 1, 1]);
        expected.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn each_failure_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.pxf");
        assert!(matches!(read_feature_map(&missing), Err(Error::Io { .. })));

        let bad = dir.path().join("bad.pxf");
        fs::write(&bad, header(b"NOPE", [1, 1, 1])).unwrap();
        assert!(matches!(read_feature_map(&bad), Err(Error::BadMagic { .. })));

        let short = dir.path().join("short.pxf");
        let mut bytes = header(FEATURE_MAGIC, [2, 2, 3]);
        bytes.extend(std::iter::repeat_n(0u8, 11 * 4));
        fs::write(&short, bytes).unwrap();
        assert!(matches!(
            read_feature_map(&short),
            Err(Error::Truncated {
                expected: 48,
                found: 44,
                ..
            })
        ));

        let nan = dir.path().join("nan.pxf");
        let mut bytes = header(FEATURE_MAGIC, [1, 1, 2]);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&nan, bytes).unwrap();
        assert!(matches!(
            read_feature_map(&nan),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("no/such/dir/x.pxf");
        let map = FeatureMap::zeros(1, 1, 1).unwrap();
        assert!(matches!(
            write_feature_map(&map, &path),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn mask_label_above_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pxm");
        let mut bytes = header(MASK_MAGIC, [1, 3, 2]);
        bytes.extend_from_slice(&[0, 3, 1]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_label_mask(&path),
            Err(Error::LabelOutOfRange {
                label: 3,
                label_count: 2
            })
        ));
    }

    #[test]
    fn mask_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pxm");
        fs::write(&path, header(FEATURE_MAGIC, [1, 1, 1])).unwrap();
        assert!(matches!(read_label_mask(&path), Err(Error::BadMagic { .. })));
        fs::write(&path, header(MASK_MAGIC, [2, 2, 1])).unwrap();
        assert!(matches!(read_label_mask(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn all_zero_mask_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pxm");
        let mask = LabelMask::background(5, 4, 3).unwrap();
        write_label_mask(&mask, &path).unwrap();
        assert_eq!(read_label_mask(&path).unwrap(), mask);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn feature_map_round_trips_bit_exactly(h in 1usize..6, w in 1usize..6, d in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..h * w * d).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            let map = FeatureMap::new(h, w, d, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.pxf");
            write_feature_map(&map, &path).unwrap();
            let back = read_feature_map(&path).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            map.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, map);
        }

        #[test]
        fn label_mask_round_trips(h in 1usize..8, w in 1usize..8, count in 0u8..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let labels = (0..h * w).map(|_| rng.random_range(0..=count)).collect();
            let mask = LabelMask::new(h, w, count, labels).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.pxm");
            write_label_mask(&mask, &path).unwrap();
            prop_assert_eq!(read_label_mask(&path).unwrap(), mask);
        }
    }
}
