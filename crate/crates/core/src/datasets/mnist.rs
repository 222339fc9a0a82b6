//! Big-endian IDX files as distributed with MNIST.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::transport::PointCloud;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: bytes.len(),
            message: format!("truncated header: need 4 bytes at offset {offset}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic: expected {expected:#010x}, found {found:#010x}"),
        });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, expected: usize) -> Result<()> {
    let have = bytes.len() - header;
    if have < expected {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated payload: header declares {expected} bytes, found {have}"),
        });
    }
    if have > expected {
        return Err(Error::Format {
            offset: header + expected,
            message: format!("{} trailing bytes after the declared payload", have - expected),
        });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    check_payload(bytes, 16, count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    check_payload(bytes, 8, count)?;
    Ok(bytes[8..].to_vec())
}

pub fn write_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads an image/label IDX pair. Pixels are divided by 255 when `normalize`.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    normalize: bool,
) -> Result<(PointCloud, Vec<u8>)> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != images.count {
        return Err(Error::SizeMismatch(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let scale = if normalize { 1.0 / 255.0 } else { 1.0 };
    let data = images.pixels.iter().map(|&p| p as f64 * scale).collect();
    let cloud = PointCloud::from_flat(images.rows * images.cols, data)?;
    Ok((cloud, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> IdxImages {
        IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 255, 17, 3, 9, 128, 1, 2, 3, 4, 5, 6],
        }
    }

    #[test]
    fn accepts_format_magics() {
        let bytes = write_idx_images(&tiny());
        assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x03]);
        assert_eq!(parse_idx_images(&bytes).unwrap(), tiny());
        let lbl = write_idx_labels(&[7, 1]);
        assert_eq!(&lbl[..4], &[0x00, 0x00, 0x08, 0x01]);
        assert_eq!(parse_idx_labels(&lbl).unwrap(), vec![7, 1]);
    }

    #[test]
    fn wrong_magic_names_both_values() {
        let lbl = write_idx_labels(&[7, 1]);
        let err = parse_idx_images(&lbl).unwrap_err().to_string();
        assert!(err.contains("0x00000803") && err.contains("0x00000801"), "{err}");
    }

    #[test]
    fn count_mismatch_rejected() {
        let mut bytes = write_idx_images(&tiny());
        bytes[7] = 3; // claims three images
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == bytes.len()));
        let mut bytes = write_idx_images(&tiny());
        bytes.push(0);
        assert!(parse_idx_images(&bytes).is_err());
        assert!(parse_idx_images(&[0, 0, 8]).is_err());
    }

    #[test]
    fn load_normalises_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, write_idx_images(&tiny())).unwrap();
        fs::write(&lp, write_idx_labels(&[4, 7])).unwrap();
        let (cloud, labels) = load_mnist_idx(&ip, &lp, true).unwrap();
        assert_eq!(cloud.dim(), 6);
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.point(0)[1], 1.0);
        assert_eq!(labels, vec![4, 7]);
        fs::write(&lp, write_idx_labels(&[4])).unwrap();
        assert!(load_mnist_idx(&ip, &lp, true).is_err());
    }

    proptest! {
        #[test]
        fn idx_round_trip(count in 0usize..4, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let im = IdxImages { count, rows, cols, pixels };
            let bytes = write_idx_images(&im);
            let parsed = parse_idx_images(&bytes).unwrap();
            prop_assert_eq!(write_idx_images(&parsed), bytes);
            let labels: Vec<u8> = (0..count as u8).collect();
            let lb = write_idx_labels(&labels);
            prop_assert_eq!(write_idx_labels(&parse_idx_labels(&lb).unwrap()), lb);
        }
    }
}
