//! IDX (MNIST-style) files: big-endian `u32` magic, big-endian `u32`
//! dimension sizes, then unsigned byte payload.

use std::io;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!(
                    "truncated IDX file: need {n} bytes of {what} at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ))),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after IDX payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader<'_>, expected: u32) -> Result<()> {
    let magic = r.u32_be("magic")?;
    if magic != expected {
        return Err(Error::Format(format!(
            "IDX magic {magic:#010x}, expected {expected:#010x}"
        )));
    }
    Ok(())
}

/// Parses an image file. Returns `(sample_count, pixels_per_sample, features)`
/// with every pixel divided by 255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, IDX_IMAGES_MAGIC)?;
    let n = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    let width = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format(format!("image size {rows}x{cols} overflows")))?;
    let total = n
        .checked_mul(width)
        .ok_or_else(|| Error::Format(format!("{n} images of {width} pixels overflows")))?;
    let payload = r.take(total, "pixels")?;
    r.finish()?;
    let features = payload.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok((n, width, features))
}

/// Parses a label file into class ids.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, IDX_LABELS_MAGIC)?;
    let n = r.u32_be("label count")? as usize;
    let payload = r.take(n, "labels")?;
    r.finish()?;
    Ok(payload.iter().map(|&l| usize::from(l)).collect())
}

/// Parses a matching pair of image and label files.
///
/// The class count is one past the largest label present.
pub fn parse_idx_pair(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let (n, width, features) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "image file declares {n} samples, label file {}",
            labels.len()
        )));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(features, width, labels, n_classes)
}

pub fn read_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx_pair(&images, &labels)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&n.to_be_bytes());
        out.extend_from_slice(&rows.to_be_bytes());
        out.extend_from_slice(&cols.to_be_bytes());
        out.extend_from_slice(pixels);
        out
    }

    pub fn labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures;
    use super::*;

    #[test]
    fn two_image_fixture_scales_pixels() {
        // Hand-assembled: magic 00 00 08 03, n=2, 1x2 images.
        let images: Vec<u8> = vec![
            0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 255, 255, 0,
        ];
        let labels: Vec<u8> = vec![0x00, 0x00, 0x08, 0x01, 0, 0, 0, 2, 1, 0];
        assert_eq!(images, fixtures::images(2, 1, 2, &[0, 255, 255, 0]));
        let data = parse_idx_pair(&images, &labels).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.n_features(), 2);
        assert_eq!(data.row(0), &[0.0, 1.0]);
        assert_eq!(data.row(1), &[1.0, 0.0]);
        assert_eq!(data.labels(), &[1, 0]);
        assert_eq!(data.n_classes(), 2);
    }

    #[test]
    fn zero_samples_is_empty_dataset() {
        let data = parse_idx_pair(&fixtures::images(0, 28, 28, &[]), &fixtures::labels(&[])).unwrap();
        assert!(data.is_empty());
        assert_eq!(data.n_features(), 784);
    }

    #[test]
    fn magic_mismatch_is_format_error() {
        let labels = fixtures::labels(&[1]);
        assert!(matches!(parse_idx_images(&labels), Err(Error::Format(_))));
        let images = fixtures::images(1, 1, 1, &[9]);
        assert!(matches!(parse_idx_labels(&images), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let r = parse_idx_pair(&fixtures::images(1, 1, 1, &[3]), &fixtures::labels(&[1, 2]));
        assert!(matches!(r, Err(Error::Consistency(_))));
    }

    #[test]
    fn truncation_is_io_error() {
        let mut images = fixtures::images(2, 2, 2, &[1; 8]);
        images.pop();
        match parse_idx_images(&images) {
            Err(Error::Io(e)) => assert_eq!(e.kind(), io::ErrorKind::UnexpectedEof),
            other => panic!("expected io error, got {other:?}"),
        }
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Io(_))));
    }

    #[test]
    fn huge_declared_dimensions_do_not_allocate() {
        let bytes = fixtures::images(u32::MAX, u32::MAX, u32::MAX, &[]);
        assert!(parse_idx_images(&bytes).is_err());
    }

    #[test]
    fn read_idx_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        std::fs::write(&img, fixtures::images(1, 1, 3, &[0, 51, 255])).unwrap();
        std::fs::write(&lbl, fixtures::labels(&[4])).unwrap();
        let data = read_idx(&img, &lbl).unwrap();
        assert_eq!(data.row(0), &[0.0, 0.2, 1.0]);
        assert!(matches!(read_idx(dir.path().join("missing"), &lbl), Err(Error::Io(_))));
    }
}
