//! IDX (MNIST-style) image and label files.

use std::fs;
use std::path::Path;

use super::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::nn::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(buf: &[u8], at: usize, field: &'static str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(field, "file truncated in header"))
}

/// Parses an IDX3 image file into `N x rows x cols x 1`, scaled by 1/255.
pub fn read_idx_images(buf: &[u8]) -> Result<Tensor> {
    let magic = be_u32(buf, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format("magic", format!("expected 0x00000803, found {magic:#010x}")));
    }
    let n = be_u32(buf, 4, "count")? as usize;
    let rows = be_u32(buf, 8, "rows")? as usize;
    let cols = be_u32(buf, 12, "cols")? as usize;
    let body = &buf[16..];
    if body.len() != n * rows * cols {
        return Err(Error::format(
            "data",
            format!("expected {} pixel bytes, found {}", n * rows * cols, body.len()),
        ));
    }
    let data = body.iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![n, rows, cols, 1], data).map_err(|e| Error::format("dims", e.to_string()))
}

pub fn read_idx_labels(buf: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(buf, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format("magic", format!("expected 0x00000801, found {magic:#010x}")));
    }
    let n = be_u32(buf, 4, "count")? as usize;
    let body = &buf[8..];
    if body.len() != n {
        return Err(Error::format(
            "data",
            format!("expected {n} label bytes, found {}", body.len()),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. The class count is `max(label) + 1`, at least 2.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = read_idx_images(&fs::read(images_path).map_err(|e| Error::io(images_path, e))?)?;
    let labels = read_idx_labels(&fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?)?;
    if images.rows() != labels.len() {
        return Err(Error::format(
            "count",
            format!("{} images but {} labels", images.rows(), labels.len()),
        ));
    }
    let k = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let name = images_path
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    LabeledDataset::new(
        images,
        labels,
        k,
        name,
        Provenance::File {
            images: images_path.display().to_string(),
            labels: labels_path.display().to_string(),
        },
    )
}

/// Encodes images (values in [0,1], rounded to bytes) as an IDX3 file.
pub fn encode_idx_images(samples: &Tensor) -> Vec<u8> {
    let s = samples.shape();
    let mut buf = Vec::with_capacity(16 + samples.len());
    buf.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [s[0], s[1], s[2]] {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf.extend(samples.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    buf
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend(labels.iter().map(|&y| y as u8));
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, n_images: usize, n_labels: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut px = vec![0u8; n_images * 28 * 28];
        px[0] = 255;
        let mut img = IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n_images as u32, 28, 28] {
            img.extend(d.to_be_bytes());
        }
        img.extend(px);
        let lab = encode_idx_labels(&(0..n_labels).map(|i| i % 10).collect::<Vec<_>>());
        let (ip, lp) = (dir.join("img.idx"), dir.join("lab.idx"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn loads_header_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), 10, 10);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.image_shape(), [28, 28, 1]);
        assert_eq!(ds.samples.data()[0], 1.0);
        assert_eq!(ds.samples.data()[1], 0.0);
        assert_eq!(ds.num_classes, 10);
    }

    #[test]
    fn count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), 10, 9);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { field: "count", .. })));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut buf = encode_idx_labels(&[1, 2]);
        buf[3] = 3;
        assert!(matches!(read_idx_labels(&buf), Err(Error::Format { field: "magic", .. })));
        assert!(matches!(read_idx_images(&buf), Err(Error::Format { .. })));
    }
}
