//! MNIST in the raw (uncompressed) idx format.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use super::Dataset;
use crate::error::{FedError, Result};
use crate::model::Sample;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// 28 × 28 pixels plus a constant bias entry.
pub const MNIST_FEATURES: usize = 785;

fn corrupt(path: &Path, reason: impl Into<String>) -> FedError {
    FedError::CorruptFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Reads an idx3 image file into per-image pixel vectors scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<(Vec<Vec<f32>>, usize, usize)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(corrupt(path, "truncated header"));
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != IMAGE_MAGIC {
        return Err(corrupt(path, format!("bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    let rows = BigEndian::read_u32(&bytes[8..12]) as usize;
    let cols = BigEndian::read_u32(&bytes[12..16]) as usize;
    let pixels = rows * cols;
    if bytes.len() != 16 + count * pixels {
        return Err(corrupt(
            path,
            format!("header declares {count} images of {rows}x{cols} but body has {} bytes", bytes.len() - 16),
        ));
    }
    let images = bytes[16..]
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(|img| img.iter().map(|&p| f32::from(p) / 255.0).collect())
        .collect();
    Ok((images, rows, cols))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(corrupt(path, "truncated header"));
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != LABEL_MAGIC {
        return Err(corrupt(path, format!("bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    if bytes.len() != 8 + count {
        return Err(corrupt(path, format!("header declares {count} labels but body has {}", bytes.len() - 8)));
    }
    let labels: Vec<usize> = bytes[8..].iter().map(|&b| usize::from(b)).collect();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(corrupt(path, format!("label {bad} out of range")));
    }
    Ok(labels)
}

fn load_split(dir: &Path, prefix: &str) -> Result<Vec<Sample>> {
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (images, rows, cols) = read_idx_images(&img_path)?;
    let labels = read_idx_labels(&lbl_path)?;
    if images.len() != labels.len() {
        return Err(corrupt(
            &lbl_path,
            format!("{} labels for {} images", labels.len(), images.len()),
        ));
    }
    if rows * cols + 1 != MNIST_FEATURES {
        return Err(corrupt(&img_path, format!("unexpected image size {rows}x{cols}")));
    }
    Ok(images
        .into_iter()
        .zip(labels)
        .map(|(mut px, label)| {
            px.push(1.0);
            Sample::new(px, label)
        })
        .collect())
}

/// Loads `train-*` and `t10k-*` idx files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let train = load_split(dir, "train")?;
    let test = load_split(dir, "t10k")?;
    log::info!("mnist: {} train / {} test samples", train.len(), test.len());
    Ok(Dataset {
        train,
        test,
        classes: 10,
        features: MNIST_FEATURES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::WriteBytesExt;
    use std::io::Write;

    fn write_images(path: &Path, count: u32, fill: impl Fn(usize) -> u8) {
        let mut buf = Vec::new();
        for v in [IMAGE_MAGIC, count, 28, 28] {
            buf.write_u32::<BigEndian>(v).unwrap();
        }
        for i in 0..count as usize * 784 {
            buf.push(fill(i));
        }
        fs::File::create(path).unwrap().write_all(&buf).unwrap();
    }

    fn write_labels(path: &Path, labels: &[u8]) {
        let mut buf = Vec::new();
        buf.write_u32::<BigEndian>(LABEL_MAGIC).unwrap();
        buf.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        buf.extend_from_slice(labels);
        fs::File::create(path).unwrap().write_all(&buf).unwrap();
    }

    #[test]
    fn loads_scaled_pixels_with_bias() {
        let dir = tempfile::tempdir().unwrap();
        write_images(&dir.path().join("train-images-idx3-ubyte"), 3, |i| if i == 0 { 255 } else { (i % 7) as u8 });
        write_labels(&dir.path().join("train-labels-idx1-ubyte"), &[1, 2, 9]);
        write_images(&dir.path().join("t10k-images-idx3-ubyte"), 2, |_| 0);
        write_labels(&dir.path().join("t10k-labels-idx1-ubyte"), &[0, 4]);
        let ds = load_mnist(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 3);
        assert_eq!(ds.test.len(), 2);
        assert_eq!(ds.train[0].features[0], 1.0);
        assert_eq!(ds.train[2].label, 9);
        for s in ds.train.iter().chain(&ds.test) {
            assert_eq!(s.dim(), 785);
            assert_eq!(s.features[784], 1.0);
            assert!(s.features.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_bad_magic_and_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels");
        let mut buf = Vec::new();
        buf.write_u32::<BigEndian>(IMAGE_MAGIC).unwrap();
        buf.write_u32::<BigEndian>(1).unwrap();
        buf.push(3);
        fs::write(&p, &buf).unwrap();
        assert!(matches!(read_idx_labels(&p), Err(FedError::CorruptFile { .. })));

        write_labels(&p, &[1, 2, 3]);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_idx_labels(&p), Err(FedError::CorruptFile { .. })));

        let img = dir.path().join("img");
        write_images(&img, 2, |_| 1);
        let mut bytes = fs::read(&img).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&img, &bytes).unwrap();
        assert!(matches!(read_idx_images(&img), Err(FedError::CorruptFile { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_mnist(dir.path()), Err(FedError::Io(_))));
    }
}
