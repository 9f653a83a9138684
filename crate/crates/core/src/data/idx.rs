//! IDX binary files (the MNIST distribution format).

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4, Axis};

use super::{resize_bilinear, ImageDataset};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4-byte slice")))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4)? as usize;
    let rows = be_u32(&bytes, 8)? as usize;
    let cols = be_u32(&bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "{}: header declares {n}x{rows}x{cols} pixels but body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    Ok((n, rows, cols, body.to_vec()))
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "{}: header declares {n} labels but body holds {}",
            path.display(),
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Load an IDX image/label pair, scale pixels to `[0,1]` and resize to
/// `resize_to = (H, W)`. The class count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, resize_to: (usize, usize)) -> Result<ImageDataset> {
    let (n, rows, cols, pixels) = read_images(images_path.as_ref())?;
    let labels = read_labels(labels_path.as_ref())?;
    if labels.len() != n {
        return Err(Error::Consistency(format!("{n} images but {} labels", labels.len())));
    }
    let (out_h, out_w) = resize_to;
    let mut images = Array4::<f32>::zeros((n, 1, out_h, out_w));
    for (i, mut slot) in images.axis_iter_mut(Axis(0)).enumerate() {
        let raw = &pixels[i * rows * cols..(i + 1) * rows * cols];
        let img = Array3::from_shape_fn((1, rows, cols), |(_, y, x)| raw[y * cols + x] as f32 / 255.0);
        slot.assign(&resize_bilinear(img.view(), out_h, out_w));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    ImageDataset::new(images, labels, num_classes, None)
}

/// Write single-channel images (quantized to bytes) and labels as IDX.
pub fn write_idx(ds: &ImageDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = ds.image_shape();
    if c != 1 {
        return Err(Error::Shape(format!("IDX images are single-channel, got C={c}")));
    }
    let mut img_bytes = Vec::with_capacity(16 + ds.len() * h * w);
    for v in [IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        img_bytes.extend_from_slice(&v.to_be_bytes());
    }
    img_bytes.extend(ds.images().iter().map(|&v| (v * 255.0).round() as u8));
    let mut lbl_bytes = Vec::with_capacity(8 + ds.len());
    for v in [LABELS_MAGIC, ds.len() as u32] {
        lbl_bytes.extend_from_slice(&v.to_be_bytes());
    }
    for &l in ds.labels() {
        let byte = u8::try_from(l).map_err(|_| Error::Data(format!("label {l} exceeds a byte")))?;
        lbl_bytes.push(byte);
    }
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    std::fs::write(ip, img_bytes).map_err(|e| Error::io(ip, e))?;
    std::fs::write(lp, lbl_bytes).map_err(|e| Error::io(lp, e))?;
    Ok(())
}
