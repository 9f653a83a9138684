//! `root/<class_name>/<file>` image folders (PNG and JPEG).

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array3, Array4, Axis};

use super::{resize_bilinear, ImageDataset};
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn to_chw(img: &DynamicImage, channels: usize) -> Array3<f32> {
    if channels == 1 {
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
            g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
        })
    } else {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        })
    }
}

/// Load a class-per-subdirectory image folder. Class ids follow sorted
/// subdirectory names; the channel count is taken from the first image
/// (grayscale → 1, anything else → 3).
pub fn load_image_folder(root: impl AsRef<Path>, resize_to: (usize, usize)) -> Result<ImageDataset> {
    let root = root.as_ref();
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::InsufficientData(format!("{} has no class subdirectories", root.display())));
    }
    let mut files = Vec::new();
    let mut names = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let imgs: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect();
        if imgs.is_empty() {
            return Err(Error::InsufficientData(format!(
                "class directory {} contains no images",
                dir.display()
            )));
        }
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        files.extend(imgs.into_iter().map(|p| (p, class)));
    }

    let mut channels = None;
    let (h, w) = resize_to;
    let mut images = Array4::zeros((files.len(), 1, h, w));
    for (i, (path, _)) in files.iter().enumerate() {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let c = *channels.get_or_insert_with(|| {
            let gray = matches!(
                img,
                DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_)
            );
            let c = if gray { 1 } else { 3 };
            images = Array4::zeros((files.len(), c, h, w));
            c
        });
        let chw = to_chw(&img, c);
        images.index_axis_mut(Axis(0), i).assign(&resize_bilinear(chw.view(), h, w));
    }
    let labels = files.iter().map(|(_, c)| *c).collect();
    ImageDataset::new(images, labels, names.len(), Some(names))
}

/// Write every sample as `root/<class>/<index>.png`; returns the written paths
/// in sample order. Class directories use the dataset's class names when
/// present, otherwise zero-padded ids.
pub fn write_image_folder(ds: &ImageDataset, root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let class_dir = |c: usize| -> String { ds.class_names().map(|n| n[c].clone()).unwrap_or_else(|| format!("{c:04}")) };
    let (ch, h, w) = ds.image_shape();
    let mut written = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let dir = root.join(class_dir(ds.labels()[i]));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{i:06}.png"));
        let img = ds.image(i);
        let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let result = if ch == 1 {
            GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([byte(img[[0, y as usize, x as usize]])])).save(&path)
        } else {
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let p = |c: usize| byte(img[[c.min(ch - 1), y as usize, x as usize]]);
                image::Rgb([p(0), p(1), p(2)])
            })
            .save(&path)
        };
        result.map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        written.push(path);
    }
    Ok(written)
}
