//! Image datasets: loading, class partitioning, per-class subsampling and
//! stratified splits.
//!
//! Images are stored NCHW as `f32` in `[0, 1]`. Datasets are immutable once
//! built; every transformation returns a new dataset.

mod folder;
mod idx;
mod resize;

use std::collections::BTreeSet;

use ndarray::{Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

pub use folder::{load_image_folder, write_image_folder};
pub use idx::{load_idx, write_idx};
pub use resize::resize_bilinear;

/// Labeled image collection.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: Array4<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    class_names: Option<Vec<String>>,
}

impl ImageDataset {
    /// Validate and wrap images (N×C×H×W in `[0,1]`) and labels.
    pub fn new(images: Array4<f32>, labels: Vec<usize>, num_classes: usize, class_names: Option<Vec<String>>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Invariant("num_classes must be positive".into()));
        }
        if images.len_of(Axis(0)) != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.len_of(Axis(0)),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Invariant("dataset must hold at least one sample".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Invariant(format!("label {bad} out of range for {num_classes} classes")));
        }
        if let Some(names) = &class_names {
            if names.len() != num_classes {
                return Err(Error::Invariant(format!("{} class names for {num_classes} classes", names.len())));
            }
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant("pixel values must lie in [0,1]".into()));
        }
        Ok(Self {
            images: images.as_standard_layout().into_owned(),
            labels,
            num_classes,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Array4<f32> {
        &self.images
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(Axis(0), i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// `(C, H, W)` shared by all images.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Samples at `indices`, in that order, with the same label space.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InsufficientData("selection is empty".into()));
        }
        let images = self.images.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            images,
            labels,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        })
    }

    /// Keep only `classes` and relabel them `0..k` by ascending original id.
    pub fn select_classes(&self, classes: &BTreeSet<usize>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Invariant("class set is empty".into()));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::Invariant(format!(
                "class {bad} not present (dataset has {} classes)",
                self.num_classes
            )));
        }
        let remap: Vec<Option<usize>> = (0..self.num_classes).map(|c| classes.iter().position(|&k| k == c)).collect();
        let indices: Vec<usize> = (0..self.len()).filter(|&i| remap[self.labels[i]].is_some()).collect();
        if indices.is_empty() {
            return Err(Error::InsufficientData(format!("no samples for classes {classes:?}")));
        }
        let images = self.images.select(Axis(0), &indices);
        let labels = indices.iter().map(|&i| remap[self.labels[i]].expect("filtered above")).collect();
        let class_names = self
            .class_names
            .as_ref()
            .map(|names| classes.iter().map(|&c| names[c].clone()).collect());
        Ok(Self {
            images,
            labels,
            num_classes: classes.len(),
            class_names,
        })
    }

    /// Concatenate datasets sharing one label space and image shape.
    pub fn concat(parts: &[&ImageDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        for p in parts {
            if p.image_shape() != first.image_shape() {
                return Err(Error::Shape(format!(
                    "image shape {:?} vs {:?}",
                    p.image_shape(),
                    first.image_shape()
                )));
            }
            if p.num_classes != first.num_classes {
                return Err(Error::Consistency(format!(
                    "label spaces differ: {} vs {} classes",
                    p.num_classes, first.num_classes
                )));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.images.view()).collect();
        let images = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Ok(Self {
            images,
            labels,
            num_classes: first.num_classes,
            class_names: first.class_names.clone(),
        })
    }

    /// Same samples under a wider label space (used to pool datasets whose
    /// labels index different class counts).
    pub fn with_num_classes(&self, num_classes: usize) -> Result<Self> {
        Self::new(self.images.clone(), self.labels.clone(), num_classes, None)
    }

    /// SHA-256 over shape, pixels and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.images.iter() {
            h.update(v.to_le_bytes());
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    /// Per-pixel mean image over the whole dataset.
    pub fn mean_image(&self) -> ndarray::Array3<f32> {
        self.images.mean_axis(Axis(0)).expect("dataset is never empty")
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.select(&idx)
    }
}

/// Disjoint teacher/student class id sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub teacher_class_ids: BTreeSet<usize>,
    pub student_class_ids: BTreeSet<usize>,
}

impl ClassPartition {
    pub fn new(teacher: impl IntoIterator<Item = usize>, student: impl IntoIterator<Item = usize>) -> Result<Self> {
        let p = Self {
            teacher_class_ids: teacher.into_iter().collect(),
            student_class_ids: student.into_iter().collect(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher_class_ids.is_empty() || self.student_class_ids.is_empty() {
            return Err(Error::Invariant("partition sides must be non-empty".into()));
        }
        let overlap: Vec<_> = self.teacher_class_ids.intersection(&self.student_class_ids).collect();
        if !overlap.is_empty() {
            return Err(Error::Invariant(format!("teacher and student classes overlap on {overlap:?}")));
        }
        Ok(())
    }
}

/// Split `ds` into (teacher, student) datasets with contiguous relabeled ids.
pub fn partition_classes(ds: &ImageDataset, part: &ClassPartition) -> Result<(ImageDataset, ImageDataset)> {
    part.validate()?;
    Ok((
        ds.select_classes(&part.teacher_class_ids)?,
        ds.select_classes(&part.student_class_ids)?,
    ))
}

/// Indices of exactly `k` samples per class, chosen by `seed`.
pub fn subsample_indices(ds: &ImageDataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = seed::rng(seed, "subsample");
    let mut picked = Vec::with_capacity(k * ds.num_classes());
    for class in 0..ds.num_classes() {
        let mut idx = ds.indices_of_class(class);
        if idx.len() < k {
            let name = ds
                .class_names()
                .map(|n| format!("{class} ({})", n[class]))
                .unwrap_or_else(|| class.to_string());
            return Err(Error::InsufficientData(format!(
                "class {name} has {} samples, {k} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let mut chosen = idx[..k].to_vec();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    Ok(picked)
}

/// Exactly `k` samples per class; a pure function of `(ds, k, seed)`.
pub fn subsample_per_class(ds: &ImageDataset, k: usize, seed: u64) -> Result<ImageDataset> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    ds.select(&subsample_indices(ds, k, seed)?)
}

/// Stratified split; each class contributes `round(fraction * n_c)` samples
/// to the training side. Returns (train, test) index lists.
pub fn split_indices(ds: &ImageDataset, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!("train fraction {train_fraction} not in (0,1)")));
    }
    let mut rng = seed::rng(seed, "split");
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..ds.num_classes() {
        let mut idx = ds.indices_of_class(class);
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn train_test_split(ds: &ImageDataset, train_fraction: f64, seed: u64) -> Result<(ImageDataset, ImageDataset)> {
    let (train, test) = split_indices(ds, train_fraction, seed)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(format!(
            "split of {} samples at {train_fraction} leaves an empty side",
            ds.len()
        )));
    }
    Ok((ds.select(&train)?, ds.select(&test)?))
}


#[cfg(test)]
mod tests {
    use super::fixtures::random_dataset;
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels_and_labels() {
        let img = Array4::from_elem((1, 1, 2, 2), 1.5f32);
        assert!(matches!(ImageDataset::new(img, vec![0], 1, None), Err(Error::Invariant(_))));
        let img = Array4::zeros((1, 1, 2, 2));
        assert!(ImageDataset::new(img, vec![3], 2, None).is_err());
        let img = Array4::zeros((2, 1, 2, 2));
        assert!(matches!(ImageDataset::new(img, vec![0], 2, None), Err(Error::Consistency(_))));
    }

    #[test]
    fn partition_relabels_ascending() {
        let ds = random_dataset(10, 4, (1, 4, 4), 0);
        let part = ClassPartition::new([1], [2]).unwrap();
        let (t, s) = partition_classes(&ds, &part).unwrap();
        assert!(t.labels().iter().all(|&l| l == 0));
        assert!(s.labels().iter().all(|&l| l == 0));
        assert_eq!(t.num_classes(), 1);

        let part = ClassPartition::new(0..5, 5..10).unwrap();
        let (t, s) = partition_classes(&ds, &part).unwrap();
        assert_eq!(t.len() + s.len(), ds.len());
        assert_eq!(t.num_classes(), 5);
        assert_eq!(s.num_classes(), 5);
    }

    #[test]
    fn overlapping_partition_is_rejected() {
        assert!(matches!(ClassPartition::new([0], [0]), Err(Error::Invariant(_))));
        assert!(ClassPartition::new([], [1]).is_err());
    }

    #[test]
    fn partition_then_concat_preserves_pixels() {
        let ds = random_dataset(4, 3, (1, 3, 3), 5);
        let part = ClassPartition::new([0, 2], [1, 3]).unwrap();
        let (t, s) = partition_classes(&ds, &part).unwrap();
        let mut original: Vec<Vec<u32>> = (0..ds.len()).map(|i| ds.image(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut rejoined: Vec<Vec<u32>> = (0..t.len())
            .map(|i| t.image(i).iter().map(|v| v.to_bits()).collect())
            .chain((0..s.len()).map(|i| s.image(i).iter().map(|v| v.to_bits()).collect()))
            .collect();
        original.sort();
        rejoined.sort();
        assert_eq!(original, rejoined);
    }

    #[test]
    fn subsample_exact_and_deterministic() {
        let ds = random_dataset(10, 30, (1, 2, 2), 1);
        let a = subsample_indices(&ds, 10, 42).unwrap();
        let b = subsample_indices(&ds, 10, 42).unwrap();
        assert_eq!(a, b);
        let sub = subsample_per_class(&ds, 10, 42).unwrap();
        assert_eq!(sub.len(), 100);
        assert!(sub.class_counts().iter().all(|&c| c == 10));
        assert_ne!(a, subsample_indices(&ds, 10, 43).unwrap());
    }

    #[test]
    fn subsample_names_short_class() {
        let images = Array4::zeros((3, 1, 2, 2));
        let ds = ImageDataset::new(images, vec![0, 0, 0], 2, None).unwrap();
        match subsample_per_class(&ds, 1, 0) {
            Err(Error::InsufficientData(msg)) => assert!(msg.contains("class 1")),
            other => panic!("expected insufficient data, got {other:?}"),
        }
    }

    #[test]
    fn split_is_stratified() {
        let ds = random_dataset(10, 10, (1, 2, 2), 2);
        let (tr, te) = train_test_split(&ds, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
        assert!(tr.class_counts().iter().all(|&c| c == 8));
        let a = split_indices(&ds, 0.5, 9).unwrap();
        let b = split_indices(&ds, 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert!(matches!(train_test_split(&ds, 1.0, 0), Err(Error::Argument(_))));
        assert!(train_test_split(&ds, 0.0, 0).is_err());
    }
}
