//! Small synthetic corpora and configs for fast end-to-end runs.
#![allow(dead_code)]

use std::path::Path;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlinv::attack::without_dt::AugmentationPolicy;
use tlinv::data::{write_idx, ImageDataset};
use tlinv::models::TrainConfig;
use tlinv::runner::{AttackMethod, DatasetSource, ExperimentConfig};

pub const SIDE: usize = 16;

/// Class `c` is a bright square in one of four positions (`blocks`) or a
/// bar at one of four rows (`bars`), plus uniform noise.
pub fn synthetic(classes: usize, per_class: usize, bars: bool, seed: u64) -> ImageDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut images = Array4::<f32>::zeros((n, 1, SIDE, SIDE));
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for (i, &c) in labels.iter().enumerate() {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let on = if bars {
                    y / 4 == c % 4 && (c < 4 || x < SIDE / 2)
                } else {
                    (y / 8) * 2 + x / 8 == c % 4 && (c < 4 || (x + y) % 2 == 0)
                };
                let base = if on { 0.8 } else { 0.1 };
                images[[i, 0, y, x]] = (base + rng.random_range(-0.1..0.1f32)).clamp(0.0, 1.0);
            }
        }
    }
    ImageDataset::new(images, labels, classes, None).unwrap()
}

fn write_pair(dir: &Path, classes: usize, train: usize, test: usize, bars: bool, seed: u64) -> DatasetSource {
    std::fs::create_dir_all(dir).unwrap();
    let src = DatasetSource::idx_dir(dir.file_name().unwrap().to_str().unwrap(), dir);
    if let DatasetSource::Idx {
        train_images,
        train_labels,
        test_images,
        test_labels,
        ..
    } = &src
    {
        write_idx(&synthetic(classes, train, bars, seed), train_images, train_labels).unwrap();
        write_idx(&synthetic(classes, test, bars, seed + 1), test_images, test_labels).unwrap();
    }
    src
}

/// A tiny teacher/student pair on disk and a config that trains in seconds.
pub fn tiny_config(root: &Path, method: AttackMethod) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::mnist_fashion(root);
    cfg.teacher_data = write_pair(&root.join("teacher"), 4, 30, 10, true, 10);
    cfg.student_data = write_pair(&root.join("student"), 4, 20, 20, false, 20);
    cfg.image_size = (SIDE, SIDE);
    cfg.teacher_train_per_class = None;
    cfg.student_train_per_class = 10;
    cfg.samples_per_class = 3;
    cfg.attacker_teacher_per_class = Some(5);
    cfg.method = method;
    cfg.augmentation = AugmentationPolicy {
        n_noise: 2,
        n_jigsaw_or_geometric: 2,
        ..Default::default()
    };
    cfg.augmentation.noise.steps = 5;
    cfg.conv_channels = vec![4, 8];
    cfg.fc_hidden = 16;
    cfg.decoder_base_channels = Some(4);
    cfg.conversion_hidden = 16;
    cfg.teacher_train = TrainConfig::classifier(2, 0);
    cfg.student_train = TrainConfig::classifier(3, 0);
    cfg.shadow_train = TrainConfig::classifier(2, 0);
    cfg.conversion_train = TrainConfig::decoder(2, 0);
    cfg.decoder_train = TrainConfig::decoder(2, 0);
    cfg
}
