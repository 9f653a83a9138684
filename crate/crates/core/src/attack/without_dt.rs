//! Attack without teacher data: augment the few student samples with learned
//! masks, fit a shadow by transfer from the teacher, then train `G` on the
//! shadow's confidences.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::{geometric_augment, jigsaw_mix, learn_jigsaw_mask, learn_noise_masks, perturb, JigsawConfig, NoiseMaskConfig};
use crate::data::{resize_bilinear, write_image_folder, ImageDataset};
use crate::error::{Error, Result};
use crate::models::{fit_decoder, transfer_student, EpochLoss, TrainConfig, TransferMode};
use crate::nn::{Classifier, InversionDecoder};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Jigsaw,
    Geometric,
}

/// How auxiliary images are paired with student classes in jigsaw mode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMatching {
    #[default]
    Uniform,
    /// Pick aux samples whose class attribute equals the student class's.
    ByAttribute {
        student_classes: Vec<String>,
        aux_classes: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub n_noise: usize,
    pub n_jigsaw_or_geometric: usize,
    pub mode: AugmentMode,
    #[serde(default)]
    pub aux_matching: AuxMatching,
    #[serde(default)]
    pub noise: NoiseMaskConfig,
    #[serde(default)]
    pub jigsaw: JigsawConfig,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            n_noise: 20,
            n_jigsaw_or_geometric: 20,
            mode: AugmentMode::Geometric,
            aux_matching: AuxMatching::Uniform,
            noise: NoiseMaskConfig::default(),
            jigsaw: JigsawConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub index: usize,
    pub source: usize,
    pub method: String,
    pub mask_hash: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct AugmentedDataset {
    pub dataset: ImageDataset,
    pub provenance: Vec<Provenance>,
}

impl AugmentedDataset {
    /// Image-folder layout plus `provenance.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_image_folder(&self.dataset, dir)?;
        let path = dir.join("provenance.json");
        fs::write(&path, serde_json::to_vec_pretty(&self.provenance)?).map_err(|e| Error::io(&path, e))
    }

    /// Indices whose provenance method is `method`.
    pub fn indices_of(&self, method: &str) -> Vec<usize> {
        self.provenance.iter().filter(|p| p.method == method).map(|p| p.index).collect()
    }
}

fn hash_mask<D: ndarray::Dimension>(m: &ndarray::Array<f32, D>) -> String {
    let mut h = Sha256::new();
    m.iter().for_each(|v| h.update(v.to_le_bytes()));
    hex::encode(&h.finalize()[..8])
}

fn aux_candidates(aux: &ImageDataset, matching: &AuxMatching, class: usize) -> Result<Vec<usize>> {
    match matching {
        AuxMatching::Uniform => Ok((0..aux.len()).collect()),
        AuxMatching::ByAttribute {
            student_classes,
            aux_classes,
        } => {
            let want = student_classes
                .get(class)
                .ok_or_else(|| Error::Config(format!("no attribute for student class {class}")))?;
            let hits: Vec<usize> = (0..aux.len()).filter(|&i| aux_classes.get(aux.labels()[i]) == Some(want)).collect();
            if hits.is_empty() {
                return Err(Error::InsufficientData(format!("no auxiliary sample carries attribute {want:?}")));
            }
            Ok(hits)
        }
    }
}

/// Student samples first, then per sample `n_noise` noise-mask samples and
/// `n_jigsaw_or_geometric` jigsaw or geometric samples, all labelled with the
/// source class.
pub fn build_aug_dataset(
    student: &ImageDataset,
    aux: Option<&ImageDataset>,
    policy: &AugmentationPolicy,
    teacher: &Classifier,
    k: usize,
    seed: u64,
) -> Result<AugmentedDataset> {
    if policy.mode == AugmentMode::Jigsaw && policy.n_jigsaw_or_geometric > 0 && aux.is_none() {
        return Err(Error::Config("jigsaw augmentation needs an auxiliary dataset".into()));
    }
    let (c, h, w) = student.image_shape();
    let n = student.len();
    let per = 1 + policy.n_noise + policy.n_jigsaw_or_geometric;
    let total = n * per;
    let mut images = Array4::<f32>::zeros((total, c, h, w));
    let mut labels = Vec::with_capacity(total);
    let mut provenance = Vec::with_capacity(total);
    let mut push = |img: ndarray::ArrayView3<'_, f32>, src: usize, method: &str, mask_hash: Option<String>, labels: &mut Vec<usize>| {
        let i = labels.len();
        images.index_axis_mut(Axis(0), i).assign(&img);
        labels.push(student.labels()[src]);
        provenance.push(Provenance {
            index: i,
            source: src,
            method: method.into(),
            mask_hash,
            seed,
        });
    };
    for i in 0..n {
        push(student.image(i), i, "original", None, &mut labels);
    }

    if policy.n_noise > 0 {
        let masks = learn_noise_masks(
            student.images(),
            student.labels(),
            teacher,
            k,
            &policy.noise,
            &mut seed::rng(seed, "masks"),
        )?;
        let mut noise = seed::rng(seed, "noise");
        for (i, m) in masks.iter().enumerate() {
            let tag = hash_mask(&m.m);
            for _ in 0..policy.n_noise {
                let img = perturb(student.image(i), m.m.view(), m.sigma, &mut noise)?;
                push(img.view(), i, "noise", Some(tag.clone()), &mut labels);
            }
        }
    }

    if policy.n_jigsaw_or_geometric > 0 {
        match policy.mode {
            AugmentMode::Geometric => {
                let mut rng = seed::rng(seed, "geometric");
                for i in 0..n {
                    for img in geometric_augment(student.image(i), policy.n_jigsaw_or_geometric, &mut rng) {
                        push(img.view(), i, "geometric", None, &mut labels);
                    }
                }
            }
            AugmentMode::Jigsaw => {
                let aux = aux.expect("checked above");
                let mut rng = seed::rng(seed, "aux");
                for i in 0..n {
                    let pool = aux_candidates(aux, &policy.aux_matching, student.labels()[i])?;
                    for _ in 0..policy.n_jigsaw_or_geometric {
                        let j = *pool.choose(&mut rng).expect("non-empty pool");
                        let xa = match_shape(aux.image(j), (c, h, w))?;
                        let m = learn_jigsaw_mask(student.image(i), xa.view(), teacher, k, &policy.jigsaw)?;
                        let img = jigsaw_mix(student.image(i), xa.view(), m.mask.view())?;
                        push(img.view(), i, "jigsaw", Some(hash_mask(&m.mask)), &mut labels);
                    }
                }
            }
        }
    }

    let dataset = ImageDataset::new(images, labels, student.num_classes(), student.class_names().map(<[String]>::to_vec))?;
    Ok(AugmentedDataset { dataset, provenance })
}

fn match_shape(x: ndarray::ArrayView3<'_, f32>, (c, h, w): (usize, usize, usize)) -> Result<Array3<f32>> {
    let x = if (x.dim().1, x.dim().2) == (h, w) {
        x.to_owned()
    } else {
        resize_bilinear(x, h, w)
    };
    match (x.dim().0, c) {
        (a, b) if a == b => Ok(x),
        (3, 1) => Ok(x.mean_axis(Axis(0)).expect("3 channels").insert_axis(Axis(0))),
        (1, 3) => Ok(ndarray::concatenate(Axis(0), &[x.view(), x.view(), x.view()]).expect("same planes")),
        (a, b) => Err(Error::Shape(format!("cannot map {a}-channel aux images to {b} channels"))),
    }
}

/// Fit the shadow `A` from the teacher with the victim's transfer mode.
pub fn train_shadow_model(teacher: &Classifier, mode: TransferMode, augmented: &ImageDataset, cfg: &TrainConfig) -> Result<Classifier> {
    transfer_student(teacher, mode, augmented.num_classes(), augmented, cfg)
}

/// Train `G` on `(A(x), x)` pairs; `A` is only read.
pub fn train_attack_model(
    decoder: &mut InversionDecoder,
    shadow: &Classifier,
    data: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    if decoder.input_dim() != shadow.num_classes() {
        return Err(Error::Shape(format!(
            "decoder takes {} inputs, shadow emits {}",
            decoder.input_dim(),
            shadow.num_classes()
        )));
    }
    let codes = shadow.predict(data.images())?;
    fit_decoder(decoder, &codes, data.images(), cfg)
}

pub fn invert_from_confidence(decoder: &InversionDecoder, y: &Array2<f32>) -> Result<Array4<f32>> {
    decoder.decode(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::random_dataset;
    use crate::models::{build_classifier, build_decoder};
    use crate::nn::ArchitectureSpec;

    fn teacher() -> Classifier {
        build_classifier(ArchitectureSpec::from_channels((1, 8, 8), &[3, 4], 8, 5), 2).unwrap()
    }

    fn quick_policy(n_noise: usize, n_other: usize, mode: AugmentMode) -> AugmentationPolicy {
        AugmentationPolicy {
            n_noise,
            n_jigsaw_or_geometric: n_other,
            mode,
            noise: NoiseMaskConfig {
                steps: 5,
                ..NoiseMaskConfig::default()
            },
            jigsaw: JigsawConfig {
                grid: (2, 2),
                steps: 3,
                ..JigsawConfig::default()
            },
            ..AugmentationPolicy::default()
        }
    }

    #[test]
    fn sizes_follow_the_policy() {
        let t = teacher();
        let ds = random_dataset(3, 2, (1, 8, 8), 0);
        let aug = build_aug_dataset(&ds, None, &quick_policy(2, 3, AugmentMode::Geometric), &t, 2, 0).unwrap();
        assert_eq!(aug.dataset.len(), 6 * 6);
        assert_eq!(aug.indices_of("noise").len(), 12);
        assert_eq!(aug.indices_of("geometric").len(), 18);
        for p in &aug.provenance {
            assert_eq!(aug.dataset.labels()[p.index], ds.labels()[p.source]);
        }
        let same = build_aug_dataset(&ds, None, &quick_policy(0, 0, AugmentMode::Geometric), &t, 2, 0).unwrap();
        assert_eq!(same.dataset.images(), ds.images());
        assert_eq!(same.dataset.labels(), ds.labels());
    }

    #[test]
    fn jigsaw_requires_aux_and_uses_it() {
        let t = teacher();
        let ds = random_dataset(2, 1, (1, 8, 8), 0);
        let r = build_aug_dataset(&ds, None, &quick_policy(0, 1, AugmentMode::Jigsaw), &t, 2, 0);
        assert!(matches!(r, Err(Error::Config(_))));
        let aux = random_dataset(2, 2, (3, 16, 16), 4);
        let aug = build_aug_dataset(&ds, Some(&aux), &quick_policy(0, 2, AugmentMode::Jigsaw), &t, 2, 0).unwrap();
        assert_eq!(aug.dataset.len(), 2 * 3);
        assert!(aug.indices_of("jigsaw").iter().all(|&i| aug.provenance[i].mask_hash.is_some()));
    }

    #[test]
    fn attribute_matching_restricts_the_pool() {
        let aux = random_dataset(2, 3, (1, 8, 8), 0);
        let m = AuxMatching::ByAttribute {
            student_classes: vec!["f".into(), "m".into()],
            aux_classes: vec!["m".into(), "f".into()],
        };
        let pool = aux_candidates(&aux, &m, 0).unwrap();
        assert!(pool.iter().all(|&i| aux.labels()[i] == 1));
        assert!(aux_candidates(&aux, &m, 5).is_err());
    }

    #[test]
    fn augmented_set_persists_with_provenance() {
        let t = teacher();
        let ds = random_dataset(2, 1, (1, 8, 8), 0);
        let aug = build_aug_dataset(&ds, None, &quick_policy(1, 1, AugmentMode::Geometric), &t, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        aug.save(dir.path()).unwrap();
        let back: Vec<Provenance> = serde_json::from_slice(&fs::read(dir.path().join("provenance.json")).unwrap()).unwrap();
        assert_eq!(back, aug.provenance);
    }

    #[test]
    fn attack_model_leaves_shadow_alone() {
        let shadow = build_classifier(ArchitectureSpec::from_channels((1, 8, 8), &[3, 4], 8, 3), 0).unwrap();
        let data = random_dataset(3, 4, (1, 8, 8), 1);
        let mut g = build_decoder(3, (1, 8, 8), 2, 0).unwrap();
        let (a0, g0) = (shadow.digest(), g.digest());
        train_attack_model(&mut g, &shadow, &data, &TrainConfig::decoder(0, 0)).unwrap();
        assert_eq!(g.digest(), g0);
        train_attack_model(&mut g, &shadow, &data, &TrainConfig::decoder(2, 0)).unwrap();
        assert_eq!(shadow.digest(), a0);
        let mut wrong = build_decoder(4, (1, 8, 8), 2, 0).unwrap();
        assert!(matches!(
            train_attack_model(&mut wrong, &shadow, &data, &TrainConfig::decoder(1, 0)),
            Err(Error::Shape(_))
        ));
        let y = Array2::eye(3);
        assert_eq!(invert_from_confidence(&g, &y).unwrap(), invert_from_confidence(&g, &y).unwrap());
        assert!(invert_from_confidence(&g, &Array2::zeros((1, 2))).is_err());
    }
}
