//! Experiment configuration and orchestration: data preparation, cached
//! teacher/student training, the three attack pipelines, evaluation, sweeps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::access::{QueryPolicy, StudentOracle};
use crate::attack::direct::direct_inversion_train;
use crate::attack::with_dt::{
    build_shadow_from_teacher, invert_student_output, train_shadow_and_conversion, train_teacher_inversion, ShadowTraining,
};
use crate::attack::without_dt::{build_aug_dataset, train_attack_model, train_shadow_model, AugmentationPolicy, AugmentedDataset};
use crate::data::{load_idx, load_image_folder, subsample_per_class, train_test_split, ImageDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_attack, write_grid, Defense, Evaluation, MetricsReport};
use crate::models::{
    self, accuracy, build_classifier, decoder_blocks_for, load_classifier, load_decoder, save_classifier, save_decoder, strip_to_extractor,
    write_training_log, TrainConfig, TransferMode,
};
use crate::nn::{ArchitectureSpec, Classifier, ConversionNet, InversionDecoder};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    WithDt,
    WithoutDt,
    Direct,
}

impl AttackMethod {
    pub fn policy(self) -> QueryPolicy {
        match self {
            AttackMethod::Direct => QueryPolicy::Permitted,
            _ => QueryPolicy::Forbidden,
        }
    }
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "with_dt" => Ok(AttackMethod::WithDt),
            "without_dt" => Ok(AttackMethod::WithoutDt),
            "direct" => Ok(AttackMethod::Direct),
            _ => Err(Error::Argument(format!("unknown attack method {s:?}"))),
        }
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMethod::WithDt => "with_dt",
            AttackMethod::WithoutDt => "without_dt",
            AttackMethod::Direct => "direct",
        })
    }
}

/// Where a dataset's train and test images live.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Idx {
        name: String,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// A single image folder split 80/20, or explicit train/test folders.
    Folder {
        name: String,
        train: PathBuf,
        test: Option<PathBuf>,
    },
}

impl DatasetSource {
    /// The standard IDX file names inside `dir`.
    pub fn idx_dir(name: &str, dir: &Path) -> Self {
        DatasetSource::Idx {
            name: name.into(),
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            DatasetSource::Idx { name, .. } | DatasetSource::Folder { name, .. } => name,
        }
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                fix(train_images);
                fix(train_labels);
                fix(test_images);
                fix(test_labels);
            }
            DatasetSource::Folder { train, test, .. } => {
                fix(train);
                if let Some(t) = test {
                    fix(t);
                }
            }
        }
    }

    /// (train, test), memoized per process.
    pub fn load(&self, size: (usize, usize)) -> Result<(Arc<ImageDataset>, Arc<ImageDataset>)> {
        static CACHE: OnceLock<Mutex<HashMap<(DatasetSource, (usize, usize)), (Arc<ImageDataset>, Arc<ImageDataset>)>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(hit) = cache.lock().expect("dataset cache").get(&(self.clone(), size)) {
            return Ok(hit.clone());
        }
        let pair = match self {
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => (
                load_idx(train_images, train_labels, size)?,
                load_idx(test_images, test_labels, size)?,
            ),
            DatasetSource::Folder {
                train, test: Some(test), ..
            } => (load_image_folder(train, size)?, load_image_folder(test, size)?),
            DatasetSource::Folder { train, test: None, .. } => train_test_split(&load_image_folder(train, size)?, 0.8, 0)?,
        };
        let pair = (Arc::new(pair.0), Arc::new(pair.1));
        cache.lock().expect("dataset cache").insert((self.clone(), size), pair.clone());
        Ok(pair)
    }
}

fn default_query_fraction() -> f64 {
    0.5
}

fn default_conversion_hidden() -> usize {
    256
}

/// One experiment, as a single JSON document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub teacher_data: DatasetSource,
    pub student_data: DatasetSource,
    /// Auxiliary images for jigsaw augmentation.
    #[serde(default)]
    pub aux_data: Option<DatasetSource>,
    pub image_size: (usize, usize),
    /// Teacher / student class ids when both come from one dataset.
    #[serde(default)]
    pub teacher_classes: Option<BTreeSet<usize>>,
    #[serde(default)]
    pub student_classes: Option<BTreeSet<usize>>,
    /// Seeded random subset of this many student classes.
    #[serde(default)]
    pub student_class_count: Option<usize>,
    /// Teacher training samples per class (all when absent).
    #[serde(default)]
    pub teacher_train_per_class: Option<usize>,
    pub student_train_per_class: usize,
    /// Attacker-held student samples per class.
    pub samples_per_class: usize,
    /// Attacker-held teacher samples per class (with_dt only).
    #[serde(default)]
    pub attacker_teacher_per_class: Option<usize>,
    pub transfer_mode: TransferMode,
    pub method: AttackMethod,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    #[serde(default)]
    pub defense: Defense,
    pub conv_channels: Vec<usize>,
    pub fc_hidden: usize,
    #[serde(default)]
    pub decoder_base_channels: Option<usize>,
    #[serde(default = "default_conversion_hidden")]
    pub conversion_hidden: usize,
    /// Layer K whose activations the masks preserve (conv prefix by default).
    #[serde(default)]
    pub mask_layer: Option<usize>,
    #[serde(default)]
    pub shadow_layers: ShadowTraining,
    /// Fraction of the student test split the direct baseline may query.
    #[serde(default = "default_query_fraction")]
    pub query_fraction: f64,
    /// Cap on evaluation samples per class (the whole held-out half when absent).
    #[serde(default)]
    pub eval_per_class: Option<usize>,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub shadow_train: TrainConfig,
    pub conversion_train: TrainConfig,
    pub decoder_train: TrainConfig,
    pub seed: u64,
    /// Teacher seed; shared teachers let sweeps reuse one checkpoint.
    #[serde(default)]
    pub teacher_seed: Option<u64>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale default: Fashion-MNIST teacher, MNIST student, 32×32.
    pub fn mnist_fashion(data_dir: &Path) -> Self {
        Self {
            teacher_data: DatasetSource::idx_dir("fashion-mnist", &data_dir.join("fashion")),
            student_data: DatasetSource::idx_dir("mnist", &data_dir.join("mnist")),
            aux_data: None,
            image_size: (32, 32),
            teacher_classes: None,
            student_classes: None,
            student_class_count: None,
            teacher_train_per_class: Some(2000),
            student_train_per_class: 100,
            samples_per_class: 10,
            attacker_teacher_per_class: Some(500),
            transfer_mode: TransferMode::Full,
            method: AttackMethod::WithoutDt,
            augmentation: AugmentationPolicy::default(),
            defense: Defense::None,
            conv_channels: vec![8, 16, 32],
            fc_hidden: 128,
            decoder_base_channels: None,
            conversion_hidden: default_conversion_hidden(),
            mask_layer: None,
            shadow_layers: ShadowTraining::DenseOnly,
            query_fraction: default_query_fraction(),
            eval_per_class: None,
            teacher_train: TrainConfig::classifier(3, 0),
            student_train: TrainConfig::classifier(30, 0),
            shadow_train: TrainConfig::classifier(8, 0),
            conversion_train: TrainConfig::decoder(10, 0),
            decoder_train: TrainConfig::decoder(20, 0),
            seed: 0,
            teacher_seed: Some(0),
            cache_dir: None,
            output_dir: None,
        }
    }

    /// Parse, resolving relative dataset paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_slice(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.teacher_data.rebase(base);
        cfg.student_data.rebase(base);
        if let Some(a) = &mut cfg.aux_data {
            a.rebase(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("teacher_train", &self.teacher_train),
            ("student_train", &self.student_train),
            ("shadow_train", &self.shadow_train),
            ("conversion_train", &self.conversion_train),
            ("decoder_train", &self.decoder_train),
        ] {
            t.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.samples_per_class == 0 || self.student_train_per_class == 0 {
            return Err(Error::Config("per-class sample counts must be positive".into()));
        }
        if self.method == AttackMethod::WithDt && self.attacker_teacher_per_class.is_none() {
            return Err(Error::Config(
                "with_dt needs attacker teacher data (attacker_teacher_per_class)".into(),
            ));
        }
        if self.method == AttackMethod::Direct && !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(Error::Config(format!(
                "direct needs a query budget in (0,1), got {}",
                self.query_fraction
            )));
        }
        if self.student_classes.is_some() && self.student_class_count.is_some() {
            return Err(Error::Config("set student_classes or student_class_count, not both".into()));
        }
        if self.conv_channels.is_empty() {
            return Err(Error::Config("conv_channels must not be empty".into()));
        }
        Ok(())
    }

    fn digest(value: &impl Serialize) -> String {
        let bytes = serde_json::to_vec(value).expect("serializable");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn teacher_seed(&self) -> u64 {
        self.teacher_seed.unwrap_or(self.seed)
    }

    fn teacher_key(&self) -> String {
        Self::digest(&(
            &self.teacher_data,
            self.image_size,
            &self.teacher_classes,
            self.teacher_train_per_class,
            &self.conv_channels,
            self.fc_hidden,
            &self.teacher_train,
            self.teacher_seed(),
        ))
    }

    fn student_key(&self) -> String {
        Self::digest(&(
            self.teacher_key(),
            &self.student_data,
            &self.student_classes,
            self.student_class_count,
            self.student_train_per_class,
            self.transfer_mode,
            &self.student_train,
            self.seed,
        ))
    }
}

/// Every split the pipeline uses, derived from the config and root seed.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub teacher_train: ImageDataset,
    pub teacher_test: ImageDataset,
    pub student_train: ImageDataset,
    /// Half of the student test split reachable by the attacker.
    pub query_half: ImageDataset,
    /// Held-out half used only for evaluation.
    pub eval: ImageDataset,
    /// Attacker-held student samples (drawn from `query_half`).
    pub attacker_student: ImageDataset,
    pub attacker_teacher: Option<ImageDataset>,
    pub aux: Option<ImageDataset>,
    pub student_class_ids: Vec<usize>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let (t_train, t_test) = cfg.teacher_data.load(cfg.image_size)?;
    let (s_train, s_test) = cfg.student_data.load(cfg.image_size)?;
    let (mut t_train, mut t_test) = ((*t_train).clone(), (*t_test).clone());
    if let Some(ids) = &cfg.teacher_classes {
        t_train = t_train.select_classes(ids)?;
        t_test = t_test.select_classes(ids)?;
    }
    let available = s_train.num_classes();
    let student_ids: BTreeSet<usize> = match (&cfg.student_classes, cfg.student_class_count) {
        (Some(ids), _) => ids.clone(),
        (None, Some(k)) => {
            if k == 0 || k > available {
                return Err(Error::Config(format!("student_class_count {k} outside 1..={available}")));
            }
            sample(&mut seed::rng(cfg.seed, "class-subset"), available, k).into_iter().collect()
        }
        (None, None) => (0..available).collect(),
    };
    if let (Some(t), true) = (&cfg.teacher_classes, cfg.teacher_data == cfg.student_data) {
        crate::data::ClassPartition {
            teacher_class_ids: t.clone(),
            student_class_ids: student_ids.clone(),
        }
        .validate()?;
    }
    let s_train = s_train.select_classes(&student_ids)?;
    let s_test = s_test.select_classes(&student_ids)?;
    if let Some(k) = cfg.teacher_train_per_class {
        t_train = subsample_per_class(&t_train, k, seed::derive(cfg.teacher_seed(), "teacher-data"))?;
    }
    let student_train = subsample_per_class(&s_train, cfg.student_train_per_class, seed::derive(cfg.seed, "student-data"))?;
    let (query_half, eval) = train_test_split(&s_test, cfg.query_fraction, seed::derive(cfg.seed, "test-split"))?;
    let eval = match cfg.eval_per_class {
        Some(k) => subsample_per_class(&eval, k, seed::derive(cfg.seed, "eval-subset"))?,
        None => eval,
    };
    let attacker_student = subsample_per_class(&query_half, cfg.samples_per_class, seed::derive(cfg.seed, "attacker-student"))?;
    let attacker_teacher = match cfg.attacker_teacher_per_class {
        Some(k) => Some(subsample_per_class(&t_train, k, seed::derive(cfg.seed, "attacker-teacher"))?),
        None => None,
    };
    let aux = match &cfg.aux_data {
        Some(src) => Some((*src.load(cfg.image_size)?.0).clone()),
        None => None,
    };
    Ok(ExperimentData {
        teacher_train: t_train,
        teacher_test: t_test,
        student_train,
        query_half,
        eval,
        attacker_student,
        attacker_teacher,
        aux,
        student_class_ids: student_ids.into_iter().collect(),
    })
}

fn cached_classifier<F>(cache: Option<&Path>, name: &str, train: F) -> Result<(Classifier, BTreeMap<String, f64>)>
where
    F: FnOnce() -> Result<(Classifier, BTreeMap<String, f64>, Option<String>, u64)>,
{
    if let Some(dir) = cache {
        if dir.join(format!("{name}.json")).exists() {
            let (m, manifest) = load_classifier(dir, name)?;
            log::info!("loaded cached {name}");
            return Ok((m, manifest.metrics));
        }
    }
    let (m, metrics, fingerprint, seed) = train()?;
    if let Some(dir) = cache {
        save_classifier(&m, dir, name, seed, fingerprint, metrics.clone())?;
    }
    Ok((m, metrics))
}

/// Train (or load) the teacher. Returns it with its test accuracy.
pub fn teacher_model(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<(Classifier, f64)> {
    let name = format!("teacher-{}", cfg.teacher_key());
    let (m, metrics) = cached_classifier(cfg.cache_dir.as_deref(), &name, || {
        let spec = ArchitectureSpec::from_channels(
            data.teacher_train.image_shape(),
            &cfg.conv_channels,
            cfg.fc_hidden,
            data.teacher_train.num_classes(),
        );
        let seed = cfg.teacher_seed();
        let mut t = build_classifier(spec, seed::derive(seed, "teacher-init"))?;
        let train_cfg = cfg.teacher_train.clone().with_seed(seed::derive(seed, "teacher-train"));
        let started = Instant::now();
        let (acc, curve) = train_classifier_logged(&mut t, &data.teacher_train, &data.teacher_test, &train_cfg, cfg, "teacher")?;
        log::info!("teacher: test accuracy {acc:.4} in {:.1}s", started.elapsed().as_secs_f64());
        let metrics = BTreeMap::from([
            ("test_accuracy".to_string(), acc),
            ("final_loss".to_string(), curve.last().map_or(f64::NAN, |e| e.loss)),
        ]);
        Ok((t, metrics, Some(data.teacher_train.fingerprint()), seed))
    })?;
    Ok((m, metrics.get("test_accuracy").copied().unwrap_or(f64::NAN)))
}

fn train_classifier_logged(
    model: &mut Classifier,
    train: &ImageDataset,
    test: &ImageDataset,
    tc: &TrainConfig,
    cfg: &ExperimentConfig,
    phase: &str,
) -> Result<(f64, Vec<models::EpochLoss>)> {
    let (acc, curve) = models::train_classifier(model, train, test, tc)?;
    if let Some(out) = &cfg.output_dir {
        write_training_log(&out.join("training.jsonl"), phase, &curve)?;
    }
    Ok((acc, curve))
}

/// Fine-tune (or load) the victim student. Returns it with its accuracy on
/// the evaluation half.
pub fn student_model(cfg: &ExperimentConfig, data: &ExperimentData, teacher: &Classifier) -> Result<(Classifier, f64)> {
    let name = format!("student-{}", cfg.student_key());
    let (m, metrics) = cached_classifier(cfg.cache_dir.as_deref(), &name, || {
        let tc = cfg.student_train.clone().with_seed(seed::derive(cfg.seed, "student-train"));
        let mut s = models::init_student(teacher, cfg.transfer_mode, data.student_train.num_classes(), tc.seed);
        let started = Instant::now();
        let (acc, _) = train_classifier_logged(&mut s, &data.student_train, &data.eval, &tc, cfg, "student")?;
        log::info!(
            "student ({}): accuracy {acc:.4} in {:.1}s",
            cfg.transfer_mode,
            started.elapsed().as_secs_f64()
        );
        Ok((
            s,
            BTreeMap::from([("test_accuracy".to_string(), acc)]),
            Some(data.student_train.fingerprint()),
            cfg.seed,
        ))
    })?;
    Ok((m, metrics.get("test_accuracy").copied().unwrap_or(f64::NAN)))
}

/// A trained attack, ready to invert confidence vectors.
#[derive(Debug, Clone)]
pub enum Inverter {
    Direct {
        decoder: InversionDecoder,
    },
    WithoutDt {
        decoder: InversionDecoder,
        shadow: Classifier,
    },
    WithDt {
        decoder: InversionDecoder,
        conversion: ConversionNet,
        shadow: Classifier,
    },
}

impl Inverter {
    pub fn invert(&self, y: &Array2<f32>) -> Result<Array4<f32>> {
        match self {
            Inverter::Direct { decoder } | Inverter::WithoutDt { decoder, .. } => decoder.decode(y),
            Inverter::WithDt { decoder, conversion, .. } => invert_student_output(y, conversion, decoder),
        }
    }

    pub fn method(&self) -> AttackMethod {
        match self {
            Inverter::Direct { .. } => AttackMethod::Direct,
            Inverter::WithoutDt { .. } => AttackMethod::WithoutDt,
            Inverter::WithDt { .. } => AttackMethod::WithDt,
        }
    }

    /// Decoder, shadow and conversion checkpoints under `dir`.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        let none = BTreeMap::new;
        match self {
            Inverter::Direct { decoder } => {
                save_decoder(decoder, dir, "decoder", seed, none())?;
            }
            Inverter::WithoutDt { decoder, shadow } => {
                save_decoder(decoder, dir, "decoder", seed, none())?;
                save_classifier(shadow, dir, "shadow", seed, None, none())?;
            }
            Inverter::WithDt {
                decoder,
                conversion,
                shadow,
            } => {
                save_decoder(decoder, dir, "decoder", seed, none())?;
                save_classifier(shadow, dir, "shadow", seed, None, none())?;
                models::save_conversion(conversion, dir, "conversion", seed)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path, method: AttackMethod) -> Result<Self> {
        let decoder = load_decoder(dir, "decoder")?.0;
        Ok(match method {
            AttackMethod::Direct => Inverter::Direct { decoder },
            AttackMethod::WithoutDt => Inverter::WithoutDt {
                decoder,
                shadow: load_classifier(dir, "shadow")?.0,
            },
            AttackMethod::WithDt => Inverter::WithDt {
                decoder,
                shadow: load_classifier(dir, "shadow")?.0,
                conversion: models::load_conversion(dir, "conversion")?,
            },
        })
    }

    pub fn shadow(&self) -> Option<&Classifier> {
        match self {
            Inverter::Direct { .. } => None,
            Inverter::WithoutDt { shadow, .. } | Inverter::WithDt { shadow, .. } => Some(shadow),
        }
    }
}

/// Everything produced before evaluation.
#[derive(Debug)]
pub struct PreparedAttack {
    pub config: ExperimentConfig,
    pub data: ExperimentData,
    pub oracle: StudentOracle,
    pub inverter: Inverter,
    pub augmented: Option<AugmentedDataset>,
    pub extra: BTreeMap<String, f64>,
    /// Student queries issued when a reloaded attack was trained.
    pub prior_queries: usize,
    pub started: Instant,
}

fn decoder_for(cfg: &ExperimentConfig, input_dim: usize, shape: (usize, usize, usize), seed: u64) -> Result<InversionDecoder> {
    let blocks = decoder_blocks_for(shape.1)?;
    let mut spec = crate::nn::DecoderSpec::new(input_dim, shape, blocks);
    if let Some(b) = cfg.decoder_base_channels {
        spec.base_channels = b;
    }
    InversionDecoder::new(spec, &mut seed::rng(seed, "decoder-init"))
}

fn log_curve(cfg: &ExperimentConfig, phase: &str, curve: &[models::EpochLoss]) -> Result<()> {
    if let Some(out) = &cfg.output_dir {
        write_training_log(&out.join("training.jsonl"), phase, curve)?;
    }
    Ok(())
}

/// Augment the attacker's student samples with masks learned on `teacher`.
pub fn augment_student_data(cfg: &ExperimentConfig, data: &ExperimentData, teacher: &Classifier) -> Result<AugmentedDataset> {
    let kl = cfg.mask_layer.unwrap_or(teacher.conv_depth());
    let started = Instant::now();
    let aug = build_aug_dataset(
        &data.attacker_student,
        data.aux.as_ref(),
        &cfg.augmentation,
        teacher,
        kl,
        seed::derive(cfg.seed, "augment"),
    )?;
    log::info!(
        "augmented {} -> {} samples in {:.1}s",
        data.attacker_student.len(),
        aug.dataset.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(aug)
}

/// Train teacher, student and the configured attack. The student is only
/// reachable through the returned oracle.
pub fn prepare_attack(cfg: &ExperimentConfig) -> Result<PreparedAttack> {
    cfg.validate()?;
    let started = Instant::now();
    let data = prepare_data(cfg)?;
    let (teacher, teacher_acc) = teacher_model(cfg, &data)?;
    let (student, student_acc) = student_model(cfg, &data, &teacher)?;
    let oracle = StudentOracle::new(student, cfg.method.policy());
    let mut extra = BTreeMap::from([
        ("teacher_accuracy".to_string(), teacher_acc),
        ("student_accuracy".to_string(), student_acc),
    ]);
    let shape = data.attacker_student.image_shape();
    let k = data.attacker_student.num_classes();
    let dec_cfg = cfg.decoder_train.clone().with_seed(seed::derive(cfg.seed, "decoder-train"));
    let mut augmented = None;
    let inverter = match cfg.method {
        AttackMethod::Direct => {
            let mut decoder = decoder_for(cfg, k, shape, seed::derive(cfg.seed, "direct"))?;
            let out = direct_inversion_train(|x| oracle.query(x), &data.query_half, &mut decoder, &dec_cfg)?;
            log_curve(cfg, "direct-decoder", &out.curve)?;
            extra.insert("decoder_final_loss".into(), out.curve.last().map_or(f64::NAN, |e| e.loss));
            Inverter::Direct { decoder }
        }
        AttackMethod::WithoutDt => {
            let aug = augment_student_data(cfg, &data, &teacher)?;
            let sc = cfg.shadow_train.clone().with_seed(seed::derive(cfg.seed, "shadow-train"));
            let shadow = train_shadow_model(&teacher, cfg.transfer_mode, &aug.dataset, &sc)?;
            extra.insert("shadow_accuracy".into(), accuracy(&shadow, &data.eval)?);
            let mut decoder = decoder_for(cfg, k, shape, seed::derive(cfg.seed, "without-dt"))?;
            let curve = train_attack_model(&mut decoder, &shadow, &aug.dataset, &dec_cfg)?;
            log_curve(cfg, "attack-decoder", &curve)?;
            extra.insert("augmented_samples".into(), aug.dataset.len() as f64);
            extra.insert("decoder_final_loss".into(), curve.last().map_or(f64::NAN, |e| e.loss));
            augmented = Some(aug);
            Inverter::WithoutDt { decoder, shadow }
        }
        AttackMethod::WithDt => {
            let dt = data
                .attacker_teacher
                .as_ref()
                .ok_or_else(|| Error::Config("with_dt needs attacker teacher data".into()))?;
            let extractor = strip_to_extractor(&teacher)?;
            let mut decoder = decoder_for(cfg, extractor.output_dim(), shape, seed::derive(cfg.seed, "with-dt"))?;
            let curve = train_teacher_inversion(&mut decoder, &extractor, dt, &dec_cfg)?;
            log_curve(cfg, "teacher-inversion", &curve)?;
            let mut shadow = build_shadow_from_teacher(&teacher, k, seed::derive(cfg.seed, "shadow"));
            let mut conversion = ConversionNet::new(
                k,
                cfg.conversion_hidden,
                extractor.output_dim(),
                &mut seed::rng(cfg.seed, "conversion-init"),
            )?;
            let cc = cfg.conversion_train.clone().with_seed(seed::derive(cfg.seed, "conversion-train"));
            let curve = train_shadow_and_conversion(
                &mut shadow,
                &mut conversion,
                &extractor,
                Some(dt),
                &data.attacker_student,
                cfg.shadow_layers,
                &cc,
            )?;
            log_curve(cfg, "shadow-conversion", &curve)?;
            extra.insert("conversion_final_loss".into(), curve.last().map_or(f64::NAN, |e| e.loss));
            Inverter::WithDt {
                decoder,
                conversion,
                shadow,
            }
        }
    };
    if cfg.method != AttackMethod::Direct && oracle.pre_evaluation_queries() != 0 {
        return Err(Error::AccessViolation {
            site: oracle.violations().first().cloned().unwrap_or_else(|| "unknown".into()),
        });
    }
    Ok(PreparedAttack {
        config: cfg.clone(),
        data,
        oracle,
        inverter,
        augmented,
        extra,
        prior_queries: 0,
        started,
    })
}

/// Rebuild the victim and reload a saved attack from `dir` (as written by
/// [`PreparedAttack::save`]). Teacher and student come from the cache.
pub fn load_attack(cfg: &ExperimentConfig, dir: &Path) -> Result<PreparedAttack> {
    cfg.validate()?;
    let started = Instant::now();
    let data = prepare_data(cfg)?;
    let (teacher, teacher_acc) = teacher_model(cfg, &data)?;
    let (student, student_acc) = student_model(cfg, &data, &teacher)?;
    let inverter = Inverter::load(dir, cfg.method)?;
    let extra_path = dir.join("extra.json");
    let mut extra: BTreeMap<String, f64> = match fs::read(&extra_path) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => BTreeMap::new(),
    };
    extra.insert("teacher_accuracy".into(), teacher_acc);
    extra.insert("student_accuracy".into(), student_acc);
    let prior_queries = extra.remove("pre_evaluation_queries").map_or(0, |v| v as usize);
    if cfg.method != AttackMethod::Direct && prior_queries != 0 {
        return Err(Error::AccessViolation {
            site: format!("saved attack in {}", dir.display()),
        });
    }
    let oracle = StudentOracle::new(student, cfg.method.policy());
    Ok(PreparedAttack {
        config: cfg.clone(),
        data,
        oracle,
        inverter,
        augmented: None,
        extra,
        prior_queries,
        started,
    })
}

impl PreparedAttack {
    /// Persist the trained attack (and its bookkeeping) under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.inverter.save(dir, self.config.seed)?;
        let mut extra = self.extra.clone();
        extra.insert(
            "pre_evaluation_queries".into(),
            (self.prior_queries + self.oracle.pre_evaluation_queries()) as f64,
        );
        let p = dir.join("extra.json");
        fs::write(&p, serde_json::to_vec_pretty(&extra)?).map_err(|e| Error::io(&p, e))
    }

    /// Evaluate under `defense` and, when an output directory is set, write
    /// the metrics JSON and a reconstruction grid.
    pub fn evaluate(&self, defense: Defense) -> Result<Evaluation> {
        let cfg = &self.config;
        let mut ev = evaluate_attack(
            &cfg.method.to_string(),
            |y| self.inverter.invert(y),
            &self.oracle,
            &self.data.eval,
            defense,
            self.inverter.shadow(),
        )?;
        let r = &mut ev.report;
        r.dataset = cfg.student_data.name().to_string();
        r.query_count_pre_eval += self.prior_queries;
        r.student_samples_per_class = cfg.samples_per_class;
        r.seeds = BTreeMap::from([("root".to_string(), cfg.seed), ("teacher".to_string(), cfg.teacher_seed())]);
        r.wall_clock_secs = self.started.elapsed().as_secs_f64();
        r.extra = self.extra.clone();
        if let Some(out) = &cfg.output_dir {
            let tag = format!("{}-{}", cfg.method, defense.to_string().replace(':', "-"));
            r.write_json(&out.join(format!("metrics-{tag}.json")))?;
            let n = self.data.eval.len().min(16);
            let idx: Vec<usize> = (0..self.data.eval.len())
                .step_by((self.data.eval.len() / n).max(1))
                .take(n)
                .collect();
            write_grid(
                &models::gather4(self.data.eval.images(), &idx),
                &models::gather4(&ev.reconstructions, &idx),
                n,
                &out.join(format!("grid-{tag}.png")),
            )?;
        }
        Ok(ev)
    }
}

/// Full pipeline for one config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    if let Some(out) = &cfg.output_dir {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join("config.json");
        fs::write(&p, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&p, e))?;
    }
    let prepared = prepare_attack(cfg)?;
    Ok(prepared.evaluate(cfg.defense)?.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Classes,
    DataSize,
    DefenseH,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "classes" => Ok(SweepAxis::Classes),
            "data_size" => Ok(SweepAxis::DataSize),
            "defense_h" => Ok(SweepAxis::DefenseH),
            _ => Err(Error::Argument(format!("unknown sweep axis {s:?}"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Classes => "classes",
            SweepAxis::DataSize => "data_size",
            SweepAxis::DefenseH => "defense_h",
        })
    }
}

/// The config for one sweep point; only the swept field differs.
pub fn sweep_point(base: &ExperimentConfig, axis: SweepAxis, value: usize) -> ExperimentConfig {
    let mut c = base.clone();
    match axis {
        SweepAxis::Classes => c.student_class_count = Some(value),
        SweepAxis::DataSize => c.samples_per_class = value,
        SweepAxis::DefenseH => {
            c.defense = Defense::TopH {
                h: value,
                renormalize: false,
            }
        }
    }
    if let Some(out) = &base.output_dir {
        c.output_dir = Some(out.join(format!("{axis}-{value}")));
    }
    c
}

/// One report per value. Defense sweeps train the attack once.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[usize]) -> Result<Vec<MetricsReport>> {
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    let reports = match axis {
        SweepAxis::DefenseH => {
            let prepared = prepare_attack(base)?;
            values
                .iter()
                .map(|&h| prepared.evaluate(Defense::TopH { h, renormalize: false }).map(|e| e.report))
                .collect::<Result<Vec<_>>>()?
        }
        _ => values
            .iter()
            .map(|&v| run_experiment(&sweep_point(base, axis, v)))
            .collect::<Result<Vec<_>>>()?,
    };
    if let Some(out) = &base.output_dir {
        write_csv(&out.join(format!("sweep-{axis}.csv")), axis, values, &reports)?;
    }
    Ok(reports)
}

pub const CSV_HEADER: &str =
    "axis,value,method,dataset,num_classes,samples_per_class,defense,mean_inversion_error,mean_confidence_error,argmax_preservation,query_count_pre_eval,seed";

pub fn csv_row(axis: &str, value: &str, r: &MetricsReport) -> String {
    format!(
        "{axis},{value},{},{},{},{},{},{:.6},{},{:.4},{},{}",
        r.method,
        r.dataset,
        r.num_classes,
        r.student_samples_per_class,
        r.defense,
        r.mean_inversion_error,
        r.mean_confidence_error.map_or(String::new(), |v| format!("{v:.6}")),
        r.argmax_preservation,
        r.query_count_pre_eval,
        r.seeds.get("root").copied().unwrap_or_default(),
    )
}

pub fn write_csv(path: &Path, axis: SweepAxis, values: &[usize], reports: &[MetricsReport]) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for (v, r) in values.iter().zip(reports) {
        text.push_str(&csv_row(&axis.to_string(), &v.to_string(), r));
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
