//! Training loops, transfer-learning modes, feature extraction and
//! checkpoint persistence for the classifier and decoder family.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::nn::{self, ArchitectureSpec, Classifier, ConversionNet, DecoderSpec, InversionDecoder, Mode, Optimizer, OptimizerKind};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    /// Momentum SGD at 0.01.
    pub fn classifier(epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate: 0.01,
            epochs,
            batch_size: 64,
            seed,
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.0,
        }
    }

    /// Adam at 1e-3.
    pub fn decoder(epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            epochs,
            batch_size: 64,
            seed,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Optimizer {
        Optimizer::new(self.optimizer, self.learning_rate, self.weight_decay)
    }
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

/// Append one JSON line per epoch, tagged with `phase`.
pub fn write_training_log(path: &Path, phase: &str, curve: &[EpochLoss]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for e in curve {
        let line = serde_json::json!({"phase": phase, "epoch": e.epoch, "loss": e.loss});
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Shuffled mini-batch index lists for one epoch.
pub(crate) fn batches<R: rand::Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

pub(crate) fn gather4(x: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    x.select(Axis(0), idx)
}

pub(crate) fn gather2(x: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    x.select(Axis(0), idx)
}

pub fn build_classifier(spec: ArchitectureSpec, seed: u64) -> Result<Classifier> {
    Classifier::new(spec, &mut seed::rng(seed, "init"))
}

fn check_labels(model: &Classifier, ds: &ImageDataset) -> Result<()> {
    let k = model.num_classes();
    if let Some(&bad) = ds.labels().iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {bad} outside the model's {k} classes")));
    }
    if ds.image_shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "dataset images {:?} do not match model input {:?}",
            ds.image_shape(),
            model.input_shape()
        )));
    }
    Ok(())
}

pub fn accuracy(model: &Classifier, ds: &ImageDataset) -> Result<f64> {
    check_labels(model, ds)?;
    let probs = model.predict(ds.images())?;
    let hits = probs
        .rows()
        .into_iter()
        .zip(ds.labels())
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f32>) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Cross-entropy training of the trainable layers. Returns the test accuracy
/// and the per-epoch loss curve.
pub fn train_classifier(
    model: &mut Classifier,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<EpochLoss>)> {
    cfg.validate()?;
    check_labels(model, train)?;
    check_labels(model, test)?;
    let mut rng = seed::rng(cfg.seed, "batching");
    let mut opt = cfg.optimizer();
    let mut curve = Vec::with_capacity(cfg.epochs);
    model.zero_grad();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in batches(train.len(), cfg.batch_size, &mut rng) {
            let x = gather4(train.images(), &idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            let probs = model.forward_full(&x, Mode::Train)?;
            let (loss, dlogits) = nn::cross_entropy(&probs, &y);
            if !loss.is_finite() {
                return Err(Error::Optimization(format!("non-finite loss at epoch {epoch}")));
            }
            model.backward_logits(&dlogits, false)?;
            opt.step(model.params_mut());
            model.zero_grad();
            total += loss as f64 * idx.len() as f64;
        }
        let loss = total / train.len() as f64;
        log::debug!("classifier epoch {epoch}: loss {loss:.4}");
        curve.push(EpochLoss { epoch, loss });
    }
    let acc = accuracy(model, test)?;
    Ok((acc, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Only the last layer trains.
    Deep,
    /// The conv prefix is frozen.
    Mid,
    /// Everything trains from the teacher's weights.
    Full,
}

impl TransferMode {
    /// Number of leading layers copied and frozen.
    pub fn frozen_layers(self, model: &Classifier) -> usize {
        match self {
            TransferMode::Deep => model.layer_count() - 1,
            TransferMode::Mid => model.conv_depth(),
            TransferMode::Full => 0,
        }
    }
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(TransferMode::Deep),
            "mid" => Ok(TransferMode::Mid),
            "full" => Ok(TransferMode::Full),
            other => Err(Error::Argument(format!(
                "unknown transfer mode {other:?} (expected deep, mid or full)"
            ))),
        }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::Deep => "deep",
            TransferMode::Mid => "mid",
            TransferMode::Full => "full",
        })
    }
}

/// Copy of `teacher` with a fresh `num_classes`-wide head and the first K
/// layers frozen per `mode`, untrained.
pub fn init_student(teacher: &Classifier, mode: TransferMode, num_classes: usize, seed: u64) -> Classifier {
    let mut student = teacher.clone();
    student.replace_head(num_classes, &mut seed::rng(seed, "head"));
    student.reset_optimizer_state();
    let k = mode.frozen_layers(&student);
    student.freeze_first(k);
    student
}

/// Build a student from `teacher` per `mode` and fine-tune it on `train`.
pub fn transfer_student(
    teacher: &Classifier,
    mode: TransferMode,
    num_classes: usize,
    train: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    let mut student = init_student(teacher, mode, num_classes, cfg.seed);
    let (acc, _) = train_classifier(&mut student, train, train, cfg)?;
    log::info!("{mode} student: train accuracy {acc:.3}");
    Ok(student)
}

/// Read-only conv prefix of a classifier; outputs flattened features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    model: Classifier,
}

impl FeatureExtractor {
    pub fn extract(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        self.model.features(x)
    }

    pub fn output_dim(&self) -> usize {
        self.model.spec().feature_dim().expect("validated at construction")
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.model.input_shape()
    }

    pub fn digest(&self) -> String {
        self.model.digest_layers(0..self.model.conv_depth())
    }
}

pub fn strip_to_extractor(model: &Classifier) -> Result<FeatureExtractor> {
    if model.conv_depth() == 0 {
        return Err(Error::Argument("model has no conv blocks to extract".into()));
    }
    let mut model = model.clone();
    model.freeze_all();
    Ok(FeatureExtractor { model })
}

pub fn build_decoder(input_dim: usize, output_shape: (usize, usize, usize), blocks: usize, seed: u64) -> Result<InversionDecoder> {
    InversionDecoder::new(
        DecoderSpec::new(input_dim, output_shape, blocks),
        &mut seed::rng(seed, "decoder-init"),
    )
}

/// Decoder blocks needed to reach a square image side (4·2^(b-1)).
pub fn decoder_blocks_for(side: usize) -> Result<usize> {
    if side < 4 || !side.is_power_of_two() {
        return Err(Error::Shape(format!("image side {side} is not 4·2^k")));
    }
    Ok(side.trailing_zeros() as usize - 1)
}

/// Train `decoder` to map `codes` rows to `images` under per-pixel MSE.
pub fn fit_decoder(decoder: &mut InversionDecoder, codes: &Array2<f32>, images: &Array4<f32>, cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    if codes.ncols() != decoder.input_dim() {
        return Err(Error::Shape(format!(
            "codes have {} columns, decoder expects {}",
            codes.ncols(),
            decoder.input_dim()
        )));
    }
    let (n, c, h, w) = images.dim();
    if codes.nrows() != n || (c, h, w) != decoder.spec().output_shape {
        return Err(Error::Shape(format!(
            "{} codes for {n} images of {:?}, decoder emits {:?}",
            codes.nrows(),
            (c, h, w),
            decoder.spec().output_shape
        )));
    }
    if n == 0 {
        return Err(Error::InsufficientData("no training pairs for the decoder".into()));
    }
    let mut rng = seed::rng(cfg.seed, "decoder-batching");
    let mut opt = cfg.optimizer();
    let mut curve = Vec::with_capacity(cfg.epochs);
    decoder.zero_grad();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in batches(n, cfg.batch_size, &mut rng) {
            let z = gather2(codes, &idx);
            let x = gather4(images, &idx);
            let out = decoder.forward(&z, Mode::Train)?;
            let (loss, grad) = nn::mse(&out, &x);
            if !loss.is_finite() {
                return Err(Error::Optimization(format!("non-finite decoder loss at epoch {epoch}")));
            }
            decoder.backward(&grad, false)?;
            opt.step(decoder.params_mut());
            decoder.zero_grad();
            total += loss as f64 * idx.len() as f64;
        }
        let loss = total / n as f64;
        log::debug!("decoder epoch {epoch}: loss {loss:.5}");
        curve.push(EpochLoss { epoch, loss });
    }
    Ok(curve)
}

/// Sidecar manifest stored next to every parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub architecture: serde_json::Value,
    pub seed: u64,
    pub dataset_fingerprint: Option<String>,
    pub freeze_mask: Vec<bool>,
    pub metrics: BTreeMap<String, f64>,
    pub parameter_digest: String,
}

fn checkpoint_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.bin")), dir.join(format!("{name}.json")))
}

fn write_checkpoint(dir: &Path, name: &str, blob: &[u8], manifest: &Manifest) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bin, json) = checkpoint_paths(dir, name);
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    fs::write(&json, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&json, e))?;
    Ok(json)
}

pub fn read_manifest(dir: &Path, name: &str) -> Result<Manifest> {
    let (_, json) = checkpoint_paths(dir, name);
    let text = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    Ok(serde_json::from_slice(&text)?)
}

pub fn save_classifier(
    model: &Classifier,
    dir: &Path,
    name: &str,
    seed: u64,
    dataset_fingerprint: Option<String>,
    metrics: BTreeMap<String, f64>,
) -> Result<PathBuf> {
    let manifest = Manifest {
        kind: "classifier".into(),
        architecture: serde_json::to_value(model.spec())?,
        seed,
        dataset_fingerprint,
        freeze_mask: model.trainable_mask().iter().map(|t| !t).collect(),
        metrics,
        parameter_digest: model.digest(),
    };
    write_checkpoint(dir, name, &model.state_bytes(), &manifest)
}

pub fn load_classifier(dir: &Path, name: &str) -> Result<(Classifier, Manifest)> {
    let manifest = read_manifest(dir, name)?;
    if manifest.kind != "classifier" {
        return Err(Error::Format(format!("checkpoint {name} holds a {}", manifest.kind)));
    }
    let spec: ArchitectureSpec = serde_json::from_value(manifest.architecture.clone())?;
    let mut model = Classifier::new(spec, &mut seed::rng_from(0))?;
    let (bin, _) = checkpoint_paths(dir, name);
    model.load_state_bytes(&fs::read(&bin).map_err(|e| Error::io(&bin, e))?)?;
    if model.digest() != manifest.parameter_digest {
        return Err(Error::Consistency(format!("checkpoint {name} digest does not match its manifest")));
    }
    for (i, &frozen) in manifest.freeze_mask.iter().enumerate() {
        model.set_trainable(i + 1, !frozen)?;
    }
    Ok((model, manifest))
}

pub fn save_decoder(decoder: &InversionDecoder, dir: &Path, name: &str, seed: u64, metrics: BTreeMap<String, f64>) -> Result<PathBuf> {
    let manifest = Manifest {
        kind: "decoder".into(),
        architecture: serde_json::to_value(decoder.spec())?,
        seed,
        dataset_fingerprint: None,
        freeze_mask: Vec::new(),
        metrics,
        parameter_digest: decoder.digest(),
    };
    write_checkpoint(dir, name, &decoder.state_bytes(), &manifest)
}

pub fn load_decoder(dir: &Path, name: &str) -> Result<(InversionDecoder, Manifest)> {
    let manifest = read_manifest(dir, name)?;
    if manifest.kind != "decoder" {
        return Err(Error::Format(format!("checkpoint {name} holds a {}", manifest.kind)));
    }
    let spec: DecoderSpec = serde_json::from_value(manifest.architecture.clone())?;
    let mut dec = InversionDecoder::new(spec, &mut seed::rng_from(0))?;
    let (bin, _) = checkpoint_paths(dir, name);
    dec.load_state_bytes(&fs::read(&bin).map_err(|e| Error::io(&bin, e))?)?;
    if dec.digest() != manifest.parameter_digest {
        return Err(Error::Consistency(format!("checkpoint {name} digest does not match its manifest")));
    }
    Ok((dec, manifest))
}

#[derive(Debug, Serialize, Deserialize)]
struct ConversionShape {
    input: usize,
    hidden: usize,
    output: usize,
}

pub fn save_conversion(net: &ConversionNet, dir: &Path, name: &str, seed: u64) -> Result<PathBuf> {
    let blob = net.state_bytes();
    let manifest = Manifest {
        kind: "conversion".into(),
        architecture: serde_json::to_value(ConversionShape {
            input: net.input_dim(),
            hidden: net.hidden_dim(),
            output: net.output_dim(),
        })?,
        seed,
        dataset_fingerprint: None,
        freeze_mask: Vec::new(),
        metrics: BTreeMap::new(),
        parameter_digest: hex::encode(sha2::Sha256::digest(&blob)),
    };
    write_checkpoint(dir, name, &blob, &manifest)
}

pub fn load_conversion(dir: &Path, name: &str) -> Result<ConversionNet> {
    let manifest = read_manifest(dir, name)?;
    if manifest.kind != "conversion" {
        return Err(Error::Format(format!("checkpoint {name} holds a {}", manifest.kind)));
    }
    let shape: ConversionShape = serde_json::from_value(manifest.architecture)?;
    let mut net = ConversionNet::new(shape.input, shape.hidden, shape.output, &mut seed::rng_from(0))?;
    let (bin, _) = checkpoint_paths(dir, name);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if hex::encode(sha2::Sha256::digest(&blob)) != manifest.parameter_digest {
        return Err(Error::Consistency(format!("checkpoint {name} digest does not match its manifest")));
    }
    net.load_state_bytes(&blob)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::random_dataset;

    fn tiny_spec(classes: usize) -> ArchitectureSpec {
        ArchitectureSpec::from_channels((1, 8, 8), &[4, 4], 16, classes)
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let ds = random_dataset(10, 30, (1, 8, 8), 1);
        let mut m = build_classifier(tiny_spec(10), 0).unwrap();
        let (acc, curve) = train_classifier(&mut m, &ds, &ds, &TrainConfig::classifier(0, 0)).unwrap();
        assert!(curve.is_empty());
        assert!((acc - 0.1).abs() <= 0.05 + 1e-9, "accuracy {acc}");
    }

    #[test]
    fn frozen_model_does_not_move() {
        let ds = random_dataset(3, 10, (1, 8, 8), 2);
        let mut m = build_classifier(tiny_spec(3), 0).unwrap();
        m.freeze_all();
        let before = m.digest();
        train_classifier(&mut m, &ds, &ds, &TrainConfig::classifier(1, 0)).unwrap();
        assert_eq!(before, m.digest());
    }

    #[test]
    fn out_of_range_labels_are_data_errors() {
        let ds = random_dataset(4, 3, (1, 8, 8), 2);
        let mut m = build_classifier(tiny_spec(3), 0).unwrap();
        let err = train_classifier(&mut m, &ds, &ds, &TrainConfig::classifier(1, 0)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn transfer_modes_freeze_the_declared_prefix() {
        let ds = random_dataset(3, 8, (1, 8, 8), 3);
        let teacher = build_classifier(tiny_spec(5), 1).unwrap();
        let l = teacher.layer_count();
        for (mode, k) in [(TransferMode::Deep, l - 1), (TransferMode::Mid, 2), (TransferMode::Full, 0)] {
            let s = transfer_student(&teacher, mode, 3, &ds, &TrainConfig::classifier(2, 4)).unwrap();
            assert_eq!(s.num_classes(), 3);
            assert_eq!(s.digest_layers(0..k), teacher.digest_layers(0..k), "{mode}");
            assert!(s.trainable_mask()[..k].iter().all(|t| !t));
            assert!(s.trainable_mask()[k..].iter().all(|&t| t));
            if k < l - 1 {
                assert_ne!(
                    s.digest_layers(k..l - 1),
                    teacher.digest_layers(k..l - 1),
                    "{mode} tuned layers moved"
                );
            }
        }
    }

    #[test]
    fn unknown_mode_is_argument_error() {
        assert!(matches!("partial".parse::<TransferMode>(), Err(Error::Argument(_))));
        assert_eq!("mid".parse::<TransferMode>().unwrap(), TransferMode::Mid);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = random_dataset(3, 10, (1, 8, 8), 5);
        let run = || {
            let mut m = build_classifier(tiny_spec(3), 7).unwrap();
            train_classifier(&mut m, &ds, &ds, &TrainConfig::classifier(2, 7)).unwrap();
            m.digest()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn extractor_matches_tap_and_rejects_convless_models() {
        let m = build_classifier(ArchitectureSpec::mnist(10), 0).unwrap();
        let e = strip_to_extractor(&m).unwrap();
        let x = random_dataset(2, 2, (1, 32, 32), 0);
        let f = e.extract(x.images()).unwrap();
        assert_eq!(f.ncols(), e.output_dim());
        assert_eq!(f, m.activation_at(x.images(), m.conv_depth()).unwrap());
        let (c, h, w) = m.spec().conv_output_shape().unwrap();
        assert_eq!(e.output_dim(), c * h * w);

        let mut spec = tiny_spec(3);
        spec.conv_blocks.clear();
        assert!(spec.validate().is_err() || strip_to_extractor(&Classifier::new(spec, &mut seed::rng_from(0)).unwrap()).is_err());
    }

    #[test]
    fn decoder_fit_zero_epochs_is_identity_and_training_reduces_loss() {
        let ds = random_dataset(2, 16, (1, 8, 8), 0);
        let codes = Array2::from_shape_fn((32, 2), |(i, j)| (ds.labels()[i] == j) as u8 as f32);
        let mut dec = InversionDecoder::new(DecoderSpec::new(2, (1, 8, 8), 2), &mut seed::rng_from(0)).unwrap();
        let before = dec.digest();
        assert!(fit_decoder(&mut dec, &codes, ds.images(), &TrainConfig::decoder(0, 0))
            .unwrap()
            .is_empty());
        assert_eq!(dec.digest(), before);
        let curve = fit_decoder(&mut dec, &codes, ds.images(), &TrainConfig::decoder(15, 0)).unwrap();
        assert!(curve.last().unwrap().loss < curve[0].loss);
        let bad = Array2::zeros((32, 3));
        assert!(matches!(
            fit_decoder(&mut dec, &bad, ds.images(), &TrainConfig::decoder(1, 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_classifier(tiny_spec(3), 3).unwrap();
        m.freeze_first(2);
        let metrics = BTreeMap::from([("accuracy".to_string(), 0.5)]);
        save_classifier(&m, dir.path(), "teacher", 3, Some("abc".into()), metrics.clone()).unwrap();
        let (back, manifest) = load_classifier(dir.path(), "teacher").unwrap();
        assert_eq!(back.digest(), m.digest());
        assert_eq!(back.trainable_mask(), m.trainable_mask());
        assert_eq!(manifest.metrics, metrics);
        assert_eq!(manifest.freeze_mask, vec![true, true, false, false]);

        let dec = build_decoder(3, (1, 16, 16), 3, 1).unwrap();
        save_decoder(&dec, dir.path(), "g", 1, BTreeMap::new()).unwrap();
        assert_eq!(load_decoder(dir.path(), "g").unwrap().0.digest(), dec.digest());
        assert!(load_decoder(dir.path(), "teacher").is_err());

        let net = ConversionNet::new(3, 5, 7, &mut seed::rng_from(2)).unwrap();
        save_conversion(&net, dir.path(), "i", 2).unwrap();
        assert_eq!(load_conversion(dir.path(), "i").unwrap().state_bytes(), net.state_bytes());
    }

    #[test]
    fn decoder_blocks_follow_side() {
        assert_eq!(decoder_blocks_for(32).unwrap(), 4);
        assert_eq!(decoder_blocks_for(64).unwrap(), 5);
        assert!(decoder_blocks_for(28).is_err());
    }
}
