//! Attack using teacher data: invert the teacher's conv features, learn a
//! shadow + conversion net that map student-style confidences back into that
//! feature space, then decode `G(I(y))`.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::models::{batches, fit_decoder, gather2, gather4, EpochLoss, FeatureExtractor, TrainConfig};
use crate::nn::{self, Classifier, ConversionNet, InversionDecoder, Mode};
use crate::seed;

/// Step 1: train `G` so that `G(T_E(x)) ≈ x` over the teacher data.
pub fn train_teacher_inversion(
    decoder: &mut InversionDecoder,
    extractor: &FeatureExtractor,
    teacher_data: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    if decoder.input_dim() != extractor.output_dim() {
        return Err(Error::Shape(format!(
            "decoder takes {}-dim codes, extractor emits {}",
            decoder.input_dim(),
            extractor.output_dim()
        )));
    }
    let codes = extractor.extract(teacher_data.images())?;
    fit_decoder(decoder, &codes, teacher_data.images(), cfg)
}

/// Copy of the teacher with a fresh output layer of `num_classes`.
pub fn build_shadow_from_teacher(teacher: &Classifier, num_classes: usize, seed: u64) -> Classifier {
    let mut shadow = teacher.clone();
    shadow.replace_head(num_classes, &mut seed::rng(seed, "shadow-head"));
    shadow.reset_optimizer_state();
    shadow
}

/// Which shadow layers train jointly with the conversion net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowTraining {
    /// Copied conv blocks stay frozen; fully-connected layers train.
    #[default]
    DenseOnly,
    All,
}

/// Mean `L(I(A(x)), T_E(x))` over `ds` without touching any state.
pub fn conversion_loss(shadow: &Classifier, conv: &ConversionNet, extractor: &FeatureExtractor, ds: &ImageDataset) -> Result<f64> {
    let target = extractor.extract(ds.images())?;
    let pred = conv.apply(&shadow.predict(ds.images())?)?;
    Ok(nn::mse(&pred, &target).0 as f64)
}

fn check_dims(shadow: &Classifier, conv: &ConversionNet, extractor: &FeatureExtractor) -> Result<()> {
    if conv.input_dim() != shadow.num_classes() {
        return Err(Error::Shape(format!(
            "conversion net takes {} inputs, shadow emits {}",
            conv.input_dim(),
            shadow.num_classes()
        )));
    }
    if conv.output_dim() != extractor.output_dim() {
        return Err(Error::Shape(format!(
            "conversion net emits {} features, extractor emits {}",
            conv.output_dim(),
            extractor.output_dim()
        )));
    }
    Ok(())
}

/// Step 2: jointly train shadow `A` and conversion net `I` so that
/// `I(A(x)) ≈ T_E(x)`, drawing batches uniformly from `D_T ∪ D_S`.
/// Labels are not used, so `D_T` and `D_S` may have different label spaces.
pub fn train_shadow_and_conversion(
    shadow: &mut Classifier,
    conv: &mut ConversionNet,
    extractor: &FeatureExtractor,
    teacher_data: Option<&ImageDataset>,
    student_data: &ImageDataset,
    layers: ShadowTraining,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    check_dims(shadow, conv, extractor)?;
    match layers {
        ShadowTraining::DenseOnly => shadow.freeze_first(shadow.conv_depth()),
        ShadowTraining::All => shadow.freeze_first(0),
    }
    let pool = match teacher_data {
        Some(dt) => {
            let dt = dt.with_num_classes(dt.num_classes().max(student_data.num_classes()))?;
            let ds = student_data.with_num_classes(dt.num_classes())?;
            ImageDataset::concat(&[&dt, &ds])?
        }
        None => student_data.clone(),
    };
    let targets = extractor.extract(pool.images())?;
    let mut rng = seed::rng(cfg.seed, "conversion-batching");
    let mut opt = cfg.optimizer();
    let mut curve = Vec::with_capacity(cfg.epochs);
    shadow.zero_grad();
    conv.zero_grad();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in batches(pool.len(), cfg.batch_size, &mut rng) {
            let x: Array4<f32> = gather4(pool.images(), &idx);
            let t: Array2<f32> = gather2(&targets, &idx);
            let y = shadow.forward_full(&x, Mode::Train)?;
            let z = conv.forward(&y)?;
            let (loss, g) = nn::mse(&z, &t);
            if !loss.is_finite() {
                return Err(Error::Optimization(format!("non-finite conversion loss at epoch {epoch}")));
            }
            let gy = conv.backward(&g)?;
            shadow.backward(&gy, false)?;
            opt.step(shadow.params_mut().into_iter().chain(conv.params_mut()));
            shadow.zero_grad();
            conv.zero_grad();
            total += loss as f64 * idx.len() as f64;
        }
        let loss = total / pool.len() as f64;
        log::debug!("shadow+conversion epoch {epoch}: loss {loss:.5}");
        curve.push(EpochLoss { epoch, loss });
    }
    Ok(curve)
}

/// Step 3: `G(I(y))` for student confidence rows `y`.
pub fn invert_student_output(y: &Array2<f32>, conv: &ConversionNet, decoder: &InversionDecoder) -> Result<Array4<f32>> {
    decoder.decode(&conv.apply(y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::random_dataset;
    use crate::models::{build_classifier, build_decoder, strip_to_extractor};
    use crate::nn::ArchitectureSpec;

    fn setup() -> (Classifier, FeatureExtractor) {
        let t = build_classifier(ArchitectureSpec::from_channels((1, 8, 8), &[3, 4], 8, 4), 0).unwrap();
        let e = strip_to_extractor(&t).unwrap();
        (t, e)
    }

    #[test]
    fn teacher_inversion_checks_dims_and_leaves_extractor_alone() {
        let (_, e) = setup();
        let dt = random_dataset(4, 6, (1, 8, 8), 0);
        let mut wrong = build_decoder(e.output_dim() + 1, (1, 8, 8), 2, 0).unwrap();
        assert!(matches!(
            train_teacher_inversion(&mut wrong, &e, &dt, &TrainConfig::decoder(1, 0)),
            Err(Error::Shape(_))
        ));
        let mut g = build_decoder(e.output_dim(), (1, 8, 8), 2, 0).unwrap();
        let before = (e.digest(), g.digest());
        train_teacher_inversion(&mut g, &e, &dt, &TrainConfig::decoder(0, 0)).unwrap();
        assert_eq!(before.1, g.digest());
        let curve = train_teacher_inversion(&mut g, &e, &dt, &TrainConfig::decoder(10, 0)).unwrap();
        assert!(curve.last().unwrap().loss < curve[0].loss);
        assert_eq!(before.0, e.digest());
    }

    #[test]
    fn shadow_copies_all_but_the_head() {
        let (t, _) = setup();
        let a = build_shadow_from_teacher(&t, 7, 1);
        let l = t.layer_count();
        assert_eq!(a.num_classes(), 7);
        assert_eq!(a.digest_layers(0..l - 1), t.digest_layers(0..l - 1));
        let same = build_shadow_from_teacher(&t, 4, 1);
        assert_ne!(same.digest_layers([l - 1]), t.digest_layers([l - 1]));
        let x = random_dataset(1, 2, (1, 8, 8), 3);
        for row in a.predict(x.images()).unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn joint_training_reduces_loss_and_checks_dims() {
        let (t, e) = setup();
        let dt = random_dataset(4, 10, (1, 8, 8), 1);
        let ds = random_dataset(3, 4, (1, 8, 8), 2);
        let mut a = build_shadow_from_teacher(&t, 3, 0);
        let mut bad = ConversionNet::new(3, 8, e.output_dim() + 2, &mut seed::rng_from(0)).unwrap();
        let r = train_shadow_and_conversion(
            &mut a,
            &mut bad,
            &e,
            Some(&dt),
            &ds,
            ShadowTraining::DenseOnly,
            &TrainConfig::decoder(1, 0),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
        let mut i = ConversionNet::new(3, 16, e.output_dim(), &mut seed::rng_from(0)).unwrap();
        let convs = a.digest_layers(0..a.conv_depth());
        let curve = train_shadow_and_conversion(
            &mut a,
            &mut i,
            &e,
            Some(&dt),
            &ds,
            ShadowTraining::DenseOnly,
            &TrainConfig::decoder(8, 0),
        )
        .unwrap();
        assert!(curve.last().unwrap().loss < curve[0].loss);
        assert_eq!(convs, a.digest_layers(0..a.conv_depth()));
    }

    #[test]
    fn inversion_is_pure_and_shaped() {
        let (t, e) = setup();
        let a = build_shadow_from_teacher(&t, 3, 0);
        let i = ConversionNet::new(3, 8, e.output_dim(), &mut seed::rng_from(0)).unwrap();
        let g = build_decoder(e.output_dim(), (1, 8, 8), 2, 0).unwrap();
        let y = a.predict(random_dataset(1, 3, (1, 8, 8), 0).images()).unwrap();
        let r1 = invert_student_output(&y, &i, &g).unwrap();
        assert_eq!(r1.dim(), (3, 1, 8, 8));
        assert_eq!(r1, invert_student_output(&y, &i, &g).unwrap());
        assert!(matches!(
            invert_student_output(&Array2::zeros((1, 4)), &i, &g),
            Err(Error::Shape(_))
        ));
    }
}
