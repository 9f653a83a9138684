//! Direct-inversion baseline: query the target on a held set of images and
//! train `G` on the observed `(y, x)` pairs.

use ndarray::{Array2, Array4};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::models::{fit_decoder, EpochLoss, TrainConfig};
use crate::nn::InversionDecoder;

#[derive(Debug, Clone)]
pub struct DirectOutcome {
    pub curve: Vec<EpochLoss>,
    /// Target queries issued (one per query-set image; answers are cached).
    pub queries: usize,
}

/// Query `target` once per image of `query_set`, then fit `G` to the cached
/// confidences.
pub fn direct_inversion_train<Q>(
    mut target: Q,
    query_set: &ImageDataset,
    decoder: &mut InversionDecoder,
    cfg: &TrainConfig,
) -> Result<DirectOutcome>
where
    Q: FnMut(&Array4<f32>) -> Result<Array2<f32>>,
{
    if query_set.is_empty() {
        return Err(Error::InsufficientData("empty query set".into()));
    }
    let y = target(query_set.images())?;
    if y.ncols() != decoder.input_dim() {
        return Err(Error::Shape(format!(
            "target emits {} classes, decoder takes {}",
            y.ncols(),
            decoder.input_dim()
        )));
    }
    let curve = fit_decoder(decoder, &y, query_set.images(), cfg)?;
    Ok(DirectOutcome {
        curve,
        queries: query_set.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access::{QueryPolicy, StudentOracle};
    use crate::data::fixtures::random_dataset;
    use crate::models::{build_classifier, build_decoder};
    use crate::nn::ArchitectureSpec;

    #[test]
    fn counts_one_query_per_image() {
        let s = build_classifier(ArchitectureSpec::from_channels((1, 8, 8), &[2], 4, 3), 0).unwrap();
        let oracle = StudentOracle::new(s, QueryPolicy::Permitted);
        let q = random_dataset(3, 5, (1, 8, 8), 0);
        let mut g = build_decoder(3, (1, 8, 8), 2, 0).unwrap();
        let out = direct_inversion_train(|x| oracle.query(x), &q, &mut g, &TrainConfig::decoder(3, 0)).unwrap();
        assert_eq!(out.queries, 15);
        assert_eq!(oracle.pre_evaluation_queries(), 15);
        assert_eq!(out.curve.len(), 3);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let s = build_classifier(ArchitectureSpec::from_channels((1, 8, 8), &[2], 4, 3), 0).unwrap();
        let q = random_dataset(3, 2, (1, 8, 8), 0);
        let empty = q.select(&[]);
        let mut g = build_decoder(4, (1, 8, 8), 2, 0).unwrap();
        if let Ok(empty) = empty {
            assert!(direct_inversion_train(|x| s.predict(x), &empty, &mut g, &TrainConfig::decoder(1, 0)).is_err());
        }
        let r = direct_inversion_train(|x| s.predict(x), &q, &mut g, &TrainConfig::decoder(1, 0));
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
