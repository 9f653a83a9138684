//! Inversion metrics, output-vector defenses and attack evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array, Array2, Array3, Array4, ArrayView1, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::access::StudentOracle;
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::models::argmax;
use crate::nn::Classifier;

/// Per-pixel mean squared error.
pub fn data_inversion_error<D: Dimension>(x: &Array<f32, D>, x_hat: &Array<f32, D>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    if x.is_empty() {
        return Err(Error::Shape("empty images".into()));
    }
    let sum: f64 = x.iter().zip(x_hat).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
    Ok(sum / x.len() as f64)
}

/// Euclidean distance between two confidence vectors.
pub fn confidence_vector_error(y_student: &[f32], y_shadow: &[f32]) -> Result<f64> {
    if y_student.len() != y_shadow.len() {
        return Err(Error::Shape(format!("{} vs {} classes", y_student.len(), y_shadow.len())));
    }
    Ok(y_student
        .iter()
        .zip(y_shadow)
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// The three sides of the quality-loss chain for one `(x, η)` pair:
/// `‖r(x+η)−(x+η)‖ − ‖r(x)−x‖ ≤ ‖r(x+η)−r(x)‖ + ‖η‖ ≤ (l̂+1)‖η‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainBounds {
    pub quality_gap: f64,
    pub triangle: f64,
    pub lipschitz: f64,
    pub ratio: f64,
}

fn l2<D: Dimension>(a: &Array<f64, D>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn lipschitz_chain_check<R>(x: &Array3<f32>, eta: &Array3<f32>, mut r: R) -> Result<(bool, ChainBounds)>
where
    R: FnMut(&Array3<f32>) -> Result<Array3<f32>>,
{
    if x.dim() != eta.dim() {
        return Err(Error::Shape(format!("noise {:?} does not match image {:?}", eta.dim(), x.dim())));
    }
    let eta64 = eta.mapv(f64::from);
    let eta_norm = l2(&eta64);
    if eta_norm == 0.0 {
        return Err(Error::Argument("perturbation must be nonzero".into()));
    }
    let x_eta = x + eta;
    let rx = r(x)?.mapv(f64::from);
    let rxe = r(&x_eta)?.mapv(f64::from);
    if rx.dim() != x.dim() || rxe.dim() != x.dim() {
        return Err(Error::Shape("reconstruction shape differs from the input".into()));
    }
    let x64 = x.mapv(f64::from);
    let xe64 = x_eta.mapv(f64::from);
    let moved = l2(&(&rxe - &rx));
    let ratio = moved / eta_norm;
    let b = ChainBounds {
        quality_gap: l2(&(&rxe - &xe64)) - l2(&(&rx - &x64)),
        triangle: moved + eta_norm,
        lipschitz: (ratio + 1.0) * eta_norm,
        ratio,
    };
    let tol = 1e-9 * (1.0 + b.lipschitz.abs());
    Ok((b.quality_gap <= b.triangle + tol && b.triangle <= b.lipschitz + tol, b))
}

/// Keep the `h` largest entries (ties to the lowest index), zero the rest.
pub fn top_h_filter(y: &[f32], h: usize, renormalize: bool) -> Result<Vec<f32>> {
    if h == 0 || h > y.len() {
        return Err(Error::Argument(format!("h = {h} outside 1..={}", y.len())));
    }
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| y[b].partial_cmp(&y[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut out = vec![0.0; y.len()];
    for &i in &idx[..h] {
        out[i] = y[i];
    }
    if renormalize {
        let s: f32 = out.iter().sum();
        if s > 0.0 {
            out.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(out)
}

/// `e^{y_i/t} / Σ_j e^{y_j/t}`.
pub fn temperature_softmax(y: &[f32], t: f64) -> Result<Vec<f32>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Argument(format!("temperature must be positive, got {t}")));
    }
    let z: Vec<f64> = y.iter().map(|&v| v as f64 / t).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.iter().map(|v| (v / s) as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Defense {
    #[default]
    None,
    TopH {
        h: usize,
        #[serde(default)]
        renormalize: bool,
    },
    Temperature {
        t: f64,
    },
}

impl Defense {
    pub fn apply(&self, y: ArrayView1<'_, f32>) -> Result<Vec<f32>> {
        let y = y.to_vec();
        match *self {
            Defense::None => Ok(y),
            Defense::TopH { h, renormalize } => top_h_filter(&y, h, renormalize),
            Defense::Temperature { t } => temperature_softmax(&y, t),
        }
    }

    pub fn apply_rows(&self, y: &Array2<f32>) -> Result<Array2<f32>> {
        let mut out = y.clone();
        for (mut row, src) in out.rows_mut().into_iter().zip(y.rows()) {
            row.assign(&ArrayView1::from(&self.apply(src)?));
        }
        Ok(out)
    }
}

impl FromStr for Defense {
    type Err = Error;

    /// `none`, `top-h:<h>`, `top-h-renorm:<h>` or `temp:<t>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("unrecognised defense {s:?}"));
        match s.split_once(':') {
            None if s == "none" => Ok(Defense::None),
            Some(("top-h", v)) => Ok(Defense::TopH {
                h: v.parse().map_err(|_| bad())?,
                renormalize: false,
            }),
            Some(("top-h-renorm", v)) => Ok(Defense::TopH {
                h: v.parse().map_err(|_| bad())?,
                renormalize: true,
            }),
            Some(("temp", v)) => Ok(Defense::Temperature {
                t: v.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defense::None => f.write_str("none"),
            Defense::TopH { h, renormalize: false } => write!(f, "top-h:{h}"),
            Defense::TopH { h, renormalize: true } => write!(f, "top-h-renorm:{h}"),
            Defense::Temperature { t } => write!(f, "temp:{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub num_classes: usize,
    pub student_samples_per_class: usize,
    pub defense: Defense,
    pub mean_inversion_error: f64,
    pub mean_confidence_error: Option<f64>,
    pub argmax_preservation: f64,
    pub eval_samples: usize,
    pub query_count_pre_eval: usize,
    pub eval_queries: usize,
    pub seeds: BTreeMap<String, u64>,
    pub wall_clock_secs: f64,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub reconstructions: Array4<f32>,
    pub per_sample_error: Vec<f64>,
}

/// Query the student once per evaluation image, defend, invert, and score.
/// Switches the oracle into its evaluation phase.
pub fn evaluate_attack<I>(
    method: &str,
    mut inverter: I,
    oracle: &StudentOracle,
    eval_set: &ImageDataset,
    defense: Defense,
    shadow: Option<&Classifier>,
) -> Result<Evaluation>
where
    I: FnMut(&Array2<f32>) -> Result<Array4<f32>>,
{
    if eval_set.is_empty() {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    let started = Instant::now();
    let pre = oracle.pre_evaluation_queries();
    oracle.begin_evaluation();
    let y = oracle.query(eval_set.images())?;
    let defended = defense.apply_rows(&y)?;
    let recon = inverter(&defended)?;
    if recon.dim() != eval_set.images().dim() {
        return Err(Error::Shape(format!(
            "inverter returned {:?} for images {:?}",
            recon.dim(),
            eval_set.images().dim()
        )));
    }
    let per_sample: Vec<f64> = eval_set
        .images()
        .outer_iter()
        .zip(recon.outer_iter())
        .map(|(a, b)| data_inversion_error(&a.to_owned(), &b.to_owned()))
        .collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    let kept = y
        .rows()
        .into_iter()
        .zip(defended.rows())
        .filter(|(a, b)| argmax(a.iter().copied()) == argmax(b.iter().copied()))
        .count();
    let conf = match shadow {
        Some(a) => {
            let ys = a.predict(eval_set.images())?;
            let mut total = 0.0;
            for (s, t) in y.rows().into_iter().zip(ys.rows()) {
                total += confidence_vector_error(s.as_slice().expect("row"), t.as_slice().expect("row"))?;
            }
            Some(total / n)
        }
        None => None,
    };
    let report = MetricsReport {
        method: method.into(),
        dataset: String::new(),
        num_classes: oracle.num_classes(),
        student_samples_per_class: 0,
        defense,
        mean_inversion_error: per_sample.iter().sum::<f64>() / n,
        mean_confidence_error: conf,
        argmax_preservation: kept as f64 / n,
        eval_samples: eval_set.len(),
        query_count_pre_eval: pre,
        eval_queries: oracle.evaluation_queries(),
        seeds: BTreeMap::new(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        extra: BTreeMap::new(),
    };
    Ok(Evaluation {
        report,
        reconstructions: recon,
        per_sample_error: per_sample,
    })
}

/// PNG grid: originals on the first row, reconstructions on the second.
pub fn write_grid(originals: &Array4<f32>, reconstructions: &Array4<f32>, columns: usize, path: &Path) -> Result<()> {
    let (n, c, h, w) = originals.dim();
    if reconstructions.dim() != (n, c, h, w) {
        return Err(Error::Shape("grid rows differ in shape".into()));
    }
    let cols = columns.min(n).max(1);
    let (gw, gh) = ((cols * (w + 1) + 1) as u32, (2 * (h + 1) + 1) as u32);
    let mut img = image::RgbImage::from_pixel(gw, gh, image::Rgb([255, 255, 255]));
    for (row, src) in [originals, reconstructions].into_iter().enumerate() {
        for (col, x) in src.outer_iter().take(cols).enumerate() {
            let (ox, oy) = (col * (w + 1) + 1, row * (h + 1) + 1);
            for i in 0..h {
                for j in 0..w {
                    let px = |ch: usize| (x[[ch.min(c - 1), i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel((ox + j) as u32, (oy + i) as u32, image::Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Mean of a slice, for report assembly.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Per-class mean of rows, used for prototype summaries.
pub fn class_means(ds: &ImageDataset) -> Vec<Array3<f32>> {
    (0..ds.num_classes())
        .map(|c| {
            let idx = ds.indices_of_class(c);
            ds.images()
                .select(Axis(0), &idx)
                .mean_axis(Axis(0))
                .unwrap_or_else(|| Array3::zeros(ds.image_shape()))
        })
        .collect()
}
