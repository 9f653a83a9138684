//! One-shot augmentation of the attacker's few student samples: learned
//! noise masks, learned jigsaw masks and plain rotation/shift.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Classifier, Mode, Optimizer, OptimizerKind, Param};

/// Rows per batched teacher pass during mask learning.
const MASK_CHUNK: usize = 64;

/// `m·x + (1−m)·η` with `η ~ N(0, σ²)` per element, clipped to `[0,1]`.
pub fn perturb<R: Rng>(x: ArrayView3<'_, f32>, m: ArrayView3<'_, f32>, sigma: f32, rng: &mut R) -> Result<Array3<f32>> {
    if x.dim() != m.dim() {
        return Err(Error::Shape(format!("mask {:?} does not match image {:?}", m.dim(), x.dim())));
    }
    let eta = gaussian(x.raw_dim(), sigma, rng)?;
    Ok(perturb_with(x, m, eta.view()))
}

/// Deterministic core of [`perturb`] for a given noise draw.
pub fn perturb_with(x: ArrayView3<'_, f32>, m: ArrayView3<'_, f32>, eta: ArrayView3<'_, f32>) -> Array3<f32> {
    let mut out = Array3::zeros(x.raw_dim());
    Zip::from(&mut out).and(x).and(m).and(eta).for_each(|o, &x, &m, &e| {
        *o = (m * x + (1.0 - m) * e).clamp(0.0, 1.0);
    });
    out
}

fn gaussian<D: ndarray::Dimension, R: Rng>(dim: D, sigma: f32, rng: &mut R) -> Result<ndarray::Array<f32, D>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("noise sigma must be positive, got {sigma}")));
    }
    let normal = Normal::new(0.0f32, sigma).expect("positive sigma");
    Ok(ndarray::Array::from_shape_simple_fn(dim, || normal.sample(rng)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseMaskConfig {
    pub lambda: f32,
    pub sigma: f32,
    pub steps: usize,
    pub learning_rate: f64,
    /// Starting value of every mask entry.
    pub init: f32,
}

impl Default for NoiseMaskConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            sigma: 0.3,
            steps: 200,
            learning_rate: 0.05,
            init: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMask {
    pub m: Array3<f32>,
    pub class_id: usize,
    pub sigma: f32,
    pub lambda: f32,
    /// Best objective seen after each step (index 0 is the initial mask).
    pub best_so_far: Vec<f64>,
}

impl NoiseMask {
    pub fn initial_objective(&self) -> f64 {
        self.best_so_far[0]
    }

    pub fn final_objective(&self) -> f64 {
        *self.best_so_far.last().expect("at least the initial evaluation")
    }
}

/// Squared Euclidean distance per row.
fn row_sq_dist(a: &Array2<f32>, b: &Array2<f32>) -> Vec<f64> {
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(r, t)| r.iter().zip(t).map(|(&u, &v)| ((u - v) as f64).powi(2)).sum())
        .collect()
}

/// `D(T_K(x'), T_K(x))` for each row pair.
pub fn feature_distance(teacher: &Classifier, k: usize, perturbed: &Array4<f32>, originals: &Array4<f32>) -> Result<Vec<f64>> {
    let a = teacher.activation_at(perturbed, k)?;
    let b = teacher.activation_at(originals, k)?;
    Ok(row_sq_dist(&a, &b))
}

/// Learn one noise mask per row of `xs` by minimizing
/// `D(T_K(ψ(x;m)), T_K(x)) − λ·‖m‖₁` with Adam, re-drawing η every step and
/// clamping `m` into `[0,1]`. The best iterate (by sampled objective) wins.
pub fn learn_noise_masks<R: Rng>(
    xs: &Array4<f32>,
    labels: &[usize],
    teacher: &Classifier,
    k: usize,
    cfg: &NoiseMaskConfig,
    rng: &mut R,
) -> Result<Vec<NoiseMask>> {
    if labels.len() != xs.dim().0 {
        return Err(Error::Shape(format!("{} labels for {} images", labels.len(), xs.dim().0)));
    }
    if !(0.0..=1.0).contains(&cfg.init) {
        return Err(Error::Argument(format!("mask init {} outside [0,1]", cfg.init)));
    }
    let mut t = teacher.clone();
    t.freeze_all();
    let mut out = Vec::with_capacity(labels.len());
    for start in (0..labels.len()).step_by(MASK_CHUNK) {
        let end = (start + MASK_CHUNK).min(labels.len());
        let x = xs.slice(s![start..end, .., .., ..]).to_owned();
        out.extend(learn_chunk(&x, &labels[start..end], &mut t, k, cfg, rng)?);
    }
    Ok(out)
}

fn learn_chunk<R: Rng>(
    x: &Array4<f32>,
    labels: &[usize],
    t: &mut Classifier,
    k: usize,
    cfg: &NoiseMaskConfig,
    rng: &mut R,
) -> Result<Vec<NoiseMask>> {
    let n = labels.len();
    let target = t.activation_at(x, k)?;
    let mut m = Param::new(Array4::from_elem(x.raw_dim(), cfg.init).into_dyn());
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, 0.0);
    let mut best = vec![f64::INFINITY; n];
    let mut best_m = Array4::<f32>::zeros(x.raw_dim());
    let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.steps + 1); n];
    let lambda = cfg.lambda as f64;
    for step in 0..=cfg.steps {
        let mv = m.value.view().into_dimensionality::<ndarray::Ix4>().expect("4-d mask").to_owned();
        let eta = gaussian(x.raw_dim(), cfg.sigma, rng)?;
        let raw = &mv * x + &(mv.mapv(|v| 1.0 - v) * &eta);
        let psi = raw.mapv(|v| v.clamp(0.0, 1.0));
        let act = t.forward(&psi, k, Mode::Eval)?;
        let dist = row_sq_dist(&act, &target);
        for i in 0..n {
            let l1: f64 = mv.index_axis(Axis(0), i).iter().map(|&v| v as f64).sum();
            let obj = dist[i] - lambda * l1;
            if !obj.is_finite() {
                return Err(Error::Optimization(format!("non-finite mask objective at step {step}")));
            }
            if obj < best[i] {
                best[i] = obj;
                best_m.index_axis_mut(Axis(0), i).assign(&mv.index_axis(Axis(0), i));
            }
            traces[i].push(best[i]);
        }
        if step == cfg.steps {
            break;
        }
        let gact = (&act - &target).mapv(|d| 2.0 * d);
        let gpsi = t.backward(&gact, true)?.expect("input gradient requested");
        let mut gm = Array4::<f32>::zeros(x.raw_dim());
        Zip::from(&mut gm)
            .and(&gpsi)
            .and(&raw)
            .and(x)
            .and(&eta)
            .for_each(|g, &gp, &r, &xv, &e| {
                let pass = if (0.0..=1.0).contains(&r) { gp } else { 0.0 };
                *g = pass * (xv - e) - cfg.lambda;
            });
        m.grad = gm.into_dyn();
        opt.step(std::iter::once(&mut m));
        m.value.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    Ok(labels
        .iter()
        .enumerate()
        .zip(traces)
        .map(|((i, &c), best_so_far)| NoiseMask {
            m: best_m.index_axis(Axis(0), i).to_owned(),
            class_id: c,
            sigma: cfg.sigma,
            lambda: cfg.lambda,
            best_so_far,
        })
        .collect())
}

/// Single-sample form of [`learn_noise_masks`].
pub fn learn_noise_mask<R: Rng>(
    x: ArrayView3<'_, f32>,
    class_id: usize,
    teacher: &Classifier,
    k: usize,
    cfg: &NoiseMaskConfig,
    rng: &mut R,
) -> Result<NoiseMask> {
    let xs = x.to_owned().insert_axis(Axis(0));
    Ok(learn_noise_masks(&xs, &[class_id], teacher, k, cfg, rng)?.remove(0))
}

/// `M⊙x* + (1−M)⊙x_aux` with a binary `H×W` mask broadcast over channels.
pub fn jigsaw_mix(x_star: ArrayView3<'_, f32>, x_aux: ArrayView3<'_, f32>, mask: ArrayView2<'_, f32>) -> Result<Array3<f32>> {
    if x_star.dim() != x_aux.dim() {
        return Err(Error::Shape(format!(
            "aux image {:?} does not match {:?}",
            x_aux.dim(),
            x_star.dim()
        )));
    }
    let (_, h, w) = x_star.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} does not match image {:?}", mask.dim(), (h, w))));
    }
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Argument("jigsaw mask must be binary".into()));
    }
    let mut out = x_star.to_owned();
    for (mut plane, aux) in out.outer_iter_mut().zip(x_aux.outer_iter()) {
        Zip::from(&mut plane).and(aux).and(mask).for_each(|o, &a, &m| {
            if m == 0.0 {
                *o = a;
            }
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JigsawConfig {
    /// Patch rows and columns.
    pub grid: (usize, usize),
    /// Fraction of patches taken from the auxiliary image.
    pub beta: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for JigsawConfig {
    fn default() -> Self {
        Self {
            grid: (4, 4),
            beta: 0.3,
            steps: 50,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JigsawMask {
    /// `H×W`, 1 keeps the target pixel, 0 takes the auxiliary pixel.
    pub mask: Array2<f32>,
    pub grid: (usize, usize),
    pub beta: f64,
    /// Row-major patch indices filled from the auxiliary image.
    pub aux_patches: Vec<usize>,
    /// Feature distance of the returned mix.
    pub distance: f64,
}

/// Number of auxiliary patches implied by `beta` on `grid`.
pub fn aux_patch_count(grid: (usize, usize), beta: f64) -> Result<usize> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Argument(format!("beta {beta} outside (0,1)")));
    }
    let p = grid.0 * grid.1;
    let n = (beta * p as f64).round() as usize;
    if n == 0 || n >= p {
        return Err(Error::Invariant(format!(
            "beta {beta} on a {}x{} grid leaves {n} auxiliary patches; the constraint is degenerate",
            grid.0, grid.1
        )));
    }
    Ok(n)
}

/// Binary mask with the listed patches set to 0.
pub fn patch_mask(h: usize, w: usize, grid: (usize, usize), aux: &[usize]) -> Result<Array2<f32>> {
    let (gr, gc) = grid;
    if gr == 0 || gc == 0 || h % gr != 0 || w % gc != 0 {
        return Err(Error::Argument(format!("grid {gr}x{gc} does not divide {h}x{w}")));
    }
    let (ph, pw) = (h / gr, w / gc);
    let mut m = Array2::ones((h, w));
    for &p in aux {
        if p >= gr * gc {
            return Err(Error::Argument(format!("patch {p} outside the {gr}x{gc} grid")));
        }
        let (r, c) = (p / gc, p % gc);
        m.slice_mut(s![r * ph..(r + 1) * ph, c * pw..(c + 1) * pw]).fill(0.0);
    }
    Ok(m)
}

/// Feature distance of every candidate aux-patch set.
pub fn jigsaw_distances(
    teacher: &Classifier,
    k: usize,
    x_star: ArrayView3<'_, f32>,
    x_aux: ArrayView3<'_, f32>,
    grid: (usize, usize),
    candidates: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let (c, h, w) = x_star.dim();
    let mut batch = Array4::zeros((candidates.len(), c, h, w));
    for (i, cand) in candidates.iter().enumerate() {
        let m = patch_mask(h, w, grid, cand)?;
        batch.index_axis_mut(Axis(0), i).assign(&jigsaw_mix(x_star, x_aux, m.view())?);
    }
    let mixed = teacher.activation_at(&batch, k)?;
    let target = teacher.activation_at(&x_star.to_owned().insert_axis(Axis(0)), k)?;
    Ok(mixed
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(target.row(0)).map(|(&u, &v)| ((u - v) as f64).powi(2)).sum())
        .collect())
}

/// Euclidean projection onto `{a ∈ [0,1]^P : Σa = n}`.
fn project_capped_simplex(v: &[f64], n: f64) -> Vec<f64> {
    let total = |tau: f64| v.iter().map(|&x| (x - tau).clamp(0.0, 1.0)).sum::<f64>();
    let lo0 = v.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let hi0 = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (lo0, hi0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > n {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    v.iter().map(|&x| (x - tau).clamp(0.0, 1.0)).collect()
}

fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = idx[..n].to_vec();
    out.sort_unstable();
    out
}

/// Patch sets reachable by swapping up to `depth` aux patches for kept ones.
fn swap_neighbours(current: &[usize], p: usize, depth: usize) -> Vec<Vec<usize>> {
    let kept: Vec<usize> = (0..p).filter(|i| !current.contains(i)).collect();
    let mut out = Vec::new();
    for (ai, &a) in current.iter().enumerate() {
        for &b in &kept {
            let mut s: Vec<usize> = current.iter().copied().filter(|&x| x != a).chain([b]).collect();
            s.sort_unstable();
            out.push(s.clone());
            if depth >= 2 {
                for &a2 in &current[ai + 1..] {
                    for &b2 in kept.iter().filter(|&&x| x > b) {
                        let mut t: Vec<usize> = s.iter().copied().filter(|&x| x != a2).chain([b2]).collect();
                        t.sort_unstable();
                        out.push(t);
                    }
                }
            }
        }
    }
    out
}

/// Place `round(β·P)` auxiliary patches to minimize `D(T_K(x̃), T_K(x*))`.
///
/// Projected gradient descent on a relaxed per-patch aux weight (kept on the
/// capped simplex), top-n rounding, then swap local search on the exact
/// distance. The swap neighbourhood includes double swaps whenever
/// `min(n, P−n) ≤ 2`, which makes the search exhaustive on small grids.
pub fn learn_jigsaw_mask(
    x_star: ArrayView3<'_, f32>,
    x_aux: ArrayView3<'_, f32>,
    teacher: &Classifier,
    k: usize,
    cfg: &JigsawConfig,
) -> Result<JigsawMask> {
    let (c, h, w) = x_star.dim();
    if x_aux.dim() != (c, h, w) {
        return Err(Error::Shape(format!("aux image {:?} does not match {:?}", x_aux.dim(), (c, h, w))));
    }
    let n = aux_patch_count(cfg.grid, cfg.beta)?;
    let (gr, gc) = cfg.grid;
    patch_mask(h, w, cfg.grid, &[])?;
    let p = gr * gc;
    let (ph, pw) = (h / gr, w / gc);

    let mut t = teacher.clone();
    t.freeze_all();
    let xs = x_star.to_owned().insert_axis(Axis(0));
    let target = t.activation_at(&xs, k)?;
    let delta = &x_aux - &x_star;
    let mut a = vec![n as f64 / p as f64; p];
    for _ in 0..cfg.steps {
        let mut pix = Array2::<f32>::zeros((h, w));
        for (i, &ai) in a.iter().enumerate() {
            let (r, cc) = (i / gc, i % gc);
            pix.slice_mut(s![r * ph..(r + 1) * ph, cc * pw..(cc + 1) * pw]).fill(ai as f32);
        }
        let mut mixed = x_star.to_owned();
        for (mut plane, d) in mixed.outer_iter_mut().zip(delta.outer_iter()) {
            Zip::from(&mut plane).and(d).and(&pix).for_each(|o, &d, &a| *o += a * d);
        }
        let act = t.forward(&mixed.insert_axis(Axis(0)), k, Mode::Eval)?;
        let g = t
            .backward(&(&act - &target).mapv(|v| 2.0 * v), true)?
            .expect("input gradient requested");
        let gx = g.index_axis(Axis(0), 0);
        let grads: Vec<f64> = (0..p)
            .map(|i| {
                let (r, cc) = (i / gc, i % gc);
                let gp = gx.slice(s![.., r * ph..(r + 1) * ph, cc * pw..(cc + 1) * pw]);
                let dp = delta.slice(s![.., r * ph..(r + 1) * ph, cc * pw..(cc + 1) * pw]);
                gp.iter().zip(dp.iter()).map(|(&u, &v)| (u * v) as f64).sum()
            })
            .collect();
        let scale = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !scale.is_finite() {
            return Err(Error::Optimization("non-finite jigsaw gradient".into()));
        }
        if scale == 0.0 {
            break;
        }
        let stepped: Vec<f64> = a.iter().zip(&grads).map(|(&ai, &gi)| ai - cfg.learning_rate * gi / scale).collect();
        a = project_capped_simplex(&stepped, n as f64);
    }

    let depth = if n.min(p - n) <= 2 { 2 } else { 1 };
    let mut current = top_n(&a, n);
    let mut dist = jigsaw_distances(&t, k, x_star, x_aux, cfg.grid, std::slice::from_ref(&current))?[0];
    loop {
        let cands = swap_neighbours(&current, p, depth);
        let d = jigsaw_distances(&t, k, x_star, x_aux, cfg.grid, &cands)?;
        let (bi, &bd) = d
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.partial_cmp(y.1).unwrap_or(std::cmp::Ordering::Equal))
            .expect("non-empty neighbourhood");
        if bd < dist {
            dist = bd;
            current = cands[bi].clone();
        } else {
            break;
        }
    }
    Ok(JigsawMask {
        mask: patch_mask(h, w, cfg.grid, &current)?,
        grid: cfg.grid,
        beta: cfg.beta,
        aux_patches: current,
        distance: dist,
    })
}

/// Reflect a continuous coordinate into `[0, n−1]`.
fn reflect(u: f32, n: usize) -> f32 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f32;
    let mut v = u.rem_euclid(period);
    if v > (n - 1) as f32 {
        v = period - v;
    }
    v
}

/// Rotate by `angle_deg` about the centre and shift by `(dx, dy)` pixels,
/// sampling bilinearly with reflective padding.
pub fn geometric_transform(x: ArrayView3<'_, f32>, angle_deg: f32, dx: f32, dy: f32) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let mut out = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let (u, v) = (j as f32 - cx - dx, i as f32 - cy - dy);
            let sx = reflect(cos * u + sin * v + cx, w);
            let sy = reflect(-sin * u + cos * v + cy, h);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| x[[ch, yy, xx]];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[[ch, i, j]] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub const MAX_ROTATION_DEG: f32 = 15.0;
pub const MAX_SHIFT_FRACTION: f32 = 0.1;

/// `n` random rotations in ±15° combined with shifts up to 10% per axis.
pub fn geometric_augment<R: Rng>(x: ArrayView3<'_, f32>, n: usize, rng: &mut R) -> Vec<Array3<f32>> {
    let (_, h, w) = x.dim();
    (0..n)
        .map(|_| {
            let angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
            let dx = rng.random_range(-MAX_SHIFT_FRACTION..=MAX_SHIFT_FRACTION) * w as f32;
            let dy = rng.random_range(-MAX_SHIFT_FRACTION..=MAX_SHIFT_FRACTION) * h as f32;
            geometric_transform(x, angle, dx, dy)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_classifier;
    use crate::nn::ArchitectureSpec;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn teacher() -> Classifier {
        build_classifier(ArchitectureSpec::from_channels((1, 8, 8), &[3, 4], 8, 3), 1).unwrap()
    }

    fn image(seed: u64) -> Array3<f32> {
        let mut r = seed::rng_from(seed);
        Array3::from_shape_simple_fn((1, 8, 8), || r.random())
    }

    #[test]
    fn perturb_extremes() {
        let x = image(0);
        let mut r = seed::rng_from(1);
        let ones = Array3::ones(x.raw_dim());
        assert_eq!(perturb(x.view(), ones.view(), 0.3, &mut r).unwrap(), x);
        let half = Array3::from_elem(x.raw_dim(), 0.5);
        let out = perturb(x.view(), half.view(), 1e-9, &mut r).unwrap();
        out.iter().zip(x.iter()).for_each(|(&o, &v)| assert!((o - v / 2.0).abs() < 1e-6));
        assert!(perturb(x.view(), Array3::ones((1, 4, 4)).view(), 0.3, &mut r).is_err());
        assert!(perturb(x.view(), ones.view(), 0.0, &mut r).is_err());
    }

    #[test]
    fn zero_mask_is_uncorrelated_noise() {
        let mut r = seed::rng_from(2);
        let x = Array3::from_shape_simple_fn((1, 64, 64), || r.random::<f32>());
        let out = perturb(x.view(), Array3::zeros(x.raw_dim()).view(), 0.3, &mut r).unwrap();
        let (mx, mo) = (x.mean().unwrap(), out.mean().unwrap());
        let cov: f32 = x.iter().zip(out.iter()).map(|(&a, &b)| (a - mx) * (b - mo)).sum();
        let vx: f32 = x.iter().map(|&a| (a - mx).powi(2)).sum();
        let vo: f32 = out.iter().map(|&b| (b - mo).powi(2)).sum();
        assert!((cov / (vx * vo).sqrt()).abs() < 0.05);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn perturb_matches_formula(seed in any::<u64>()) {
            let mut r = seed::rng_from(seed);
            let x = Array3::from_shape_simple_fn((2, 3, 3), || r.random::<f32>());
            let m = Array3::from_shape_simple_fn((2, 3, 3), || r.random::<f32>());
            let eta = Array3::from_shape_simple_fn((2, 3, 3), || r.random_range(-1.0f32..1.0));
            let out = perturb_with(x.view(), m.view(), eta.view());
            for i in 0..x.len() {
                let (xv, mv, ev) = (x.as_slice().unwrap()[i], m.as_slice().unwrap()[i], eta.as_slice().unwrap()[i]);
                let direct = (mv * xv + (1.0 - mv) * ev).clamp(0.0, 1.0);
                prop_assert!((out.as_slice().unwrap()[i] - direct).abs() < 1e-6);
            }
        }

        #[test]
        fn jigsaw_matches_formula(seed in any::<u64>()) {
            let mut r = seed::rng_from(seed);
            let a = Array3::from_shape_simple_fn((3, 4, 4), || r.random::<f32>());
            let b = Array3::from_shape_simple_fn((3, 4, 4), || r.random::<f32>());
            let m = Array2::from_shape_simple_fn((4, 4), || if r.random::<bool>() { 1.0 } else { 0.0 });
            let out = jigsaw_mix(a.view(), b.view(), m.view()).unwrap();
            for ((ch, i, j), &o) in out.indexed_iter() {
                let direct = m[[i, j]] * a[[ch, i, j]] + (1.0 - m[[i, j]]) * b[[ch, i, j]];
                prop_assert_eq!(o, direct);
            }
        }
    }

    #[test]
    fn jigsaw_identities() {
        let (a, b) = (image(3), image(4));
        assert_eq!(jigsaw_mix(a.view(), b.view(), Array2::ones((8, 8)).view()).unwrap(), a);
        assert_eq!(jigsaw_mix(a.view(), b.view(), Array2::zeros((8, 8)).view()).unwrap(), b);
        let mut left = Array2::zeros((8, 8));
        left.slice_mut(s![.., ..4]).fill(1.0);
        let out = jigsaw_mix(a.view(), b.view(), left.view()).unwrap();
        assert_eq!(out.slice(s![.., .., ..4]), a.slice(s![.., .., ..4]));
        assert_eq!(out.slice(s![.., .., 4..]), b.slice(s![.., .., 4..]));
        let mut bad = Array2::ones((8, 8));
        bad[[0, 0]] = 0.5;
        assert!(jigsaw_mix(a.view(), b.view(), bad.view()).is_err());
    }

    fn combinations(p: usize, n: usize) -> Vec<Vec<usize>> {
        (0u32..1 << p)
            .filter(|m| m.count_ones() as usize == n)
            .map(|m| (0..p).filter(|i| m & (1 << i) != 0).collect())
            .collect()
    }

    #[test]
    fn jigsaw_search_equals_brute_force_on_2x2() {
        let t = teacher();
        for seed in 0..12u64 {
            let (a, b) = (image(seed), image(seed + 100));
            for (beta, n) in [(0.25, 1), (0.5, 2), (0.75, 3)] {
                let cfg = JigsawConfig {
                    grid: (2, 2),
                    beta,
                    steps: 10,
                    learning_rate: 0.2,
                };
                for k in [2, t.layer_count()] {
                    let got = learn_jigsaw_mask(a.view(), b.view(), &t, k, &cfg).unwrap();
                    assert_eq!(got.aux_patches.len(), n);
                    let all = combinations(4, n);
                    let brute = jigsaw_distances(&t, k, a.view(), b.view(), (2, 2), &all).unwrap();
                    let opt = brute.iter().cloned().fold(f64::INFINITY, f64::min);
                    assert!(
                        (got.distance - opt).abs() <= 1e-9 * opt.max(1.0),
                        "seed {seed} beta {beta}: {} vs {opt}",
                        got.distance
                    );
                }
            }
        }
    }

    #[test]
    fn single_patch_beats_worst_placement() {
        let t = teacher();
        let (a, b) = (image(7), image(8));
        let cfg = JigsawConfig {
            grid: (4, 4),
            beta: 1.0 / 16.0,
            ..JigsawConfig::default()
        };
        let got = learn_jigsaw_mask(a.view(), b.view(), &t, 2, &cfg).unwrap();
        let singles: Vec<Vec<usize>> = (0..16).map(|i| vec![i]).collect();
        let d = jigsaw_distances(&t, 2, a.view(), b.view(), (4, 4), &singles).unwrap();
        assert!(got.distance <= d.iter().cloned().fold(0.0, f64::max));
        let zeros = got.mask.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 4);
    }

    #[test]
    fn degenerate_budget_is_rejected() {
        let t = teacher();
        let (a, b) = (image(1), image(2));
        let cfg = JigsawConfig {
            grid: (2, 2),
            beta: 0.05,
            ..JigsawConfig::default()
        };
        assert!(matches!(
            learn_jigsaw_mask(a.view(), b.view(), &t, 2, &cfg),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn capped_simplex_projection() {
        let p = project_capped_simplex(&[3.0, 0.2, -1.0, 0.5], 2.0);
        assert!((p.iter().sum::<f64>() - 2.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((p[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn geometric_identity_and_range() {
        let x = image(5);
        let id = geometric_transform(x.view(), 0.0, 0.0, 0.0);
        id.iter().zip(x.iter()).for_each(|(&a, &b)| assert!((a - b).abs() < 1e-6));
        let mut r = seed::rng_from(9);
        let out = geometric_augment(x.view(), 20, &mut r);
        assert_eq!(out.len(), 20);
        assert!(out.iter().all(|im| im.iter().all(|v| (0.0..=1.0).contains(v))));
        let again = geometric_augment(x.view(), 20, &mut seed::rng_from(9));
        assert_eq!(out, again);
    }

    #[test]
    fn noise_mask_objective_and_distance() {
        let t = teacher();
        let x = image(11);
        let cfg = NoiseMaskConfig {
            steps: 40,
            ..NoiseMaskConfig::default()
        };
        let k = t.conv_depth();
        let m = learn_noise_mask(x.view(), 2, &t, k, &cfg, &mut seed::rng_from(0)).unwrap();
        assert_eq!(m.best_so_far.len(), 41);
        assert!(m.best_so_far.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.final_objective() <= m.initial_objective());
        assert!(m.m.iter().all(|v| (0.0..=1.0).contains(v)));

        let xs = Array4::from_shape_fn((200, 1, 8, 8), |(_, c, i, j)| x[[c, i, j]]);
        let mut r = seed::rng_from(3);
        let mut learned = Array4::zeros(xs.raw_dim());
        let mut zero = Array4::zeros(xs.raw_dim());
        let z = Array3::zeros(x.raw_dim());
        for i in 0..200 {
            learned
                .index_axis_mut(Axis(0), i)
                .assign(&perturb(x.view(), m.m.view(), 0.3, &mut r).unwrap());
            zero.index_axis_mut(Axis(0), i)
                .assign(&perturb(x.view(), z.view(), 0.3, &mut r).unwrap());
        }
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let dl = mean(feature_distance(&t, k, &learned, &xs).unwrap());
        let dz = mean(feature_distance(&t, k, &zero, &xs).unwrap());
        assert!(dl < dz, "learned {dl} vs zero {dz}");
    }

    #[test]
    fn mask_at_global_optimum_stays() {
        let t = teacher();
        let x = image(12);
        let cfg = NoiseMaskConfig {
            lambda: 0.0,
            init: 1.0,
            steps: 30,
            ..NoiseMaskConfig::default()
        };
        let m = learn_noise_mask(x.view(), 0, &t, t.conv_depth(), &cfg, &mut seed::rng_from(0)).unwrap();
        assert!(m.m.iter().all(|&v| v > 0.999), "min {}", m.m.iter().cloned().fold(1.0, f32::min));
        assert!(m.final_objective().abs() < 1e-9);
    }
}
