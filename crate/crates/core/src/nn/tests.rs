//! Analytic gradients against central finite differences (f64).

use ndarray::{Array2, Array4};
use rand::Rng;

use super::*;
use crate::seed;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn toy_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        input_shape: (2, 6, 6),
        conv_blocks: vec![ConvBlockSpec {
            out_channels: 3,
            kernel: 3,
            stride: 1,
        }],
        fc_dims: vec![4],
        num_classes: 4,
    }
}

fn random_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = seed::rng_from(seed);
    Array4::from_shape_fn(shape, |_| rng.random::<f64>())
}

fn ce_loss(model: &mut Classifier<f64>, x: &Array4<f64>, labels: &[usize]) -> f64 {
    let probs = model.forward_full(x, Mode::Train).unwrap();
    cross_entropy(&probs, labels).0
}

/// Indices spread across a parameter tensor.
fn probe_indices(len: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).step_by((len / 7).max(1)).collect();
    idx.push(len - 1);
    idx.dedup();
    idx
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let mut rng = seed::rng_from(11);
    let mut model = Classifier::<f64>::new(toy_spec(), &mut rng).unwrap();
    let x = random_input((5, 2, 6, 6), 3);
    let labels = [0, 1, 2, 3, 1];

    let probs = model.forward_full(&x, Mode::Train).unwrap();
    let (_, dlogits) = cross_entropy(&probs, &labels);
    model.zero_grad();
    let dx = model.backward_logits(&dlogits, true).unwrap().unwrap();
    let analytic: Vec<Vec<f64>> = model.params_mut().iter().map(|p| p.grad.iter().copied().collect()).collect();

    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for i in probe_indices(grads.len()) {
            let orig = model.params_mut()[pi].value.as_slice().unwrap()[i];
            model.params_mut()[pi].value.as_slice_mut().unwrap()[i] = orig + EPS;
            let up = ce_loss(&mut model, &x, &labels);
            model.params_mut()[pi].value.as_slice_mut().unwrap()[i] = orig - EPS;
            let down = ce_loss(&mut model, &x, &labels);
            model.params_mut()[pi].value.as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(rel_err(grads[i], numeric));
        }
    }
    assert!(worst < TOL, "parameter gradient relative error {worst}");

    let mut worst = 0.0f64;
    for i in probe_indices(x.len()) {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[i] += EPS;
        let up = ce_loss(&mut model, &xp, &labels);
        xp.as_slice_mut().unwrap()[i] -= 2.0 * EPS;
        let down = ce_loss(&mut model, &xp, &labels);
        let numeric = (up - down) / (2.0 * EPS);
        worst = worst.max(rel_err(dx.as_slice().unwrap()[i], numeric));
    }
    assert!(worst < TOL, "input gradient relative error {worst}");
}

#[test]
fn intermediate_activation_gradient_in_eval_mode() {
    // d/dx of 0.5·||T_K(x) - t||² through frozen (running-statistics) blocks.
    let mut rng = seed::rng_from(5);
    let spec = ArchitectureSpec::from_channels((1, 8, 8), &[3, 4], 6, 3);
    let mut model = Classifier::<f64>::new(spec, &mut rng).unwrap();
    model.freeze_all();
    let x = random_input((2, 1, 8, 8), 9);
    let target = Array2::from_elem((2, model.spec().feature_dim().unwrap()), 0.3);
    let k = model.conv_depth();
    let loss = |m: &Classifier<f64>, x: &Array4<f64>| -> f64 {
        let a = m.activation_at(x, k).unwrap();
        0.5 * (&a - &target).mapv(|d| d * d).sum()
    };
    let a = model.forward(&x, k, Mode::Eval).unwrap();
    let dx = model.backward(&(&a - &target), true).unwrap().unwrap();
    let mut worst = 0.0f64;
    for i in probe_indices(x.len()) {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[i] += EPS;
        let up = loss(&model, &xp);
        xp.as_slice_mut().unwrap()[i] -= 2.0 * EPS;
        let down = loss(&model, &xp);
        worst = worst.max(rel_err(dx.as_slice().unwrap()[i], (up - down) / (2.0 * EPS)));
    }
    assert!(worst < TOL, "relative error {worst}");
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let mut rng = seed::rng_from(2);
    let spec = DecoderSpec {
        input_dim: 3,
        output_shape: (1, 8, 8),
        blocks: 2,
        base_channels: 2,
    };
    let mut dec = InversionDecoder::<f64>::new(spec, &mut rng).unwrap();
    let z = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.7).sin());
    let target = random_input((4, 1, 8, 8), 1);
    let loss = |d: &mut InversionDecoder<f64>, z: &Array2<f64>| -> f64 { mse(&d.forward(z, Mode::Train).unwrap(), &target).0 };

    let out = dec.forward(&z, Mode::Train).unwrap();
    let (_, g) = mse(&out, &target);
    dec.zero_grad();
    let dz = dec.backward(&g, true).unwrap().unwrap();
    let analytic: Vec<Vec<f64>> = dec.params_mut().iter().map(|p| p.grad.iter().copied().collect()).collect();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for i in probe_indices(grads.len()) {
            let orig = dec.params_mut()[pi].value.as_slice().unwrap()[i];
            dec.params_mut()[pi].value.as_slice_mut().unwrap()[i] = orig + EPS;
            let up = loss(&mut dec, &z);
            dec.params_mut()[pi].value.as_slice_mut().unwrap()[i] = orig - EPS;
            let down = loss(&mut dec, &z);
            dec.params_mut()[pi].value.as_slice_mut().unwrap()[i] = orig;
            worst = worst.max(rel_err(grads[i], (up - down) / (2.0 * EPS)));
        }
    }
    for i in 0..z.len() {
        let mut zp = z.clone();
        zp.as_slice_mut().unwrap()[i] += EPS;
        let up = loss(&mut dec, &zp);
        zp.as_slice_mut().unwrap()[i] -= 2.0 * EPS;
        let down = loss(&mut dec, &zp);
        worst = worst.max(rel_err(dz.as_slice().unwrap()[i], (up - down) / (2.0 * EPS)));
    }
    assert!(worst < TOL, "relative error {worst}");
}

#[test]
fn conversion_net_gradients_match_finite_differences() {
    let mut rng = seed::rng_from(4);
    let mut net = ConversionNet::<f64>::new(3, 5, 4, &mut rng).unwrap();
    let x = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 - j as f64) * 0.4);
    let t = Array2::from_elem((3, 4), 0.2);
    let y = net.forward(&x).unwrap();
    let (_, g) = mse(&y, &t);
    net.zero_grad();
    let dx = net.backward(&g).unwrap();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[i] += EPS;
        let up = mse(&net.apply(&xp).unwrap(), &t).0;
        xp.as_slice_mut().unwrap()[i] -= 2.0 * EPS;
        let down = mse(&net.apply(&xp).unwrap(), &t).0;
        worst = worst.max(rel_err(dx.as_slice().unwrap()[i], (up - down) / (2.0 * EPS)));
    }
    assert!(worst < TOL, "relative error {worst}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = seed::rng_from(0);
    let model = Classifier::<f32>::new(ArchitectureSpec::mnist(10), &mut rng).unwrap();
    let x = Array4::from_shape_fn((4, 1, 32, 32), |_| rng.random::<f32>());
    let p = model.predict(&x).unwrap();
    assert_eq!(p.dim(), (4, 10));
    for row in p.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn activation_taps_agree() {
    let mut rng = seed::rng_from(1);
    let model = Classifier::<f32>::new(ArchitectureSpec::mnist(10), &mut rng).unwrap();
    let x = Array4::from_shape_fn((3, 1, 32, 32), |_| rng.random::<f32>());
    let last = model.activation_at(&x, model.layer_count()).unwrap();
    assert_eq!(last, model.predict(&x).unwrap());
    let feats = model.activation_at(&x, model.conv_depth()).unwrap();
    assert_eq!(feats, model.features(&x).unwrap());
    assert_eq!(feats.ncols(), model.spec().feature_dim().unwrap());
    assert!(matches!(model.activation_at(&x, 0), Err(crate::Error::Argument(_))));
    assert!(model.activation_at(&x, model.layer_count() + 1).is_err());
}

#[test]
fn recording_forward_matches_inference() {
    let mut rng = seed::rng_from(8);
    let mut model = Classifier::<f32>::new(ArchitectureSpec::mnist(10), &mut rng).unwrap();
    let x = Array4::from_shape_fn((2, 1, 32, 32), |_| rng.random::<f32>());
    let a = model.forward_full(&x, Mode::Eval).unwrap();
    assert_eq!(a, model.predict(&x).unwrap());
}

#[test]
fn bad_specs_are_shape_errors() {
    let mut rng = seed::rng_from(0);
    let mut spec = ArchitectureSpec::mnist(10);
    spec.fc_dims = vec![128, 7];
    assert!(matches!(Classifier::<f32>::new(spec, &mut rng), Err(crate::Error::Shape(_))));
    let spec = ArchitectureSpec::from_channels((1, 4, 4), &[4, 4, 4], 8, 2);
    assert!(matches!(Classifier::<f32>::new(spec, &mut rng), Err(crate::Error::Shape(_))));
    let bad = DecoderSpec::new(10, (1, 32, 32), 3);
    assert!(matches!(InversionDecoder::<f32>::new(bad, &mut rng), Err(crate::Error::Shape(_))));
    assert!(InversionDecoder::<f32>::new(DecoderSpec::new(10, (1, 32, 32), 1), &mut rng).is_err());
}

#[test]
fn same_seed_same_parameters() {
    let a = Classifier::<f32>::new(ArchitectureSpec::mnist(10), &mut seed::rng_from(3)).unwrap();
    let b = Classifier::<f32>::new(ArchitectureSpec::mnist(10), &mut seed::rng_from(3)).unwrap();
    assert_eq!(a.digest(), b.digest());
    let c = Classifier::<f32>::new(ArchitectureSpec::mnist(10), &mut seed::rng_from(4)).unwrap();
    assert_ne!(a.digest(), c.digest());
    let d1 = InversionDecoder::<f32>::new(DecoderSpec::new(10, (1, 32, 32), 4), &mut seed::rng_from(3)).unwrap();
    let d2 = InversionDecoder::<f32>::new(DecoderSpec::new(10, (1, 32, 32), 4), &mut seed::rng_from(3)).unwrap();
    assert_eq!(d1.digest(), d2.digest());
}

#[test]
fn decoder_output_in_unit_range_with_target_shape() {
    let mut rng = seed::rng_from(6);
    let dec = InversionDecoder::<f32>::new(DecoderSpec::new(10, (1, 32, 32), 4), &mut rng).unwrap();
    let z = Array2::from_shape_fn((5, 10), |_| rng.random::<f32>() * 4.0 - 2.0);
    let out = dec.decode(&z).unwrap();
    assert_eq!(out.dim(), (5, 1, 32, 32));
    assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    let faces = InversionDecoder::<f32>::new(DecoderSpec::new(8, (3, 64, 64), 5), &mut rng).unwrap();
    assert_eq!(faces.decode(&Array2::zeros((1, 8))).unwrap().dim(), (1, 3, 64, 64));
}

#[test]
fn state_bytes_round_trip() {
    let mut rng = seed::rng_from(12);
    let a = Classifier::<f32>::new(ArchitectureSpec::mnist(10), &mut rng).unwrap();
    let mut b = Classifier::<f32>::new(ArchitectureSpec::mnist(10), &mut rng).unwrap();
    b.load_state_bytes(&a.state_bytes()).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert!(b.load_state_bytes(&[0u8; 3]).is_err());
}
