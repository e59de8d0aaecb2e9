use super::*;
use crate::model::{init_params, init_params_scaled, FeaturizerSpec};

/// Value, first and half second derivative at 0 by central differences.
fn numeric_taylor(f: impl Fn(f64) -> f64) -> (f64, f64, f64) {
    let h = 1e-4;
    let d1 = (f(h) - f(-h)) / (2.0 * h);
    let d2 = (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
    (f(0.0), d1, d2 / 2.0)
}

fn random_batch(n: usize, d: usize, outputs: usize, rng: &mut RngState) -> Batch {
    let features = Matrix::from_fn(n, d, |_, _| rng.next_f64());
    let labels = if outputs == 1 {
        Matrix::from_fn(n, 1, |_, _| rng.next_f64())
    } else {
        let mut l = Matrix::zeros(n, outputs);
        for i in 0..n {
            l.set(i, rng.index(outputs), 1.0);
        }
        l
    };
    Batch { features, labels }
}

#[test]
fn regression_coeffs_at_zero_label() {
    let t = taylor_coeffs_regression(0.0);
    assert_eq!((t.k0, t.k1, t.k2), (0.25, 0.25, 1.0 / 16.0));
}

#[test]
fn regression_coeffs_at_half() {
    let t = taylor_coeffs_regression(0.5);
    assert_eq!((t.k0, t.k1, t.k2), (0.0, 0.0, 1.0 / 16.0));
}

#[test]
fn regression_coeffs_match_finite_differences() {
    for k in 0..=20 {
        let y = k as f64 / 20.0;
        let (v, d1, d2) = numeric_taylor(|g| exact_loss(Task::Regression, g, y));
        let t = taylor_coeffs_regression(y);
        assert!((t.k0 - v).abs() < 1e-6);
        assert!((t.k1 - d1).abs() < 1e-6);
        assert!((t.k2 - d2).abs() < 1e-6, "y={y}: {} vs {d2}", t.k2);
    }
}

#[test]
fn classification_coeffs() {
    let t0 = taylor_coeffs_classification(0.0);
    assert!((t0.eval(0.0) - 0.6931).abs() < 1e-4);
    let t1 = taylor_coeffs_classification(1.0);
    assert_eq!(t1.k1, -0.5);
    assert_eq!(t1.k1, -t0.k1);
    for y in [0.0, 1.0] {
        let (v, d1, d2) = numeric_taylor(|g| exact_loss(Task::Classification, g, y));
        let t = taylor_coeffs_classification(y);
        assert!((t.k0 - v).abs() < 1e-6);
        assert!((t.k1 - d1).abs() < 1e-6);
        assert!((t.k2 - d2).abs() < 1e-6);
    }
}

#[test]
fn classification_surrogate_at_zero_is_m_ln2() {
    let mut rng = RngState::from_seed(4);
    let batch = random_batch(1, 3, 5, &mut rng);
    let arch = Architecture::classification(3, 4, 5, FeaturizerSpec::Identity);
    let mut params = init_params(&arch, 1);
    *params.output_layer_mut() = Matrix::zeros(4, 5);
    let loss = surrogate_loss(Task::Classification, &batch, &params).unwrap();
    assert!((loss - 5.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn truncation_error_bounds() {
    // The quadratic surrogate is within 0.01 of the squared error for
    // |g| <= 0.7 at any label, and within 0.0281 for |g| <= 1; the worst
    // case of the latter is y = 0, g = 1 where the cubic term is -1/48.
    let mut worst_07: f64 = 0.0;
    let mut worst_1: f64 = 0.0;
    for yi in 0..=200 {
        let y = yi as f64 / 200.0;
        let t = taylor_coeffs_regression(y);
        for gi in -400..=400 {
            let g = gi as f64 / 400.0;
            let err = (t.eval(g) - exact_loss(Task::Regression, g, y)).abs();
            worst_1 = worst_1.max(err);
            if g.abs() <= 0.7 {
                worst_07 = worst_07.max(err);
            }
        }
    }
    assert!(worst_07 <= 0.01, "{worst_07}");
    assert!(worst_1 <= 0.0281, "{worst_1}");
}

#[test]
fn zero_hidden_gives_constant_only() {
    let hidden = Matrix::zeros(1, 4);
    let labels = Matrix::from_vec(1, 1, vec![0.3]).unwrap();
    let c = coeffs_from_hidden(Task::Regression, &hidden, &labels).unwrap();
    assert!(c.c1.as_slice().iter().all(|&v| v == 0.0));
    assert!(c.c2[0].as_slice().iter().all(|&v| v == 0.0));
    assert_eq!(c.c0, taylor_coeffs_regression(0.3).k0);
}

#[test]
fn duplicated_sample_doubles() {
    let hidden = Matrix::from_vec(1, 3, vec![0.2, 0.5, 0.9]).unwrap();
    let labels = Matrix::from_vec(1, 1, vec![0.7]).unwrap();
    let once = coeffs_from_hidden(Task::Regression, &hidden, &labels).unwrap();
    let twice = coeffs_from_hidden(
        Task::Regression,
        &hidden.select_rows(&[0, 0]),
        &labels.select_rows(&[0, 0]),
    )
    .unwrap();
    assert_eq!(twice.c0, 2.0 * once.c0);
    for (a, b) in twice.c1.as_slice().iter().zip(once.c1.as_slice()) {
        assert_eq!(*a, 2.0 * b);
    }
    for (a, b) in twice.c2[0].as_slice().iter().zip(once.c2[0].as_slice()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn empty_batch_is_error() {
    let r = coeffs_from_hidden(Task::Regression, &Matrix::zeros(0, 3), &Matrix::zeros(0, 1));
    assert!(matches!(r, Err(Error::Empty(_))));
}

#[test]
fn polynomial_matches_per_sample_sum() {
    for (task, outputs) in [(Task::Regression, 1), (Task::Classification, 3)] {
        let mut rng = RngState::from_seed(21);
        let batch = random_batch(8, 5, outputs, &mut rng);
        let arch = Architecture {
            output_width: outputs,
            task,
            ..Architecture::regression(5, 6)
        };
        let params = init_params_scaled(&arch, 3, 0.7);
        let coeffs = batch_coeffs(task, &batch, &params).unwrap();
        assert!(coeffs.is_symmetric());
        let poly = coeffs.value(params.output_layer()).unwrap();
        // per-sample brute force
        let mut direct = 0.0;
        for i in 0..batch.len() {
            let h = params.hidden(batch.features.row(i)).unwrap();
            for j in 0..outputs {
                let g: f64 = h
                    .iter()
                    .enumerate()
                    .map(|(p, hp)| hp * params.output_layer().get(p, j))
                    .sum();
                direct += taylor_coeffs(task, batch.labels.get(i, j)).eval(g);
            }
        }
        assert!((poly - direct).abs() < 1e-9, "{poly} vs {direct}");
    }
}

#[test]
fn sensitivity_values() {
    assert_eq!(sensitivity(&Architecture::regression(20, 80)).value, 840.0);
    assert_eq!(sensitivity(&Architecture::regression(20, 1)).value, 0.625);
    let cls = Architecture::classification(64, 128, 10, FeaturizerSpec::Identity);
    assert_eq!(sensitivity(&cls).value, 42240.0);
    let mut stacked = Architecture::regression(20, 80);
    stacked.hidden.push(10);
    assert_eq!(sensitivity(&stacked).value, 5.0 + 12.5);
}

fn random_sample_coeffs(task: Task, b: usize, outputs: usize, rng: &mut RngState, fill: Option<f64>) -> PolyLossCoeffs {
    let h = Matrix::from_fn(1, b, |_, _| fill.unwrap_or_else(|| rng.next_f64()));
    let labels = Matrix::from_fn(1, outputs, |_, _| match task {
        Task::Regression if fill.is_none() => rng.next_f64(),
        _ => rng.index(2) as f64,
    });
    coeffs_from_hidden(task, &h, &labels).unwrap()
}

#[test]
fn neighbouring_swaps_respect_sensitivity() {
    let mut rng = RngState::from_seed(77);
    for (arch, outputs) in [
        (Architecture::regression(3, 6), 1),
        (Architecture::classification(3, 5, 3, FeaturizerSpec::Identity), 3),
    ] {
        let bound = sensitivity(&arch).value;
        let b = arch.last_hidden();
        let mut worst: f64 = 0.0;
        for trial in 0..10_000 {
            // every tenth swap pits an all-ones hidden vector against zeros
            let (fa, fc) = if trial % 10 == 0 {
                (Some(1.0), Some(0.0))
            } else {
                (None, None)
            };
            let a = random_sample_coeffs(arch.task, b, outputs, &mut rng, fa);
            let c = random_sample_coeffs(arch.task, b, outputs, &mut rng, fc);
            worst = worst.max(a.monomial_l1_distance(&c));
        }
        assert!(worst <= bound + 1e-12, "{worst} > {bound}");
        // The supremum over single swaps is half the bound.
        assert!(worst >= 0.4 * bound, "bound never approached: {worst}");
    }
}

#[test]
fn huge_epsilon_barely_perturbs() {
    let mut rng = RngState::from_seed(1);
    let arch = Architecture::regression(3, 4);
    let batch = random_batch(16, 3, 1, &mut rng);
    let params = init_params(&arch, 2);
    let c = batch_coeffs(Task::Regression, &batch, &params).unwrap();
    let p = perturb_coeffs(&c, sensitivity(&arch), 1e9, &mut rng).unwrap();
    assert!(p.c1.max_abs_diff(&c.c1) < 1e-6);
    assert!(p.c2[0].max_abs_diff(&c.c2[0]) < 1e-6);
    assert_eq!(p.c0, c.c0);
    assert!(p.is_symmetric());
}

#[test]
fn perturbation_is_reproducible() {
    let arch = Architecture::regression(3, 4);
    let c = PolyLossCoeffs::zeros(Task::Regression, 4, 1);
    let s = sensitivity(&arch);
    let a = perturb_coeffs(&c, s, 1.0, &mut RngState::from_seed(5)).unwrap();
    let b = perturb_coeffs(&c, s, 1.0, &mut RngState::from_seed(5)).unwrap();
    assert_eq!(a, b);
    assert!(perturb_coeffs(&c, s, 0.0, &mut RngState::from_seed(5)).is_err());
    assert!(perturb_coeffs(&c, s, -1.0, &mut RngState::from_seed(5)).is_err());
}

#[test]
fn noise_sd_matches_laplace() {
    let arch = Architecture::regression(3, 2);
    let s = sensitivity(&arch); // 1.5
    let eps = 0.5;
    let expected = 2f64.sqrt() * s.value / eps;
    let zero = PolyLossCoeffs::zeros(Task::Regression, 2, 1);
    let mut rng = RngState::from_seed(123);
    let trials = 100_000;
    let (mut lin, mut diag, mut off) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..trials {
        let p = perturb_coeffs(&zero, s, eps, &mut rng).unwrap();
        lin.push(p.c1.get(0, 0));
        diag.push(p.c2[0].get(1, 1));
        off.push(p.c2[0].get(0, 1) + p.c2[0].get(1, 0));
    }
    for (name, xs) in [("c1", lin), ("c2 diag", diag), ("c2 pair", off)] {
        let m = xs.iter().sum::<f64>() / trials as f64;
        let sd = (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / trials as f64).sqrt();
        assert!((sd - expected).abs() / expected < 0.03, "{name}: sd {sd} vs {expected}");
    }
}

#[test]
fn noise_decomposes_additively() {
    let mut rng = RngState::from_seed(8);
    let arch = Architecture::regression(4, 5);
    let batch = random_batch(10, 4, 1, &mut rng);
    let params = init_params(&arch, 6);
    let c = batch_coeffs(Task::Regression, &batch, &params).unwrap();
    let noise = coefficient_noise(Task::Regression, 5, 1, sensitivity(&arch), 1.0, &mut rng.clone()).unwrap();
    let perturbed = perturb_coeffs(&c, sensitivity(&arch), 1.0, &mut rng).unwrap();
    assert_eq!(perturbed.difference(&c).unwrap().c1, {
        let mut d = perturbed.c1.clone();
        d.axpy(-1.0, &c.c1).unwrap();
        d
    });
    let via_coeffs = perturbed.value(params.output_layer()).unwrap();
    let via_parts = perturbed_loss(Task::Regression, &batch, &params, &noise).unwrap();
    assert!((via_coeffs - via_parts).abs() < 1e-9 * via_coeffs.abs().max(1.0));
}

#[test]
fn flat_loss_has_zero_output_gradient() {
    let mut rng = RngState::from_seed(3);
    let arch = Architecture::regression(3, 4);
    let batch = random_batch(5, 3, 1, &mut rng);
    let params = init_params(&arch, 1);
    let flat = PolyLossCoeffs::zeros(Task::Regression, 4, 1);
    let g = grad(&flat, &batch, &params).unwrap();
    assert!(g.layers[1].as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_rejects_wrong_shapes() {
    let mut rng = RngState::from_seed(3);
    let arch = Architecture::regression(3, 4);
    let batch = random_batch(5, 3, 1, &mut rng);
    let params = init_params(&arch, 1);
    let wrong = PolyLossCoeffs::zeros(Task::Regression, 7, 1);
    assert!(grad(&wrong, &batch, &params).is_err());
}

/// Checks analytic gradients of the perturbed surrogate against central
/// differences, skipping instances with pre-activations near a kink.
fn gradient_check(seed: u64, arch: &Architecture, n: usize) -> Option<(f64, f64)> {
    let mut rng = RngState::from_seed(seed);
    let outputs = arch.output_width;
    let batch = random_batch(n, arch.featurized_width(), outputs, &mut rng);
    let params = init_params_scaled(arch, seed, 0.8);
    let trace = params.trace(&batch.features).unwrap();
    let margin = 1e-3;
    let near_kink = trace
        .pre
        .iter()
        .flat_map(|m| m.as_slice())
        .any(|&z| z.abs() < margin || (z - 1.0).abs() < margin);
    if near_kink {
        return None;
    }
    let s = Sensitivity {
        value: 0.5,
        task: arch.task,
    };
    let noise = coefficient_noise(arch.task, arch.last_hidden(), outputs, s, 1.0, &mut rng).unwrap();
    let mut perturbed = batch_coeffs(arch.task, &batch, &params).unwrap();
    perturbed.c1.axpy(1.0, &noise.c1).unwrap();
    for (c, e) in perturbed.c2.iter_mut().zip(&noise.c2) {
        c.axpy(1.0, e).unwrap();
    }
    let analytic = grad(&perturbed, &batch, &params).unwrap();
    let loss = |p: &ModelParams| perturbed_loss(arch.task, &batch, p, &noise).unwrap();

    let h = 1e-6;
    let last = params.layers.len() - 1;
    let mut rel = [0.0f64; 2];
    for (l, layer) in params.layers.iter().enumerate() {
        let mut numeric = Matrix::zeros(layer.rows(), layer.cols());
        for idx in 0..layer.as_slice().len() {
            let mut plus = params.clone();
            plus.layers[l].as_mut_slice()[idx] += h;
            let mut minus = params.clone();
            minus.layers[l].as_mut_slice()[idx] -= h;
            numeric.as_mut_slice()[idx] = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        let err = numeric.max_abs_diff(&analytic.layers[l]) / numeric.frobenius_norm().max(1e-8);
        let slot = usize::from(l == last);
        rel[slot] = rel[slot].max(err);
    }
    Some((rel[0], rel[1]))
}

#[test]
fn gradients_match_finite_differences() {
    let arch = Architecture::regression(3, 4);
    let mut checked = 0;
    for seed in 0..40 {
        if let Some((hidden, output)) = gradient_check(seed, &arch, 6) {
            assert!(output < 1e-5, "seed {seed}: output rel err {output}");
            assert!(hidden < 1e-4, "seed {seed}: hidden rel err {hidden}");
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} instances away from kinks");
}

#[test]
fn stacked_and_multiclass_gradients() {
    let mut stacked = Architecture::regression(4, 5);
    stacked.hidden.push(3);
    let cls = Architecture::classification(4, 5, 3, FeaturizerSpec::Identity);
    for arch in [stacked, cls] {
        let mut checked = 0;
        for seed in 100..160 {
            if let Some((hidden, output)) = gradient_check(seed, &arch, 5) {
                assert!(
                    output < 1e-5 && hidden < 1e-4,
                    "{arch:?} seed {seed}: {hidden} {output}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 10);
    }
}
