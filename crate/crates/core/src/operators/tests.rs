use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_image(shape: Shape, rng: &mut impl Rng) -> ComplexImage {
    let data = (0..shape.len())
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    ComplexImage::new(shape, data).unwrap()
}

fn random_data(op: &MeasurementOperator, rng: &mut impl Rng) -> KSpaceData {
    let mut y = op.zero_data();
    for z in y.iter_mut() {
        *z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    y
}

/// `spokes` diameters at uniform angles, `readout` points each, with the
/// ramp weights used by the simulator.
fn radial_phase(spokes: usize, readout: usize, rotation: f64) -> PhaseSamples {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for s in 0..spokes {
        let angle = (rotation + s as f64 * PI / spokes as f64).rem_euclid(PI);
        for r in 0..readout {
            let k = -0.5 + r as f64 / readout as f64;
            points.push([k * angle.cos(), k * angle.sin()]);
            weights.push(k.abs().max(0.25 / readout as f64));
        }
    }
    PhaseSamples::new(points, weights).unwrap()
}

fn radial_pattern(phases: usize, spokes: usize, readout: usize) -> SamplingPattern {
    let p = (0..phases)
        .map(|t| radial_phase(spokes, readout, 0.37 * t as f64))
        .collect();
    SamplingPattern::new(SamplingScheme::Radial, p).unwrap()
}

fn smooth_coils(ny: usize, nx: usize, n: usize) -> CoilMaps {
    let maps = (0..n)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / n as f64;
            let (cy, cx) = (0.5 * phi.sin(), 0.5 * phi.cos());
            (0..ny * nx)
                .map(|j| {
                    let y = (j / nx) as f64 / ny as f64 - 0.5;
                    let x = (j % nx) as f64 / nx as f64 - 0.5;
                    let mag = 0.6 + (-((y - cy).powi(2) + (x - cx).powi(2)) * 2.0).exp();
                    Complex64::from_polar(mag, phi + 0.8 * x - 0.3 * y)
                })
                .collect()
        })
        .collect();
    CoilMaps::new(ny, nx, maps).unwrap()
}

/// Brute-force `(1/sqrt(n)) sum_p x_p exp(-2 pi i k.p)` for one plane.
fn nudft_oracle(plane: &[Complex64], ny: usize, nx: usize, k: [f64; 2]) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for py in 0..ny {
        for px in 0..nx {
            let p = [px as f64 - (nx / 2) as f64, py as f64 - (ny / 2) as f64];
            let arg = -2.0 * PI * (k[0] * p[0] + k[1] * p[1]);
            acc += plane[py * nx + px] * Complex64::from_polar(1.0, arg);
        }
    }
    acc / ((ny * nx) as f64).sqrt()
}

fn nudft_adjoint_oracle(samples: &[Complex64], points: &[[f64; 2]], ny: usize, nx: usize) -> Vec<Complex64> {
    let mut plane = vec![Complex64::new(0.0, 0.0); ny * nx];
    for py in 0..ny {
        for px in 0..nx {
            let p = [px as f64 - (nx / 2) as f64, py as f64 - (ny / 2) as f64];
            for (v, k) in samples.iter().zip(points) {
                let arg = 2.0 * PI * (k[0] * p[0] + k[1] * p[1]);
                plane[py * nx + px] += v * Complex64::from_polar(1.0, arg);
            }
        }
    }
    let s = 1.0 / ((ny * nx) as f64).sqrt();
    plane.iter().map(|z| z * s).collect()
}

fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

fn flat(y: &KSpaceData) -> Vec<Complex64> {
    y.iter().copied().collect()
}

fn direct(shape: Shape, pattern: SamplingPattern, coils: CoilMaps) -> MeasurementOperator {
    MeasurementOperator::new(shape, pattern, coils, FourierMode::Direct).unwrap()
}

#[test]
fn zero_image_gives_zero_samples() {
    let shape = Shape::new(2, 8, 8);
    let op = direct(shape, radial_pattern(2, 3, 8), smooth_coils(8, 8, 2));
    let y = op.forward(&ComplexImage::zeros(shape)).unwrap();
    assert!(y.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
}

#[test]
fn delta_at_origin_has_flat_spectrum() {
    let shape = Shape::plane(8, 8);
    let op = direct(shape, SamplingPattern::cartesian_full(1, 8, 8), CoilMaps::uniform(8, 8));
    let mut x = ComplexImage::zeros(shape);
    x.data_mut()[shape.index(0, 4, 4)] = Complex64::new(1.0, 0.0);
    let y = op.forward(&x).unwrap();
    assert_eq!(y.len(), 64);
    for z in y.iter() {
        assert!((z - Complex64::new(op.normalization(), 0.0)).norm() < 1e-15);
    }
    assert_eq!(op.normalization(), 0.125);
}

#[test]
fn forward_matches_brute_force_nudft() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = Shape::plane(8, 8);
    let pattern = radial_pattern(1, 3, 8);
    let points = pattern.phases()[0].points.clone();
    let op = direct(shape, pattern, CoilMaps::uniform(8, 8));
    let x = random_image(shape, &mut rng);
    let y = op.forward(&x).unwrap();
    let expected: Vec<_> = points.iter().map(|&k| nudft_oracle(x.data(), 8, 8, k)).collect();
    assert!(rel_err(y.get(0, 0), &expected) <= 1e-10);
}

#[test]
fn adjoint_of_zero_and_of_dc_sample() {
    let shape = Shape::plane(6, 6);
    let pattern = SamplingPattern::new(
        SamplingScheme::Radial,
        vec![PhaseSamples::new(vec![[0.0, 0.0]], vec![1.0]).unwrap()],
    )
    .unwrap();
    let op = direct(shape, pattern, CoilMaps::uniform(6, 6));
    let zero = op.adjoint(&op.zero_data()).unwrap();
    assert_eq!(zero.norm(), 0.0);

    let mut y = op.zero_data();
    y.get_mut(0, 0)[0] = Complex64::new(1.0, 0.0);
    let x = op.adjoint(&y).unwrap();
    for z in x.data() {
        assert!((z - Complex64::new(1.0 / 6.0, 0.0)).norm() < 1e-15);
    }
}

#[test]
fn adjoint_identity_holds_for_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = Shape::new(3, 10, 12);
    let op = direct(shape, radial_pattern(3, 5, 12), smooth_coils(10, 12, 3));
    for _ in 0..20 {
        let x = random_image(shape, &mut rng);
        let y = random_data(&op, &mut rng);
        let hx = op.forward(&x).unwrap();
        let lhs = hx.dot(&y);
        let rhs = x.dot(&op.adjoint(&y).unwrap());
        assert!((lhs - rhs).norm() <= 1e-10 * hx.norm() * y.norm());
    }
}

#[test]
fn forward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = Shape::new(2, 8, 8);
    let op = direct(shape, radial_pattern(2, 4, 8), smooth_coils(8, 8, 2));
    let (x1, x2) = (random_image(shape, &mut rng), random_image(shape, &mut rng));
    let alpha = -1.7;
    let mut combo = x2.clone();
    combo.axpy(alpha, &x1);
    let lhs = flat(&op.forward(&combo).unwrap());
    let (h1, h2) = (flat(&op.forward(&x1).unwrap()), flat(&op.forward(&x2).unwrap()));
    let rhs: Vec<_> = h1.iter().zip(&h2).map(|(a, b)| a * alpha + b).collect();
    assert!(rel_err(&lhs, &rhs) <= 1e-12);
}

#[test]
fn pseudoinverse_inverts_full_unitary_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = Shape::new(2, 8, 6);
    let op = direct(shape, SamplingPattern::cartesian_full(2, 8, 6), CoilMaps::uniform(8, 6));
    let x = random_image(shape, &mut rng);
    let back = op.pseudoinverse(&op.forward(&x).unwrap()).unwrap();
    assert!(rel_err(back.data(), x.data()) <= 1e-10);
    let zero = op.pseudoinverse(&op.zero_data()).unwrap();
    assert_eq!(zero.norm(), 0.0);
}

#[test]
fn pseudoinverse_matches_density_compensated_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (ny, nx) = (16, 16);
    let shape = Shape::plane(ny, nx);
    // 2 spokes x 13 points ~ 10% of a 16x16 grid.
    let pattern = SamplingPattern::new(SamplingScheme::Radial, vec![radial_phase(2, 13, 0.2)]).unwrap();
    let phase = pattern.phases()[0].clone();
    let coils = smooth_coils(ny, nx, 2);
    let op = direct(shape, pattern, coils.clone());
    let x = random_image(shape, &mut rng);
    let y = op.forward(&x).unwrap();
    let got = op.pseudoinverse(&y).unwrap();

    let energy = coils.energy();
    let mut expected = vec![Complex64::new(0.0, 0.0); ny * nx];
    for i in 0..2 {
        let weighted: Vec<_> = y.get(0, i).iter().zip(&phase.weights).map(|(z, w)| z * w).collect();
        let plane = nudft_adjoint_oracle(&weighted, &phase.points, ny, nx);
        for (j, z) in plane.iter().enumerate() {
            expected[j] += coils.map(i)[j].conj() * z / energy[j];
        }
    }
    assert!(rel_err(got.data(), &expected) <= 1e-10);
}

#[test]
fn datafid_gradient_special_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = Shape::plane(8, 8);
    let op = direct(shape, radial_pattern(1, 4, 8), smooth_coils(8, 8, 2));
    let x = random_image(shape, &mut rng);
    let y = op.forward(&x).unwrap();
    assert!(op.datafid_gradient(&x, &y).unwrap().norm() < 1e-12);

    let y = random_data(&op, &mut rng);
    let g0 = op.datafid_gradient(&ComplexImage::zeros(shape), &y).unwrap();
    let minus_hty = op.adjoint(&y).unwrap().scaled(-1.0);
    assert!(rel_err(g0.data(), minus_hty.data()) < 1e-14);
}

#[test]
fn datafid_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let shape = Shape::new(2, 6, 6);
    let op = direct(shape, radial_pattern(2, 4, 6), smooth_coils(6, 6, 2));
    let x = random_image(shape, &mut rng);
    let y = random_data(&op, &mut rng);
    let grad = op.datafid_gradient(&x, &y).unwrap();
    let h = 1e-6;
    let mut fd = vec![Complex64::new(0.0, 0.0); shape.len()];
    for j in 0..shape.len() {
        for (part, unit) in [(0, Complex64::new(h, 0.0)), (1, Complex64::new(0.0, h))] {
            let mut xp = x.clone();
            xp.data_mut()[j] += unit;
            let mut xm = x.clone();
            xm.data_mut()[j] -= unit;
            let d = (op.datafid_value(&xp, &y).unwrap() - op.datafid_value(&xm, &y).unwrap()) / (2.0 * h);
            if part == 0 {
                fd[j].re = d;
            } else {
                fd[j].im = d;
            }
        }
    }
    assert!(rel_err(grad.data(), &fd) <= 1e-5);
}

#[test]
fn norm_estimate_of_unitary_and_masked_operators() {
    let shape = Shape::new(2, 8, 8);
    let op = direct(shape, SamplingPattern::cartesian_full(2, 8, 8), CoilMaps::uniform(8, 8));
    assert!((op.norm_estimate(5, 1).unwrap() - 1.0).abs() <= 1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let masks: Vec<Vec<bool>> = (0..2)
        .map(|_| (0..64).map(|_| rng.gen_bool(0.3)).collect())
        .collect();
    let op = direct(shape, SamplingPattern::cartesian_mask(8, 8, &masks).unwrap(), CoilMaps::uniform(8, 8));
    assert!((op.norm_estimate(5, 1).unwrap() - 1.0).abs() <= 1e-8);
    assert_eq!(op.norm_estimate(3, 9).unwrap(), op.norm_estimate(3, 9).unwrap());
}

#[test]
fn norm_estimate_matches_dense_singular_value() {
    let (ny, nx) = (8, 8);
    let shape = Shape::plane(ny, nx);
    let op = direct(shape, radial_pattern(1, 5, 8), smooth_coils(ny, nx, 2));
    let m = op.zero_data().len();
    let n = shape.len();
    let mut dense = nalgebra::DMatrix::<Complex64>::zeros(m, n);
    for j in 0..n {
        let mut e = ComplexImage::zeros(shape);
        e.data_mut()[j] = Complex64::new(1.0, 0.0);
        for (i, z) in op.forward(&e).unwrap().iter().enumerate() {
            dense[(i, j)] = *z;
        }
    }
    let sigma = dense.singular_values()[0];
    let est = op.norm_estimate(500, 4).unwrap();
    assert!((est - sigma * sigma).abs() <= 1e-6 * sigma * sigma, "{est} vs {}", sigma * sigma);
}

#[test]
fn gridding_agrees_with_direct_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (ny, nx) = (32, 32);
    let shape = Shape::new(2, ny, nx);
    let pattern = radial_pattern(2, 9, 32);
    let coils = smooth_coils(ny, nx, 2);
    let exact = direct(shape, pattern.clone(), coils.clone());
    let fast = MeasurementOperator::new(
        shape,
        pattern,
        coils,
        FourierMode::Gridding(GriddingParams::default()),
    )
    .unwrap();
    let x = random_image(shape, &mut rng);
    let err = rel_err(&flat(&fast.forward(&x).unwrap()), &flat(&exact.forward(&x).unwrap()));
    assert!(err <= 1e-3, "forward rel err {err}");

    let y = random_data(&exact, &mut rng);
    let err = rel_err(fast.adjoint(&y).unwrap().data(), exact.adjoint(&y).unwrap().data());
    assert!(err <= 1e-3, "adjoint rel err {err}");

    // The narrower width-4 kernel stays within 1e-2.
    let narrow = MeasurementOperator::new(
        shape,
        exact.pattern().clone(),
        exact.coils().clone(),
        FourierMode::Gridding(GriddingParams { width: 4, oversampling: 1.25 }),
    )
    .unwrap();
    let err = rel_err(&flat(&narrow.forward(&x).unwrap()), &flat(&exact.forward(&x).unwrap()));
    assert!(err <= 1e-2, "width-4 forward rel err {err}");

    let hx = fast.forward(&x).unwrap();
    let lhs = hx.dot(&y);
    let rhs = x.dot(&fast.adjoint(&y).unwrap());
    assert!((lhs - rhs).norm() <= 1e-10 * hx.norm() * y.norm());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let shape = Shape::plane(8, 8);
    let op = direct(shape, radial_pattern(1, 2, 8), CoilMaps::uniform(8, 8));
    assert!(matches!(
        op.forward(&ComplexImage::zeros(Shape::plane(8, 7))),
        Err(Error::ShapeMismatch { .. })
    ));
    let wrong = KSpaceData::zeros(1, &[3]);
    assert!(op.adjoint(&wrong).is_err());
    assert!(op.norm_estimate(0, 0).is_err());

    let mut x = ComplexImage::zeros(shape);
    x.data_mut()[3] = Complex64::new(f64::NAN, 0.0);
    assert!(matches!(op.forward(&x), Err(Error::NonFinite { index: 3 })));
}

#[test]
fn dead_coil_pixels_are_rejected() {
    let mut map = vec![Complex64::new(1.0, 0.0); 16];
    map[5] = Complex64::new(0.0, 0.0);
    assert!(matches!(
        CoilMaps::new(4, 4, vec![map]),
        Err(Error::ZeroCoilEnergy { y: 1, x: 1 })
    ));
}
