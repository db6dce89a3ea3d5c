use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rare_core::metrics::{psnr, ssim, ssim_with_range, SsimMode};
use rare_core::operators::{CoilMaps, FourierMode, MeasurementOperator, PhaseSamples, SamplingPattern, SamplingScheme};
use rare_core::priors::{red_residual, tv_denoise, NetConfig, NetWeights, Scaling, TvParams};
use rare_core::training::mixed_loss;
use rare_core::{Complex64, ComplexImage, KSpaceData, Shape};

fn image(shape: Shape, rng: &mut ChaCha8Rng) -> ComplexImage {
    let data = (0..shape.len())
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    ComplexImage::new(shape, data).unwrap()
}

fn real_image(shape: Shape, rng: &mut ChaCha8Rng) -> ComplexImage {
    let v: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    ComplexImage::from_real(shape, &v).unwrap()
}

fn operator(shape: Shape, samples: usize, coils: usize, rng: &mut ChaCha8Rng) -> MeasurementOperator {
    let phases = (0..shape.phases)
        .map(|_| {
            let points = (0..samples).map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]).collect();
            let weights = (0..samples).map(|_| rng.gen_range(0.1..2.0)).collect();
            PhaseSamples::new(points, weights).unwrap()
        })
        .collect();
    let pattern = SamplingPattern::new(SamplingScheme::Radial, phases).unwrap();
    let maps = (0..coils)
        .map(|_| {
            (0..shape.plane_len())
                .map(|_| Complex64::from_polar(rng.gen_range(0.5..1.5), rng.gen_range(0.0..6.28)))
                .collect()
        })
        .collect();
    let coils = CoilMaps::new(shape.ny, shape.nx, maps).unwrap();
    MeasurementOperator::new(shape, pattern, coils, FourierMode::Direct).unwrap()
}

fn kspace(op: &MeasurementOperator, rng: &mut ChaCha8Rng) -> KSpaceData {
    let mut y = op.zero_data();
    for v in y.iter_mut() {
        *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn adjoint_identity(seed in any::<u64>(), phases in 1usize..3, ny in 3usize..9, nx in 3usize..9, coils in 1usize..4, m in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(phases, ny, nx);
        let op = operator(shape, m, coils, &mut rng);
        let x = image(shape, &mut rng);
        let y = kspace(&op, &mut rng);
        let lhs = op.forward(&x).unwrap().dot(&y);
        let rhs = x.dot(&op.adjoint(&y).unwrap());
        let scale = x.norm() * y.norm() * (coils as f64).sqrt() * 4.0;
        prop_assert!((lhs - rhs).norm() <= 1e-10 * scale.max(1.0));
    }

    #[test]
    fn normal_operator_is_positive(seed in any::<u64>(), ny in 3usize..8, nx in 3usize..8, m in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(2, ny, nx);
        let op = operator(shape, m, 2, &mut rng);
        let x = image(shape, &mut rng);
        let q = x.dot(&op.normal(&x).unwrap());
        prop_assert!(q.re >= -1e-10 * x.norm_sqr().max(1.0));
        prop_assert!(q.im.abs() <= 1e-9 * x.norm_sqr().max(1.0));
    }

    #[test]
    fn red_residual_of_scaling_is_linear(seed in any::<u64>(), c in -2.0f64..2.0, tau in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = image(Shape::new(2, 4, 5), &mut rng);
        let r = red_residual(&x, &Scaling(c), tau).unwrap();
        let expected = x.scaled(tau * (1.0 - c));
        prop_assert!(r.sub(&expected).norm() <= 1e-12 * x.norm().max(1.0) * tau.max(1.0));
    }

    #[test]
    fn mixed_loss_is_symmetric_and_nonnegative(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(2, 3, 4);
        let a = image(shape, &mut rng);
        let b = image(shape, &mut rng);
        let ab = mixed_loss(&a, &b, alpha).unwrap();
        let ba = mixed_loss(&b, &a, alpha).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-15 * ab.max(1.0));
        prop_assert_eq!(mixed_loss(&a, &a, alpha).unwrap(), 0.0);
    }

    #[test]
    fn convolution_commutes_with_interior_shifts(seed in any::<u64>(), dp in 0usize..2, dy in 0usize..3, dx in 0usize..3) {
        let cfg = NetConfig { depth: 2, width: 3, kernel: [3, 3, 3], residual: false };
        let net = NetWeights::glorot(&cfg, seed).unwrap();
        let dims = [6usize, 9, 9];
        let vol = dims.iter().product::<usize>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let input: Vec<f64> = (0..2 * vol).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let at = |p: usize, y: usize, x: usize| (p * dims[1] + y) * dims[2] + x;
        // Shift towards larger indices with zero fill.
        let mut shifted = vec![0.0; 2 * vol];
        for c in 0..2 {
            for p in dp..dims[0] {
                for y in dy..dims[1] {
                    for x in dx..dims[2] {
                        shifted[c * vol + at(p, y, x)] = input[c * vol + at(p - dp, y - dy, x - dx)];
                    }
                }
            }
        }
        let a = net.forward_tensor(&input, dims);
        let b = net.forward_tensor(&shifted, dims);
        // Receptive radius 2: compare where neither window touches a border.
        let r = 2;
        for c in 0..2 {
            for p in r + dp..dims[0] - r {
                for y in r + dy..dims[1] - r {
                    for x in r + dx..dims[2] - r {
                        let u = b[c * vol + at(p, y, x)];
                        let v = a[c * vol + at(p - dp, y - dy, x - dx)];
                        prop_assert!((u - v).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn tv_prox_is_non_expansive(seed in any::<u64>(), lambda in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(2, 6, 6);
        let a = real_image(shape, &mut rng);
        let b = real_image(shape, &mut rng);
        let params = TvParams { lambda, iterations: 300, ..TvParams::default() };
        let pa = tv_denoise(&a, &params).unwrap();
        let pb = tv_denoise(&b, &params).unwrap();
        prop_assert!(pa.sub(&pb).norm() <= a.sub(&b).norm() * (1.0 + 1e-3));
    }

    #[test]
    fn ssim_is_bounded_and_symmetric(seed in any::<u64>(), noise in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(2, 16, 16);
        let a = real_image(shape, &mut rng);
        let mut b = a.clone();
        for v in b.data_mut() {
            v.re += noise * rng.gen_range(-1.0..1.0);
        }
        for mode in [SsimMode::Windowed, SsimMode::Global] {
            let s = ssim(&b, &a, mode).unwrap();
            prop_assert!(s.mean <= 1.0 + 1e-12);
            prop_assert!(s.per_phase.iter().all(|v| *v <= 1.0 + 1e-12));
            let ab = ssim_with_range(&a, &b, 1.0, mode).unwrap().mean;
            let ba = ssim_with_range(&b, &a, 1.0, mode).unwrap().mean;
            prop_assert!((ab - ba).abs() < 1e-12);
        }
        let p = psnr(&b, &a).unwrap();
        let q = psnr(&b, &b).unwrap();
        prop_assert!(q.mean.is_infinite());
        prop_assert!(noise == 0.0 || p.mean.is_finite());
    }
}
