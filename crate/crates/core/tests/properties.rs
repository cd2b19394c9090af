use num_complex::Complex64;
use proptest::prelude::*;
use ulda::data::metrics::{psnr, ssim};
use ulda::mri::{center_band, forward, make_cartesian_mask, zero_filling};
use ulda::network::{AdapterParams, ExtractorParams, InitScheme, ParamBundle, QNet, SmoothedRelu};
use ulda::regularizer::reg_values;
use ulda::solver::{solve, SolverConfig};
use ulda::tensor::{fft2_unitary, ifft2_unitary, norm21, ComplexImage, FeatureStack};
use ulda::training::{adam_step, AdamConfig, AdamState, TaskParams};

fn image(h: usize, w: usize, vals: &[(f64, f64)]) -> ComplexImage {
    let data = vals.iter().map(|&(re, im)| Complex64::new(re, im)).collect();
    ComplexImage::new(h, w, data).unwrap()
}

fn pow2_image() -> impl Strategy<Value = ComplexImage> {
    (0u32..4, 0u32..4).prop_flat_map(|(a, b)| {
        let (h, w) = (2usize << a, 2usize << b);
        prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), h * w).prop_map(move |v| image(h, w, &v))
    })
}

fn nonneg_image(n: usize) -> impl Strategy<Value = ComplexImage> {
    prop::collection::vec(0.0..1.0f64, n * n)
        .prop_map(move |v| ComplexImage::from_real(n, n, &v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fft_is_unitary_and_inverted(x in pow2_image()) {
        let y = fft2_unitary(&x).unwrap();
        prop_assert!((y.norm() - x.norm()).abs() <= 1e-12 * x.norm().max(1e-300));
        let back = ifft2_unitary(&y).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-12 * x.norm().max(1.0));
    }

    #[test]
    fn fft_inverse_is_adjoint(
        u in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 64),
        v in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 64),
    ) {
        let (u, v) = (image(8, 8, &u), image(8, 8, &v));
        let lhs = fft2_unitary(&u).unwrap().inner(&v);
        let rhs = u.inner(&ifft2_unitary(&v).unwrap());
        prop_assert!((lhs - rhs).norm() <= 1e-12 * (u.norm() * v.norm()).max(1.0));
    }

    #[test]
    fn norm21_is_absolutely_homogeneous(
        rows in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 12),
        c in (-3.0..3.0f64, -3.0..3.0f64),
    ) {
        let z = FeatureStack::new(4, 3, rows.iter().map(|&(a, b)| Complex64::new(a, b)).collect()).unwrap();
        let c = Complex64::new(c.0, c.1);
        let lhs = norm21(&z.scale(c));
        prop_assert!((lhs - c.norm() * norm21(&z)).abs() <= 1e-12 * lhs.max(1.0));
    }

    #[test]
    fn smoothing_sandwich_holds_on_row_norms(
        norms in prop::collection::vec(0.0..10.0f64, 1..200),
        log_eps in -6.0..1.0f64,
    ) {
        let eps = 10f64.powf(log_eps);
        let v = reg_values(&norms, eps);
        prop_assert!(v.smoothed <= v.exact);
        prop_assert!(v.exact <= v.upper);
    }

    #[test]
    fn psnr_falls_as_the_error_grows(
        x in nonneg_image(8),
        noise in prop::collection::vec(-1.0..1.0f64, 64),
        a in 0.01..1.0f64,
        k in 1.01..5.0f64,
    ) {
        let n = ComplexImage::from_real(8, 8, &noise).unwrap();
        prop_assume!(n.norm() > 1e-3);
        let near = x.add(&n.scale(Complex64::new(a * 1e-2, 0.0)));
        let far = x.add(&n.scale(Complex64::new(a * k * 1e-2, 0.0)));
        let (pn, pf) = (psnr(&x, &near).unwrap(), psnr(&x, &far).unwrap());
        prop_assume!(pn < 100.0);
        prop_assert!(pn >= pf, "{pn} < {pf}");
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_equal_images(x in nonneg_image(16), y in nonneg_image(16)) {
        let (a, b) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a <= 1.0 + 1e-12);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn masks_keep_the_centre_and_the_ratio(k in 3u32..7, ratio in 0.3..1.0f64, seed: u64) {
        let n = 1usize << k;
        let m = make_cartesian_mask(n, ratio, seed).unwrap();
        prop_assert_eq!(m.count(), (ratio * n as f64).round() as usize);
        for r in center_band(n) {
            prop_assert!(m.contains(r));
        }
        prop_assert_eq!(m, make_cartesian_mask(n, ratio, seed).unwrap());
    }

    #[test]
    fn measurement_is_consistent_with_zero_filling(x in nonneg_image(16), seed: u64) {
        let m = forward(&x, &make_cartesian_mask(16, 0.5, seed).unwrap()).unwrap();
        let again = forward(&zero_filling(&m), &m.mask).unwrap();
        prop_assert!(again.kspace.max_abs_diff(&m.kspace) <= 1e-12);
    }

    #[test]
    fn log_step_sizes_stay_positive(grads in prop::collection::vec(-1e6..1e6f64, 1..50)) {
        let mut task = TaskParams::new(AdapterParams::zeros(), 3, 0.1);
        let mut adam = AdamState::new();
        let cfg = AdamConfig { learning_rate: 10.0, ..Default::default() };
        for g in grads {
            let mut p = task.to_bundle();
            let mut gb = ParamBundle::new();
            for (name, t) in p.iter() {
                let mut t = t.clone();
                t.data.iter_mut().for_each(|v| *v = g);
                gb.insert(name, t);
            }
            adam_step(&mut p, &gb, &mut adam, &cfg).unwrap();
            task = TaskParams::from_bundle(&p, 3, 0.1).unwrap();
            let steps = task.steps();
            for t in 0..3 {
                let (a, b) = steps.at(t);
                prop_assert!(a > 0.0 && b > 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Random images, masks, levels and networks: the ledger never rises,
    /// every reduction meets its trigger and every accepted step its test.
    #[test]
    fn solver_traces_satisfy_their_ledger(
        x in nonneg_image(8),
        seed: u64,
        ratio in 0.3..0.9f64,
        log_eps0 in -3.0..0.0f64,
        log_step in -3.0..0.0f64,
    ) {
        let ext = ExtractorParams::init(seed, InitScheme::GlorotLike);
        let ad = AdapterParams::init(seed ^ 1, InitScheme::GlorotLike);
        let net = QNet::new(&ext, &ad, SmoothedRelu::default());
        let m = forward(&x, &make_cartesian_mask(8, ratio, seed).unwrap()).unwrap();
        let step = 10f64.powf(log_step);
        let cfg = SolverConfig {
            eps0: Some(10f64.powf(log_eps0)),
            max_iters: Some(25),
            alpha: step,
            beta: step,
            ..Default::default()
        };
        let (out, trace) = solve(&m, &net, None, &cfg, None).unwrap();
        prop_assert!(out.is_finite());
        prop_assert!(trace.check_ledger().is_empty(), "{:?}", trace.check_ledger());
        prop_assert!(trace.check_reductions(cfg.sigma, cfg.gamma).is_empty());
        prop_assert!(trace.check_step_conditions(cfg.eta2, cfg.eta3).is_empty());
    }
}

#[test]
fn averaging_identical_bundles_is_the_identity() {
    let ext = ExtractorParams::init(3, InitScheme::GlorotLike);
    let avg = ExtractorParams::average(&[ext.clone(), ext.clone(), ext.clone()]).unwrap();
    assert_eq!(avg, ext);
}
