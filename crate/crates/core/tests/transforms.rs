use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use ptyff::fields::{accumulate_patch, extract_patch, fft2_unitary, ifft2_unitary, ComplexGrid, ProbeStack};
use ptyff::forward::{fresnel_transfer, PhysicsConfig, Propagator};

fn grid_strategy(max: usize) -> impl Strategy<Value = ComplexGrid> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), h * w)
            .prop_map(move |v| ComplexGrid::from_vec(h, w, v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect()).unwrap())
    })
}

fn random_grid(h: usize, w: usize, seed: u64) -> ComplexGrid {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ComplexGrid::from_fn(h, w, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn max_diff(a: &ComplexGrid, b: &ComplexGrid) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

fn max_norm(a: &ComplexGrid) -> f64 {
    a.data().iter().fold(0.0, |m, z| m.max(z.norm()))
}

/// Quadratic-time centered unitary DFT.
fn dft_oracle(x: &ComplexGrid) -> ComplexGrid {
    let (h, w) = x.shape();
    let (hc, wc) = ((h / 2) as f64, (w / 2) as f64);
    let norm = 1.0 / ((h * w) as f64).sqrt();
    ComplexGrid::from_fn(h, w, |u, v| {
        let mut acc = Complex64::new(0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                let phase = -2.0 * PI * ((u as f64 - hc) * r as f64 / h as f64 + (v as f64 - wc) * c as f64 / w as f64);
                acc += x[(r, c)] * Complex64::from_polar(1.0, phase);
            }
        }
        acc * norm
    })
}

#[test]
fn fft_matches_direct_dft() {
    for (i, &(h, w)) in [(8, 8), (5, 6), (7, 3), (1, 4), (16, 9)].iter().enumerate() {
        let x = random_grid(h, w, i as u64);
        let fast = fft2_unitary(&x).unwrap();
        let slow = dft_oracle(&x);
        assert!(max_diff(&fast, &slow) <= 1e-12 * max_norm(&slow).max(1.0), "{h}x{w}");
    }
}

#[test]
fn fresnel_kernel_frozen_values() {
    // lambda * z / dx^2 = 10 for the default physics
    let k = fresnel_transfer((8, 8), &PhysicsConfig::default()).unwrap();
    assert!((k[(4, 4)] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
    // corner: q^2 = 1/(2 dx^2), phase = -5 pi
    assert!((k[(0, 0)] - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
    // one step off center along columns: phase = -10 pi / 64
    let expected = Complex64::from_polar(1.0, -0.490_873_852_123_405_2);
    assert!((k[(4, 5)] - expected).norm() < 1e-12);
    assert!((k[(3, 4)] - expected).norm() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parseval(x in grid_strategy(12)) {
        let y = fft2_unitary(&x).unwrap();
        let (a, b) = (x.norm_sqr(), y.norm_sqr());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
    }

    #[test]
    fn fft_round_trip(x in grid_strategy(12)) {
        let back = ifft2_unitary(&fft2_unitary(&x).unwrap()).unwrap();
        prop_assert!(max_diff(&back, &x) <= 1e-12 * max_norm(&x).max(1e-300));
    }

    #[test]
    fn inverse_is_adjoint(x in grid_strategy(10), seed in any::<u64>()) {
        let y = random_grid(x.rows(), x.cols(), seed);
        let lhs = fft2_unitary(&x).unwrap().dot(&y);
        let rhs = x.dot(&ifft2_unitary(&y).unwrap());
        prop_assert!((lhs - rhs).norm() <= 1e-12 * (x.norm_sqr() * y.norm_sqr()).sqrt().max(1e-300));
    }

    #[test]
    fn extract_accumulate_adjoint(
        (oh, ow, ph, pw, r, c) in (2usize..14, 2usize..14).prop_flat_map(|(oh, ow)| {
            (Just(oh), Just(ow), 1..=oh, 1..=ow)
        }).prop_flat_map(|(oh, ow, ph, pw)| (Just(oh), Just(ow), Just(ph), Just(pw), 0..=oh - ph, 0..=ow - pw)),
        seed in any::<u64>(),
    ) {
        let obj = random_grid(oh, ow, seed);
        let patch = random_grid(ph, pw, seed.wrapping_add(1));
        let lhs = extract_patch(&obj, (r, c), (ph, pw)).unwrap().dot(&patch);
        let mut scattered = ComplexGrid::zeros(oh, ow);
        accumulate_patch(&mut scattered, (r, c), &patch).unwrap();
        let rhs = obj.dot(&scattered);
        prop_assert!((lhs - rhs).norm() <= 1e-12 * (obj.norm_sqr() * patch.norm_sqr()).sqrt().max(1e-300));
    }

    #[test]
    fn fresnel_conserves_power_and_inverts(x in grid_strategy(12), z in -1e-4f64..1e-4) {
        let physics = PhysicsConfig { fresnel_distance: z, mode_count: 1, ..Default::default() };
        let prop = Propagator::new(x.shape(), &physics).unwrap();
        let stack = ProbeStack::new(vec![x.clone()]).unwrap();
        let out = prop.propagate(&stack).unwrap();
        let p0 = x.norm_sqr();
        prop_assert!((out.power() - p0).abs() <= 1e-12 * p0.max(1e-300));
        let back = prop.adjoint(&out).unwrap();
        prop_assert!(max_diff(&back.modes()[0], &x) <= 1e-12 * max_norm(&x).max(1e-300));
    }
}
