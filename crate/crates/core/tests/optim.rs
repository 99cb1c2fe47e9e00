use num_complex::Complex64;
use proptest::prelude::*;
use ptyff::optim::{adam_step, lr_at, minibatch_plan, AdamState, LrSchedule};

#[test]
fn adam_matches_scalar_reference() {
    // reference trajectory from a plain scalar Adam applied per real channel
    let expected = [
        (0.900000002, -1.9000000003333333),
        (0.9366103542405654, -1.8394086508071494),
        (0.8946447927181046, -1.792571362060317),
    ];
    let grads = [Complex64::new(0.5, -3.0), Complex64::new(-1.0, 0.25), Complex64::new(2.0, 0.0)];
    let mut p = [Complex64::new(1.0, -2.0)];
    let mut state = AdamState::new(1);
    for (g, (re, im)) in grads.iter().zip(expected) {
        adam_step(&mut [&mut p[..]], &[&[*g]], &mut state, 0.1).unwrap();
        assert!((p[0].re - re).abs() < 1e-15 && (p[0].im - im).abs() < 1e-15, "{:?}", p[0]);
    }
    assert_eq!(state.step_count, 3);
}

#[test]
fn channels_are_independent() {
    // an imaginary-only gradient must leave the real part untouched
    let mut p = [Complex64::new(0.7, 0.7)];
    let mut s = AdamState::new(1);
    adam_step(&mut [&mut p[..]], &[&[Complex64::new(0.0, 1.0)]], &mut s, 0.01).unwrap();
    assert_eq!(p[0].re, 0.7);
    assert!(p[0].im < 0.7);
}

#[test]
fn default_schedule_decays_every_fifty() {
    let s = LrSchedule::default();
    assert_eq!(lr_at(&s, 0), 0.005);
    assert!((lr_at(&s, 99) - 0.001).abs() < 1e-18);
    assert!((lr_at(&s, 100) - 0.0002).abs() < 1e-18);
}

proptest! {
    #[test]
    fn plan_is_a_partition(k in 1usize..300, b in 1usize..64, seed in any::<u64>()) {
        let plan = minibatch_plan(k, b, seed).unwrap();
        prop_assert_eq!(plan.len(), k.div_ceil(b));
        prop_assert!(plan.iter().all(|c| !c.is_empty() && c.len() <= b));
        let mut all: Vec<usize> = plan.into_iter().flatten().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn first_step_moves_by_lr(re in -10.0f64..10.0, im in -10.0f64..10.0, lr in 1e-4f64..1.0) {
        prop_assume!(re.abs() > 1e-3 && im.abs() > 1e-3);
        let mut p = [Complex64::new(0.0, 0.0)];
        let mut s = AdamState::new(1);
        adam_step(&mut [&mut p[..]], &[&[Complex64::new(re, im)]], &mut s, lr).unwrap();
        prop_assert!((p[0].re + lr * re.signum()).abs() <= 1e-5 * lr);
        prop_assert!((p[0].im + lr * im.signum()).abs() <= 1e-5 * lr);
    }
}
