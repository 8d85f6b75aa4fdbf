mod common;

use std::sync::Arc;

use proptest::prelude::*;

use mixdiff::data::encode;
use mixdiff::diffusion::{one_step_reconstruct, q_sample, reverse_step, sample, NoiseSchedule};
use mixdiff::toy::{self, ToySpec};
use mixdiff::{Result, Tensor};

use common::rng;

/// Noise implied by a known clean target: `ε = (x_t − √ᾱ_t·x0) / √(1−ᾱ_t)`.
fn oracle<'a>(x0: &'a Tensor<f64>, sched: &'a NoiseSchedule<f64>) -> impl Fn(&Tensor<f64>, &[usize]) -> Result<Tensor<f64>> + 'a {
    move |xt, steps| {
        let t = steps[0];
        let a = sched.alpha_bar(t)?.sqrt();
        let s = sched.one_minus_alpha_bar(t)?.sqrt();
        xt.zip_map(x0, |x, c| (x - a * c) / s)
    }
}

fn toy_x0(patients: usize) -> Tensor<f64> {
    let data = toy::generate(&ToySpec {
        patients,
        holdout_patients: 0,
        length: 16,
        seed: 4,
    })
    .unwrap();
    let schema = Arc::new(data.schema);
    encode::<f64>(&data.train, &schema).unwrap().data().clone()
}

fn rms(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    (a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[test]
fn oracle_reverse_pass_recovers_x0() {
    let sched = NoiseSchedule::<f64>::linear(200, 1e-4, 0.05).unwrap();
    let x0 = Tensor::from_vec(&[64], (0..64).map(|i| (i as f64 / 63.0).sin()).collect()).unwrap();
    let out = sample(&oracle(&x0, &sched), &sched, &[64], 1).unwrap();
    assert!(rms(&out, &x0) < 0.05);
}

#[test]
fn oracle_samples_stay_near_the_unit_range() {
    let sched = NoiseSchedule::<f64>::linear(200, 1e-4, 0.05).unwrap();
    let x0 = toy_x0(20);
    let out = sample(&oracle(&x0, &sched), &sched, x0.shape(), 2).unwrap();
    assert!(out.data().iter().all(|v| (-0.2..=1.2).contains(v)));
}

#[test]
fn oracle_chain_contracts_over_the_last_steps() {
    let sched = NoiseSchedule::<f64>::linear(100, 1e-4, 0.05).unwrap();
    let x0 = toy_x0(50);
    let pred = oracle(&x0, &sched);
    let mut r = rng(3);
    let mut x = Tensor::<f64>::randn(x0.shape(), &mut r);
    let mut errors = Vec::new();
    for t in (1..=100).rev() {
        let eps = pred(&x, &[t]).unwrap();
        let z = if t > 1 { Tensor::randn(x0.shape(), &mut r) } else { Tensor::zeros(x0.shape()) };
        x = reverse_step(&x, t, &eps, &z, &sched).unwrap();
        if t <= 11 {
            errors.push(rms(&x, &x0));
        }
    }
    for w in errors.windows(2) {
        assert!(w[1] <= w[0], "{errors:?}");
    }
}

#[test]
fn sampling_is_seeded() {
    let sched = NoiseSchedule::<f32>::linear(20, 1e-4, 0.1).unwrap();
    let shrink = |x: &Tensor<f32>, _: &[usize]| -> Result<Tensor<f32>> { Ok(x.map(|v| 0.5 * v)) };
    let a = sample(&shrink, &sched, &[3, 1, 4, 2], 9).unwrap();
    let b = sample(&shrink, &sched, &[3, 1, 4, 2], 9).unwrap();
    let c = sample(&shrink, &sched, &[3, 1, 4, 2], 10).unwrap();
    assert_eq!(a.shape(), &[3, 1, 4, 2]);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(a.data(), c.data());
}

proptest! {
    #[test]
    fn reconstruction_inverts_corruption(seed in any::<u64>(), t in 1usize..=1000) {
        let sched = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.01).unwrap();
        let mut r = rng(seed);
        let x0 = Tensor::<f64>::randn(&[4, 3], &mut r);
        let eps = Tensor::<f64>::randn(&[4, 3], &mut r);
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let back = one_step_reconstruct(&xt, t, &eps, &sched).unwrap();
        prop_assert!(rms(&back, &x0) <= 1e-12 * (1.0 + rms(&x0, &Tensor::zeros(&[4, 3]))));
    }

    #[test]
    fn schedule_products_are_monotone(steps in 1usize..300, lo in 1e-5f64..1e-2, span in 0.0f64..0.2) {
        let sched = NoiseSchedule::<f64>::linear(steps, lo, lo + span).unwrap();
        let mut prev = 1.0;
        for t in 1..=steps {
            let ab = sched.alpha_bar(t).unwrap();
            prop_assert!(ab < prev && ab > 0.0);
            let sum = ab + sched.one_minus_alpha_bar(t).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prev = ab;
        }
    }
}
