mod common;

use std::sync::Arc;

use mixdiff::data::encode;
use mixdiff::diffusion::NoiseSchedule;
use mixdiff::nn::{Denoiser, Init};
use mixdiff::toy::{self, ToySpec};
use mixdiff::training::{
    loss_and_gradients, noise_loss, recon_loss_1, recon_loss_2, total_loss, train, Adam, LossWeights, RandomProjection,
    TrainConfig, TrainEvent,
};
use mixdiff::Tensor;
use rand::Rng;

use common::{rng, small_config};

fn toy_tensor(patients: usize, seed: u64) -> Tensor<f64> {
    let data = toy::generate(&ToySpec {
        patients,
        holdout_patients: 0,
        length: 8,
        seed,
    })
    .unwrap();
    let schema = Arc::new(data.schema);
    encode::<f64>(&data.train, &schema).unwrap().data().clone()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut rng(seed))
}

#[test]
fn noise_loss_cases() {
    let a = random(&[2, 1, 3, 4], 1);
    assert_eq!(noise_loss(&a, &a).unwrap(), 0.0);
    let zeros = Tensor::<f64>::zeros(&[2, 1, 3, 4]);
    let ones = Tensor::from_vec(&[2, 1, 3, 4], vec![1.0; 24]).unwrap();
    assert_eq!(noise_loss(&zeros, &ones).unwrap(), 1.0);

    let b = random(&[2, 1, 3, 4], 2);
    let mut oracle = 0.0;
    for i in 0..24 {
        oracle += (a.data()[i] - b.data()[i]).powi(2);
    }
    oracle /= 24.0;
    assert!((noise_loss(&a, &b).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn recon_loss_1_cases() {
    let a = random(&[3, 1, 4, 2], 3);
    assert_eq!(recon_loss_1(&a, &a).unwrap(), 0.0);
    let shifted = Tensor::from_vec(a.shape(), a.data().iter().map(|v| v + 1.0).collect()).unwrap();
    assert!((recon_loss_1(&a, &shifted).unwrap() - 1.0).abs() < 1e-12);
    let b = random(&[3, 1, 4, 2], 4);
    let oracle: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 24.0;
    assert!((recon_loss_1(&a, &b).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn recon_loss_2_cases() {
    let x0 = random(&[2, 1, 1, 2], 5);
    let x1 = random(&[2, 1, 1, 2], 6);
    let proj = RandomProjection::<f64>::sample(2, 4, 3, &mut rng(7));
    assert_eq!(recon_loss_2(&x0, &x0, &proj).unwrap(), 0.0);

    let dead = RandomProjection::new(random(&[2, 4], 8), Tensor::zeros(&[4, 3])).unwrap();
    assert_eq!(recon_loss_2(&x0, &x1, &dead).unwrap(), 0.0);

    // With identity maps the projection reduces to a ReLU of the rows.
    let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let id = RandomProjection::new(eye.clone(), eye).unwrap();
    let relu = |v: f64| v.max(0.0);
    let oracle: f64 =
        x0.data().iter().zip(x1.data()).map(|(a, b)| (relu(*a) - relu(*b)).powi(2)).sum::<f64>() / 4.0;
    assert!((recon_loss_2(&x0, &x1, &id).unwrap() - oracle).abs() < 1e-12);

    let wrong = RandomProjection::<f64>::sample(3, 4, 3, &mut rng(9));
    assert!(recon_loss_2(&x0, &x1, &wrong).is_err());
}

#[test]
fn training_reduces_noise_loss() {
    let data = toy_tensor(64, 1);
    let n = data.shape()[3];
    let sched = NoiseSchedule::<f64>::linear(50, 1e-4, 0.1).unwrap();
    let mut den = Denoiser::<f64>::new(small_config(8, 16), n, 2).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 40,
        seed: 3,
        ..TrainConfig::default()
    };
    let reports = train(&data, &mut den, &sched, &cfg, |_| Ok(())).unwrap();
    assert_eq!(reports.len(), 40 * 4);
    let k = reports.len() / 10;
    let mean = |r: &[mixdiff::training::LossReport]| r.iter().map(|r| r.noise).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&reports[..k]), mean(&reports[reports.len() - k..]));
    assert!(last < first, "noise loss {first} -> {last}");
}

#[test]
fn reports_satisfy_the_weighted_identity() {
    let data = toy_tensor(12, 4);
    let n = data.shape()[3];
    let sched = NoiseSchedule::<f64>::linear(30, 1e-4, 0.1).unwrap();
    let mut den = Denoiser::<f64>::new(small_config(8, 8), n, 5).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 2,
        seed: 6,
        ..TrainConfig::default()
    };
    let w = cfg.loss_weights;
    assert_eq!(w, LossWeights { noise: 1.0, recon1: 20.0, recon2: 10.0 });
    let reports = train(&data, &mut den, &sched, &cfg, |_| Ok(())).unwrap();
    for (i, r) in reports.iter().enumerate() {
        assert_eq!(r.iteration, i + 1);
        assert_eq!(r.total, r.noise + 20.0 * r.recon1 + 10.0 * r.recon2);
        assert_eq!(r.total, total_loss(&w, r.noise, r.recon1, r.recon2));
        assert!(r.noise >= 0.0 && r.recon1 >= 0.0 && r.recon2 >= 0.0);
    }
    let running = reports.iter().map(|r| r.total).sum::<f64>() / reports.len() as f64;
    assert!((reports.last().unwrap().running_total - running).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = toy_tensor(8, 7);
    let n = data.shape()[3];
    let sched = NoiseSchedule::<f32>::linear(20, 1e-4, 0.1).unwrap();
    let mut den = Denoiser::<f32>::with_init(small_config(8, 8), n, Init::Generic, 8).unwrap();
    let before = den.clone();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        batch_size: 4,
        epochs: 1,
        ..TrainConfig::default()
    };
    train(&data.cast::<f32>(), &mut den, &sched, &cfg, |_| Ok(())).unwrap();
    for (a, b) in before.params().tensors().iter().zip(den.params().tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn same_seed_replays_the_loss_stream() {
    let data = toy_tensor(10, 9).cast::<f32>();
    let n = data.shape()[3];
    let sched = NoiseSchedule::<f32>::linear(20, 1e-4, 0.1).unwrap();
    let cfg = TrainConfig {
        batch_size: 5,
        epochs: 3,
        seed: 10,
        checkpoints: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut den = Denoiser::<f32>::new(small_config(8, 8), n, 11).unwrap();
        let mut checkpoints = Vec::new();
        let reports = train(&data, &mut den, &sched, &cfg, |ev| {
            if let TrainEvent::Checkpoint { epoch, .. } = ev {
                checkpoints.push(epoch);
            }
            Ok(())
        })
        .unwrap();
        (reports, checkpoints, den)
    };
    let (r1, c1, d1) = run();
    let (r2, c2, d2) = run();
    assert_eq!(r1, r2);
    assert_eq!(c1, vec![1, 2, 3]);
    assert_eq!(c1, c2);
    assert_eq!(d1.params().tensors(), d2.params().tensors());
}

#[test]
fn oversized_batch_is_rejected() {
    let data = toy_tensor(4, 12);
    let n = data.shape()[3];
    let sched = NoiseSchedule::<f64>::linear(10, 1e-4, 0.1).unwrap();
    let mut den = Denoiser::<f64>::new(small_config(8, 8), n, 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 5,
        epochs: 1,
        ..TrainConfig::default()
    };
    assert!(train(&data, &mut den, &sched, &cfg, |_| Ok(())).is_err());
}

#[test]
fn small_step_on_a_fixed_batch_does_not_increase_the_loss() {
    let data = toy_tensor(6, 13);
    let n = data.shape()[3];
    let sched = NoiseSchedule::<f64>::linear(40, 1e-4, 0.1).unwrap();
    let mut r = rng(14);
    let weights = LossWeights::default();
    for trial in 0..5 {
        let mut den = Denoiser::<f64>::with_init(small_config(8, 8), n, Init::Generic, 20 + trial).unwrap();
        let steps: Vec<usize> = (0..6).map(|_| r.random_range(1..=40)).collect();
        let eps = Tensor::<f64>::randn(data.shape(), &mut r);
        let proj = RandomProjection::sample(8 * n, 128, 64, &mut r);
        let before = loss_and_gradients(&den, &sched, &weights, &data, &steps, &eps, &proj).unwrap();
        let mut adam = Adam::new(1e-5);
        adam.update(den.params_mut().tensors_mut(), &before.gradients).unwrap();
        let after = loss_and_gradients(&den, &sched, &weights, &data, &steps, &eps, &proj).unwrap();
        assert!(after.total <= before.total, "trial {trial}: {} -> {}", before.total, after.total);
    }
}
