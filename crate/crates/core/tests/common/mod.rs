#![allow(dead_code)]

use mixdiff::nn::{Denoiser, DenoiserConfig, Init};
use mixdiff::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small architecture used by the gradient and property checks.
pub fn small_config(length: usize, latent: usize) -> DenoiserConfig {
    let mut cfg = DenoiserConfig::for_length(length);
    cfg.latent_width = latent;
    cfg.embed_dim = 8;
    cfg.level_channels = vec![1, 3, 4];
    cfg.bottleneck_channels = 2;
    cfg.blocks_per_level = 2;
    cfg
}

pub fn generic_denoiser<T: Scalar>(length: usize, n: usize, latent: usize, seed: u64) -> Denoiser<T> {
    Denoiser::with_init(small_config(length, latent), n, Init::Generic, seed).unwrap()
}

/// `Σ out·r`, evaluated in `f64`.
pub fn weighted_sum<T: Scalar>(out: &Tensor<T>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a.as_f64() * b).sum()
}

/// Per-group relative error `max|fd − an| / max|fd|` between analytic
/// gradients and central differences of `Σ ε_θ(x, t)·r` computed in `f64`
/// on a copy of the parameters. Every element of every group is checked.
pub fn gradient_errors<T: Scalar>(den: &Denoiser<T>, x: &Tensor<T>, steps: &[usize], r: &Tensor<f64>) -> Vec<(String, f64)> {
    let pass = den.forward_pass(x, steps).unwrap();
    let grads = pass.backward(&r.cast::<T>()).unwrap();
    drop(pass);

    let mut probe: Denoiser<f64> = cast_denoiser(den);
    let x64 = x.cast::<f64>();
    let h = 1e-5;
    let mut out = Vec::new();
    for g in 0..probe.params().len() {
        let name = probe.params().names()[g].clone();
        let analytic = grads.tensors()[g].data();
        let mut worst_diff = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..analytic.len() {
            let orig = probe.params().tensors()[g].data()[i];
            probe.params_mut().tensors_mut()[g].data_mut()[i] = orig + h;
            let plus = weighted_sum(&probe.forward(&x64, steps).unwrap(), r);
            probe.params_mut().tensors_mut()[g].data_mut()[i] = orig - h;
            let minus = weighted_sum(&probe.forward(&x64, steps).unwrap(), r);
            probe.params_mut().tensors_mut()[g].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst_diff = worst_diff.max((fd - analytic[i].as_f64()).abs());
            scale = scale.max(fd.abs());
        }
        let rel = if scale > 0.0 { worst_diff / scale } else { worst_diff };
        out.push((name, rel));
    }
    out
}

pub fn cast_denoiser<T: Scalar, U: Scalar>(den: &Denoiser<T>) -> Denoiser<U> {
    let mut out = Denoiser::<U>::with_init(den.config().clone(), den.n_features(), Init::Generic, 0).unwrap();
    for (dst, src) in out.params_mut().tensors_mut().iter_mut().zip(den.params().tensors()) {
        *dst = src.cast::<U>();
    }
    out
}
