mod common;

use mixdiff::data::fixtures;
use mixdiff::nn::{Denoiser, DenoiserConfig, Init};
use mixdiff::Tensor;

use common::{generic_denoiser, rng, small_config};

fn l2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn diff(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()
}

#[test]
fn hypotension_ladder_shapes() {
    let n = fixtures::hypotension().width();
    let den = Denoiser::<f32>::new(DenoiserConfig::hypotension(), n, 0).unwrap();
    let x = Tensor::<f32>::randn(&[2, 1, 48, n], &mut rng(1));
    let pass = den.forward_pass(&x, &[1, 999]).unwrap();
    let shapes = pass.level_shapes();
    let find = |name: &str| shapes.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone()).unwrap();
    assert_eq!(find("down0"), vec![2, 1, 48, 256]);
    assert_eq!(find("down1"), vec![2, 10, 12, 256]);
    assert_eq!(find("down2"), vec![2, 20, 3, 256]);
    assert_eq!(pass.output().shape(), x.shape());
}

#[test]
fn hiv_output_matches_input_shape() {
    let n = fixtures::hiv().width();
    let mut cfg = DenoiserConfig::hiv();
    cfg.latent_width = 32;
    let den = Denoiser::<f32>::with_init(cfg, n, Init::Generic, 0).unwrap();
    let x = Tensor::<f32>::randn(&[1, 1, 100, n], &mut rng(2));
    let pass = den.forward_pass(&x, &[250]).unwrap();
    assert_eq!(pass.output().shape(), &[1, 1, 100, n]);
    let lengths: Vec<usize> = pass.level_shapes().iter().map(|(_, s)| s[2]).collect();
    assert!(lengths.contains(&10) && lengths.contains(&3));
}

#[test]
fn parameter_layout_depends_only_on_config() {
    let a = generic_denoiser::<f64>(8, 5, 12, 1);
    let b = Denoiser::<f64>::with_init(small_config(8, 12), 5, Init::Standard, 99).unwrap();
    assert_eq!(a.params().names(), b.params().names());
    let shapes = |d: &Denoiser<f64>| d.params().tensors().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
    assert_eq!(shapes(&a), shapes(&b));
    assert_eq!(a.params().count(), b.params().count());
}

#[test]
fn perturbation_propagates_backwards_in_time() {
    let den = generic_denoiser::<f64>(24, 3, 8, 5);
    let mut r = rng(6);
    let x = Tensor::<f64>::randn(&[1, 1, 24, 3], &mut r);
    let mut y = x.clone();
    for f in 0..3 {
        y.data_mut()[20 * 3 + f] += 0.5;
    }
    let (a, b) = (den.forward(&x, &[40]).unwrap(), den.forward(&y, &[40]).unwrap());
    let at10 = (0..3).map(|f| (a.data()[30 + f] - b.data()[30 + f]).abs()).fold(0.0, f64::max);
    assert!(at10 > 1e-8, "time index 10 unaffected by a change at 20: {at10}");
}

#[test]
fn feature_permutation_needs_matching_projections() {
    let n = 4;
    let den = generic_denoiser::<f64>(8, n, 10, 7);
    let perm = [2, 0, 3, 1];
    let x = Tensor::<f64>::randn(&[2, 1, 8, n], &mut rng(8));
    let permute = |t: &Tensor<f64>| {
        let mut out = t.clone();
        for (row_in, row_out) in t.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            for j in 0..n {
                row_out[perm[j]] = row_in[j];
            }
        }
        out
    };
    let px = permute(&x);
    let fx = den.forward(&x, &[3, 90]).unwrap();
    let f_px = den.forward(&px, &[3, 90]).unwrap();
    assert!(l2(&diff(&f_px, &permute(&fx))) > 1e-6, "feature permutation commuted with the network");

    let mut aligned = den.clone();
    let store = aligned.params_mut();
    let w_in = store.get("input.w").unwrap().clone();
    let fwidth = w_in.shape()[1];
    let dst = store.get_mut("input.w").unwrap();
    for j in 0..n {
        dst.data_mut()[perm[j] * fwidth..(perm[j] + 1) * fwidth].copy_from_slice(&w_in.data()[j * fwidth..(j + 1) * fwidth]);
    }
    let w_out = store.get("output.w").unwrap().clone();
    let dst = store.get_mut("output.w").unwrap();
    for r in 0..fwidth {
        for j in 0..n {
            dst.data_mut()[r * n + perm[j]] = w_out.data()[r * n + j];
        }
    }
    let b_out = store.get("output.b").unwrap().clone();
    let dst = store.get_mut("output.b").unwrap();
    for j in 0..n {
        dst.data_mut()[perm[j]] = b_out.data()[j];
    }
    let g_px = aligned.forward(&px, &[3, 90]).unwrap();
    assert!(l2(&diff(&g_px, &permute(&fx))) < 1e-10);
}

#[test]
fn output_growth_is_bounded_under_input_scaling() {
    let den = generic_denoiser::<f64>(8, 3, 8, 9);
    let x = Tensor::<f64>::randn(&[1, 1, 8, 3], &mut rng(10));
    let base = den.forward(&Tensor::zeros(&[1, 1, 8, 3]), &[10]).unwrap();
    let mut ratios = Vec::new();
    for s in [0.1, 1.0, 10.0, 100.0, 1000.0] {
        let xs = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v * s).collect()).unwrap();
        let out = den.forward(&xs, &[10]).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
        ratios.push(l2(&diff(&out, &base)) / (s * l2(x.data())));
    }
    let early = ratios[..2].iter().copied().fold(0.0, f64::max);
    for r in &ratios[2..] {
        assert!(*r <= 2.0 * early, "growth ratios {ratios:?}");
    }
}

#[test]
fn zero_output_projection_freezes_upstream_gradients() {
    let den = Denoiser::<f64>::with_init(small_config(8, 6), 3, Init::Standard, 11).unwrap();
    let x = Tensor::<f64>::randn(&[2, 1, 8, 3], &mut rng(12));
    let g = Tensor::<f64>::randn(&[2, 1, 8, 3], &mut rng(13));
    let grads = den.forward_pass(&x, &[5, 60]).unwrap().backward(&g).unwrap();
    for (name, t) in den.params().names().iter().zip(grads.tensors()) {
        let nonzero = t.data().iter().any(|v| *v != 0.0);
        assert_eq!(nonzero, name.starts_with("output"), "{name}");
    }
}

#[test]
fn backward_is_deterministic() {
    let den = generic_denoiser::<f32>(8, 6, 16, 14);
    let x = Tensor::<f32>::randn(&[3, 1, 8, 6], &mut rng(15));
    let g = Tensor::<f32>::randn(&[3, 1, 8, 6], &mut rng(16));
    let run = || {
        den.forward_pass(&x, &[1, 50, 199])
            .unwrap()
            .backward(&g)
            .unwrap()
            .into_tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let den32 = generic_denoiser::<f32>(8, 5, 12, 17);
    let den64 = generic_denoiser::<f64>(8, 5, 12, 18);
    den32.save(dir.path().join("a.json")).unwrap();
    den64.save(dir.path().join("b.json")).unwrap();
    let back32 = Denoiser::<f32>::load(dir.path().join("a.json")).unwrap();
    let back64 = Denoiser::<f64>::load(dir.path().join("b.json")).unwrap();
    assert_eq!(back32.config(), den32.config());
    for (a, b) in den32.params().tensors().iter().zip(back32.params().tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for (a, b) in den64.params().tensors().iter().zip(back64.params().tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let x = Tensor::<f64>::randn(&[1, 1, 8, 5], &mut rng(19));
    assert_eq!(den64.forward(&x, &[7]).unwrap().data(), back64.forward(&x, &[7]).unwrap().data());
    assert!(Denoiser::<f64>::load(dir.path().join("a.json")).is_err());
}
