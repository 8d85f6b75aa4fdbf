mod common;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use mixdiff::data::{Cell, RecordTable};
use mixdiff::fidelity::{
    anova_f_test, f_test, kl_from_frequencies, kl_levels, kl_numeric, ks_statistic, ks_test, run_cascade, t_test,
    three_sigma_test, CascadeConfig,
};
use mixdiff::toy::{self, ToySpec};

use common::rng;

fn normals(n: usize, mean: f64, sd: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| mean + sd * r.sample::<f64, _>(StandardNormal)).collect()
}

fn toy_pair() -> toy::ToyData {
    toy::generate(&ToySpec {
        patients: 200,
        holdout_patients: 200,
        length: 16,
        seed: 21,
    })
    .unwrap()
}

#[test]
fn welch_statistic_matches_direct_formula() {
    for seed in 0..50 {
        let a = normals(10 + seed as usize, 0.3, 1.0, seed);
        let b = normals(25, 0.0, 2.5, seed + 100);
        // Two-pass moments, summed in reverse order.
        let moments = |x: &[f64]| {
            let n = x.len() as f64;
            let m = x.iter().rev().sum::<f64>() / n;
            let v = x.iter().rev().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
            (m, v, n)
        };
        let ((ma, va, na), (mb, vb, nb)) = (moments(&a), moments(&b));
        let oracle = (ma - mb) / (va / na + vb / nb).sqrt();
        let got = t_test(&a, &b, 0.05).unwrap().statistic;
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{got} vs {oracle}");
    }
    let a = normals(100, 0.0, 1.0, 1);
    let shifted: Vec<f64> = a.iter().map(|v| v + 50.0).collect();
    assert!(!t_test(&a, &shifted, 0.05).unwrap().pass);
    let same = t_test(&a, &a, 0.05).unwrap();
    assert_eq!(same.statistic, 0.0);
    assert!(same.pass);
}

#[test]
fn variance_ratio_beyond_the_f_quantile_fails() {
    let a = normals(200, 0.0, 2.0, 2);
    let b = normals(200, 0.0, 1.0, 3);
    let out = f_test(&a, &b, 0.05).unwrap();
    let q = FisherSnedecor::new(199.0, 199.0).unwrap().inverse_cdf(0.975);
    assert!(out.statistic > q);
    assert!(!out.pass);
    let same = f_test(&a, &a, 0.05).unwrap();
    assert_eq!(same.statistic, 1.0);
    assert!(same.pass);
}

#[test]
fn anova_passes_equal_level_frequencies() {
    let a = [0, 1, 1, 0, 1, 0];
    let b = [1, 0, 0, 1];
    assert!(anova_f_test(&a, &b, 2, 0.05).unwrap().pass);
    let c = vec![0; 60];
    let d = vec![1; 60];
    assert!(!anova_f_test(&c, &d, 2, 0.05).unwrap().pass);
}

#[test]
fn three_sigma_fraction_matches_a_count() {
    let real = normals(300, 5.0, 2.0, 4);
    let syn = normals(500, 5.5, 2.4, 5);
    let n = real.len() as f64;
    let m = real.iter().sum::<f64>() / n;
    let sd = (real.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut inside = 0;
    for &x in &syn {
        if x >= m - 2.0 * sd && x <= m + 2.0 * sd {
            inside += 1;
        }
    }
    let out = three_sigma_test(&real, &syn, 2.0).unwrap();
    assert_eq!(out.in_range_fraction, inside as f64 / syn.len() as f64);
    assert_eq!(out.pass, inside == syn.len());
    assert!(three_sigma_test(&real, &[m; 4], 2.0).unwrap().pass);
    assert!(!three_sigma_test(&real, &[m, m + 3.0 * sd], 2.0).unwrap().pass);
}

#[test]
fn ks_decisions_are_monotone_in_alpha() {
    let mut r = rng(6);
    for _ in 0..200 {
        let n = r.random_range(5..60);
        let shift: f64 = r.random_range(0.0..1.0);
        let a: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..n).map(|_| shift + r.sample::<f64, _>(StandardNormal)).collect();
        if ks_test(&a, &b, 0.05).unwrap().pass {
            assert!(ks_test(&a, &b, 0.01).unwrap().pass);
        }
        if t_test(&a, &b, 0.05).unwrap().pass {
            assert!(t_test(&a, &b, 0.01).unwrap().pass);
        }
    }
}

#[test]
fn cascade_on_identical_tables_passes_every_ks() {
    let data = toy_pair();
    let cfg = CascadeConfig::default();
    let res = run_cascade(&data.train, &data.train, &data.schema, &cfg).unwrap();
    assert_eq!(res.repetitions, 100);
    for v in &res.variables {
        assert_eq!(v.ks, 100, "{}", v.variable);
        assert!(v.ks <= res.repetitions && v.f <= res.repetitions);
    }
    let again = run_cascade(&data.train, &data.train, &data.schema, &cfg).unwrap();
    assert_eq!(res, again);
}

#[test]
fn cascade_shift_empties_three_sigma() {
    let data = toy_pair();
    let a = data.train.numeric_column(0).unwrap();
    let m = a.iter().sum::<f64>() / a.len() as f64;
    let sd = (a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (a.len() - 1) as f64).sqrt();
    let shifted = RecordTable::new(
        data.train
            .records()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if let Cell::Number(v) = r.values[0] {
                    r.values[0] = Cell::Number(v + 10.0 * sd);
                }
                r
            })
            .collect(),
    )
    .unwrap();
    let res = run_cascade(&data.train, &shifted, &data.schema, &CascadeConfig::default()).unwrap();
    assert_eq!(res.variables[0].three_sigma, Some(0));
    assert_eq!(res.variables[0].ks, 0);
    assert_eq!(res.variables[1].three_sigma, Some(100));
    assert_eq!(res.variables[2].three_sigma, None);
}

#[test]
fn three_sigma_band_comes_from_the_whole_real_column() {
    let data = toy_pair();
    let a = data.train.numeric_column(0).unwrap();
    let n = a.len() as f64;
    let m = a.iter().sum::<f64>() / n;
    let sd = (a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let constant = |v: f64| {
        RecordTable::new(
            data.holdout
                .records()
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.values[0] = Cell::Number(v);
                    r
                })
                .collect(),
        )
        .unwrap()
    };
    let cfg = CascadeConfig::default();
    let inside = run_cascade(&data.train, &constant(m + 1.99 * sd), &data.schema, &cfg).unwrap();
    assert_eq!(inside.variables[0].three_sigma, Some(100));
    let outside = run_cascade(&data.train, &constant(m - 2.01 * sd), &data.schema, &cfg).unwrap();
    assert_eq!(outside.variables[0].three_sigma, Some(0));
}

#[test]
fn fresh_draws_pass_within_the_binomial_band() {
    let data = toy_pair();
    let cfg = CascadeConfig {
        seed: 8,
        ..CascadeConfig::default()
    };
    let res = run_cascade(&data.train, &data.holdout, &data.schema, &cfg).unwrap();
    let r = cfg.repetitions as f64;
    let sigma = (r * cfg.alpha * (1.0 - cfg.alpha)).sqrt();
    let floor = r * (1.0 - cfg.alpha) - 3.0 * sigma;
    for v in &res.variables {
        assert!(v.ks as f64 >= floor, "{} KS {} below {floor}", v.variable, v.ks);
    }
}

#[test]
fn kl_cases() {
    let hand = kl_from_frequencies(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
    let oracle = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((hand - oracle).abs() < 1e-8);
    let reverse = kl_from_frequencies(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
    assert!((hand - reverse).abs() > 1e-3);
    assert_eq!(kl_from_frequencies(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);

    let mut r = rng(9);
    for _ in 0..1000 {
        let k = r.random_range(2..10);
        let p: Vec<f64> = (0..k).map(|_| r.random::<f64>()).collect();
        let q: Vec<f64> = (0..k).map(|_| r.random::<f64>()).collect();
        let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
        let p: Vec<f64> = p.iter().map(|v| v / sp).collect();
        let q: Vec<f64> = q.iter().map(|v| v / sq).collect();
        assert!(kl_from_frequencies(&p, &q).unwrap() >= 0.0);
    }

    let lv = kl_levels(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    assert!((lv.kl - oracle).abs() < 1e-8);
    let gap = kl_levels(&[0, 0], &[1, 1], 2).unwrap();
    assert_eq!(gap.smoothed_cells, 1);
    assert!(gap.kl.is_finite() && gap.kl > 10.0);

    let x = normals(400, 0.0, 1.0, 10);
    assert_eq!(kl_numeric(&x, &x, 20).unwrap().kl, 0.0);
}

proptest! {
    #[test]
    fn ks_is_invariant_under_increasing_maps(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        b in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let f = |v: &Vec<f64>| v.iter().map(|x| x.exp() * 3.0 + 1.0).collect::<Vec<_>>();
        prop_assert_eq!(ks_statistic(&a, &b).unwrap(), ks_statistic(&f(&a), &f(&b)).unwrap());
    }

    #[test]
    fn ks_statistic_lies_in_unit_interval(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        b in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let d = ks_statistic(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }
}
