//! Variance schedule, closed-form forward corruption, one-step
//! reconstruction and the ancestral reverse sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Serializable schedule parameters, as stored in run configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.01,
        }
    }
}

impl ScheduleConfig {
    pub fn hypotension() -> Self {
        Self::default()
    }

    pub fn hiv() -> Self {
        Self {
            steps: 500,
            ..Self::default()
        }
    }

    pub fn build<T: Scalar>(&self) -> Result<NoiseSchedule<T>> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

/// `β_t`, `α_t = 1 − β_t`, `ᾱ_t = Π α_s` and `σ_t = √β_t` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
    /// `1 − ᾱ_t` accumulated in log space so tiny β do not cancel to zero.
    one_minus_alpha_bars: Vec<T>,
    sigmas: Vec<T>,
}

/// Mean coefficients and variance of `q(x_{t−1} | x_t, x_0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorParams<T> {
    pub coef_x0: T,
    pub coef_xt: T,
    pub variance: T,
}

impl<T: Scalar> PosteriorParams<T> {
    pub fn mean(&self, x0: T, xt: T) -> T {
        self.coef_x0 * x0 + self.coef_xt * xt
    }
}

impl<T: Scalar> NoiseSchedule<T> {
    /// β rises linearly from `beta_min` at `t = 1` to `beta_max` at `t = T`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                T::of(beta_min + (beta_max - beta_min) * frac)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<T>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Parameter("empty schedule".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > T::zero() && b < T::one())) {
            return Err(Error::Parameter(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = T::one();
        for &a in &alphas {
            acc = acc * a;
            alpha_bars.push(acc);
        }
        let mut log_acc = T::zero();
        let one_minus_alpha_bars = betas
            .iter()
            .map(|&b| {
                log_acc += (-b).ln_1p();
                -log_acc.exp_m1()
            })
            .collect();
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            one_minus_alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step {
                step: t,
                steps: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<T> {
        Ok(self.betas[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<T> {
        Ok(self.alphas[self.idx(t)?])
    }

    /// `ᾱ_t`; `t = 0` yields 1.
    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        if t == 0 {
            return Ok(T::one());
        }
        Ok(self.alpha_bars[self.idx(t)?])
    }

    /// `1 − ᾱ_t`; `t = 0` yields 0.
    pub fn one_minus_alpha_bar(&self, t: usize) -> Result<T> {
        if t == 0 {
            return Ok(T::zero());
        }
        Ok(self.one_minus_alpha_bars[self.idx(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<T> {
        Ok(self.sigmas[self.idx(t)?])
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    /// Coefficients of the tractable posterior. At `t = 1` the variance is 0
    /// and the mean collapses onto `x_0`.
    pub fn posterior_params(&self, t: usize) -> Result<PosteriorParams<T>> {
        let beta = self.beta(t)?;
        let alpha = self.alpha(t)?;
        let ab_prev = self.alpha_bar(t - 1)?;
        let denom = self.one_minus_alpha_bar(t)?;
        let rest = self.one_minus_alpha_bar(t - 1)?;
        Ok(PosteriorParams {
            coef_x0: ab_prev.sqrt() * beta / denom,
            coef_xt: alpha.sqrt() * rest / denom,
            variance: beta * rest / denom,
        })
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// One step of the forward kernel: `√(1−β_t)·x_{t−1} + √β_t·z`.
pub fn q_step<T: Scalar>(x_prev: &Tensor<T>, t: usize, z: &Tensor<T>, schedule: &NoiseSchedule<T>) -> Result<Tensor<T>> {
    same_shape(x_prev, z, "q_step")?;
    let a = schedule.alpha(t)?.sqrt();
    let s = schedule.beta(t)?.sqrt();
    x_prev.zip_map(z, |x, z| a * x + s * z)
}

/// Closed-form corruption `√ᾱ_t·x_0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule<T>) -> Result<Tensor<T>> {
    same_shape(x0, eps, "q_sample")?;
    let (a, s) = forward_coefs(t, schedule)?;
    x0.zip_map(eps, |x, e| T::of(a * x.as_f64() + s * e.as_f64()))
}

/// [`q_sample`] with one step per leading-axis entry.
pub fn q_sample_batch<T: Scalar>(
    x0: &Tensor<T>,
    steps: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<Tensor<T>> {
    same_shape(x0, eps, "q_sample")?;
    per_item(x0, eps, steps, |x, e, t| {
        let (a, s) = forward_coefs(t, schedule)?;
        Ok(T::of(a * x.as_f64() + s * e.as_f64()))
    })
}

/// `x̂_0 = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn one_step_reconstruct<T: Scalar>(
    xt: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<Tensor<T>> {
    same_shape(xt, eps_hat, "one_step_reconstruct")?;
    let (a, s) = forward_coefs(t, schedule)?;
    xt.zip_map(eps_hat, |x, e| T::of((x.as_f64() - s * e.as_f64()) / a))
}

/// [`one_step_reconstruct`] with one step per leading-axis entry.
pub fn one_step_reconstruct_batch<T: Scalar>(
    xt: &Tensor<T>,
    steps: &[usize],
    eps_hat: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<Tensor<T>> {
    same_shape(xt, eps_hat, "one_step_reconstruct")?;
    per_item(xt, eps_hat, steps, |x, e, t| {
        let (a, s) = forward_coefs(t, schedule)?;
        Ok(T::of((x.as_f64() - s * e.as_f64()) / a))
    })
}

/// `(√ᾱ_t, √(1−ᾱ_t))` in `f64`, so the elementwise maps round once.
fn forward_coefs<T: Scalar>(t: usize, schedule: &NoiseSchedule<T>) -> Result<(f64, f64)> {
    schedule.idx(t)?;
    let ab = schedule.alpha_bar(t)?.as_f64();
    if ab <= 0.0 {
        return Err(Error::Singular(t));
    }
    Ok((ab.sqrt(), schedule.one_minus_alpha_bar(t)?.as_f64().sqrt()))
}

/// `(1/√ᾱ_t, √(1−ᾱ_t))`.
pub(crate) fn reconstruct_coefs<T: Scalar>(t: usize, schedule: &NoiseSchedule<T>) -> Result<(T, T)> {
    schedule.idx(t)?;
    let ab = schedule.alpha_bar(t)?;
    if ab <= T::zero() {
        return Err(Error::Singular(t));
    }
    Ok((T::one() / ab.sqrt(), schedule.one_minus_alpha_bar(t)?.sqrt()))
}

fn per_item<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    steps: &[usize],
    f: impl Fn(T, T, usize) -> Result<T>,
) -> Result<Tensor<T>> {
    let n = a.shape().first().copied().unwrap_or(0);
    if steps.len() != n {
        return Err(Error::shape(format!("{} steps for batch of {n}", steps.len())));
    }
    let row = a.row_len();
    let mut out = Vec::with_capacity(a.len());
    for (i, &t) in steps.iter().enumerate() {
        for j in i * row..(i + 1) * row {
            out.push(f(a.data()[j], b.data()[j], t)?);
        }
    }
    Tensor::from_vec(a.shape(), out)
}

/// One ancestral step:
/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t + σ_t·z`, with `z = 0` required
/// at `t = 1`.
pub fn reverse_step<T: Scalar>(
    xt: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    z: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<Tensor<T>> {
    same_shape(xt, eps_hat, "reverse_step")?;
    same_shape(xt, z, "reverse_step noise")?;
    if t == 1 && z.data().iter().any(|&v| v != T::zero()) {
        return Err(Error::Parameter("the final reverse step takes no noise".into()));
    }
    let beta = schedule.beta(t)?;
    let inv_sqrt_alpha = T::one() / schedule.alpha(t)?.sqrt();
    let eps_coef = beta / schedule.one_minus_alpha_bar(t)?.sqrt();
    let sigma = schedule.sigma(t)?;
    let data = xt
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &z)| inv_sqrt_alpha * (x - eps_coef * e) + sigma * z)
        .collect();
    Tensor::from_vec(xt.shape(), data)
}

/// Anything that predicts the injected noise `ε_θ(x_t, t)`; one step per
/// leading-axis entry of `xt`.
pub trait NoisePredictor<T: Scalar> {
    fn predict_noise(&self, xt: &Tensor<T>, steps: &[usize]) -> Result<Tensor<T>>;
}

impl<T: Scalar, F> NoisePredictor<T> for F
where
    F: Fn(&Tensor<T>, &[usize]) -> Result<Tensor<T>>,
{
    fn predict_noise(&self, xt: &Tensor<T>, steps: &[usize]) -> Result<Tensor<T>> {
        self(xt, steps)
    }
}

/// Draws `x_T ~ N(0, I)` and iterates [`reverse_step`] from `t = T` down to
/// 1. All randomness comes from a ChaCha stream seeded with `seed`.
pub fn sample<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    denoiser: &P,
    schedule: &NoiseSchedule<T>,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(shape, &mut rng);
    let b = shape.first().copied().unwrap_or(0);
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = denoiser.predict_noise(&x, &vec![t; b])?;
        same_shape(&x, &eps_hat, "denoiser output")?;
        let z = if t > 1 {
            Tensor::randn(shape, &mut rng)
        } else {
            Tensor::zeros(shape)
        };
        x = reverse_step(&x, t, &eps_hat, &z, schedule)?;
    }
    Ok(x)
}

/// Uniform draw from `1..=T`.
pub fn sample_step<R: Rng + ?Sized>(steps: usize, rng: &mut R) -> usize {
    rng.random_range(1..=steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::<f64>::linear(1, 0.01, 0.01).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn four_step_product_matches_direct_evaluation() {
        let betas = [1e-4, 0.0034, 0.0067, 0.01];
        let s = NoiseSchedule::<f64>::linear(4, 1e-4, 0.01).unwrap();
        for (i, b) in betas.iter().enumerate() {
            assert!((s.beta(i + 1).unwrap() - b).abs() < 1e-12);
        }
        let direct: f64 = betas.iter().map(|b| 1.0 - b).product();
        assert!((s.alpha_bar(4).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(NoiseSchedule::<f64>::linear(10, 0.0, 0.01).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.02, 0.01).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.01, 1.0).is_err());
        assert!(NoiseSchedule::<f64>::linear(0, 0.01, 0.02).is_err());
    }

    #[test]
    fn paper_defaults() {
        assert_eq!(ScheduleConfig::hypotension().steps, 1000);
        assert_eq!(ScheduleConfig::hiv().steps, 500);
    }

    #[test]
    fn schedule_invariants_hold_exactly() {
        let s = NoiseSchedule::<f32>::linear(1000, 1e-4, 0.01).unwrap();
        for t in 1..=s.steps() {
            let ab = s.alpha_bar(t).unwrap();
            assert_eq!(ab, s.alpha_bar(t - 1).unwrap() * s.alpha(t).unwrap());
            assert!(ab < s.alpha_bar(t - 1).unwrap());
            assert_eq!(s.sigma(t).unwrap() * s.sigma(t).unwrap(), s.beta(t).unwrap().sqrt().powi(2));
        }
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::<f64>::from_betas(vec![0.75]).unwrap();
        // ᾱ = 0.25: 0.5·1 + √0.75·1
        let out = q_sample(&t1(1.0), 1, &t1(1.0), &s).unwrap();
        assert!((out.data()[0] - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((out.data()[0] - 1.3660).abs() < 1e-4);
        let zero = q_sample(&t1(2.0), 1, &t1(0.0), &s).unwrap();
        assert!((zero.data()[0] - 1.0).abs() < 1e-12);
        assert!(matches!(q_sample(&t1(1.0), 2, &t1(1.0), &s), Err(Error::Step { .. })));
        assert!(matches!(q_sample(&t1(1.0), 0, &t1(1.0), &s), Err(Error::Step { .. })));
    }

    #[test]
    fn q_sample_is_identity_when_alpha_bar_is_one() {
        // β as small as f64 allows: ᾱ rounds to 1.
        let s = NoiseSchedule::<f64>::from_betas(vec![1e-300]).unwrap();
        let out = q_sample(&t1(0.37), 1, &t1(5.0), &s).unwrap();
        assert!((out.data()[0] - 0.37).abs() < 1e-12);
    }

    #[test]
    fn posterior_params_match_hand_derivation() {
        let s = NoiseSchedule::<f64>::from_betas(vec![0.1, 0.2, 0.3]).unwrap();
        // t = 3: ᾱ_2 = 0.9·0.8 = 0.72, ᾱ_3 = 0.72·0.7 = 0.504
        let p = s.posterior_params(3).unwrap();
        let (ab2, ab3): (f64, f64) = (0.72, 0.504);
        assert!((p.coef_x0 - ab2.sqrt() * 0.3 / (1.0 - ab3)).abs() < 1e-12);
        assert!((p.coef_xt - 0.7f64.sqrt() * (1.0 - ab2) / (1.0 - ab3)).abs() < 1e-12);
        assert!((p.variance - 0.3 * (1.0 - ab2) / (1.0 - ab3)).abs() < 1e-12);
        // x0 = xt = c gives μ̃ = c·(coef_x0 + coef_xt)
        let c = 2.5;
        assert!((p.mean(c, c) - c * (p.coef_x0 + p.coef_xt)).abs() < 1e-12);
        let p1 = s.posterior_params(1).unwrap();
        assert_eq!(p1.variance, 0.0);
        assert!((p1.coef_x0 - 1.0).abs() < 1e-12);
        let sched = NoiseSchedule::<f64>::linear(200, 1e-4, 0.05).unwrap();
        for t in 1..=200 {
            let p = sched.posterior_params(t).unwrap();
            assert!(p.variance <= sched.beta(t).unwrap());
        }
    }

    #[test]
    fn posterior_variance_approaches_beta_at_late_steps() {
        let s = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.01).unwrap();
        let p = s.posterior_params(1000).unwrap();
        let ratio = p.variance / s.beta(1000).unwrap();
        let ab_prev = s.alpha_bar(999).unwrap();
        let ab = s.alpha_bar(1000).unwrap();
        assert!((ratio - (1.0 - ab_prev) / (1.0 - ab)).abs() < 1e-12);
        assert!(ratio > 0.99 && ratio < 1.0);
    }

    #[test]
    fn reconstruction_inverts_corruption() {
        let s = NoiseSchedule::<f64>::linear(50, 1e-4, 0.05).unwrap();
        let x0 = Tensor::from_vec(&[3], vec![0.2, -1.0, 0.7]).unwrap();
        let eps = Tensor::from_vec(&[3], vec![1.5, 0.1, -0.3]).unwrap();
        let xt = q_sample(&x0, 37, &eps, &s).unwrap();
        let back = one_step_reconstruct(&xt, 37, &eps, &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = Tensor::zeros(&[3]);
        let plain = one_step_reconstruct(&xt, 37, &zero, &s).unwrap();
        let ab = s.alpha_bar(37).unwrap();
        assert!((plain.data()[0] - xt.data()[0] / ab.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_cases() {
        let s = NoiseSchedule::<f64>::from_betas(vec![0.1, 0.2]).unwrap();
        let x = t1(1.0);
        let out = reverse_step(&x, 2, &t1(0.0), &t1(0.0), &s).unwrap();
        assert!((out.data()[0] - 1.0 / 0.8f64.sqrt()).abs() < 1e-12);
        assert!(reverse_step(&x, 1, &t1(0.0), &t1(0.5), &s).is_err());
        // β → 0 limit: x_{t−1} = x_t + σ_t z
        let tiny = NoiseSchedule::<f64>::from_betas(vec![1e-300, 1e-300]).unwrap();
        let out = reverse_step(&t1(0.4), 2, &t1(0.0), &t1(2.0), &tiny).unwrap();
        assert!((out.data()[0] - (0.4 + 2.0 * 1e-150)).abs() < 1e-12);
    }

    #[test]
    fn sample_is_deterministic_and_shaped() {
        let s = NoiseSchedule::<f32>::linear(10, 1e-4, 0.05).unwrap();
        let zero = |x: &Tensor<f32>, _: &[usize]| -> Result<Tensor<f32>> { Ok(Tensor::zeros(x.shape())) };
        let a = sample(&zero, &s, &[2, 1, 4, 3], 7).unwrap();
        let b = sample(&zero, &s, &[2, 1, 4, 3], 7).unwrap();
        assert_eq!(a.shape(), &[2, 1, 4, 3]);
        assert_eq!(a, b);
        let c = sample(&zero, &s, &[2, 1, 4, 3], 8).unwrap();
        assert_ne!(a, c);
    }
}
