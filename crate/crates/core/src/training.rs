//! The denoiser training loop: noise sampling, the weighted three-part loss
//! and Adam updates.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{one_step_reconstruct_batch, q_sample_batch, reconstruct_coefs, sample_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Denoiser, Gradients};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_bt_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub noise: f64,
    pub recon1: f64,
    pub recon2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            noise: 1.0,
            recon1: 20.0,
            recon2: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    /// Hidden and output widths of the random projection.
    pub projection_widths: [usize; 2],
    pub seed: u64,
    /// Number of evenly spaced checkpoints over the run (the last one
    /// coincides with the final epoch).
    pub checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 5000,
            loss_weights: LossWeights::default(),
            projection_widths: [128, 64],
            seed: 0,
            checkpoints: 10,
        }
    }
}

impl TrainConfig {
    pub fn hypotension() -> Self {
        Self::default()
    }

    pub fn hiv() -> Self {
        Self {
            epochs: 3000,
            ..Self::default()
        }
    }

    pub fn validate(&self, n_episodes: usize) -> Result<()> {
        let w = self.loss_weights;
        if !(w.noise > 0.0 && w.recon1 > 0.0 && w.recon2 > 0.0) {
            return Err(Error::Config(format!("loss weights must be positive, got {w:?}")));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.batch_size > n_episodes {
            return Err(Error::Config(format!(
                "batch size {} must lie in 1..={n_episodes} (dataset size)",
                self.batch_size
            )));
        }
        if self.epochs == 0 || self.projection_widths.contains(&0) {
            return Err(Error::Config("epochs and projection widths must be positive".into()));
        }
        Ok(())
    }
}

/// Loss components of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub epoch: usize,
    pub noise: f64,
    pub recon1: f64,
    pub recon2: f64,
    pub total: f64,
    /// Mean of `noise` over all iterations so far.
    pub running_noise: f64,
    /// Mean of `total` over all iterations so far.
    pub running_total: f64,
}

/// Weighted total; the single definition used everywhere a total is formed.
pub fn total_loss(w: &LossWeights, noise: f64, recon1: f64, recon2: f64) -> f64 {
    w.noise * noise + w.recon1 * recon1 + w.recon2 * recon2
}

/// Mean squared error over all elements.
pub fn noise_loss<T: Scalar>(eps: &Tensor<T>, eps_hat: &Tensor<T>) -> Result<f64> {
    mse(eps, eps_hat)
}

/// Mean squared distance between `x_0` and its one-step reconstruction.
pub fn recon_loss_1<T: Scalar>(x0: &Tensor<T>, x0_hat: &Tensor<T>) -> Result<f64> {
    mse(x0, x0_hat)
}

/// Mean squared distance between the random projections of `x_0` and
/// `x̂_0`.
pub fn recon_loss_2<T: Scalar>(x0: &Tensor<T>, x0_hat: &Tensor<T>, proj: &RandomProjection<T>) -> Result<f64> {
    let a = proj.apply(x0)?;
    let b = proj.apply(x0_hat)?;
    mse(&a.output, &b.output)
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("loss operands {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `𝔘(v) = max(0, v·U₁)·U₂` applied to each flattened sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomProjection<T> {
    u1: Tensor<T>,
    u2: Tensor<T>,
}

struct Projected<T> {
    pre: Vec<T>,
    output: Tensor<T>,
}

impl<T: Scalar> RandomProjection<T> {
    pub fn new(u1: Tensor<T>, u2: Tensor<T>) -> Result<Self> {
        let (s1, s2) = (u1.shape(), u2.shape());
        if s1.len() != 2 || s2.len() != 2 || s1[1] != s2[0] {
            return Err(Error::shape(format!("projection factors {:?} and {:?} do not compose", s1, s2)));
        }
        Ok(Self { u1, u2 })
    }

    /// Entries drawn i.i.d. standard normal and scaled by `1/√fan-in`.
    pub fn sample<R: rand::Rng + ?Sized>(input: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        let scale = |t: Tensor<T>, fan_in: usize| t.map(|v| v / T::of(fan_in as f64).sqrt());
        let u1 = scale(Tensor::randn(&[input, hidden], rng), input);
        let u2 = scale(Tensor::randn(&[hidden, out], rng), hidden);
        Self { u1, u2 }
    }

    pub fn u1(&self) -> &Tensor<T> {
        &self.u1
    }

    pub fn u2(&self) -> &Tensor<T> {
        &self.u2
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Projected<T>> {
        let d = self.u1.shape()[0];
        let (h, o) = (self.u1.shape()[1], self.u2.shape()[1]);
        let b = x.shape().first().copied().unwrap_or(0);
        if x.row_len() != d {
            return Err(Error::shape(format!(
                "projection expects {d} features per sample, got {}",
                x.row_len()
            )));
        }
        let mut pre = vec![T::zero(); b * h];
        matmul_acc(x.data(), self.u1.data(), &mut pre, b, d, h);
        let hidden: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
        let mut out = vec![T::zero(); b * o];
        matmul_acc(&hidden, self.u2.data(), &mut out, b, h, o);
        Ok(Projected {
            pre,
            output: Tensor::from_vec(&[b, o], out)?,
        })
    }

    /// Gradient of `mean((𝔘(x̂) − 𝔘(x))²)` with respect to `x̂`.
    fn loss_grad(&self, x0: &Tensor<T>, x0_hat: &Tensor<T>) -> Result<(f64, Vec<T>)> {
        let target = self.apply(x0)?;
        let pred = self.apply(x0_hat)?;
        let d = self.u1.shape()[0];
        let (h, o) = (self.u1.shape()[1], self.u2.shape()[1]);
        let b = x0.shape()[0];
        let loss = mse(&pred.output, &target.output)?;
        let k = T::of(2.0 / (b * o) as f64);
        let dout: Vec<T> = pred
            .output
            .data()
            .iter()
            .zip(target.output.data())
            .map(|(&p, &q)| k * (p - q))
            .collect();
        let mut dhidden = vec![T::zero(); b * h];
        matmul_bt_acc(&dout, self.u2.data(), &mut dhidden, b, h, o);
        for (g, &a) in dhidden.iter_mut().zip(&pred.pre) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        let mut dx = vec![T::zero(); b * d];
        matmul_bt_acc(&dhidden, self.u1.data(), &mut dx, b, d, h);
        Ok((loss, dx))
    }
}

/// Loss components and parameter gradients for one fixed batch.
pub struct LossAndGrad<T> {
    pub noise: f64,
    pub recon1: f64,
    pub recon2: f64,
    pub total: f64,
    pub gradients: Gradients<T>,
}

/// Evaluates the weighted loss on `(x0, t, ε, 𝔘)` and back-propagates it
/// through the denoiser.
pub fn loss_and_gradients<T: Scalar>(
    denoiser: &Denoiser<T>,
    schedule: &NoiseSchedule<T>,
    weights: &LossWeights,
    x0: &Tensor<T>,
    steps: &[usize],
    eps: &Tensor<T>,
    proj: &RandomProjection<T>,
) -> Result<LossAndGrad<T>> {
    let xt = q_sample_batch(x0, steps, eps, schedule)?;
    let pass = denoiser.forward_pass(&xt, steps)?;
    let eps_hat = pass.output();
    let x0_hat = one_step_reconstruct_batch(&xt, steps, eps_hat, schedule)?;

    let noise = noise_loss(eps, eps_hat)?;
    let recon1 = recon_loss_1(x0, &x0_hat)?;
    let (recon2, d_r2) = proj.loss_grad(x0, &x0_hat)?;
    let total = total_loss(weights, noise, recon1, recon2);

    // dL/dε̂ = w_n·2(ε̂−ε)/M + (w_1·2(x̂₀−x₀)/M + w_2·∂L_R2/∂x̂₀)·∂x̂₀/∂ε̂
    let m = T::of(2.0 / x0.len() as f64);
    let (wn, w1, w2) = (T::of(weights.noise), T::of(weights.recon1), T::of(weights.recon2));
    let row = x0.row_len();
    let mut grad = Vec::with_capacity(x0.len());
    for (i, &t) in steps.iter().enumerate() {
        let (inv_sqrt_ab, sqrt_one_minus) = reconstruct_coefs(t, schedule)?;
        let dx0_deps = -sqrt_one_minus * inv_sqrt_ab;
        for j in i * row..(i + 1) * row {
            let g_eps = wn * m * (eps_hat.data()[j] - eps.data()[j]);
            let g_x0 = w1 * m * (x0_hat.data()[j] - x0.data()[j]) + w2 * d_r2[j];
            grad.push(g_eps + g_x0 * dx0_deps);
        }
    }
    let gradients = pass.backward(&Tensor::from_vec(x0.shape(), grad)?)?;
    Ok(LossAndGrad {
        noise,
        recon1,
        recon2,
        total,
        gradients,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &Gradients<T>) -> Result<()> {
        let grads = grads.tensors();
        if grads.len() != params.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let lr = T::of(self.learning_rate);
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Events surfaced to the caller while training runs.
pub enum TrainEvent<'a, T> {
    Iteration(&'a LossReport),
    /// Scheduled snapshot after `epoch` (1-based) completes.
    Checkpoint { epoch: usize, denoiser: &'a Denoiser<T> },
    /// The loss became non-finite; the parameters are those that produced it.
    Diverged { report: &'a LossReport, denoiser: &'a Denoiser<T> },
}

/// Runs the training loop over the encoded episodes `data` (`E×1×L×N`).
///
/// Randomness (shuffling, steps, noise, projections) is drawn from one
/// stream seeded by `config.seed`, so a run is replayed exactly by the same
/// inputs.
pub fn train<T: Scalar>(
    data: &Tensor<T>,
    denoiser: &mut Denoiser<T>,
    schedule: &NoiseSchedule<T>,
    config: &TrainConfig,
    mut monitor: impl FnMut(TrainEvent<'_, T>) -> Result<()>,
) -> Result<Vec<LossReport>> {
    let n = data.shape().first().copied().unwrap_or(0);
    config.validate(n)?;
    let row = data.row_len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut reports = Vec::new();
    let (mut sum_noise, mut sum_total) = (0.0, 0.0);
    let checkpoint_epochs = checkpoint_epochs(config.epochs, config.checkpoints);
    let [hidden, out] = config.projection_widths;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut x0 = Vec::with_capacity(batch.len() * row);
            for &i in batch {
                x0.extend_from_slice(&data.data()[i * row..(i + 1) * row]);
            }
            let mut shape = data.shape().to_vec();
            shape[0] = batch.len();
            let x0 = Tensor::from_vec(&shape, x0)?;
            let steps: Vec<usize> = batch.iter().map(|_| sample_step(schedule.steps(), &mut rng)).collect();
            let eps = Tensor::randn(&shape, &mut rng);
            let proj = RandomProjection::sample(row, hidden, out, &mut rng);

            let lg = loss_and_gradients(denoiser, schedule, &config.loss_weights, &x0, &steps, &eps, &proj)?;
            let iteration = reports.len() + 1;
            sum_noise += lg.noise;
            sum_total += lg.total;
            let report = LossReport {
                iteration,
                epoch,
                noise: lg.noise,
                recon1: lg.recon1,
                recon2: lg.recon2,
                total: lg.total,
                running_noise: sum_noise / iteration as f64,
                running_total: sum_total / iteration as f64,
            };
            if !report.total.is_finite() {
                monitor(TrainEvent::Diverged {
                    report: &report,
                    denoiser,
                })?;
                return Err(Error::Diverged {
                    iteration,
                    loss: report.total,
                });
            }
            adam.update(denoiser.params_mut().tensors_mut(), &lg.gradients)?;
            if let Some(name) = denoiser.params().first_non_finite() {
                let name = name.to_string();
                monitor(TrainEvent::Diverged {
                    report: &report,
                    denoiser,
                })?;
                return Err(Error::NonFinite(name));
            }
            monitor(TrainEvent::Iteration(&report))?;
            reports.push(report);
        }
        if checkpoint_epochs.contains(&epoch) {
            monitor(TrainEvent::Checkpoint { epoch, denoiser })?;
        }
    }
    Ok(reports)
}

/// Epochs after which a checkpoint is due: `count` evenly spaced points
/// ending at `epochs`.
pub fn checkpoint_epochs(epochs: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(1, epochs.max(1));
    let mut out: Vec<usize> = (1..=count).map(|k| (k * epochs).div_ceil(count)).collect();
    out.dedup();
    out
}

/// Writes the loss stream as CSV.
pub fn write_loss_log<W: Write>(reports: &[LossReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Csv {
        row: 0,
        message: e.to_string(),
    };
    w.write_record(["iteration", "loss_noise", "loss_recon1", "loss_recon2", "loss_total"])
        .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.iteration.to_string(),
            r.noise.to_string(),
            r.recon1.to_string(),
            r.recon2.to_string(),
            r.total.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("loss log", e))
}

pub fn save_loss_log(reports: &[LossReport], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_loss_log(reports, &mut buf)?;
    crate::nn::write_atomic(path.as_ref(), &buf)
}

/// Gradient of [`recon_loss_2`] with respect to `x0_hat`, flattened.
pub fn recon_loss_2_grad<T: Scalar>(x0: &Tensor<T>, x0_hat: &Tensor<T>, proj: &RandomProjection<T>) -> Result<Vec<T>> {
    Ok(proj.loss_grad(x0, x0_hat)?.1)
}
