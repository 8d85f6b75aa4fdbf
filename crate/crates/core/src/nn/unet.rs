use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{CheckpointFile, Gradients, ParamStore};
use super::tape::{Tape, Var};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Samples handled by one tape. Batches are split into chunks of this size
/// and processed in parallel; results do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Width of the latent feature axis the input is projected onto.
    pub latent_width: usize,
    /// Channel count per resolution level; the first must be 1.
    pub level_channels: Vec<usize>,
    /// Sequence length per level; the first equals the schema's L.
    pub level_lengths: Vec<usize>,
    pub blocks_per_level: usize,
    pub embed_dim: usize,
    /// Channel width of the squeezed middle block at the coarsest level.
    pub bottleneck_channels: usize,
    pub kernel_size: usize,
}

impl DenoiserConfig {
    /// Standard architecture with the ladder `[L, ⌈L/4⌉, ⌈L/16⌉]`.
    pub fn for_length(length: usize) -> Self {
        let l1 = length.div_ceil(4);
        Self::with_lengths(vec![length, l1, l1.div_ceil(4)])
    }

    pub fn hypotension() -> Self {
        Self::with_lengths(vec![48, 12, 3])
    }

    pub fn hiv() -> Self {
        Self::with_lengths(vec![100, 10, 3])
    }

    fn with_lengths(level_lengths: Vec<usize>) -> Self {
        Self {
            latent_width: 256,
            level_channels: vec![1, 10, 20],
            level_lengths,
            blocks_per_level: 3,
            embed_dim: 100,
            bottleneck_channels: 10,
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let n = self.level_channels.len();
        if n < 2 || self.level_lengths.len() != n {
            return fail(format!(
                "need at least two levels with one length each, got channels {:?} and lengths {:?}",
                self.level_channels, self.level_lengths
            ));
        }
        if self.level_channels[0] != 1 {
            return fail("the first level must have a single channel".into());
        }
        if self.level_channels.contains(&0) || self.bottleneck_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.level_lengths.windows(2).any(|w| w[1] >= w[0]) || self.level_lengths[n - 1] == 0 {
            return fail(format!("lengths must strictly decrease, got {:?}", self.level_lengths));
        }
        if self.latent_width == 0 || self.blocks_per_level == 0 {
            return fail("latent width and block count must be positive".into());
        }
        if self.embed_dim == 0 || self.embed_dim % 2 == 1 {
            return fail(format!("embedding dimension must be even, got {}", self.embed_dim));
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        Ok(())
    }

    pub fn length(&self) -> usize {
        self.level_lengths[0]
    }
}

/// Sinusoidal step embedding with interleaved `(sin, cos)` pairs at
/// frequencies `10000^(−2i/dim)`.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 == 1 {
        return Err(Error::Config(format!("embedding dimension must be even, got {dim}")));
    }
    if t == 0 {
        return Err(Error::Parameter("steps start at 1".into()));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// How fresh parameters are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Fan-in uniform weights, zero biases, unit norm gains and a zero output
    /// projection.
    Standard,
    /// Every array random, including biases and the output projection.
    /// Used to probe the network away from the trivial zero map.
    Generic,
}

#[derive(Clone, Copy)]
enum Kind {
    Weight { fan_in: usize },
    Bias,
    Gain,
    Output { fan_in: usize },
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
}

#[derive(Clone, Debug)]
struct Block {
    ln: Lin,
    conv1: Conv,
    conv2: Conv,
}

#[derive(Clone, Debug)]
struct Down {
    conv: Conv,
    nin: Lin,
    emb: Lin,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Up {
    conv: Conv,
    nin: Lin,
    merge: Conv,
    emb: Lin,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Layout {
    in_proj: Lin,
    emb_in: Lin,
    emb0: Lin,
    blocks0: Vec<Block>,
    downs: Vec<Down>,
    ups: Vec<Up>,
    out_proj: Lin,
}

struct Builder<T> {
    store: ParamStore<T>,
    init: Init,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn array(&mut self, name: String, shape: &[usize], kind: Kind) -> usize {
        let n: usize = shape.iter().product();
        let uniform = |rng: &mut ChaCha8Rng, bound: f64| -> Vec<T> {
            (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
        };
        let data = match (kind, self.init) {
            (Kind::Weight { fan_in }, _) | (Kind::Output { fan_in }, Init::Generic) => {
                uniform(&mut self.rng, 1.0 / (fan_in as f64).sqrt())
            }
            (Kind::Output { .. }, Init::Standard) | (Kind::Bias, Init::Standard) => vec![T::zero(); n],
            (Kind::Gain, Init::Standard) => vec![T::one(); n],
            (Kind::Bias, Init::Generic) => uniform(&mut self.rng, 0.1),
            (Kind::Gain, Init::Generic) => uniform(&mut self.rng, 0.2).into_iter().map(|v| v + T::one()).collect(),
        };
        self.store.push(name, Tensor::from_vec(shape, data).expect("shape product"))
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, output: bool) -> Lin {
        let kind = if output {
            Kind::Output { fan_in: fin }
        } else {
            Kind::Weight { fan_in: fin }
        };
        Lin {
            w: self.array(format!("{name}.w"), &[fin, fout], kind),
            b: self.array(format!("{name}.b"), &[fout], Kind::Bias),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad_left: usize, out_len: usize) -> Conv {
        Conv {
            w: self.array(format!("{name}.w"), &[cout, cin, k], Kind::Weight { fan_in: cin * k }),
            b: self.array(format!("{name}.b"), &[cout], Kind::Bias),
            stride,
            pad_left,
            out_len,
        }
    }

    fn block(&mut self, name: &str, c: usize, mid: usize, len: usize, f: usize, k: usize) -> Block {
        let ln = Lin {
            w: self.array(format!("{name}.norm.g"), &[f], Kind::Gain),
            b: self.array(format!("{name}.norm.b"), &[f], Kind::Bias),
        };
        let pad = k / 2;
        Block {
            ln,
            conv1: self.conv(&format!("{name}.conv1"), c, mid, k, 1, pad, len),
            conv2: self.conv(&format!("{name}.conv2"), mid, c, k, 1, pad, len),
        }
    }

    fn blocks(&mut self, name: &str, c: usize, len: usize, squeeze: Option<usize>, cfg: &DenoiserConfig) -> Vec<Block> {
        let n = cfg.blocks_per_level;
        (0..n)
            .map(|i| {
                let mid = match squeeze {
                    Some(m) if i == n / 2 => m,
                    _ => c,
                };
                self.block(&format!("{name}.{i}"), c, mid, len, cfg.latent_width, cfg.kernel_size)
            })
            .collect()
    }
}

fn build_layout<T: Scalar>(cfg: &DenoiserConfig, n_features: usize, init: Init, seed: u64) -> (Layout, ParamStore<T>) {
    let mut b = Builder {
        store: ParamStore::default(),
        init,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let f = cfg.latent_width;
    let (ch, len) = (&cfg.level_channels, &cfg.level_lengths);
    let levels = ch.len();
    let in_proj = b.linear("input", n_features, f, false);
    let emb_in = b.linear("embed", cfg.embed_dim, f, false);
    let emb0 = b.linear("down0.embed", f, f, false);
    let blocks0 = b.blocks("down0.blocks", ch[0], len[0], None, cfg);
    let mut downs = Vec::new();
    for i in 1..levels {
        let stride = len[i - 1].div_ceil(len[i]);
        let total_pad = (len[i] - 1) * stride + stride - len[i - 1];
        let name = format!("down{i}");
        let conv = b.conv(&format!("{name}.conv"), ch[i - 1], ch[i], stride, stride, total_pad / 2, len[i]);
        let nin = b.linear(&format!("{name}.nin"), f, f, false);
        let emb = b.linear(&format!("{name}.embed"), f, f, false);
        let squeeze = (i == levels - 1).then_some(cfg.bottleneck_channels);
        let blocks = b.blocks(&format!("{name}.blocks"), ch[i], len[i], squeeze, cfg);
        downs.push(Down { conv, nin, emb, blocks });
    }
    let mut ups = Vec::new();
    for i in (0..levels - 1).rev() {
        let name = format!("up{i}");
        let k = cfg.kernel_size;
        let conv = b.conv(&format!("{name}.conv"), ch[i + 1], ch[i], k, 1, k / 2, len[i]);
        let nin = b.linear(&format!("{name}.nin"), f, f, false);
        let merge = b.conv(&format!("{name}.merge"), 2 * ch[i], ch[i], 1, 1, 0, len[i]);
        let emb = b.linear(&format!("{name}.embed"), f, f, false);
        let blocks = b.blocks(&format!("{name}.blocks"), ch[i], len[i], None, cfg);
        ups.push(Up {
            conv,
            nin,
            merge,
            emb,
            blocks,
        });
    }
    let out_proj = b.linear("output", f, n_features, true);
    let layout = Layout {
        in_proj,
        emb_in,
        emb0,
        blocks0,
        downs,
        ups,
        out_proj,
    };
    (layout, b.store)
}

/// The noise-prediction network `ε_θ(x_t, t)`.
#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    n_features: usize,
    layout: Layout,
    params: ParamStore<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, n_features: usize, seed: u64) -> Result<Self> {
        Self::with_init(config, n_features, Init::Standard, seed)
    }

    pub fn with_init(config: DenoiserConfig, n_features: usize, init: Init, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_features == 0 {
            return Err(Error::Config("feature width must be positive".into()));
        }
        let (layout, params) = build_layout(&config, n_features, init, seed);
        Ok(Self {
            config,
            n_features,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn check_input(&self, xt: &Tensor<T>, steps: &[usize]) -> Result<()> {
        let s = xt.shape();
        let expected = [s.first().copied().unwrap_or(0), 1, self.config.length(), self.n_features];
        if s != expected {
            return Err(Error::shape(format!("denoiser input {:?}, expected {:?}", s, expected)));
        }
        if steps.len() != s[0] {
            return Err(Error::shape(format!("{} steps for batch of {}", steps.len(), s[0])));
        }
        if steps.contains(&0) {
            return Err(Error::Parameter("steps start at 1".into()));
        }
        Ok(())
    }

    /// `ε_θ(x_t, t)` without recording gradients.
    pub fn forward(&self, xt: &Tensor<T>, steps: &[usize]) -> Result<Tensor<T>> {
        Ok(self.forward_pass(xt, steps)?.into_output())
    }

    /// Forward pass that keeps every activation for a later
    /// [`ForwardPass::backward`].
    pub fn forward_pass(&self, xt: &Tensor<T>, steps: &[usize]) -> Result<ForwardPass<'_, T>> {
        self.check_input(xt, steps)?;
        let b = steps.len();
        let row = xt.row_len();
        let chunks: Vec<(usize, usize)> = (0..b).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(b))).collect();
        let parts = chunks
            .par_iter()
            .map(|&(s, e)| {
                let x = Tensor::from_vec(
                    &[e - s, 1, self.config.length(), self.n_features],
                    xt.data()[s * row..e * row].to_vec(),
                )?;
                let mut tape = Tape::new(self.params.tensors());
                let mut trace = Vec::new();
                let out = self.graph(&mut tape, x, &steps[s..e], &mut trace)?;
                Ok(Part { tape, out, trace })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(xt.len());
        for p in &parts {
            data.extend_from_slice(p.tape.value(p.out).data());
        }
        let output = Tensor::from_vec(xt.shape(), data)?;
        let trace = parts[0]
            .trace
            .iter()
            .map(|(name, shape)| {
                let mut s = shape.clone();
                s[0] = b;
                (name.clone(), s)
            })
            .collect();
        Ok(ForwardPass { parts, output, trace })
    }

    fn embedding(&self, tape: &mut Tape<'_, T>, steps: &[usize]) -> Result<Var> {
        let dim = self.config.embed_dim;
        let mut data = Vec::with_capacity(steps.len() * dim);
        for &t in steps {
            data.extend(sinusoidal_embed(t, dim)?.into_iter().map(T::of));
        }
        let e = tape.constant(Tensor::from_vec(&[steps.len(), dim], data)?);
        let e = linear(tape, e, self.layout.emb_in, "embed")?;
        tape.silu(e, "embed.act")
    }

    fn graph(&self, tape: &mut Tape<'_, T>, x: Tensor<T>, steps: &[usize], trace: &mut Vec<(String, Vec<usize>)>) -> Result<Var> {
        let l = &self.layout;
        let emb = self.embedding(tape, steps)?;
        let x = tape.constant(x);

        let mut h = linear(tape, x, l.in_proj, "input")?;
        h = add_embedding(tape, h, emb, l.emb0, "down0.embed")?;
        trace.push(("down0".into(), tape.value(h).shape().to_vec()));
        h = run_blocks(tape, h, &l.blocks0, "down0")?;
        let mut skips = vec![h];

        for (i, d) in l.downs.iter().enumerate() {
            let name = format!("down{}", i + 1);
            h = conv(tape, h, d.conv, &format!("{name}.conv"))?;
            h = linear(tape, h, d.nin, &format!("{name}.nin"))?;
            h = tape.silu(h, &format!("{name}.nin.act"))?;
            h = add_embedding(tape, h, emb, d.emb, &format!("{name}.embed"))?;
            trace.push((name.clone(), tape.value(h).shape().to_vec()));
            h = run_blocks(tape, h, &d.blocks, &name)?;
            skips.push(h);
        }
        skips.pop();

        for u in &l.ups {
            let skip = skips.pop().expect("one skip per upsampling level");
            let level = skips.len();
            let name = format!("up{level}");
            h = tape.upsample(h, u.conv.out_len, &format!("{name}.stretch"))?;
            h = conv(tape, h, u.conv, &format!("{name}.conv"))?;
            h = linear(tape, h, u.nin, &format!("{name}.nin"))?;
            h = tape.silu(h, &format!("{name}.nin.act"))?;
            h = tape.concat(h, skip, &format!("{name}.concat"))?;
            h = conv(tape, h, u.merge, &format!("{name}.merge"))?;
            h = add_embedding(tape, h, emb, u.emb, &format!("{name}.embed"))?;
            trace.push((name.clone(), tape.value(h).shape().to_vec()));
            h = run_blocks(tape, h, &u.blocks, &name)?;
        }
        linear(tape, h, l.out_proj, "output")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        CheckpointFile::new(self.n_features, self.config.clone(), &self.params).write(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: CheckpointFile<T, DenoiserConfig> = CheckpointFile::read(path.as_ref())?;
        let mut model = Self::new(file.config.clone(), file.n_features, 0)?;
        file.restore_into(&mut model.params)?;
        if let Some(name) = model.params.first_non_finite() {
            return Err(Error::Checkpoint(format!("array `{name}` holds non-finite values")));
        }
        Ok(model)
    }
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    fn predict_noise(&self, xt: &Tensor<T>, steps: &[usize]) -> Result<Tensor<T>> {
        self.forward(xt, steps)
    }
}

fn linear<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, p: Lin, name: &str) -> Result<Var> {
    let (w, b) = (tape.param(p.w), tape.param(p.b));
    tape.linear(x, w, b, name)
}

fn conv<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, p: Conv, name: &str) -> Result<Var> {
    let (w, b) = (tape.param(p.w), tape.param(p.b));
    tape.conv(x, w, b, p.stride, p.pad_left, p.out_len, name)
}

fn add_embedding<T: Scalar>(tape: &mut Tape<'_, T>, h: Var, emb: Var, p: Lin, name: &str) -> Result<Var> {
    let e = linear(tape, emb, p, name)?;
    tape.add_embedding(h, e, name)
}

fn run_blocks<T: Scalar>(tape: &mut Tape<'_, T>, mut h: Var, blocks: &[Block], level: &str) -> Result<Var> {
    for (i, blk) in blocks.iter().enumerate() {
        let name = format!("{level}.blocks.{i}");
        let (g, b) = (tape.param(blk.ln.w), tape.param(blk.ln.b));
        let mut r = tape.layer_norm(h, g, b, &format!("{name}.norm"))?;
        r = conv(tape, r, blk.conv1, &format!("{name}.conv1"))?;
        r = tape.silu(r, &format!("{name}.act"))?;
        r = conv(tape, r, blk.conv2, &format!("{name}.conv2"))?;
        h = tape.add(h, r, &format!("{name}.residual"))?;
    }
    Ok(h)
}

struct Part<'p, T> {
    tape: Tape<'p, T>,
    out: Var,
    trace: Vec<(String, Vec<usize>)>,
}

/// Activations recorded by [`Denoiser::forward_pass`].
pub struct ForwardPass<'p, T> {
    parts: Vec<Part<'p, T>>,
    output: Tensor<T>,
    trace: Vec<(String, Vec<usize>)>,
}

impl<T: Scalar> ForwardPass<'_, T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn into_output(self) -> Tensor<T> {
        self.output
    }

    /// Shapes of the activations entering each level, in visiting order.
    pub fn level_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.trace
    }

    /// Gradients of `⟨grad_output, ε_θ⟩` with respect to every parameter.
    pub fn backward(&self, grad_output: &Tensor<T>) -> Result<Gradients<T>> {
        if grad_output.shape() != self.output.shape() {
            return Err(Error::shape(format!(
                "output gradient {:?} vs output {:?}",
                grad_output.shape(),
                self.output.shape()
            )));
        }
        let row = self.output.row_len();
        let mut offsets = Vec::with_capacity(self.parts.len());
        let mut acc = 0;
        for p in &self.parts {
            offsets.push(acc);
            acc += p.tape.value(p.out).len() / row;
        }
        let per_part = self
            .parts
            .par_iter()
            .zip(offsets.par_iter())
            .map(|(p, &start)| {
                let shape = p.tape.value(p.out).shape().to_vec();
                let n = shape[0] * row;
                let g = Tensor::from_vec(&shape, grad_output.data()[start * row..start * row + n].to_vec())?;
                Ok(Gradients {
                    tensors: p.tape.backward(p.out, &g)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut iter = per_part.into_iter();
        let mut total = iter.next().expect("at least one chunk");
        for g in iter {
            total.accumulate(&g)?;
        }
        Ok(total)
    }
}
