//! Noise-to-weight generators.
//!
//! A generator pushes i.i.d. standard-normal noise through a small MLP and
//! reads each output row as one spectral weight. Hidden blocks are
//! `linear → batchnorm → activation` (leaky ReLU 0.2, or ReLU for the image
//! variant); the last block is `linear → tanh` with no normalization. The
//! batch norm statistics are taken over the noise batch, i.e. over the `D`
//! weights being generated, never over data.
//!
//! The image variant keeps the same MLP but emits `C·5·5` values per noise
//! row, reshaped into one `C×5×5` kernel per row. This stands in for a stack
//! of transposed convolutions; at the kernel sizes used here the two play the
//! same role.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Parameter, RunningStats, Var, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
use crate::error::{GrffError, Result};
use crate::rff::WeightBatch;
use crate::tensor::Tensor;

pub const DEFAULT_NOISE_DIM: usize = 100;
/// Upper bound on `D·C·25` for an image generator.
pub const DEFAULT_MAX_KERNEL_VALUES: usize = 100_000;
pub const KERNEL_SIZE: usize = 5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Disjoint noise streams derived from one master seed.
pub mod streams {
    pub const TRAIN: u64 = 1;
    pub const VALIDATION: u64 = 2;
    pub const PREDICT: u64 = 3;
    pub const RESAMPLE: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const DATA: u64 = 7;
    pub const BASELINE: u64 = 8;
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub noise_dim: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            noise_dim: DEFAULT_NOISE_DIM,
            seed: 0,
        }
    }
}

/// A seeded standard-normal source. Streams with different ids never overlap.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    noise_dim: usize,
}

impl NoiseStream {
    pub fn new(spec: &NoiseSpec, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        NoiseStream {
            rng,
            noise_dim: spec.noise_dim,
        }
    }

    /// Next `count × noise_dim` block of the stream.
    pub fn sample(&mut self, count: usize) -> Tensor {
        let n = count * self.noise_dim;
        let data = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        Tensor::new(vec![count, self.noise_dim], data).expect("sized above")
    }

    /// One noise batch per layer, in layer order.
    pub fn sample_layers(&mut self, counts: &[usize]) -> Vec<Tensor> {
        counts.iter().map(|&c| self.sample(c)).collect()
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }
}

/// `count` rows of noise from the start of the spec's default stream.
pub fn sample_noise(spec: &NoiseSpec, count: usize) -> Tensor {
    NoiseStream::new(spec, 0).sample(count)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArchitecture {
    /// `[noise_dim, h₁, …, out_dim]`
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// `(C, kh, kw)` when each output row is a convolution kernel.
    pub kernel: Option<(usize, usize, usize)>,
}

impl GeneratorArchitecture {
    /// `noise_dim → hidden… → out_dim` with leaky-ReLU hidden blocks.
    pub fn mlp(noise_dim: usize, hidden: &[usize], out_dim: usize) -> Self {
        let mut widths = vec![noise_dim];
        widths.extend_from_slice(hidden);
        widths.push(out_dim);
        GeneratorArchitecture {
            widths,
            activation: Activation::LeakyRelu(LEAKY_SLOPE),
            kernel: None,
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(GrffError::Config(format!(
                "generator needs at least input and output widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(GrffError::Config(format!("generator width of 0 in {:?}", self.widths)));
        }
        if let Some((c, kh, kw)) = self.kernel {
            if c * kh * kw != self.out_dim() {
                return Err(GrffError::Config("kernel shape does not match generator output".into()));
            }
        }
        Ok(())
    }

    /// `Σ(in·out + out)` plus two affine terms per hidden unit.
    pub fn parameter_count(&self) -> usize {
        let linear: usize = self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let norm: usize = self.widths[1..self.widths.len() - 1].iter().map(|w| 2 * w).sum();
        linear + norm
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `in × out`
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Uniform in `±√(6/fan_in)` for the weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            weight: Parameter::new(Tensor::new(vec![fan_in, fan_out], data).expect("sized")),
            bias: Parameter::new(Tensor::zeros(&[fan_out])),
        }
    }

    pub fn apply<'a>(&'a self, g: &mut Graph<'a>, x: Var, trainable: bool) -> Result<Var> {
        let w = g.param_if(&self.weight, trainable);
        let b = g.param_if(&self.bias, trainable);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running: RunningStats,
}

impl Norm {
    pub fn new(features: usize) -> Self {
        Norm {
            gamma: Parameter::new(Tensor::ones(&[features])),
            beta: Parameter::new(Tensor::zeros(&[features])),
            running: RunningStats::new(features),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub arch: GeneratorArchitecture,
    pub linears: Vec<Linear>,
    /// One per hidden block.
    pub norms: Vec<Norm>,
    pub frozen: bool,
}

/// Output of a generator pass on a graph.
pub struct Generated {
    /// `D × out_dim`, or `D × C × kh × kw` for kernel generators.
    pub weights: Var,
    /// Batch statistics of each hidden block (train mode only).
    pub stats: Vec<BatchStats>,
}

pub fn build_generator(arch: GeneratorArchitecture, seed: u64) -> Result<GeneratorParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::INIT);
    let linears = arch
        .widths
        .windows(2)
        .map(|w| Linear::init(w[0], w[1], &mut rng))
        .collect();
    let norms = arch.widths[1..arch.widths.len() - 1]
        .iter()
        .map(|&w| Norm::new(w))
        .collect();
    Ok(GeneratorParams {
        arch,
        linears,
        norms,
        frozen: false,
    })
}

/// MLP generator emitting `count` kernels of shape `channels × 5 × 5`, one
/// per noise row, with ReLU hidden blocks.
pub fn build_image_generator(
    count: usize,
    channels: usize,
    noise_dim: usize,
    hidden: &[usize],
    max_values: usize,
    seed: u64,
) -> Result<GeneratorParams> {
    let per_kernel = channels * KERNEL_SIZE * KERNEL_SIZE;
    let total = count * per_kernel;
    if total > max_values {
        return Err(GrffError::Config(format!(
            "image generator would emit {count}×{channels}×5×5 = {total} values, above the limit of {max_values}; \
             generating full-size weights does not scale, reduce D or the channel count"
        )));
    }
    let mut arch = GeneratorArchitecture::mlp(noise_dim, hidden, per_kernel);
    arch.activation = Activation::Relu;
    arch.kernel = Some((channels, KERNEL_SIZE, KERNEL_SIZE));
    build_generator(arch, seed)
}

impl GeneratorParams {
    pub fn param_count(&self) -> usize {
        self.linears
            .iter()
            .map(|l| l.weight.value().len() + l.bias.value().len())
            .sum::<usize>()
            + self
                .norms
                .iter()
                .map(|n| n.gamma.value().len() + n.beta.value().len())
                .sum::<usize>()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for l in &self.linears {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for n in &self.norms {
            out.push(&n.gamma);
            out.push(&n.beta);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in &mut self.linears {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for n in &mut self.norms {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out
    }

    /// Flattened copy of every parameter value and running statistic.
    pub fn snapshot(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.params().iter().flat_map(|p| p.value().data().to_vec()).collect();
        for n in &self.norms {
            out.extend_from_slice(&n.running.mean);
            out.extend_from_slice(&n.running.var);
        }
        out
    }

    /// Generator pass on a graph. `trainable` inserts parameters as gradient
    /// leaves; train mode normalizes with the noise batch statistics.
    pub fn forward_var<'a>(&'a self, g: &mut Graph<'a>, noise: Var, mode: Mode, trainable: bool) -> Result<Generated> {
        let nv = g.value(noise);
        let (count, nd) = nv.dims2()?;
        if nd != self.arch.noise_dim() {
            return Err(GrffError::dim("generate_weights", nv.shape(), &[self.arch.noise_dim()]));
        }
        if count == 0 {
            return Err(GrffError::Shape("empty noise batch".into()));
        }
        let mut h = noise;
        let mut stats = Vec::new();
        let last = self.linears.len() - 1;
        for (i, lin) in self.linears.iter().enumerate() {
            h = lin.apply(g, h, trainable)?;
            if i == last {
                h = g.tanh(h);
                break;
            }
            let norm = &self.norms[i];
            let gamma = g.param_if(&norm.gamma, trainable);
            let beta = g.param_if(&norm.beta, trainable);
            h = match mode {
                Mode::Train => {
                    let (y, s) = g.batchnorm_train(h, gamma, beta, BATCHNORM_EPS)?;
                    stats.push(s);
                    y
                }
                Mode::Eval => g.batchnorm_eval(h, gamma, beta, &norm.running, BATCHNORM_EPS)?,
            };
            h = match self.arch.activation {
                Activation::LeakyRelu(s) => g.leaky_relu(h, s),
                Activation::Relu => g.relu(h),
            };
        }
        if let Some((c, kh, kw)) = self.arch.kernel {
            h = g.reshape(h, &[count, c, kh, kw])?;
        }
        Ok(Generated { weights: h, stats })
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (n, s) in self.norms.iter_mut().zip(stats) {
            n.running.update(s, BATCHNORM_MOMENTUM);
        }
    }
}

/// Generates one weight batch from `noise` without recording gradients.
pub fn generate_weights(generator: &GeneratorParams, noise: &Tensor, mode: Mode) -> Result<WeightBatch> {
    let mut g = Graph::new();
    let n = g.constant(noise);
    let out = generator.forward_var(&mut g, n, mode, false)?;
    WeightBatch::new(g.value(out.weights).clone())
}
