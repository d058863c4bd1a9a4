//! Multi-layer GRFF networks.
//!
//! Layer `k` generates `D_k` weights from its own noise batch and maps the
//! previous features through the Fourier map: `Z⁰ = x`,
//! `Zᵏ = φ(Zᵏ⁻¹, G_k(N_k))`. A linear head on `Z^K` produces the logits.
//! The image variant swaps the inner products for valid 5×5 convolutions
//! followed by 2×2 max pooling and flattens before the head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax_rows, BatchStats, Graph, Var};
use crate::data::MinMax;
use crate::error::{GrffError, Result};
use crate::generator::{
    build_generator, build_image_generator, derive_seed, streams, GeneratorArchitecture, GeneratorParams, Linear, Mode,
    NoiseSpec, NoiseStream, DEFAULT_MAX_KERNEL_VALUES, KERNEL_SIZE,
};
use crate::rff::{conv_rff_map_var, rff_map_var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pixel values arrive in `[0,255]`; image models divide by this internally.
pub const PIXEL_RANGE: f64 = 255.0;
/// Rows per forward chunk when evaluating large sets.
pub const EVAL_CHUNK: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl Variant {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        let ok = match *self {
            Variant::Vector { dim } => x.ndim() == 2 && x.row_len() == dim,
            Variant::Image { channels, height, width } => x.ndim() == 4 && x.shape()[1..] == [channels, height, width],
        };
        if ok {
            Ok(())
        } else {
            Err(GrffError::Shape(format!("input of shape {:?} does not fit a {:?} network", x.shape(), self)))
        }
    }
}

/// Everything needed to build an untrained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub d_list: Vec<usize>,
    pub num_classes: usize,
    pub noise_dim: usize,
    /// Hidden widths of each generator; `None` uses [`default_hidden`].
    pub hidden: Option<Vec<Vec<usize>>>,
}

impl NetworkSpec {
    pub fn vector(dim: usize, d_list: &[usize], num_classes: usize) -> Self {
        NetworkSpec {
            variant: Variant::Vector { dim },
            d_list: d_list.to_vec(),
            num_classes,
            noise_dim: crate::generator::DEFAULT_NOISE_DIM,
            hidden: None,
        }
    }

    pub fn image(channels: usize, height: usize, width: usize, d_list: &[usize], num_classes: usize) -> Self {
        NetworkSpec {
            variant: Variant::Image { channels, height, width },
            ..NetworkSpec::vector(0, d_list, num_classes)
        }
    }
}

/// `100 → 128 → 64 → 64 → out` for the first generator and
/// `100 → 512 → 256 → 256 → out` for deeper ones.
pub fn default_hidden(layer: usize) -> Vec<usize> {
    if layer == 0 {
        vec![128, 64, 64]
    } else {
        vec![512, 256, 256]
    }
}

/// Which parts of a network receive gradients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainMask {
    pub generators: Vec<bool>,
    pub classifier: bool,
}

impl TrainMask {
    pub fn all(k: usize) -> Self {
        TrainMask {
            generators: vec![true; k],
            classifier: true,
        }
    }

    pub fn none(k: usize) -> Self {
        TrainMask {
            generators: vec![false; k],
            classifier: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GrffNetwork {
    pub variant: Variant,
    pub d_list: Vec<usize>,
    pub num_classes: usize,
    pub noise: NoiseSpec,
    pub generators: Vec<GeneratorParams>,
    pub classifier: Linear,
    /// Noise batches used by [`GrffNetwork::predict`] when set.
    pub frozen_noise: Option<Vec<Tensor>>,
    /// Min/max record of the training data, carried for deployment.
    pub normalization: Option<MinMax>,
    /// Multiplier applied to the input before the first layer.
    pub input_scale: f64,
}

/// Graph handles produced by one forward pass.
pub struct Trace {
    pub logits: Var,
    /// `Z¹ … Z^K` (image features unflattened).
    pub features: Vec<Var>,
    pub weights: Vec<Var>,
    /// Train-mode batch statistics per generator (empty when in eval mode).
    pub stats: Vec<Vec<BatchStats>>,
}

impl GrffNetwork {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let k = spec.d_list.len();
        if k == 0 || spec.d_list.contains(&0) {
            return Err(GrffError::Config(format!("D list {:?} must be non-empty and positive", spec.d_list)));
        }
        if spec.num_classes < 2 {
            return Err(GrffError::Config("a classifier needs at least 2 classes".into()));
        }
        if let Some(h) = &spec.hidden {
            if h.len() != k {
                return Err(GrffError::Config(format!("{} hidden-width lists for {k} generators", h.len())));
            }
        }
        let hidden = |i: usize| spec.hidden.as_ref().map_or_else(|| default_hidden(i), |h| h[i].clone());
        let mut generators = Vec::with_capacity(k);
        let (features, input_scale) = match spec.variant {
            Variant::Vector { dim } => {
                if dim == 0 {
                    return Err(GrffError::Config("input dimension must be positive".into()));
                }
                let mut width = dim;
                for (i, &d) in spec.d_list.iter().enumerate() {
                    let arch = GeneratorArchitecture::mlp(spec.noise_dim, &hidden(i), width);
                    generators.push(build_generator(arch, derive_seed(seed, i as u64 + 1))?);
                    width = 2 * d;
                }
                (width, 1.0)
            }
            Variant::Image { channels, height, width } => {
                let (mut c, mut h, mut w) = (channels, height, width);
                for (i, &d) in spec.d_list.iter().enumerate() {
                    if h < KERNEL_SIZE || w < KERNEL_SIZE || (h - KERNEL_SIZE + 1) % 2 != 0 || (w - KERNEL_SIZE + 1) % 2 != 0 {
                        return Err(GrffError::Config(format!(
                            "layer {} receives {h}×{w} maps; a 5×5 valid convolution followed by 2×2 pooling needs H−4 and W−4 even",
                            i + 1
                        )));
                    }
                    generators.push(build_image_generator(
                        d,
                        c,
                        spec.noise_dim,
                        &hidden(i),
                        DEFAULT_MAX_KERNEL_VALUES,
                        derive_seed(seed, i as u64 + 1),
                    )?);
                    c = 2 * d;
                    h = (h - KERNEL_SIZE + 1) / 2;
                    w = (w - KERNEL_SIZE + 1) / 2;
                }
                (c * h * w, 1.0 / PIXEL_RANGE)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        rng.set_stream(streams::INIT);
        Ok(GrffNetwork {
            variant: spec.variant,
            d_list: spec.d_list.clone(),
            num_classes: spec.num_classes,
            noise: NoiseSpec {
                noise_dim: spec.noise_dim,
                seed,
            },
            generators,
            classifier: Linear::init(features, spec.num_classes, &mut rng),
            frozen_noise: None,
            normalization: None,
            input_scale,
        })
    }

    pub fn layers(&self) -> usize {
        self.d_list.len()
    }

    /// Width of the flattened features entering the head.
    pub fn head_width(&self) -> usize {
        self.classifier.weight.value().rows()
    }

    fn check_noise(&self, noise: &[&Tensor]) -> Result<()> {
        if noise.len() != self.layers() {
            return Err(GrffError::Shape(format!("{} noise batches for {} layers", noise.len(), self.layers())));
        }
        for (k, (n, &d)) in noise.iter().zip(&self.d_list).enumerate() {
            if n.shape() != [d, self.noise.noise_dim] {
                return Err(GrffError::Shape(format!(
                    "layer {}: noise batch {:?}, expected [{d}, {}]",
                    k + 1,
                    n.shape(),
                    self.noise.noise_dim
                )));
            }
        }
        Ok(())
    }

    /// Generates every layer's weights on the graph.
    pub fn weights_var<'a>(
        &'a self,
        g: &mut Graph<'a>,
        noise: &[Var],
        mode: Mode,
        mask: &TrainMask,
    ) -> Result<(Vec<Var>, Vec<Vec<BatchStats>>)> {
        let mut weights = Vec::new();
        let mut stats = Vec::new();
        for (k, gen) in self.generators.iter().enumerate() {
            let active = mode == Mode::Train && mask.generators[k];
            let gmode = if active { Mode::Train } else { Mode::Eval };
            let out = gen.forward_var(g, noise[k], gmode, active)?;
            weights.push(out.weights);
            stats.push(out.stats);
        }
        Ok((weights, stats))
    }

    /// Feature layers and head for given weights. Returns `(logits, features)`.
    pub fn apply_var<'a>(&'a self, g: &mut Graph<'a>, x: Var, weights: &[Var], train_head: bool) -> Result<(Var, Vec<Var>)> {
        let mut z = if self.input_scale != 1.0 { g.scale(x, self.input_scale) } else { x };
        let mut features = Vec::new();
        for (k, &w) in weights.iter().enumerate() {
            z = match self.variant {
                Variant::Vector { .. } => rff_map_var(g, z, w),
                Variant::Image { .. } => conv_rff_map_var(g, z, w),
            }
            .map_err(|e| GrffError::Shape(format!("layer {}: {e}", k + 1)))?;
            features.push(z);
        }
        let b = g.value(z).rows();
        let flat = if g.value(z).ndim() != 2 {
            let width = g.value(z).row_len();
            g.reshape(z, &[b, width])?
        } else {
            z
        };
        let logits = self
            .classifier
            .apply(g, flat, train_head)
            .map_err(|e| GrffError::Shape(format!("classifier: {e}")))?;
        Ok((logits, features))
    }

    /// Full differentiable pass: generators, feature layers, head.
    pub fn forward_var<'a>(&'a self, g: &mut Graph<'a>, x: Var, noise: &[Var], mode: Mode, mask: &TrainMask) -> Result<Trace> {
        if noise.len() != self.layers() || mask.generators.len() != self.layers() {
            return Err(GrffError::Shape(format!("{} noise batches for {} layers", noise.len(), self.layers())));
        }
        let (weights, stats) = self.weights_var(g, noise, mode, mask)?;
        let (logits, features) = self.apply_var(g, x, &weights, mode == Mode::Train && mask.classifier)?;
        Ok(Trace {
            logits,
            features,
            weights,
            stats,
        })
    }

    /// Logits for `x` under the given noise batches.
    pub fn forward(&self, x: &Tensor, noise: &[Tensor], mode: Mode) -> Result<Tensor> {
        self.variant.check_input(x)?;
        let refs: Vec<&Tensor> = noise.iter().collect();
        self.check_noise(&refs)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let nv: Vec<Var> = noise.iter().map(|n| g.constant(n)).collect();
        let trace = self.forward_var(&mut g, xv, &nv, mode, &TrainMask::none(self.layers()))?;
        Ok(g.value(trace.logits).clone())
    }

    /// Eval-mode weights generated from `noise`, one tensor per layer.
    pub fn weights(&self, noise: &[Tensor]) -> Result<Vec<Tensor>> {
        let refs: Vec<&Tensor> = noise.iter().collect();
        self.check_noise(&refs)?;
        let mut g = Graph::new();
        let nv: Vec<Var> = noise.iter().map(|n| g.constant(n)).collect();
        let (w, _) = self.weights_var(&mut g, &nv, Mode::Eval, &TrainMask::none(self.layers()))?;
        Ok(w.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Logits for `x` under fixed per-layer weights, evaluated in chunks.
    pub fn logits_with_weights(&self, x: &Tensor, weights: &[Tensor]) -> Result<Tensor> {
        self.variant.check_input(x)?;
        let chunks: Vec<Tensor> = (0..x.rows())
            .step_by(EVAL_CHUNK)
            .map(|start| {
                let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(x.rows())).collect();
                let part = x.select_rows(&idx);
                let mut g = Graph::new();
                let xv = g.constant(&part);
                let wv: Vec<Var> = weights.iter().map(|w| g.constant(w)).collect();
                let (logits, _) = self.apply_var(&mut g, xv, &wv, false)?;
                Ok(g.value(logits).clone())
            })
            .collect::<Result<_>>()?;
        if chunks.is_empty() {
            return Ok(Tensor::zeros(&[0, self.num_classes]));
        }
        Tensor::concat_rows(&chunks)
    }

    /// Features of layer `layer` (1-based), flattened per sample.
    pub fn layer_features(&self, x: &Tensor, layer: usize, weights: &[Tensor]) -> Result<Tensor> {
        if layer == 0 || layer > self.layers() {
            return Err(GrffError::Config(format!("layer index {layer} outside 1..={}", self.layers())));
        }
        self.variant.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv: Vec<Var> = weights.iter().map(|w| g.constant(w)).collect();
        let (_, feats) = self.apply_var(&mut g, xv, &wv, false)?;
        let f = g.value(feats[layer - 1]);
        f.clone().reshape(&[f.rows(), f.row_len()])
    }

    fn stream_noise(&self, seed: u64, stream: u64) -> Vec<Tensor> {
        let spec = NoiseSpec {
            noise_dim: self.noise.noise_dim,
            seed,
        };
        NoiseStream::new(&spec, stream).sample_layers(&self.d_list)
    }

    /// Noise used by [`GrffNetwork::predict`]: the frozen batches if any,
    /// otherwise a fresh draw from the prediction stream of `seed`.
    pub fn predict_noise(&self, seed: u64) -> Vec<Tensor> {
        match &self.frozen_noise {
            Some(n) => n.clone(),
            None => self.stream_noise(seed, streams::PREDICT),
        }
    }

    /// Noise from the resampling stream of `seed`, disjoint from the
    /// prediction stream and from any frozen batches.
    pub fn resample_noise(&self, seed: u64) -> Vec<Tensor> {
        self.stream_noise(seed, streams::RESAMPLE)
    }

    /// Stores a prediction-stream draw for reproducible deployment.
    pub fn freeze_noise(&mut self, seed: u64) {
        self.frozen_noise = None;
        self.frozen_noise = Some(self.predict_noise(seed));
    }

    pub fn predict_with_noise(&self, x: &Tensor, noise: &[Tensor]) -> Result<Vec<usize>> {
        let w = self.weights(noise)?;
        Ok(argmax_rows(&self.logits_with_weights(x, &w)?))
    }

    pub fn predict(&self, x: &Tensor, seed: u64) -> Result<Vec<usize>> {
        self.predict_with_noise(x, &self.predict_noise(seed))
    }

    pub fn predict_resampled(&self, x: &Tensor, seed: u64) -> Result<Vec<usize>> {
        self.predict_with_noise(x, &self.resample_noise(seed))
    }

    /// Majority vote over `draws` consecutive resampling-stream draws; ties
    /// go to the lowest class index.
    pub fn predict_ensemble(&self, x: &Tensor, seed: u64, draws: usize) -> Result<Vec<usize>> {
        let spec = NoiseSpec {
            noise_dim: self.noise.noise_dim,
            seed,
        };
        let mut stream = NoiseStream::new(&spec, streams::RESAMPLE);
        let mut votes = vec![0usize; x.rows() * self.num_classes];
        for _ in 0..draws.max(1) {
            let noise = stream.sample_layers(&self.d_list);
            for (i, c) in self.predict_with_noise(x, &noise)?.into_iter().enumerate() {
                votes[i * self.num_classes + c] += 1;
            }
        }
        Ok(votes
            .chunks(self.num_classes)
            .map(|v| {
                let best = *v.iter().max().expect("classes ≥ 2");
                v.iter().position(|&c| c == best).expect("present")
            })
            .collect())
    }
}

/// Mean cross-entropy of a train-mode pass with every part trainable.
pub fn train_loss(net: &GrffNetwork, x: &Tensor, labels: &[usize], noise: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let nv: Vec<Var> = noise.iter().map(|n| g.constant(n)).collect();
    let trace = net.forward_var(&mut g, xv, &nv, Mode::Train, &TrainMask::all(net.layers()))?;
    let loss = g.softmax_cross_entropy(trace.logits, labels)?;
    Ok(g.value(loss).item())
}

/// Central-difference check of the train-mode loss gradient with respect to
/// every generator and classifier parameter. Returns the largest relative
/// error.
pub fn loss_gradcheck(net: &GrffNetwork, x: &Tensor, labels: &[usize], noise: &[Tensor], h: f64) -> Result<f64> {
    let params = |n: &GrffNetwork| -> Vec<crate::autodiff::ParamId> {
        let mut ids: Vec<_> = n.generators.iter().flat_map(|g| g.params()).map(|p| p.id()).collect();
        ids.push(n.classifier.weight.id());
        ids.push(n.classifier.bias.id());
        ids
    };
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let nv: Vec<Var> = noise.iter().map(|n| g.constant(n)).collect();
        let trace = net.forward_var(&mut g, xv, &nv, Mode::Train, &TrainMask::all(net.layers()))?;
        let loss = g.softmax_cross_entropy(trace.logits, labels)?;
        let grads = g.backward(loss)?;
        params(net)
            .into_iter()
            .map(|id| grads.param(id).cloned().ok_or_else(|| GrffError::Contract("parameter missing from graph".into())))
            .collect::<Result<_>>()?
    };
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut local = net.clone();
                let mut all: Vec<&mut crate::autodiff::Parameter> =
                    local.generators.iter_mut().flat_map(|g| g.params_mut()).collect();
                all.push(&mut local.classifier.weight);
                all.push(&mut local.classifier.bias);
                all[p].value_mut().data_mut()[i] += delta;
                train_loss(&local, x, labels, noise)
            };
            let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
            a_all.push(grad.data()[i]);
            n_all.push(numeric);
        }
    }
    Ok(crate::autodiff::max_relative_error(&a_all, &n_all))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}
