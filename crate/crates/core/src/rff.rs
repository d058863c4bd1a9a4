//! Explicit random Fourier feature maps and the RBF kernel they approximate.
//!
//! For a shift-invariant kernel `k(x, x') = k(x − x')` with spectral density
//! `p(w)`, the map
//!
//! ```text
//! φ(x) = √(1/D) · [cos(w₁ᵀx) … cos(w_Dᵀx), sin(w₁ᵀx) … sin(w_Dᵀx)]
//! ```
//!
//! satisfies `E[φ(x)ᵀφ(x')] = E[cos(wᵀ(x − x'))] = k(x − x')` when the `w_j`
//! are drawn from `p`. For `k(x, x') = exp(−γ‖x − x'‖²)` the density is the
//! Gaussian `N(0, 2γ I)`: its characteristic function at `Δ` is
//! `exp(−½ · 2γ · ‖Δ‖²) = exp(−γ‖Δ‖²)`. That is the sampler behind
//! [`sample_rbf_weights`].
//!
//! Every row of `φ(x)` has unit Euclidean norm regardless of the weights,
//! since each weight contributes `(cos² + sin²)/D`.
//!
//! The image variant replaces `wᵀx` with a valid 2-D convolution, lifts the
//! response through the same scaled cos/sin pair (cos channels first), and
//! max-pools 2×2.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{GrffError, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// `k(x, x') = exp(−γ‖x − x'‖²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbfKernelSpec {
    gamma: f64,
}

impl RbfKernelSpec {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(GrffError::Config(format!("RBF gamma must be positive, got {gamma}")));
        }
        Ok(RbfKernelSpec { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Standard deviation of each spectral weight coordinate, `√(2γ)`.
    pub fn spectral_std(&self) -> f64 {
        (2.0 * self.gamma).sqrt()
    }
}

/// Closed-form RBF kernel value. Panics if the inputs differ in length.
pub fn rbf_kernel(x: &[f64], y: &[f64], spec: &RbfKernelSpec) -> f64 {
    assert_eq!(x.len(), y.len(), "rbf_kernel: inputs differ in dimension");
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-spec.gamma * d2).exp()
}

/// A batch of `D` spectral weights: `D×d` rows for vector inputs, or
/// `D×C×kh×kw` kernels for images.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBatch(Tensor);

impl WeightBatch {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.ndim() != 2 && weights.ndim() != 4 {
            return Err(GrffError::Shape(format!(
                "weights must be D×d or D×C×kh×kw, got {:?}",
                weights.shape()
            )));
        }
        if weights.rows() == 0 {
            return Err(GrffError::Shape("weight batch is empty".into()));
        }
        Ok(WeightBatch(weights))
    }

    pub fn count(&self) -> usize {
        self.0.rows()
    }

    /// Dimensionality of one weight (`d`, or `C·kh·kw` for kernels).
    pub fn dim(&self) -> usize {
        self.0.row_len()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Draws `count` weights in `dim` dimensions from the RBF spectral normal.
pub fn sample_rbf_weights(spec: &RbfKernelSpec, count: usize, dim: usize, rng: &mut impl Rng) -> WeightBatch {
    let std = spec.spectral_std();
    let data = (0..count * dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    WeightBatch(Tensor::new(vec![count, dim], data).expect("sized above"))
}

/// Differentiable vector feature map on a graph: `x[B×d]`, `w[D×d]` → `[B×2D]`.
pub fn rff_map_var(g: &mut Graph<'_>, x: Var, w: Var) -> Result<Var> {
    let d_count = g.value(w).rows();
    let xd = g.value(x).dims2()?.1;
    let wd = g.value(w).dims2()?.1;
    if xd != wd {
        return Err(GrffError::dim("rff_map", g.value(x).shape(), g.value(w).shape()));
    }
    let proj = g.matmul_t(x, w)?;
    g.fourier(proj, (1.0 / d_count as f64).sqrt())
}

/// Vector feature map: `X[B×d]` → `[B×2D]`, cos block then sin block.
pub fn rff_map(x: &Tensor, w: &WeightBatch) -> Result<Tensor> {
    if w.0.ndim() != 2 {
        return Err(GrffError::Shape("rff_map needs D×d weights".into()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x);
    let wv = g.constant(&w.0);
    let out = rff_map_var(&mut g, xv, wv)?;
    Ok(g.value(out).clone())
}

/// Differentiable image feature map: `x[B×C×H×W]`, `k[D×C×5×5]` →
/// `[B×2D×(H−4)/2×(W−4)/2]`.
pub fn conv_rff_map_var(g: &mut Graph<'_>, x: Var, kernels: Var) -> Result<Var> {
    let d_count = g.value(kernels).rows();
    let resp = g.conv2d_valid(x, kernels)?;
    let lifted = g.fourier(resp, (1.0 / d_count as f64).sqrt())?;
    g.maxpool2(lifted)
}

pub fn conv_rff_map(x: &Tensor, kernels: &WeightBatch) -> Result<Tensor> {
    if kernels.0.ndim() != 4 {
        return Err(GrffError::Shape("conv_rff_map needs D×C×kh×kw kernels".into()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x);
    let kv = g.constant(&kernels.0);
    let out = conv_rff_map_var(&mut g, xv, kv)?;
    Ok(g.value(out).clone())
}

/// Random-feature estimate of `k(x, y)` with weights `w`:
/// `(1/D) Σ_j cos(w_jᵀx − w_jᵀy)`, algebraically equal to `φ(x)ᵀφ(y)`.
pub fn feature_kernel(x: &[f64], y: &[f64], w: &WeightBatch) -> f64 {
    let d = w.dim();
    let total: f64 = w
        .0
        .data()
        .chunks(d)
        .map(|wj| {
            let px: f64 = wj.iter().zip(x).map(|(a, b)| a * b).sum();
            let py: f64 = wj.iter().zip(y).map(|(a, b)| a * b).sum();
            (px - py).cos()
        })
        .sum();
    total / w.count() as f64
}

/// Summary of `|φ(x)ᵀφ(y) − k(x, y)|` over a set of pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApproxStats {
    pub max: f64,
    pub mean: f64,
    pub pairs: usize,
}

fn summarize(errors: &[f64]) -> ApproxStats {
    ApproxStats {
        max: errors.iter().copied().fold(0.0, f64::max),
        mean: errors.iter().sum::<f64>() / errors.len().max(1) as f64,
        pairs: errors.len(),
    }
}

/// Errors of the random-feature kernel estimate for row-aligned pairs
/// `(a_i, b_i)` under fixed weights.
pub fn pair_errors(a: &Tensor, b: &Tensor, w: &WeightBatch, spec: &RbfKernelSpec) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.row_len() != w.dim() {
        return Err(GrffError::dim("pair_errors", a.shape(), w.0.shape()));
    }
    Ok(parallel::map_indexed(a.rows(), |i| {
        (feature_kernel(a.row(i), b.row(i), w) - rbf_kernel(a.row(i), b.row(i), spec)).abs()
    }))
}

/// Monte Carlo check of the RBF approximation: samples `D` weights from the
/// spectral normal (seeded) and compares against the closed form over every
/// unordered pair of distinct rows of `x`.
pub fn approximation_error(x: &Tensor, spec: &RbfKernelSpec, d_count: usize, seed: u64) -> Result<ApproxStats> {
    if d_count == 0 {
        return Err(GrffError::Config("D must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = sample_rbf_weights(spec, d_count, x.row_len(), &mut rng);
    let n = x.rows();
    let rows = parallel::map_indexed(n, |i| {
        (i + 1..n)
            .map(|j| (feature_kernel(x.row(i), x.row(j), &w) - rbf_kernel(x.row(i), x.row(j), spec)).abs())
            .collect::<Vec<_>>()
    });
    Ok(summarize(&rows.concat()))
}

/// Full `n×n` matrix of approximation errors for fixed weights, diagonal included.
pub fn error_matrix(x: &Tensor, w: &WeightBatch, spec: &RbfKernelSpec) -> Tensor {
    let n = x.rows();
    let rows = parallel::map_indexed(n, |i| {
        (0..n)
            .map(|j| (feature_kernel(x.row(i), x.row(j), w) - rbf_kernel(x.row(i), x.row(j), spec)).abs())
            .collect::<Vec<_>>()
    });
    Tensor::new(vec![n, n], rows.concat()).expect("n×n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rand::Rng::sample(&mut rng, StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn zero_input_gives_cos_block_only() {
        let w = WeightBatch::new(randn(&[4, 3], 1)).unwrap();
        let z = rff_map(&Tensor::zeros(&[1, 3]), &w).unwrap();
        assert_eq!(z.data(), &[0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn feature_rows_have_unit_norm() {
        let w = WeightBatch::new(randn(&[37, 5], 2)).unwrap();
        let z = rff_map(&randn(&[6, 5], 3), &w).unwrap();
        for i in 0..6 {
            let n: f64 = z.row(i).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let w = WeightBatch::new(randn(&[4, 3], 1)).unwrap();
        assert!(matches!(rff_map(&Tensor::zeros(&[2, 5]), &w), Err(GrffError::Dimension { .. })));
    }

    #[test]
    fn rbf_kernel_definition() {
        let spec = RbfKernelSpec::new(2.0).unwrap();
        assert_eq!(rbf_kernel(&[1.0, 2.0], &[1.0, 2.0], &spec), 1.0);
        // ‖x − x'‖² = 1/γ
        let v = rbf_kernel(&[0.0, 0.0], &[0.5f64.sqrt(), 0.0], &spec);
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        let big = RbfKernelSpec::new(15.0).unwrap();
        assert!(rbf_kernel(&[0.0], &[1.0], &big) < 1e-6);
        assert!(RbfKernelSpec::new(0.0).is_err());
    }

    #[test]
    fn feature_inner_product_approximates_rbf() {
        let spec = RbfKernelSpec::new(0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = sample_rbf_weights(&spec, 4096, 10, &mut rng);
        let a = randn(&[20, 10], 10);
        let b = randn(&[20, 10], 11);
        let za = rff_map(&a, &w).unwrap();
        let zb = rff_map(&b, &w).unwrap();
        for i in 0..20 {
            let dot: f64 = za.row(i).iter().zip(zb.row(i)).map(|(x, y)| x * y).sum();
            assert!((dot - rbf_kernel(a.row(i), b.row(i), &spec)).abs() < 0.1);
            assert!((dot - feature_kernel(a.row(i), b.row(i), &w)).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_map_zero_image_and_shape() {
        let k = WeightBatch::new(randn(&[16, 1, 5, 5], 4)).unwrap();
        let out = conv_rff_map(&Tensor::zeros(&[1, 1, 28, 28]), &k).unwrap();
        assert_eq!(out.shape(), &[1, 32, 12, 12]);
        let plane = 144;
        assert!(out.data()[..16 * plane].iter().all(|&v| v == 0.25));
        assert!(out.data()[16 * plane..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_map_with_delta_kernel_is_pointwise() {
        let mut delta = vec![0.0; 25];
        delta[0] = 1.0;
        let k = WeightBatch::new(Tensor::new(vec![1, 1, 5, 5], delta).unwrap()).unwrap();
        let x = randn(&[1, 1, 6, 6], 5);
        let out = conv_rff_map(&x, &k).unwrap();
        // response r[i][j] = x[i][j] for i, j < 2; pool takes the max over all four
        let px = |i: usize, j: usize| x.data()[i * 6 + j];
        let resp = [px(0, 0), px(0, 1), px(1, 0), px(1, 1)];
        let cmax = resp.iter().map(|v| v.cos()).fold(f64::NEG_INFINITY, f64::max);
        let smax = resp.iter().map(|v| v.sin()).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.shape(), &[1, 2, 1, 1]);
        assert!((out.data()[0] - cmax).abs() < 1e-15);
        assert!((out.data()[1] - smax).abs() < 1e-15);
    }

    #[test]
    fn conv_map_is_pool_of_concat_of_conv() {
        let x = randn(&[2, 3, 10, 8], 6);
        let k = WeightBatch::new(randn(&[4, 3, 5, 5], 7)).unwrap();
        let out = conv_rff_map(&x, &k).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let kv = g.constant(k.tensor());
        let resp = g.conv2d_valid(xv, kv).unwrap();
        let c = g.cos(resp);
        let s = g.sin(resp);
        let (c, s) = (g.scale(c, 0.5), g.scale(s, 0.5));
        let (cv, sv) = (g.value(c).clone(), g.value(s).clone());
        let block = 4 * 6 * 4;
        let mut cat = Vec::new();
        for b in 0..2 {
            cat.extend_from_slice(&cv.data()[b * block..(b + 1) * block]);
            cat.extend_from_slice(&sv.data()[b * block..(b + 1) * block]);
        }
        let catv = g.input(Tensor::new(vec![2, 8, 6, 4], cat).unwrap(), false);
        let pooled = g.maxpool2(catv).unwrap();
        assert!(out.max_abs_diff(g.value(pooled)) < 1e-15);
    }

    #[test]
    fn approximation_error_shrinks_with_d() {
        let spec = RbfKernelSpec::new(0.5).unwrap();
        let x = randn(&[30, 4], 8);
        let means: Vec<f64> = [16, 256, 4096]
            .iter()
            .map(|&d| {
                (0..5)
                    .map(|s| approximation_error(&x, &spec, d, 100 + s).unwrap().mean)
                    .sum::<f64>()
                    / 5.0
            })
            .collect();
        assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
        // ~1/√D scaling: a 16× increase in D should cut the error by roughly 4×
        assert!(means[0] / means[1] > 2.0 && means[1] / means[2] > 2.0, "{means:?}");
    }

    #[test]
    fn diagonal_errors_are_exactly_zero_and_stats_deterministic() {
        let spec = RbfKernelSpec::new(1.0).unwrap();
        let x = randn(&[8, 3], 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = sample_rbf_weights(&spec, 64, 3, &mut rng);
        let m = error_matrix(&x, &w, &spec);
        for i in 0..8 {
            assert_eq!(m.data()[i * 8 + i], 0.0);
        }
        let a = approximation_error(&x, &spec, 64, 5).unwrap();
        let b = approximation_error(&x, &spec, 64, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs, 28);
    }

    proptest! {
        #[test]
        fn unit_norm_and_bounded_inner_products(seed in 0u64..500, d in 1usize..12, big_d in 1usize..40, scale in 0.01f64..20.0) {
            let w = WeightBatch::new(randn(&[big_d, d], seed).map(|v| v * scale)).unwrap();
            let x = randn(&[2, d], seed + 7).map(|v| v * scale);
            let z = rff_map(&x, &w).unwrap();
            let n0: f64 = z.row(0).iter().map(|v| v * v).sum();
            prop_assert!((n0.sqrt() - 1.0).abs() < 1e-9);
            let dot: f64 = z.row(0).iter().zip(z.row(1)).map(|(a, b)| a * b).sum();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&dot));
        }
    }
}
