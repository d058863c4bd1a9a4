//! Two-stage baselines: random features with a ridge classifier, kernel
//! alignment scoring of a weight pool, and a plain ReLU MLP.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, argmax_rows, Graph, Parameter, Var};
use crate::data::Dataset;
use crate::error::{GrffError, Result};
use crate::generator::{derive_seed, streams, Linear};
use crate::model::accuracy;
use crate::parallel;
use crate::rff::{rff_map, sample_rbf_weights, RbfKernelSpec, WeightBatch};
use crate::tensor::Tensor;
use crate::trainer::{best_epoch, epoch_batches, EpochRecord, TrainConfig};

/// `γ ∈ {0.5, 0.6, …, 1.4}`
pub fn default_gamma_grid() -> Vec<f64> {
    (5..=14).map(|i| i as f64 / 10.0).collect()
}

pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];
/// Pool size multiplier for alignment-based selection.
pub const DEFAULT_POOL_FACTOR: usize = 10;

/// Affine ±1 scorer on random features.
#[derive(Clone, Debug)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub features: WeightBatch,
}

impl RidgeModel {
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let z = rff_map(x, &self.features)?;
        Ok((0..z.rows())
            .map(|i| self.bias + z.row(i).iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    /// Class 1 for a positive score, class 0 otherwise.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.scores(x)?.into_iter().map(|s| usize::from(s > 0.0)).collect())
    }
}

fn lambda_check(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(GrffError::Config(format!("ridge λ must be positive, got {lambda}")))
    }
}

/// Centered normal equations of a ridge problem on features `z`.
struct Centered {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    z_mean: Vec<f64>,
    y_mean: f64,
}

fn centered_system(z: &Tensor, y: &[f64]) -> Centered {
    let (n, f) = (z.rows(), z.row_len());
    let zm = DMatrix::from_row_slice(n, f, z.data());
    let z_mean: Vec<f64> = (0..f).map(|j| zm.column(j).mean()).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let zc = DMatrix::from_fn(n, f, |i, j| zm[(i, j)] - z_mean[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    Centered {
        gram: zc.transpose() * &zc,
        rhs: zc.transpose() * yc,
        z_mean,
        y_mean,
    }
}

fn solve(sys: &Centered, lambda: f64) -> Result<(Vec<f64>, f64)> {
    let f = sys.gram.nrows();
    let a = &sys.gram + DMatrix::identity(f, f) * lambda;
    let chol = a
        .cholesky()
        .ok_or_else(|| GrffError::Numeric("ridge system is not positive definite".into()))?;
    let w = chol.solve(&sys.rhs);
    let bias = sys.y_mean - w.iter().zip(&sys.z_mean).map(|(a, b)| a * b).sum::<f64>();
    Ok((w.iter().copied().collect(), bias))
}

/// Ridge fit on fixed weights: solves `(Z_cᵀZ_c + λI)w = Z_cᵀ(y − ȳ)` with
/// column-centered features and sets the intercept to `ȳ − z̄ᵀw`.
pub fn fit_ridge_with_weights(train: &Dataset, weights: WeightBatch, lambda: f64) -> Result<RidgeModel> {
    lambda_check(lambda)?;
    let y = train.signed_labels()?;
    let z = rff_map(&train.x, &weights)?;
    let (w, bias) = solve(&centered_system(&z, &y), lambda)?;
    Ok(RidgeModel {
        weights: w,
        bias,
        lambda,
        features: weights,
    })
}

/// Samples `d_count` RBF spectral weights (seeded) and fits ridge on them.
pub fn fit_ridge_rff(train: &Dataset, spec: &RbfKernelSpec, d_count: usize, lambda: f64, seed: u64) -> Result<RidgeModel> {
    if d_count == 0 {
        return Err(GrffError::Config("D must be at least 1".into()));
    }
    lambda_check(lambda)?;
    let w = sample_baseline_weights(spec, d_count, train.dim(), seed);
    fit_ridge_with_weights(train, w, lambda)
}

fn sample_baseline_weights(spec: &RbfKernelSpec, count: usize, dim: usize, seed: u64) -> WeightBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::BASELINE);
    sample_rbf_weights(spec, count, dim, &mut rng)
}

/// `‖(Z_cᵀZ_c + λI)w − Z_cᵀy_c‖ / ‖Z_cᵀy_c‖` on the training data.
pub fn normal_equation_residual(model: &RidgeModel, train: &Dataset) -> Result<f64> {
    let y = train.signed_labels()?;
    let z = rff_map(&train.x, &model.features)?;
    let sys = centered_system(&z, &y);
    let f = sys.gram.nrows();
    let w = DVector::from_column_slice(&model.weights);
    let lhs = (&sys.gram + DMatrix::identity(f, f) * model.lambda) * w;
    Ok((lhs - &sys.rhs).norm() / sys.rhs.norm().max(f64::MIN_POSITIVE))
}

#[derive(Clone, Debug)]
pub struct GridChoice {
    pub gamma: f64,
    pub lambda: f64,
    pub val_acc: f64,
    pub model: RidgeModel,
}

/// Fits every `(γ, λ)` pair and keeps the best validation accuracy (first
/// in grid order on ties). Each γ uses the same seeded normal draw scaled by
/// `√(2γ)`.
pub fn select_ridge_rff(
    train: &Dataset,
    val: &Dataset,
    gammas: &[f64],
    lambdas: &[f64],
    d_count: usize,
    seed: u64,
) -> Result<GridChoice> {
    for &l in lambdas {
        lambda_check(l)?;
    }
    if gammas.is_empty() || lambdas.is_empty() {
        return Err(GrffError::Config("empty γ or λ grid".into()));
    }
    let y = train.signed_labels()?;
    let per_gamma = parallel::map_slice(gammas, |&gamma| -> Result<Vec<GridChoice>> {
        let spec = RbfKernelSpec::new(gamma)?;
        let w = sample_baseline_weights(&spec, d_count, train.dim(), seed);
        let z = rff_map(&train.x, &w)?;
        let sys = centered_system(&z, &y);
        lambdas
            .iter()
            .map(|&lambda| {
                let (weights, bias) = solve(&sys, lambda)?;
                let model = RidgeModel {
                    weights,
                    bias,
                    lambda,
                    features: w.clone(),
                };
                let val_acc = accuracy(&model.predict(&val.x)?, &val.y);
                Ok(GridChoice {
                    gamma,
                    lambda,
                    val_acc,
                    model,
                })
            })
            .collect()
    });
    let mut best: Option<GridChoice> = None;
    for choice in per_gamma.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| choice.val_acc > b.val_acc) {
            best = Some(choice);
        }
    }
    Ok(best.expect("non-empty grid"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// `(Zᵀy)_k² + (Zᵀy)_{k+D}²` for each weight `k`.
    pub per_weight: Vec<f64>,
    /// `Σᵢⱼ yᵢ yⱼ φ(xᵢ)ᵀφ(xⱼ)`
    pub total: f64,
}

/// Kernel–target alignment of features `z[n×2D]` with ±1 labels.
///
/// `Σᵢⱼ yᵢyⱼ zᵢᵀzⱼ = (Σᵢ yᵢzᵢ)ᵀ(Σⱼ yⱼzⱼ) = ‖Zᵀy‖²`, which splits into one
/// non-negative term per weight by pairing its cos and sin coordinates.
pub fn alignment_score(z: &Tensor, y: &[f64]) -> Result<Alignment> {
    let (n, f) = z.dims2()?;
    if y.len() != n {
        return Err(GrffError::dim("alignment_score", z.shape(), &[y.len()]));
    }
    if let Some(bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(GrffError::Label(format!("alignment needs ±1 labels, got {bad}")));
    }
    if f % 2 != 0 {
        return Err(GrffError::Shape(format!("feature width {f} is not 2D")));
    }
    let mut zty = vec![0.0; f];
    for (row, &yi) in z.data().chunks(f).zip(y) {
        for (acc, v) in zty.iter_mut().zip(row) {
            *acc += yi * v;
        }
    }
    let d = f / 2;
    let per_weight: Vec<f64> = (0..d).map(|k| zty[k] * zty[k] + zty[k + d] * zty[k + d]).collect();
    let total = per_weight.iter().sum();
    Ok(Alignment { per_weight, total })
}

/// Keeps the `k` pool weights with the highest alignment scores on the
/// training set, in rank order; equal scores keep pool order.
pub fn select_features_by_alignment(pool: &WeightBatch, train: &Dataset, k: usize) -> Result<WeightBatch> {
    if k == 0 || k > pool.count() {
        return Err(GrffError::Config(format!("cannot select {k} of {} pool weights", pool.count())));
    }
    let z = rff_map(&train.x, pool)?;
    let scores = alignment_score(&z, &train.signed_labels()?)?.per_weight;
    let mut order: Vec<usize> = (0..pool.count()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    WeightBatch::new(pool.tensor().select_rows(&order))
}

/// Pool of `pool_size` spectral weights, alignment selection of `k`, ridge fit.
pub fn fit_aligned_ridge(
    train: &Dataset,
    spec: &RbfKernelSpec,
    k: usize,
    pool_size: usize,
    lambda: f64,
    seed: u64,
) -> Result<RidgeModel> {
    let pool = sample_baseline_weights(spec, pool_size, train.dim(), derive_seed(seed, 1));
    let chosen = select_features_by_alignment(&pool, train, k)?;
    fit_ridge_with_weights(train, chosen, lambda)
}

/// `(γ, λ)` grid search for the aligned variant.
pub fn select_aligned_ridge(
    train: &Dataset,
    val: &Dataset,
    gammas: &[f64],
    lambdas: &[f64],
    k: usize,
    pool_size: usize,
    seed: u64,
) -> Result<GridChoice> {
    let per_gamma = parallel::map_slice(gammas, |&gamma| -> Result<Vec<GridChoice>> {
        let spec = RbfKernelSpec::new(gamma)?;
        let pool = sample_baseline_weights(&spec, pool_size, train.dim(), derive_seed(seed, 1));
        let chosen = select_features_by_alignment(&pool, train, k)?;
        let y = train.signed_labels()?;
        let z = rff_map(&train.x, &chosen)?;
        let sys = centered_system(&z, &y);
        lambdas
            .iter()
            .map(|&lambda| {
                lambda_check(lambda)?;
                let (weights, bias) = solve(&sys, lambda)?;
                let model = RidgeModel {
                    weights,
                    bias,
                    lambda,
                    features: chosen.clone(),
                };
                let val_acc = accuracy(&model.predict(&val.x)?, &val.y);
                Ok(GridChoice {
                    gamma,
                    lambda,
                    val_acc,
                    model,
                })
            })
            .collect()
    });
    let mut best: Option<GridChoice> = None;
    for choice in per_gamma.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| choice.val_acc > b.val_acc) {
            best = Some(choice);
        }
    }
    best.ok_or_else(|| GrffError::Config("empty γ or λ grid".into()))
}

/// ReLU multilayer perceptron with a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(GrffError::Config(format!("invalid MLP widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(streams::INIT);
        Ok(Mlp {
            widths: widths.to_vec(),
            layers: widths.windows(2).map(|w| Linear::init(w[0], w[1], &mut rng)).collect(),
        })
    }

    /// `[d, D₁, …, D_K, classes]`
    pub fn matching_widths(input_dim: usize, d_list: &[usize], classes: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend_from_slice(d_list);
        w.push(classes);
        w
    }

    pub fn forward_var<'a>(&'a self, g: &mut Graph<'a>, x: Var, trainable: bool) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(g, h, trainable)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward_var(&mut g, xv, false)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

pub struct MlpOutcome {
    pub best: Mlp,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn mean_ce(logits: &Tensor, y: &[usize]) -> f64 {
    let c = logits.row_len();
    let total: f64 = logits
        .data()
        .chunks(c)
        .zip(y)
        .map(|(row, &t)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[t]
        })
        .sum();
    total / y.len().max(1) as f64
}

/// Adam + cross-entropy for the schedule's total epoch budget, keeping the
/// best-validation snapshot.
pub fn fit_mlp_baseline(train: &Dataset, val: &Dataset, widths: &[usize], config: &TrainConfig) -> Result<MlpOutcome> {
    config.validate()?;
    if widths.first() != Some(&train.dim()) || widths.last() != Some(&train.num_classes) {
        return Err(GrffError::Config(format!(
            "MLP widths {widths:?} do not match {}-dimensional {}-class data",
            train.dim(),
            train.num_classes
        )));
    }
    let mut mlp = Mlp::new(widths, config.seed)?;
    let mut history = Vec::new();
    let mut best: Option<(Mlp, f64)> = None;
    for epoch in 0..config.schedule.total() {
        let mut loss_sum = 0.0;
        let mut correct = 0.0;
        for batch in epoch_batches(train.len(), config.batch_size, config.seed, epoch) {
            let xb = train.x.select_rows(&batch);
            let yb: Vec<usize> = batch.iter().map(|&i| train.y[i]).collect();
            let (loss, acc, grads) = {
                let mut g = Graph::new();
                let xv = g.constant(&xb);
                let logits = mlp.forward_var(&mut g, xv, true)?;
                let loss = g.softmax_cross_entropy(logits, &yb)?;
                let acc = accuracy(&argmax_rows(g.value(logits)), &yb);
                (g.value(loss).item(), acc, g.backward(loss)?)
            };
            if !loss.is_finite() {
                return Err(GrffError::Numeric(format!("non-finite MLP loss in epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            correct += acc * batch.len() as f64;
            let mut params = mlp.params_mut();
            for p in params.iter_mut() {
                p.clear_grad();
                grads.accumulate_into(p);
            }
            adam_step(&mut params, &config.adam)?;
        }
        let val_logits = mlp.logits(&val.x)?;
        let rec = EpochRecord {
            epoch,
            phase: 1,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct / train.len() as f64,
            val_loss: mean_ce(&val_logits, &val.y),
            val_acc: accuracy(&argmax_rows(&val_logits), &val.y),
        };
        if best.as_ref().is_none_or(|b| rec.val_acc > b.1) {
            best = Some((mlp.clone(), rec.val_acc));
        }
        history.push(rec);
    }
    let best_epoch = best_epoch(&history).expect("non-empty");
    Ok(MlpOutcome {
        best: best.expect("non-empty").0,
        best_epoch,
        history,
    })
}
