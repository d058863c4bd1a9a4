//! Gradient-sign attacks on the input and the fixed-versus-resampled noise
//! evaluation.

use std::fs;
use std::path::Path;

use crate::autodiff::{argmax_rows, softmax_rows, Graph, Var};
use crate::data::write_idx_images;
use crate::error::{GrffError, Result};
use crate::model::{accuracy, GrffNetwork, PIXEL_RANGE};
use crate::parallel;
use crate::tensor::Tensor;

/// Rows per attack batch. Batches are attacked independently.
pub const ATTACK_CHUNK: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    /// Max-norm budget in input units.
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub lower: f64,
    pub upper: f64,
}

/// `min{ε + 4, ⌊1.25ε⌋}`, at least one step for any positive budget.
pub fn iteration_count(epsilon: f64) -> usize {
    if epsilon <= 0.0 {
        return 0;
    }
    let a = (epsilon + 4.0).floor();
    let b = (1.25 * epsilon).floor();
    (a.min(b) as usize).max(1)
}

impl AttackConfig {
    /// Pixel-range attack with `α = 1` and the derived iteration count.
    pub fn new(epsilon: f64) -> Result<Self> {
        let c = AttackConfig {
            epsilon,
            alpha: 1.0,
            iterations: iteration_count(epsilon),
            lower: 0.0,
            upper: PIXEL_RANGE,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(GrffError::Config(format!("ε must be non-negative, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(GrffError::Config(format!("α must be positive, got {}", self.alpha)));
        }
        if self.epsilon > 0.0 && self.iterations == 0 {
            return Err(GrffError::Config("a positive ε needs at least one iteration".into()));
        }
        if !(self.lower < self.upper) {
            return Err(GrffError::Config(format!("empty value range [{}, {}]", self.lower, self.upper)));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `∇ₓ` of the mean cross-entropy of `labels` at `x`, with the generated
/// weights held constant.
pub fn input_gradient(net: &GrffNetwork, x: &Tensor, labels: &[usize], weights: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone(), true);
    let wv: Vec<Var> = weights.iter().map(|w| g.constant(w)).collect();
    let (logits, _) = net.apply_var(&mut g, xv, &wv, false)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let mut grads = g.backward(loss)?;
    grads
        .take(xv)
        .ok_or_else(|| GrffError::Contract("input is not on the loss path".into()))
}

/// Classes with the lowest predicted probability (lowest index on ties).
pub fn least_likely(net: &GrffNetwork, x: &Tensor, weights: &[Tensor]) -> Result<Vec<usize>> {
    let logits = net.logits_with_weights(x, weights)?;
    let c = logits.row_len();
    let probs = softmax_rows(logits.data(), c);
    Ok(probs
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

fn chunked<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor, &[usize]) -> Result<Tensor> + Sync + Send,
{
    let n = x.rows();
    if n == 0 {
        return Ok(x.clone());
    }
    let starts: Vec<usize> = (0..n).step_by(ATTACK_CHUNK).collect();
    let parts = parallel::map_slice(&starts, |&s| {
        let idx: Vec<usize> = (s..(s + ATTACK_CHUNK).min(n)).collect();
        f(&x.select_rows(&idx), &idx)
    });
    Tensor::concat_rows(&parts.into_iter().collect::<Result<Vec<_>>>()?)
}

/// One step of size `ε` along the gradient sign of the loss on `y_true`,
/// clamped to the value range.
pub fn fgsm_attack(net: &GrffNetwork, x: &Tensor, y_true: &[usize], config: &AttackConfig, noise: &[Tensor]) -> Result<Tensor> {
    config.validate()?;
    if y_true.len() != x.rows() {
        return Err(GrffError::dim("fgsm_attack", x.shape(), &[y_true.len()]));
    }
    if config.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let weights = net.weights(noise)?;
    chunked(x, |xb, idx| {
        let yb: Vec<usize> = idx.iter().map(|&i| y_true[i]).collect();
        let grad = input_gradient(net, xb, &yb, &weights)?;
        let data = xb
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| (v + config.epsilon * sign(g)).clamp(config.lower, config.upper))
            .collect();
        Tensor::new(xb.shape().to_vec(), data)
    })
}

/// Iterative least-likely-class attack. The target class comes from the
/// clean prediction and every step uses the same noise batches.
pub fn iter_ll_attack(net: &GrffNetwork, x: &Tensor, config: &AttackConfig, noise: &[Tensor]) -> Result<Tensor> {
    config.validate()?;
    if config.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let weights = net.weights(noise)?;
    chunked(x, |xb, _| {
        let target = least_likely(net, xb, &weights)?;
        let lo: Vec<f64> = xb.data().iter().map(|&v| (v - config.epsilon).max(config.lower)).collect();
        let hi: Vec<f64> = xb.data().iter().map(|&v| (v + config.epsilon).min(config.upper)).collect();
        let mut cur = xb.clone();
        for _ in 0..config.iterations {
            let grad = input_gradient(net, &cur, &target, &weights)?;
            for (i, (v, &g)) in cur.data_mut().iter_mut().zip(grad.data()).enumerate() {
                *v = (*v - config.alpha * sign(g)).clamp(lo[i], hi[i]);
            }
        }
        Ok(cur)
    })
}

#[derive(Clone, Debug)]
pub struct RobustnessReport {
    pub epsilon: f64,
    pub iterations: usize,
    /// Clean accuracy under the attacked noise.
    pub acc_clean: f64,
    /// Adversarial accuracy under the attacked noise.
    pub acc_fixed: f64,
    /// Adversarial accuracy under independent noise.
    pub acc_resampled: f64,
    pub adversarial: Tensor,
    pub pred_fixed: Vec<usize>,
    pub pred_resampled: Vec<usize>,
}

/// Clean accuracy with noise `N₁` (the frozen batches or the prediction
/// stream of `seed`), an iterative least-likely attack against `N₁`, then
/// adversarial accuracy with `N₁` and with fresh noise `N₂` from the
/// resampling stream. `ensemble > 1` replaces the single `N₂` draw by a
/// majority vote over that many draws.
pub fn robustness_protocol(
    net: &GrffNetwork,
    x: &Tensor,
    y: &[usize],
    config: &AttackConfig,
    seed: u64,
    ensemble: usize,
) -> Result<RobustnessReport> {
    if y.len() != x.rows() {
        return Err(GrffError::dim("robustness_protocol", x.shape(), &[y.len()]));
    }
    let n1 = net.predict_noise(seed);
    let clean = net.predict_with_noise(x, &n1)?;
    let adversarial = iter_ll_attack(net, x, config, &n1)?;
    let pred_fixed = net.predict_with_noise(&adversarial, &n1)?;
    let pred_resampled = if ensemble > 1 {
        net.predict_ensemble(&adversarial, seed, ensemble)?
    } else {
        net.predict_with_noise(&adversarial, &net.resample_noise(seed))?
    };
    Ok(RobustnessReport {
        epsilon: config.epsilon,
        iterations: config.iterations,
        acc_clean: accuracy(&clean, y),
        acc_fixed: accuracy(&pred_fixed, y),
        acc_resampled: accuracy(&pred_resampled, y),
        adversarial,
        pred_fixed,
        pred_resampled,
    })
}

/// Writes `<stem>.idx.gz` with the adversarial images and `<stem>.csv` with
/// `index,true,pred_fixed,pred_resampled`.
pub fn write_adversarial_dump(dir: &Path, stem: &str, report: &RobustnessReport, y_true: &[usize]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_idx_images(&report.adversarial, &dir.join(format!("{stem}.idx.gz")))?;
    let rows = y_true
        .iter()
        .enumerate()
        .map(|(i, &t)| [i, t, report.pred_fixed[i], report.pred_resampled[i]].map(|v| v.to_string()));
    let bytes = crate::io::csv_bytes(&["index", "true", "pred_fixed", "pred_resampled"], rows)?;
    crate::io::write_atomic(&dir.join(format!("{stem}.csv")), &bytes)
}

/// Predictions under the attacked noise after the attack, a convenience for
/// sweeping `ε` with one model.
pub fn attacked_predictions(net: &GrffNetwork, x_adv: &Tensor, noise: &[Tensor]) -> Result<Vec<usize>> {
    let w = net.weights(noise)?;
    Ok(argmax_rows(&net.logits_with_weights(x_adv, &w)?))
}
