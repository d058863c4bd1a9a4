use crate::error::Result;
use crate::tensor::Tensor;

use super::{Graph, Var};

/// Central-difference step used throughout the test suite.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Largest entry-wise relative error `|a−n| / max(|a|, |n|, 1e-4)`.
///
/// The floor keeps entries whose true gradient is essentially zero from
/// dominating through finite-difference round-off.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Compares the reverse-mode gradient of a scalar function of one tensor
/// with central differences of step `h`; returns the max relative error.
pub fn gradcheck<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.input(theta.clone(), true);
        let loss = f(&mut g, x)?;
        let grads = g.backward(loss)?;
        grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(theta.shape()))
    };
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(t, false);
        let loss = f(&mut g, x)?;
        Ok(g.value(loss).item())
    };
    let mut numeric = vec![0.0; theta.len()];
    for (i, n) in numeric.iter_mut().enumerate() {
        let mut plus = theta.clone();
        plus.data_mut()[i] += h;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= h;
        *n = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(max_relative_error(analytic.data(), &numeric))
}
