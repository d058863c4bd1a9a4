//! Principal component projection for feature visualizations.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{GrffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Pca {
    /// `n×k` centered projections.
    pub projected: Tensor,
    /// `F×k` orthonormal principal directions, by decreasing variance.
    pub components: Tensor,
    /// Fraction of total variance along each direction.
    pub explained: Vec<f64>,
}

/// Projects centered `features[n×F]` on the top `k` eigenvectors of the
/// covariance. Each direction is signed so its largest-magnitude loading is
/// positive.
pub fn pca_top_components(features: &Tensor, k: usize) -> Result<Pca> {
    let (n, f) = features.dims2()?;
    if k == 0 || k > n.min(f) {
        return Err(GrffError::Config(format!("cannot take {k} components of {n}×{f} data")));
    }
    let x = DMatrix::from_row_slice(n, f, features.data());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, f, |i, j| x[(i, j)] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let cov = (centered.transpose() * &centered) / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut comps = DMatrix::zeros(f, k);
    let mut explained = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.neg_mut();
        }
        comps.set_column(c, &v);
        explained.push(if total > 0.0 { eig.eigenvalues[idx].max(0.0) / total } else { 0.0 });
    }
    let proj = &centered * &comps;
    let to_tensor = |m: &DMatrix<f64>| {
        let (r, c) = m.shape();
        Tensor::new(vec![r, c], (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect()).expect("shape")
    };
    Ok(Pca {
        projected: to_tensor(&proj),
        components: to_tensor(&comps),
        explained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(n: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, f], (0..n * f).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn embedded_low_rank_is_exact() {
        // 3-D data embedded in 6-D by an orthonormal map
        let low = randn(50, 3, 1);
        let q = [[1.0, 0.0, 0.0], [0.0, 0.6, 0.8], [0.0, -0.8, 0.6]];
        let mut data = Vec::new();
        for i in 0..50 {
            let r = low.row(i);
            let y: Vec<f64> = (0..3).map(|a| (0..3).map(|b| q[a][b] * r[b]).sum::<f64>()).collect();
            data.extend_from_slice(&[y[0] + 5.0, 0.0, y[1], 2.0, y[2], 0.0]);
        }
        let p = pca_top_components(&Tensor::new(vec![50, 6], data.clone()).unwrap(), 3).unwrap();
        assert!((p.explained.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // reconstruction: projected · componentsᵀ + mean == data
        let recon = p.projected.matmul(&p.components.t().unwrap()).unwrap();
        let x = Tensor::new(vec![50, 6], data).unwrap();
        for j in 0..6 {
            let mean: f64 = (0..50).map(|i| x.row(i)[j]).sum::<f64>() / 50.0;
            for i in 0..50 {
                assert!((recon.row(i)[j] + mean - x.row(i)[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn isotropic_cloud_has_equal_shares() {
        let p = pca_top_components(&randn(20_000, 6, 2), 3).unwrap();
        for &r in &p.explained {
            assert!((r - 1.0 / 6.0).abs() < 0.2 / 6.0, "{:?}", p.explained);
        }
        assert!(p.explained.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn components_are_orthonormal_and_signed() {
        let p = pca_top_components(&randn(40, 10, 3), 3).unwrap();
        let g = p.components.t().unwrap().matmul(&p.components).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.data()[i * 3 + j] - f64::from(u8::from(i == j))).abs() < 1e-9);
            }
            let col: Vec<f64> = (0..10).map(|r| p.components.row(r)[i]).collect();
            let lead = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
        assert!(matches!(pca_top_components(&randn(2, 10, 3), 3), Err(GrffError::Config(_))));
    }
}
