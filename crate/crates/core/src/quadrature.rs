//! Gauss–Hermite rules for Gaussian expectations.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::scalar::{from_usize, Real};

/// Default number of nodes per dimension when a Gaussian prior is
/// discretised into mixture atoms.
pub const DEFAULT_NODES: usize = 32;

/// Nodes and weights for `E f(Z)`, `Z ~ N(0, 1)`, by Golub–Welsch on the
/// Jacobi matrix of the probabilists' Hermite polynomials. Weights sum to 1.
pub fn gauss_hermite<T: Real>(n: usize) -> (Vec<T>, Vec<T>) {
    assert!(n >= 1, "need at least one node");
    let mut jacobi = DMatrix::<T>::zeros(n, n);
    for k in 1..n {
        let off = from_usize::<T>(k).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(T, T)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite nodes"));
    let total = pairs.iter().fold(T::zero(), |acc, p| acc + p.1);
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

/// Tensor-product Gauss–Hermite atoms for `N(mean, cov)`.
pub fn gaussian_atoms<T: Real>(
    mean: &DVector<T>,
    cov: &DMatrix<T>,
    nodes_per_dim: usize,
) -> Result<(Vec<DVector<T>>, Vec<T>)> {
    let n = mean.len();
    if cov.shape() != (n, n) {
        return Err(Error::InvalidSpec(
            "covariance shape does not match mean".into(),
        ));
    }
    // Singular covariances are allowed: a zero-variance prior collapses to a point.
    let factor = match Cholesky::new(symmetrize(cov)) {
        Some(c) => c.l(),
        None if cov.iter().all(|v| *v == T::zero()) => DMatrix::zeros(n, n),
        None => return Err(Error::NotPositiveDefinite("prior covariance".into())),
    };
    let (x, w) = gauss_hermite::<T>(nodes_per_dim);
    let total = nodes_per_dim.pow(n as u32);
    let mut atoms = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        let z = DVector::from_iterator(n, idx.iter().map(|&i| x[i]));
        atoms.push(mean + &factor * z);
        weights.push(idx.iter().fold(T::one(), |acc, &i| acc * w[i]));
        for d in 0..n {
            idx[d] += 1;
            if idx[d] < nodes_per_dim {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((atoms, weights))
}
