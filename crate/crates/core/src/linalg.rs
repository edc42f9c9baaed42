//! Small dense helpers on top of nalgebra. Dimensions here are the number of
//! stocks or the embedding dimension, so everything is O(n^3) with tiny n.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = lit::<T>(0.5);
    (m + m.transpose()) * half
}

pub fn min_eigenvalue<T: Real>(sym: &DMatrix<T>) -> T {
    if sym.nrows() == 1 {
        return sym[(0, 0)];
    }
    let eig = SymmetricEigen::new(symmetrize(sym));
    eig.eigenvalues
        .iter()
        .copied()
        .fold(T::max_value().unwrap(), |a, b| a.min(b))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse<T: Real>(m: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        if !(v > T::zero()) || !v.is_finite() {
            return Err(Error::NotPositiveDefinite(format!("{what}: {}", to_f64(v))));
        }
        return Ok(DMatrix::from_element(1, 1, T::one() / v));
    }
    Cholesky::new(symmetrize(m))
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// log det of a symmetric positive definite matrix.
pub fn spd_log_det<T: Real>(m: &DMatrix<T>, what: &str) -> Result<T> {
    let chol =
        Cholesky::new(symmetrize(m)).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    let two = lit::<T>(2.0);
    Ok(chol
        .l()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, d| acc + two * d.ln()))
}

pub fn is_positive_definite<T: Real>(m: &DMatrix<T>) -> bool {
    m.is_square() && min_eigenvalue(m) > T::zero()
}

/// `x^T m y` without allocating.
#[inline]
pub fn bilinear<T: Real>(x: &[T], m: &DMatrix<T>, y: &[T]) -> T {
    let n = x.len();
    let mut acc = T::zero();
    for i in 0..n {
        let xi = x[i];
        if xi == T::zero() {
            continue;
        }
        let mut row = T::zero();
        for j in 0..n {
            row += m[(i, j)] * y[j];
        }
        acc += xi * row;
    }
    acc
}

/// `out = m * x` without allocating.
#[inline]
pub fn mat_vec_into<T: Real>(m: &DMatrix<T>, x: &[T], out: &mut [T]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (j, xj) in x.iter().enumerate() {
            acc += m[(i, j)] * *xj;
        }
        *o = acc;
    }
}

pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (a, b)| acc + *a * *b)
}

pub fn norm<T: Real>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

/// Frobenius norm.
pub fn frobenius<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt()
}

pub fn to_dvector<T: Real>(x: &[T]) -> DVector<T> {
    DVector::from_column_slice(x)
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let max = x
        .iter()
        .copied()
        .fold(T::min_value().unwrap(), |a, b| a.max(b));
    if !max.is_finite() {
        return max;
    }
    let sum = x.iter().fold(T::zero(), |acc, v| acc + (*v - max).exp());
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn spd_inverse_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(spd_inverse(&m, "m").is_err());
        let one = DMatrix::from_element(1, 1, -1.0);
        assert!(spd_inverse(&one, "one").is_err());
    }

    #[test]
    fn spd_inverse_and_log_det() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = spd_inverse(&m, "m").unwrap();
        let id = &m * &inv;
        assert_relative_eq!(id, DMatrix::identity(2, 2), epsilon = 1e-12);
        assert_relative_eq!(spd_log_det(&m, "m").unwrap(), 11.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn min_eigenvalue_matches_closed_form() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert_relative_eq!(min_eigenvalue(&m), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn works_in_single_precision() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0f32, 0.5, 0.5, 1.0]);
        let inv = spd_inverse(&m, "m").unwrap();
        let id = &m * &inv;
        assert!((id[(0, 0)] - 1.0).abs() < 1e-5);
        assert!(bilinear(&[1.0f32, 1.0], &m, &[1.0, 1.0]) == 4.0);
    }

    proptest! {
        #[test]
        fn log_sum_exp_matches_naive(xs in proptest::collection::vec(-30.0f64..30.0, 1..8)) {
            let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
            prop_assert!((log_sum_exp(&xs) - naive).abs() < 1e-10);
        }

        #[test]
        fn log_sum_exp_is_shift_equivariant(xs in proptest::collection::vec(-5.0f64..5.0, 1..8), c in -800.0f64..800.0) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&xs) - c).abs() < 1e-9);
        }
    }
}
