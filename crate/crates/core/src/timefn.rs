//! Deterministic coefficient functions of time.
//!
//! Every time-dependent coefficient the config can express is affine in t:
//! `level + slope * t`. That covers constant atoms, linearly drifting atoms,
//! and the time-varying volatility used in the quadratic-variation checks.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct VecFn<T: Real> {
    pub level: DVector<T>,
    pub slope: DVector<T>,
}

impl<T: Real> VecFn<T> {
    pub fn constant(level: DVector<T>) -> Self {
        let slope = DVector::zeros(level.len());
        Self { level, slope }
    }

    pub fn affine(level: DVector<T>, slope: DVector<T>) -> Self {
        assert_eq!(level.len(), slope.len(), "level/slope length mismatch");
        Self { level, slope }
    }

    pub fn dim(&self) -> usize {
        self.level.len()
    }

    pub fn is_constant(&self) -> bool {
        self.slope.iter().all(|s| *s == T::zero())
    }

    pub fn eval(&self, t: T) -> DVector<T> {
        &self.level + &self.slope * t
    }

    #[inline]
    pub fn eval_into(&self, t: T, out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.level[i] + self.slope[i] * t;
        }
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            level: &self.level * c,
            slope: &self.slope * c,
        }
    }

    pub fn sum(&self, other: &Self) -> Self {
        Self {
            level: &self.level + &other.level,
            slope: &self.slope + &other.slope,
        }
    }

    pub fn zero(n: usize) -> Self {
        Self::constant(DVector::zeros(n))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatFn<T: Real> {
    pub level: DMatrix<T>,
    pub slope: DMatrix<T>,
}

impl<T: Real> MatFn<T> {
    pub fn constant(level: DMatrix<T>) -> Self {
        let slope = DMatrix::zeros(level.nrows(), level.ncols());
        Self { level, slope }
    }

    pub fn affine(level: DMatrix<T>, slope: DMatrix<T>) -> Self {
        assert_eq!(level.shape(), slope.shape(), "level/slope shape mismatch");
        Self { level, slope }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(DMatrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.level.shape()
    }

    pub fn is_constant(&self) -> bool {
        self.slope.iter().all(|s| *s == T::zero())
    }

    pub fn is_zero(&self) -> bool {
        self.is_constant() && self.level.iter().all(|v| *v == T::zero())
    }

    pub fn eval(&self, t: T) -> DMatrix<T> {
        &self.level + &self.slope * t
    }
}
