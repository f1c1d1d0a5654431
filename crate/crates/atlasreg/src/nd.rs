//! Minimal dense n-dimensional array, row-major (last axis fastest).
//!
//! This is the storage type shared by images, displacement fields and the
//! autodiff tape. It deliberately stays small: shape + flat data, a few
//! constructors and index helpers. Anything fancier lives at the call site.

use crate::tape::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct NdArray<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> NdArray<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![T::ZERO; len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        NdArray {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: T) -> Self {
        NdArray {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn at_mut(&mut self, idx: &[usize]) -> &mut T {
        let off = self.offset(idx);
        &mut self.data[off]
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> NdArray<U> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> NdArray<U> {
        self.map(|v| U::from_f64(v.to_f64()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }
}

impl NdArray<f64> {
    pub fn max_abs_diff(&self, other: &NdArray<f64>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
