//! Vector-space operations over structured parameter sets.

use crate::tensor::Tensor;

/// Uniform access to the tensors of a parameter or delta set, in a fixed
/// order. The order is also the serialization order.
pub trait TensorSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

impl TensorSet for Tensor {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![self]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![self]
    }
}

/// Linear algebra on any [`TensorSet`], treating it as one flat vector.
///
/// Binary operations panic on structural mismatch: two sets of the same
/// type built for the same model always agree, so a mismatch is a bug.
pub trait ParamVector: TensorSet + Clone {
    fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha * other`.
    fn axpy(&mut self, alpha: f64, other: &Self) {
        let others = other.tensors();
        let mine = self.tensors_mut();
        assert_eq!(mine.len(), others.len(), "parameter structure mismatch");
        for (a, b) in mine.into_iter().zip(others) {
            a.axpy(alpha, b).expect("parameter structure mismatch");
        }
    }

    fn add_assign(&mut self, other: &Self) {
        let others = other.tensors();
        let mine = self.tensors_mut();
        assert_eq!(mine.len(), others.len(), "parameter structure mismatch");
        for (a, b) in mine.into_iter().zip(others) {
            a.add_assign(b).expect("parameter structure mismatch");
        }
    }

    fn scale_mut(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale_mut(s);
        }
    }

    fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale_mut(s);
        out
    }

    fn plus(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    fn minus(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    fn dot(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.dot(b).expect("parameter structure mismatch"))
            .sum()
    }

    fn norm_sq(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_sq()).sum()
    }

    fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Largest entrywise absolute difference.
    fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    fn bits_equal(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.shape() == y.shape()
                    && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }
}

impl<T: TensorSet + Clone> ParamVector for T {}
