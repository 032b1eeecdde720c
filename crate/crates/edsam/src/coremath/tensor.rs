use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Dense row-major tensor.
///
/// Invariant: `data.len() == shape.iter().product()` and every element is
/// finite. Constructors and mutating operations enforce both.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("Tensor::filled".into()));
        }
        let len = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                format!("{} elements for shape {:?}", expected, shape),
                format!("{} elements", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::from_vec".into()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// 1-D tensor from a slice.
    pub fn vector(data: &[S]) -> Result<Self> {
        Self::from_vec(&[data.len()], data.to_vec())
    }

    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context.into()));
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a + *b)
            .collect();
        Ok(Tensor::from_vec_unchecked(self.shape.clone(), data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a - *b)
            .collect();
        Ok(Tensor::from_vec_unchecked(self.shape.clone(), data))
    }

    pub fn scale(&self, factor: S) -> Self {
        let data = self.data.iter().map(|a| *a * factor).collect();
        Tensor::from_vec_unchecked(self.shape.clone(), data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let data = self.data.iter().map(|a| f(*a)).collect();
        Tensor::from_vec_unchecked(self.shape.clone(), data)
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (a, b)| acc + *a * *b))
    }

    pub fn norm_l2(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, a| acc + *a * *a)
            .sqrt()
    }

    pub fn clamp(&self, lo: S, hi: S) -> Self {
        self.map(|v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        })
    }

    /// Mean squared difference per coordinate.
    pub fn mse(&self, other: &Self) -> Result<S> {
        self.check_same_shape(other)?;
        let n = S::from_usize(self.len().max(1));
        let sum = self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (a, b)| {
                let d = *a - *b;
                acc + d * d
            });
        Ok(sum / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(&[2], vec![1.0, f64::NAN]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::vector(&[1.0, 2.0]).unwrap();
        let b = Tensor::vector(&[3.0, -1.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 1.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-2.0, 3.0]);
        assert_eq!(a.dot(&b).unwrap(), 1.0);
        assert_eq!(a.scale(2.0).data(), &[2.0, 4.0]);
    }

    #[test]
    fn clamp_bounds() {
        let a = Tensor::vector(&[-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(a.clamp(0.0, 1.0).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn works_at_f32() {
        let a = Tensor::<f32>::vector(&[1.0, 2.0]).unwrap();
        assert_eq!(a.norm_l2(), 5.0f32.sqrt());
    }

    proptest! {
        #[test]
        fn add_commutes(xs in proptest::collection::vec(-1e6f64..1e6, 1..32)) {
            let a = Tensor::vector(&xs).unwrap();
            let b = a.scale(0.5);
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
        }
    }
}
