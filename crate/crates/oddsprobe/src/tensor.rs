use crate::error::{Error, Result};

/// Dense row-major f64 tensor. Rank 0 denotes a scalar (one element, empty
/// shape). Tensors are immutable values: operations return fresh tensors, so
/// shared references are safe across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that the element count matches the shape
    /// and that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} holds {} elements, got {}", shape, expected, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Tensor::new element {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by library arithmetic.
    /// Finiteness is checked in debug builds only; release builds rely on the
    /// graph executor's output checks.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor entry");
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// One-hot vector of the given length.
    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::ClassOutOfRange {
                class: index,
                num_classes: len,
            });
        }
        let mut data = vec![0.0; len];
        data[index] = 1.0;
        Ok(Tensor {
            shape: vec![len],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Extracts the value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape(
                "Tensor::item",
                format!("expected scalar, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn map_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, "Tensor::map_with")?;
        Ok(Tensor::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    fn check_same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                context,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "Tensor::add")?;
        Ok(Tensor::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "Tensor::sub")?;
        Ok(Tensor::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        ))
    }

    /// self + scale * other
    pub fn add_scaled(&self, other: &Tensor, scale: f64) -> Result<Tensor> {
        self.check_same_shape(other, "Tensor::add_scaled")?;
        Ok(Tensor::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + scale * b)
                .collect(),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "Tensor::dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Clamps every coordinate into the valid input domain [0, 1].
    pub fn clamp01(&self) -> Tensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }
}

pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.l2_norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.item().unwrap(), 2.5);
        assert!(Tensor::vector(vec![1.0, 2.0]).item().is_err());
    }

    #[test]
    fn arithmetic_matches_by_hand() {
        let a = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let b = Tensor::vector(vec![0.5, 4.0, -1.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[1.5, 2.0, 2.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[0.5, -6.0, 4.0]);
        assert_eq!(a.add_scaled(&b, 2.0).unwrap().data(), &[2.0, 6.0, 1.0]);
        assert_eq!(a.dot(&b).unwrap(), 0.5 - 8.0 - 3.0);
        assert_eq!(a.linf_norm(), 3.0);
        let c = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(c.l2_norm(), 5.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert!(a.add(&b).is_err());
        assert!(a.dot(&b).is_err());
    }

    #[test]
    fn clamp01_clips_both_ends() {
        let t = Tensor::vector(vec![-0.5, 0.25, 1.5]);
        assert_eq!(t.clamp01().data(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn one_hot_bounds() {
        let h = Tensor::one_hot(4, 2).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(Tensor::one_hot(4, 4).is_err());
    }
}
