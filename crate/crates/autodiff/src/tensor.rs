use crate::Scalar;

/// Dense row-major tensor.
///
/// Invariant: `dims.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    /// Builds a tensor from raw data; panics if the element count does not
    /// match the shape. All internal call sites construct shapes statically.
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not hold {} elements",
            dims,
            data.len()
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut() -> T) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(|_| f()).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.dims);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy elementwise cast between scalar types.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_len() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert_eq!(t.dims(), &[2, 3]);
        assert_eq!(t.len(), 6);
        assert!(!t.is_scalar());
        assert!(t.all_finite());
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_bad_count() {
        let _ = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0]);
    }

    #[test]
    fn cast_roundtrip() {
        let t = Tensor::from_vec(&[3], vec![1.5f64, -2.0, 0.25]);
        let f: Tensor<f32> = t.cast();
        let b: Tensor<f64> = f.cast();
        assert_eq!(t, b);
    }
}
