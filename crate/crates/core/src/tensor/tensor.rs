use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major tensor.
///
/// `grad` is only populated for parameters after a backward pass has been
/// written back into a [`ParamStore`](super::ParamStore).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Input(format!(
                "tensor dims must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// Internal constructor for kernels whose output shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// Normal samples redrawn until they fall inside `[-2 std, 2 std]`.
    pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break T::lit(z * std);
                }
            })
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of size {dim}");
            off = off * dim + ix;
        }
        self.data[off]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
                .fold(0.0, f64::max),
        )
    }

    /// Selects rows of a 2-D tensor in the given order.
    pub fn gather_rows(&self, order: &[usize]) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::shape("gather_rows", &self.shape, &[order.len()]));
        }
        let cols = self.shape[1];
        let mut data = Vec::with_capacity(order.len() * cols);
        for &r in order {
            if r >= self.shape[0] {
                return Err(Error::Input(format!("row {r} out of range")));
            }
            data.extend_from_slice(&self.data[r * cols..(r + 1) * cols]);
        }
        Ok(Self::from_parts(vec![order.len(), cols], data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f32>::from_vec(&[2, 3], (0..6).map(|x| x as f32).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
    }

    #[test]
    fn trunc_normal_stays_in_band() {
        let mut rng = rand::thread_rng();
        let t = Tensor::<f64>::trunc_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= 0.04));
    }
}
