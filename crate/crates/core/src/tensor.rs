//! Dense row-major tensors.
//!
//! `Tensor<f64>` is the working type for the network and every test oracle.
//! The scan kernels are also instantiated at `f32` for benchmarking.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Scalar types a tensor can hold.
pub trait Real:
    Float + FromPrimitive + AddAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Gradient buffer, populated by the graph after a backward pass.
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::domain("tensor", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Same data viewed under a different shape.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("zip", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            grad: None,
            requires_grad: false,
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().expect("finite")))
                .collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Same tensor with the gradient buffer dropped.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

impl Tensor<f64> {
    /// Truncated normal at two standard deviations, the usual vision-backbone weight init.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        Self::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.sample(rand_distr::StandardNormal))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.offset(&[1, 0]), 3);
    }

    #[test]
    fn reshape_rejects_count_change() {
        let t = Tensor::<f64>::zeros(&[4, 4]);
        assert!(t.clone().reshape(&[2, 8]).is_ok());
        assert!(t.reshape(&[3, 5]).is_err());
    }

    #[test]
    fn finite_check() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        assert!(t.check_finite("t").is_ok());
        t.data_mut()[1] = f64::NAN;
        assert!(matches!(t.check_finite("t"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::trunc_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    use rand::SeedableRng;
}
