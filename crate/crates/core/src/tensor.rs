//! Dense row-major tensors and the small set of kernels the denoiser needs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Standard-normal entries drawn from `rng` in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "expected {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    /// Number of elements per leading-axis entry.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], row);
        }
    }
}

/// `out[m×k] += dy[m×n] · w[k×n]ᵀ`
pub(crate) fn matmul_bt_acc<T: Scalar>(dy: &[T], w: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyi = &dy[i * n..(i + 1) * n];
        let oi = &mut out[i * k..(i + 1) * k];
        for (p, o) in oi.iter_mut().enumerate() {
            *o += dot(dyi, &w[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k×n] += x[m×k]ᵀ · dy[m×n]`
pub(crate) fn matmul_at_acc<T: Scalar>(x: &[T], dy: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyi = &dy[i * n..(i + 1) * n];
        let xi = &x[i * k..(i + 1) * k];
        for (p, &xv) in xi.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            axpy(xv, dyi, &mut out[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive_loops() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // aᵀ·c has shape k×n
        let mut at = vec![0.0; k * n];
        matmul_at_acc(&a, &c, &mut at, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((at[p * n + j] - want).abs() < 1e-12);
            }
        }
        // c·bᵀ has shape m×k
        let mut bt = vec![0.0; m * k];
        matmul_bt_acc(&c, &b, &mut bt, m, k, n);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((bt[i * k + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.row_len(), 3);
        assert!(t.reshape(&[3, 2]).is_ok());
    }
}
