//! Truncated, normalized Gaussian kernels and separable convolution with
//! clamp-to-edge borders, plus the exact transpose of that operator.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Dims, Volume};
use crate::scalar::{Lane, Real};

/// Symmetric 1-D Gaussian of standard deviation `sigma` voxels, truncated at
/// radius `ceil(3 sigma)` and normalized to unit sum.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel<T> {
    sigma: f64,
    weights: Vec<T>,
}

impl<T: Real> GaussianKernel<T> {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian sigma must be positive, got {sigma}"
            )));
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let raw: Vec<f64> = (-radius..=radius)
            .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        Ok(GaussianKernel {
            sigma,
            weights: raw.into_iter().map(|w| T::of(w / total)).collect(),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.weights.len() / 2
    }

    /// Weights for offsets `-radius..=radius`.
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Convolve along every axis in turn.
    pub(crate) fn smooth<E: Lane<T>>(&self, data: &[E], dims: Dims) -> Vec<E> {
        let a = convolve_axis(data, dims, 0, &self.weights);
        let b = convolve_axis(&a, dims, 1, &self.weights);
        convolve_axis(&b, dims, 2, &self.weights)
    }

    /// Transpose of [`GaussianKernel::smooth`].
    pub(crate) fn smooth_transpose<E: Lane<T>>(&self, data: &[E], dims: Dims) -> Vec<E> {
        let a = convolve_axis_transpose(data, dims, 2, &self.weights);
        let b = convolve_axis_transpose(&a, dims, 1, &self.weights);
        convolve_axis_transpose(&b, dims, 0, &self.weights)
    }
}

/// Gaussian smoothing of a scalar volume, clamp-to-edge borders.
pub fn gaussian_smooth_volume<T: Real>(vol: &Volume<T>, sigma: f64) -> Result<Volume<T>> {
    let kernel = GaussianKernel::<T>::new(sigma)?;
    vol.with_data(kernel.smooth(vol.data(), vol.dims()))
}

/// `out[i] = sum_t w[t] * in[clamp(i + t)]` along `axis`.
pub(crate) fn convolve_axis<T: Real, E: Lane<T>>(
    data: &[E],
    dims: Dims,
    axis: usize,
    weights: &[T],
) -> Vec<E> {
    let n = dims[axis] as isize;
    let stride = dims.stride(axis);
    let r = (weights.len() / 2) as isize;
    (0..data.len())
        .into_par_iter()
        .map(|idx| {
            let c = dims.coords(idx)[axis] as isize;
            let line0 = idx - c as usize * stride;
            weights.iter().enumerate().fold(E::zero(), |acc, (t, &w)| {
                let pos = (c + t as isize - r).clamp(0, n - 1) as usize;
                acc.axpy(w, data[line0 + pos * stride])
            })
        })
        .collect()
}

/// Exact transpose of [`convolve_axis`], evaluated as a gather: interior
/// nodes see the mirrored kernel, the two end nodes also collect every tap
/// that was clamped onto them.
pub(crate) fn convolve_axis_transpose<T: Real, E: Lane<T>>(
    data: &[E],
    dims: Dims,
    axis: usize,
    weights: &[T],
) -> Vec<E> {
    let n = dims[axis] as isize;
    let stride = dims.stride(axis);
    let r = (weights.len() / 2) as isize;
    let w = |t: isize| weights[(t + r) as usize];
    (0..data.len())
        .into_par_iter()
        .map(|idx| {
            let j = dims.coords(idx)[axis] as isize;
            let line0 = idx - j as usize * stride;
            let at = |i: isize| data[line0 + i as usize * stride];
            let mut acc = E::zero();
            if n == 1 {
                let total = weights.iter().fold(T::zero(), |s, &x| s + x);
                return acc.axpy(total, at(0));
            }
            if j == 0 {
                // taps with i + t <= 0
                for i in 0..=r.min(n - 1) {
                    let coeff = (-r..=-i).fold(T::zero(), |s, t| s + w(t));
                    acc = acc.axpy(coeff, at(i));
                }
            } else if j == n - 1 {
                // taps with i + t >= n - 1
                for i in (n - 1 - r).max(0)..n {
                    let coeff = ((n - 1 - i)..=r).fold(T::zero(), |s, t| s + w(t));
                    acc = acc.axpy(coeff, at(i));
                }
            } else {
                for i in (j - r).max(0)..=(j + r).min(n - 1) {
                    acc = acc.axpy(w(j - i), at(i));
                }
            }
            acc
        })
        .collect()
}
