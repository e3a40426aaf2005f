//! Normalized gradient information and its spatially encoded (multi-scale,
//! Gaussian-accumulated) form, with the cosine similarity loss between two
//! encodings.
//!
//! For each scale `sigma_k` the encoding of an image `I` is
//!
//! ```text
//! SG_k(x) = sum_p N(p | x, sigma_k^2) * grad I(p) / |grad I(p)|
//! ```
//!
//! realized as a truncated separable Gaussian with clamp-to-edge borders.
//! Voxels whose gradient norm falls below `eps` carry the zero vector, and
//! zero vectors contribute a neutral cosine of 0 to the loss.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Dims, VectorField, Volume};
use crate::scalar::{dot3, neumaier_sum, norm3, Real};
use crate::smooth::GaussianKernel;
use crate::warp::ensure_intensity;

/// Gradient-norm and cosine-norm guard used when none is given.
pub const DEFAULT_EPS: f64 = 1e-6;

/// One smoothed unit-gradient field per scale, in the order the scales were given.
#[derive(Clone, Debug, PartialEq)]
pub struct SegiField<T> {
    sigmas: Vec<f64>,
    fields: Vec<VectorField<T>>,
}

impl<T: Real> SegiField<T> {
    pub fn new(sigmas: Vec<f64>, fields: Vec<VectorField<T>>) -> Result<Self> {
        if sigmas.len() != fields.len() || sigmas.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} sigmas for {} fields",
                sigmas.len(),
                fields.len()
            )));
        }
        let dims = fields[0].dims();
        for f in &fields[1..] {
            dims.ensure_same(&f.dims(), "segi field members")?;
        }
        Ok(SegiField { sigmas, fields })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn fields(&self) -> &[VectorField<T>] {
        &self.fields
    }

    pub fn dims(&self) -> Dims {
        self.fields[0].dims()
    }
}

fn check_gradient_dims(dims: Dims) -> Result<()> {
    if dims.min_dim() < 2 {
        return Err(Error::VolumeTooSmall {
            dims,
            reason: "image gradient needs at least 2 voxels per axis".into(),
        });
    }
    Ok(())
}

/// Finite-difference image gradient in voxel units: central differences in
/// the interior, one-sided differences on the first and last slice per axis.
pub fn image_gradient<T: Real>(vol: &Volume<T>) -> Result<VectorField<T>> {
    ensure_intensity(vol, "image_gradient")?;
    check_gradient_dims(vol.dims())?;
    Ok(VectorField::from_vectors_unchecked(
        vol.dims(),
        gradient_values(vol.data(), vol.dims()),
    ))
}

pub(crate) fn gradient_values<T: Real>(data: &[T], dims: Dims) -> Vec<[T; 3]> {
    let half = T::of(0.5);
    (0..data.len())
        .into_par_iter()
        .map(|idx| {
            let c = dims.coords(idx);
            std::array::from_fn(|a| {
                let n = dims[a];
                let s = dims.stride(a);
                if c[a] == 0 {
                    data[idx + s] - data[idx]
                } else if c[a] == n - 1 {
                    data[idx] - data[idx - s]
                } else {
                    (data[idx + s] - data[idx - s]) * half
                }
            })
        })
        .collect()
}

/// Transpose of [`gradient_values`].
pub(crate) fn gradient_transpose<T: Real>(adj: &[[T; 3]], dims: Dims) -> Vec<T> {
    let half = T::of(0.5);
    (0..adj.len())
        .into_par_iter()
        .map(|idx| {
            let c = dims.coords(idx);
            let mut acc = T::zero();
            for a in 0..3 {
                let n = dims[a];
                let s = dims.stride(a);
                let j = c[a];
                // row j-1 used +1/2 of this node when it is interior
                if j >= 2 && j - 1 <= n - 2 {
                    acc += half * adj[idx - s][a];
                }
                // row j+1 used -1/2 of this node when it is interior
                if j + 3 <= n {
                    acc -= half * adj[idx + s][a];
                }
                if j == 0 {
                    acc -= adj[idx][a];
                }
                if j == 1 {
                    acc += adj[idx - s][a];
                }
                if j == n - 1 {
                    acc += adj[idx][a];
                }
                if j + 2 == n {
                    acc -= adj[idx + s][a];
                }
            }
            acc
        })
        .collect()
}

/// Unit-normalize every vector; vectors shorter than `eps` become zero.
pub fn normalize_gradient<T: Real>(g: &VectorField<T>, eps: f64) -> VectorField<T> {
    VectorField::from_vectors_unchecked(g.dims(), normalize_values(g.vectors(), T::of(eps)))
}

pub(crate) fn normalize_values<T: Real>(g: &[[T; 3]], eps: T) -> Vec<[T; 3]> {
    g.par_iter()
        .map(|&v| {
            let n = norm3(v);
            if n >= eps {
                v.map(|c| c / n)
            } else {
                [T::zero(); 3]
            }
        })
        .collect()
}

/// Adjoint of normalization: `(I - n n^T) / |g|` applied to `adj`, zero under the guard.
pub(crate) fn normalize_adjoint<T: Real>(
    g: &[[T; 3]],
    unit: &[[T; 3]],
    adj: &[[T; 3]],
    eps: T,
) -> Vec<[T; 3]> {
    g.par_iter()
        .zip(unit)
        .zip(adj)
        .map(|((&g, &n), &a)| {
            let len = norm3(g);
            if len >= eps {
                let p = dot3(n, a);
                std::array::from_fn(|c| (a[c] - n[c] * p) / len)
            } else {
                [T::zero(); 3]
            }
        })
        .collect()
}

/// Separable Gaussian smoothing of each vector component (clamp-to-edge).
pub fn gaussian_smooth_field<T: Real>(f: &VectorField<T>, sigma: f64) -> Result<VectorField<T>> {
    let kernel = GaussianKernel::<T>::new(sigma)?;
    Ok(VectorField::from_vectors_unchecked(
        f.dims(),
        kernel.smooth(f.vectors(), f.dims()),
    ))
}

fn check_sigmas(sigmas: &[f64]) -> Result<()> {
    if sigmas.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one sigma is required".into(),
        ));
    }
    Ok(())
}

/// Spatially encoded gradient information of `vol` at every scale in `sigmas`.
pub fn segi<T: Real>(vol: &Volume<T>, sigmas: &[f64], eps: f64) -> Result<SegiField<T>> {
    check_sigmas(sigmas)?;
    let encoder = SegiEncoder::new(sigmas, eps)?;
    ensure_intensity(vol, "segi")?;
    let tape = encoder.forward(vol.data(), vol.dims())?;
    Ok(tape.into_field(sigmas))
}

/// Cosine-distance loss between two encodings, using [`DEFAULT_EPS`] as the norm guard.
pub fn segi_loss<T: Real>(a: &SegiField<T>, b: &SegiField<T>) -> Result<T> {
    segi_loss_with_eps(a, b, DEFAULT_EPS)
}

/// `(1/K) sum_k -(1/|Omega|) sum_x cos(a_k(x), b_k(x))`, with `cos = 0`
/// wherever either vector is shorter than `eps`. The result lies in `[-1, 1]`.
pub fn segi_loss_with_eps<T: Real>(a: &SegiField<T>, b: &SegiField<T>, eps: f64) -> Result<T> {
    if a.sigmas != b.sigmas {
        return Err(Error::InvalidArgument(format!(
            "sigma lists differ: {:?} vs {:?}",
            a.sigmas, b.sigmas
        )));
    }
    a.dims().ensure_same(&b.dims(), "segi_loss")?;
    let eps = T::of(eps);
    let parts: Vec<T> = a
        .fields
        .iter()
        .zip(&b.fields)
        .map(|(fa, fb)| mean_neg_cosine(fa.vectors(), fb.vectors(), eps))
        .collect();
    Ok(neumaier_sum(parts.iter().copied()) / T::of(parts.len() as f64))
}

#[inline]
fn guarded_cosine<T: Real>(a: [T; 3], b: [T; 3], eps: T) -> T {
    let na = norm3(a);
    let nb = norm3(b);
    if na < eps || nb < eps {
        return T::zero();
    }
    (dot3(a, b) / (na * nb)).max(-T::one()).min(T::one())
}

fn mean_neg_cosine<T: Real>(a: &[[T; 3]], b: &[[T; 3]], eps: T) -> T {
    let cos: Vec<T> = a
        .par_iter()
        .zip(b)
        .map(|(&x, &y)| guarded_cosine(x, y, eps))
        .collect();
    -neumaier_sum(cos) / T::of(a.len() as f64)
}

/// Adjoint of `scale * mean_neg_cosine(a, b)` with respect to `a`.
fn neg_cosine_adjoint<T: Real>(a: &[[T; 3]], b: &[[T; 3]], eps: T, scale: T) -> Vec<[T; 3]> {
    let coeff = -scale / T::of(a.len() as f64);
    a.par_iter()
        .zip(b)
        .map(|(&x, &y)| {
            let nx = norm3(x);
            let ny = norm3(y);
            if nx < eps || ny < eps {
                return [T::zero(); 3];
            }
            let xh = x.map(|c| c / nx);
            let yh = y.map(|c| c / ny);
            let cos = dot3(xh, yh);
            std::array::from_fn(|c| coeff * (yh[c] - cos * xh[c]) / nx)
        })
        .collect()
}

/// Intermediate values of one encoding pass, kept for the reverse sweep.
pub(crate) struct SegiTape<T> {
    dims: Dims,
    grad: Vec<[T; 3]>,
    unit: Vec<[T; 3]>,
    smoothed: Vec<Vec<[T; 3]>>,
}

impl<T: Real> SegiTape<T> {
    pub(crate) fn smoothed(&self) -> &[Vec<[T; 3]>] {
        &self.smoothed
    }

    pub(crate) fn into_field(self, sigmas: &[f64]) -> SegiField<T> {
        let dims = self.dims;
        SegiField {
            sigmas: sigmas.to_vec(),
            fields: self
                .smoothed
                .into_iter()
                .map(|v| VectorField::from_vectors_unchecked(dims, v))
                .collect(),
        }
    }
}

/// Encoder with precomputed kernels; evaluates the encoding, the similarity
/// against a reference encoding, and the reverse-mode derivative of that
/// similarity with respect to the input image.
pub(crate) struct SegiEncoder<T> {
    kernels: Vec<GaussianKernel<T>>,
    eps: T,
}

impl<T: Real> SegiEncoder<T> {
    pub(crate) fn new(sigmas: &[f64], eps: f64) -> Result<Self> {
        check_sigmas(sigmas)?;
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "eps must be positive, got {eps}"
            )));
        }
        Ok(SegiEncoder {
            kernels: sigmas
                .iter()
                .map(|&s| GaussianKernel::new(s))
                .collect::<Result<_>>()?,
            eps: T::of(eps),
        })
    }

    pub(crate) fn forward(&self, data: &[T], dims: Dims) -> Result<SegiTape<T>> {
        check_gradient_dims(dims)?;
        let grad = gradient_values(data, dims);
        let unit = normalize_values(&grad, self.eps);
        let smoothed = self.kernels.iter().map(|k| k.smooth(&unit, dims)).collect();
        Ok(SegiTape {
            dims,
            grad,
            unit,
            smoothed,
        })
    }

    /// Loss of `tape` against `reference` (one field per kernel).
    pub(crate) fn loss(&self, tape: &SegiTape<T>, reference: &[Vec<[T; 3]>]) -> T {
        let parts: Vec<T> = tape
            .smoothed
            .iter()
            .zip(reference)
            .map(|(a, b)| mean_neg_cosine(a, b, self.eps))
            .collect();
        neumaier_sum(parts.iter().copied()) / T::of(parts.len() as f64)
    }

    /// Derivative of `weight * loss` with respect to the encoded image values.
    pub(crate) fn loss_adjoint(
        &self,
        tape: &SegiTape<T>,
        reference: &[Vec<[T; 3]>],
        weight: T,
    ) -> Vec<T> {
        let dims = tape.dims;
        let scale = weight / T::of(self.kernels.len() as f64);
        let mut adj_unit = vec![[T::zero(); 3]; dims.len()];
        for ((kernel, s), r) in self.kernels.iter().zip(&tape.smoothed).zip(reference) {
            let adj_s = neg_cosine_adjoint(s, r, self.eps, scale);
            let back = kernel.smooth_transpose(&adj_s, dims);
            adj_unit
                .par_iter_mut()
                .zip(back)
                .for_each(|(acc, b)| *acc = [acc[0] + b[0], acc[1] + b[1], acc[2] + b[2]]);
        }
        let adj_grad = normalize_adjoint(&tape.grad, &tape.unit, &adj_unit, self.eps);
        gradient_transpose(&adj_grad, dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VolumeKind;
    use crate::testutil::random_volume;

    fn vf(v: Vec<[f64; 3]>) -> VectorField<f64> {
        VectorField::new(Dims([v.len(), 1, 1]), v).unwrap()
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let v = Volume::<f64>::constant(Dims::cube(4), 2.0);
        assert!(image_gradient(&v)
            .unwrap()
            .vectors()
            .iter()
            .all(|g| *g == [0.0; 3]));
    }

    #[test]
    fn gradient_of_ramp_is_exact() {
        let v = Volume::<f64>::from_fn(Dims::cube(5), VolumeKind::Intensity, |_, j, _| {
            3.0 * j as f64
        })
        .unwrap();
        let g = image_gradient(&v).unwrap();
        for idx in 0..v.dims().len() {
            assert_eq!(g.vectors()[idx], [0.0, 3.0, 0.0]);
        }
    }

    #[test]
    fn gradient_of_parabola() {
        let v = Volume::<f64>::from_fn(Dims([5, 2, 2]), VolumeKind::Intensity, |i, _, _| {
            (i * i) as f64
        })
        .unwrap();
        let g = image_gradient(&v).unwrap();
        assert_eq!(g.at(2, 0, 0)[0], 4.0);
        // one-sided at the ends: 1 - 0 and 16 - 9
        assert_eq!(g.at(0, 0, 0)[0], 1.0);
        assert_eq!(g.at(4, 0, 0)[0], 7.0);
    }

    #[test]
    fn gradient_needs_two_voxels() {
        let v = Volume::<f64>::constant(Dims([1, 4, 4]), 0.0);
        assert!(matches!(
            image_gradient(&v),
            Err(Error::VolumeTooSmall { .. })
        ));
    }

    #[test]
    fn gradient_transpose_dot_product() {
        for dims in [Dims([2, 3, 4]), Dims([5, 6, 3]), Dims([3, 2, 2])] {
            let x = random_volume(dims, 4);
            let (c0, c1, c2) = (
                random_volume(dims, 10),
                random_volume(dims, 11),
                random_volume(dims, 12),
            );
            let y: Vec<[f64; 3]> = (0..dims.len())
                .map(|i| [c0.data()[i], c1.data()[i], c2.data()[i]])
                .collect();
            let gx = gradient_values(x.data(), dims);
            let gty = gradient_transpose(&y, dims);
            let lhs: f64 = gx.iter().zip(&y).map(|(a, b)| dot3(*a, *b)).sum();
            let rhs: f64 = x.data().iter().zip(&gty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{dims}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn normalization_cases() {
        let out = normalize_gradient(&vf(vec![[3.0, 4.0, 0.0], [0.0; 3], [1e-9, 0.0, 0.0]]), 1e-6);
        let v = out.vectors();
        assert!((v[0][0] - 0.6).abs() < 1e-15 && (v[0][1] - 0.8).abs() < 1e-15);
        assert_eq!(v[1], [0.0; 3]);
        assert_eq!(v[2], [0.0; 3]);
    }

    #[test]
    fn smoothing_constant_and_tiny_sigma() {
        let dims = Dims::cube(5);
        let c = VectorField::<f64>::constant(dims, [0.5, -1.0, 2.0]);
        let s = gaussian_smooth_field(&c, 1.5).unwrap();
        for v in s.vectors() {
            for (x, y) in v.iter().zip(c.vectors()[0]) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        let r = random_volume(dims, 3).into_data();
        let f = VectorField::new(dims, r.iter().map(|&x| [x, -x, 2.0 * x]).collect()).unwrap();
        let s = gaussian_smooth_field(&f, 0.1).unwrap();
        for (a, b) in s.vectors().iter().zip(f.vectors()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-9);
            }
        }
        assert!(gaussian_smooth_field(&f, 0.0).is_err());
    }

    #[test]
    fn smoothing_impulse_matches_dense_convolution() {
        let dims = Dims::cube(9);
        let mut v = vec![[0.0f64; 3]; dims.len()];
        v[dims.index(4, 4, 4)] = [1.0, 2.0, -1.0];
        let f = VectorField::new(dims, v).unwrap();
        let s = gaussian_smooth_field(&f, 1.0).unwrap();
        // dense oracle: direct 3-D sum of the normalized separable weights
        let r = 3i64;
        let raw: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / 2.0).exp()).collect();
        let total: f64 = raw.iter().sum();
        let w1 = |t: i64| raw[(t + r) as usize] / total;
        for idx in 0..dims.len() {
            let [i, j, k] = dims.coords(idx);
            let (di, dj, dk) = (i as i64 - 4, j as i64 - 4, k as i64 - 4);
            let expected = if di.abs() <= r && dj.abs() <= r && dk.abs() <= r {
                w1(di) * w1(dj) * w1(dk)
            } else {
                0.0
            };
            let got = s.vectors()[idx];
            assert!((got[0] - expected).abs() < 1e-15);
            assert!((got[1] - 2.0 * expected).abs() < 1e-15);
            assert!((got[2] + expected).abs() < 1e-15);
        }
    }

    #[test]
    fn segi_of_constant_is_zero() {
        let v = Volume::<f64>::constant(Dims::cube(6), 4.0);
        let s = segi(&v, &[1.0, 1.5, 3.0], DEFAULT_EPS).unwrap();
        assert_eq!(s.sigmas(), &[1.0, 1.5, 3.0]);
        assert!(s
            .fields()
            .iter()
            .all(|f| f.vectors().iter().all(|v| *v == [0.0; 3])));
        assert!(segi(&v, &[], DEFAULT_EPS).is_err());
    }

    #[test]
    fn segi_is_invariant_to_positive_affine_remap() {
        let v = random_volume(Dims::cube(8), 21);
        let w = v.map(|x| 2.0 * x + 5.0);
        let sigmas = [1.0, 1.5, 3.0];
        let a = segi(&v, &sigmas, DEFAULT_EPS).unwrap();
        let b = segi(&w, &sigmas, DEFAULT_EPS).unwrap();
        for (fa, fb) in a.fields().iter().zip(b.fields()) {
            for (x, y) in fa.vectors().iter().zip(fb.vectors()) {
                for c in 0..3 {
                    assert!((x[c] - y[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn segi_of_axis_varying_image_is_invariant_to_squaring() {
        // with variation along one axis only, every gradient has a single
        // nonzero component whose sign any increasing remap keeps
        let v = Volume::<f64>::from_fn(Dims::cube(8), VolumeKind::Intensity, |_, j, _| {
            0.1 + 0.9 * (j as f64 / 7.0).powf(1.3)
        })
        .unwrap();
        let w = v.map(|x| x * x);
        let sigmas = [1.0, 1.5, 3.0];
        let a = segi(&v, &sigmas, DEFAULT_EPS).unwrap();
        let b = segi(&w, &sigmas, DEFAULT_EPS).unwrap();
        for (fa, fb) in a.fields().iter().zip(b.fields()) {
            for (x, y) in fa.vectors().iter().zip(fb.vectors()) {
                for c in 0..3 {
                    assert!((x[c] - y[c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn segi_small_sigma_reduces_to_ngi() {
        let v = random_volume(Dims::cube(6), 8);
        let s = segi(&v, &[0.1], DEFAULT_EPS).unwrap();
        let ngi = normalize_gradient(&image_gradient(&v).unwrap(), DEFAULT_EPS);
        for (a, b) in s.fields()[0].vectors().iter().zip(ngi.vectors()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-9);
            }
        }
    }

    fn constant_segi(v: [f64; 3]) -> SegiField<f64> {
        SegiField::new(vec![1.0], vec![VectorField::constant(Dims::cube(3), v)]).unwrap()
    }

    #[test]
    fn loss_extremes() {
        let v = random_volume(Dims::cube(6), 2);
        let s = segi(&v, &[1.0, 2.0], DEFAULT_EPS).unwrap();
        assert!((segi_loss(&s, &s).unwrap() + 1.0).abs() < 1e-12);
        let x = constant_segi([1.0, 0.0, 0.0]);
        assert_eq!(segi_loss(&x, &constant_segi([0.0, 1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(
            segi_loss(&x, &constant_segi([-1.0, 0.0, 0.0])).unwrap(),
            1.0
        );
        assert_eq!(segi_loss(&x, &constant_segi([0.0; 3])).unwrap(), 0.0);
    }

    #[test]
    fn loss_rejects_mismatch() {
        let x = constant_segi([1.0, 0.0, 0.0]);
        let y = SegiField::new(
            vec![2.0],
            vec![VectorField::constant(Dims::cube(3), [1.0, 0.0, 0.0])],
        )
        .unwrap();
        assert!(segi_loss(&x, &y).is_err());
        let z = SegiField::new(
            vec![1.0],
            vec![VectorField::constant(Dims::cube(4), [1.0, 0.0, 0.0])],
        )
        .unwrap();
        assert!(segi_loss(&x, &z).is_err());
    }
}
