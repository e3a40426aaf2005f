//! Voxel grids: scalar volumes, displacement fields and vector fields.
//!
//! Every grid is stored with axis 0 varying fastest:
//! `index = i + d0 * (j + d1 * k)` for voxel `(i, j, k)`. This matches the
//! NIfTI-1 payload order, and all modules address voxels by `(i, j, k)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{norm3, Real};

/// Number of voxels along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(d0: usize, d1: usize, d2: usize) -> Result<Self> {
        if d0 == 0 || d1 == 0 || d2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive, got {d0}x{d1}x{d2}"
            )));
        }
        Ok(Dims([d0, d1, d2]))
    }

    pub fn cube(n: usize) -> Self {
        Dims([n, n, n])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.0[0] * (j + self.0[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.0[0];
        let r = idx / self.0[0];
        [i, r % self.0[1], r / self.0[1]]
    }

    /// Linear index stride of one step along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.0[0],
            _ => self.0[0] * self.0[1],
        }
    }

    pub fn min_dim(&self) -> usize {
        self.0.iter().copied().min().unwrap()
    }

    pub(crate) fn ensure_same(&self, other: &Dims, context: &'static str) -> Result<()> {
        if self != other {
            return Err(Error::DimensionMismatch {
                context,
                left: *self,
                right: *other,
            });
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for Dims {
    type Output = usize;
    fn index(&self, axis: usize) -> &usize {
        &self.0[axis]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Label,
}

/// Scalar volume on a regular grid with spacing (mm per voxel) and origin (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<T>,
    kind: VolumeKind,
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "spacing must be strictly positive, got {spacing:?}"
        )));
    }
    Ok(())
}

impl<T: Real> Volume<T> {
    pub fn new(
        dims: Dims,
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<T>,
        kind: VolumeKind,
    ) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match dims {dims}",
                data.len()
            )));
        }
        check_spacing(spacing)?;
        if kind == VolumeKind::Label
            && data
                .iter()
                .any(|&v| !(v >= T::zero() && v.fract() == T::zero()))
        {
            return Err(Error::InvalidArgument(
                "label volumes may only hold nonnegative integers".into(),
            ));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
            kind,
        })
    }

    /// Intensity volume with unit spacing and zero origin.
    pub fn intensity(dims: Dims, data: Vec<T>) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3], data, VolumeKind::Intensity)
    }

    /// Label volume with unit spacing and zero origin.
    pub fn label(dims: Dims, data: Vec<T>) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3], data, VolumeKind::Label)
    }

    pub fn from_fn(
        dims: Dims,
        kind: VolumeKind,
        f: impl Fn(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let data = (0..dims.len())
            .map(|idx| {
                let [i, j, k] = dims.coords(idx);
                f(i, j, k)
            })
            .collect();
        Self::new(dims, [1.0; 3], [0.0; 3], data, kind)
    }

    pub fn constant(dims: Dims, value: T) -> Self {
        Volume {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: vec![value; dims.len()],
            kind: VolumeKind::Intensity,
        }
    }

    /// Same grid and kind as `self`, different payload.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, data, self.kind)
    }

    pub(crate) fn with_data_unchecked(&self, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), self.dims.len());
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data,
            kind: self.kind,
        }
    }

    pub fn with_geometry(mut self, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        self.origin = origin;
        Ok(self)
    }

    pub fn into_kind(self, kind: VolumeKind) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, self.data, kind)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.dims.index(i, j, k)]
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Rescale intensities linearly onto `[0, 1]`. A constant volume maps to zeros.
    pub fn normalized_min_max(&self) -> Self {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        let data = if range > T::zero() {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![T::zero(); self.data.len()]
        };
        self.with_data_unchecked(data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        self.with_data_unchecked(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Distinct label values, ascending.
    pub fn label_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().filter_map(|v| v.to_u32()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Per-voxel displacement in voxel units. Houses the forward and backward fields.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    dims: Dims,
    spacing: [f64; 3],
    vectors: Vec<[T; 3]>,
}

impl<T: Real> DisplacementField<T> {
    pub fn new(dims: Dims, spacing: [f64; 3], vectors: Vec<[T; 3]>) -> Result<Self> {
        if vectors.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "field length {} does not match dims {dims}",
                vectors.len()
            )));
        }
        check_spacing(spacing)?;
        if vectors.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                stage: "displacement field construction",
            });
        }
        Ok(DisplacementField {
            dims,
            spacing,
            vectors,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        DisplacementField {
            dims,
            spacing: [1.0; 3],
            vectors: vec![[T::zero(); 3]; dims.len()],
        }
    }

    /// Zero field on the grid of `vol`.
    pub fn zeros_like<U: Real>(vol: &Volume<U>) -> Self {
        DisplacementField {
            dims: vol.dims(),
            spacing: vol.spacing(),
            vectors: vec![[T::zero(); 3]; vol.dims().len()],
        }
    }

    pub fn constant(dims: Dims, v: [T; 3]) -> Self {
        DisplacementField {
            dims,
            spacing: [1.0; 3],
            vectors: vec![v; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> [T; 3]) -> Result<Self> {
        let vectors = (0..dims.len())
            .map(|idx| {
                let [i, j, k] = dims.coords(idx);
                f(i, j, k)
            })
            .collect();
        Self::new(dims, [1.0; 3], vectors)
    }

    pub(crate) fn from_vectors_unchecked(
        dims: Dims,
        spacing: [f64; 3],
        vectors: Vec<[T; 3]>,
    ) -> Self {
        debug_assert_eq!(vectors.len(), dims.len());
        DisplacementField {
            dims,
            spacing,
            vectors,
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn vectors(&self) -> &[[T; 3]] {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut [[T; 3]] {
        &mut self.vectors
    }

    pub fn into_vectors(self) -> Vec<[T; 3]> {
        self.vectors
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> [T; 3] {
        self.vectors[self.dims.index(i, j, k)]
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().flatten().all(|c| c.is_finite())
    }

    pub fn max_magnitude(&self) -> T {
        self.vectors
            .iter()
            .map(|&v| norm3(v))
            .fold(T::zero(), |a, b| a.max(b))
    }

    pub fn mean_magnitude(&self) -> T {
        crate::scalar::neumaier_sum(self.vectors.iter().map(|&v| norm3(v)))
            / T::of(self.vectors.len() as f64)
    }
}

/// Per-voxel 3-vector field (image gradients and their normalized or smoothed forms).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T> {
    dims: Dims,
    vectors: Vec<[T; 3]>,
}

impl<T: Real> VectorField<T> {
    pub fn new(dims: Dims, vectors: Vec<[T; 3]>) -> Result<Self> {
        if vectors.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "field length {} does not match dims {dims}",
                vectors.len()
            )));
        }
        Ok(VectorField { dims, vectors })
    }

    pub(crate) fn from_vectors_unchecked(dims: Dims, vectors: Vec<[T; 3]>) -> Self {
        debug_assert_eq!(vectors.len(), dims.len());
        VectorField { dims, vectors }
    }

    pub fn constant(dims: Dims, v: [T; 3]) -> Self {
        VectorField {
            dims,
            vectors: vec![v; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn vectors(&self) -> &[[T; 3]] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<[T; 3]> {
        self.vectors
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> [T; 3] {
        self.vectors[self.dims.index(i, j, k)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let d = Dims([3, 4, 5]);
        for idx in 0..d.len() {
            let [i, j, k] = d.coords(idx);
            assert_eq!(d.index(i, j, k), idx);
        }
        assert_eq!(d.index(1, 0, 0), 1);
        assert_eq!(d.index(0, 1, 0), 3);
        assert_eq!(d.index(0, 0, 1), 12);
    }

    #[test]
    fn rejects_bad_volumes() {
        let d = Dims::cube(2);
        assert!(Volume::<f64>::intensity(d, vec![0.0; 7]).is_err());
        assert!(Volume::<f64>::new(
            d,
            [1.0, 0.0, 1.0],
            [0.0; 3],
            vec![0.0; 8],
            VolumeKind::Intensity
        )
        .is_err());
        assert!(Volume::<f64>::label(d, vec![0.5; 8]).is_err());
        assert!(Volume::<f64>::label(d, vec![-1.0; 8]).is_err());
        assert!(Volume::<f64>::label(d, vec![2.0; 8]).is_ok());
        assert!(Dims::new(0, 1, 1).is_err());
    }

    #[test]
    fn field_rejects_nan() {
        let d = Dims::cube(1);
        assert!(DisplacementField::<f64>::new(d, [1.0; 3], vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn min_max_normalization() {
        let v = Volume::<f64>::intensity(Dims([4, 1, 1]), vec![2.0, 4.0, 6.0, 10.0]).unwrap();
        assert_eq!(v.normalized_min_max().data(), &[0.0, 0.25, 0.5, 1.0]);
        let c = Volume::<f64>::constant(Dims([2, 1, 1]), 3.0);
        assert_eq!(c.normalized_min_max().data(), &[0.0, 0.0]);
    }
}
