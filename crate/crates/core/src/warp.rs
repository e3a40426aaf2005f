//! Interpolation, warping and field composition.
//!
//! A displacement `u` moves a source image onto the target grid by sampling
//! the source at `x + u(x)`. Out-of-bounds coordinates are clamped per axis
//! to `[0, dim - 1]` (border replication).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Dims, DisplacementField, Volume, VolumeKind};
use crate::scalar::{Lane, Real};

/// Trilinear cell containing a (clamped) sample point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell<T> {
    base: usize,
    step: [usize; 3],
    frac: [T; 3],
    /// False where the coordinate was clamped; the sample is then flat along that axis.
    active: [bool; 3],
}

impl<T: Real> Cell<T> {
    #[inline]
    pub(crate) fn locate(dims: Dims, p: [T; 3]) -> Self {
        let mut base = [0usize; 3];
        let mut step = [0usize; 3];
        let mut frac = [T::zero(); 3];
        let mut active = [false; 3];
        for a in 0..3 {
            let d = dims[a];
            if d == 1 {
                continue;
            }
            let hi = T::of((d - 1) as f64);
            let q = if p[a] < T::zero() {
                T::zero()
            } else if p[a] > hi {
                hi
            } else {
                active[a] = true;
                p[a]
            };
            let b = q.floor().to_usize().unwrap().min(d - 2);
            base[a] = b;
            frac[a] = q - T::of(b as f64);
            step[a] = dims.stride(a);
        }
        Cell {
            base: dims.index(base[0], base[1], base[2]),
            step,
            frac,
            active,
        }
    }

    #[inline]
    fn corners(&self) -> [(usize, T); 8] {
        let one = T::one();
        let w = |a: usize, c: usize| {
            if c == 1 {
                self.frac[a]
            } else {
                one - self.frac[a]
            }
        };
        let mut out = [(0usize, T::zero()); 8];
        for (n, slot) in out.iter_mut().enumerate() {
            let (c0, c1, c2) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
            let idx = self.base + c0 * self.step[0] + c1 * self.step[1] + c2 * self.step[2];
            *slot = (idx, w(0, c0) * w(1, c1) * w(2, c2));
        }
        out
    }

    #[inline]
    pub(crate) fn sample<E: Lane<T>>(&self, data: &[E]) -> E {
        self.corners()
            .iter()
            .fold(E::zero(), |acc, &(idx, w)| acc.axpy(w, data[idx]))
    }

    /// Sample value and its derivative with respect to the sample point.
    #[inline]
    pub(crate) fn sample_with_gradient(&self, data: &[T]) -> (T, [T; 3]) {
        let one = T::one();
        let mut v = [T::zero(); 8];
        for (n, slot) in v.iter_mut().enumerate() {
            let idx = self.base
                + (n & 1) * self.step[0]
                + ((n >> 1) & 1) * self.step[1]
                + ((n >> 2) & 1) * self.step[2];
            *slot = data[idx];
        }
        let [fx, fy, fz] = self.frac;
        let (gx, gy, gz) = (one - fx, one - fy, one - fz);
        // corner n has bit0 -> x, bit1 -> y, bit2 -> z
        let x00 = v[0] * gx + v[1] * fx;
        let x10 = v[2] * gx + v[3] * fx;
        let x01 = v[4] * gx + v[5] * fx;
        let x11 = v[6] * gx + v[7] * fx;
        let y0 = x00 * gy + x10 * fy;
        let y1 = x01 * gy + x11 * fy;
        let value = y0 * gz + y1 * fz;

        let mut grad = [T::zero(); 3];
        if self.active[0] {
            let d00 = v[1] - v[0];
            let d10 = v[3] - v[2];
            let d01 = v[5] - v[4];
            let d11 = v[7] - v[6];
            grad[0] = (d00 * gy + d10 * fy) * gz + (d01 * gy + d11 * fy) * fz;
        }
        if self.active[1] {
            grad[1] = (x10 - x00) * gz + (x11 - x01) * fz;
        }
        if self.active[2] {
            grad[2] = y1 - y0;
        }
        (value, grad)
    }

    /// Accumulate `weight(corner) * g` into `adj` (transpose of `sample`).
    #[inline]
    pub(crate) fn scatter(&self, adj: &mut [T], g: T) {
        for (idx, w) in self.corners() {
            adj[idx] += w * g;
        }
    }
}

#[inline]
fn displaced<T: Real>(dims: Dims, idx: usize, d: [T; 3]) -> [T; 3] {
    let [i, j, k] = dims.coords(idx);
    [
        T::of(i as f64) + d[0],
        T::of(j as f64) + d[1],
        T::of(k as f64) + d[2],
    ]
}

/// Trilinear interpolation at a continuous voxel coordinate, clamped to the grid.
///
/// Panics if `p` is not finite.
pub fn trilinear_sample<T: Real>(vol: &Volume<T>, p: [T; 3]) -> T {
    assert!(
        p.iter().all(|c| c.is_finite()),
        "non-finite sample point {p:?}"
    );
    Cell::locate(vol.dims(), p).sample(vol.data())
}

/// Nearest-neighbour lookup at a continuous voxel coordinate, clamped to the grid.
pub fn nearest_sample<T: Real>(vol: &Volume<T>, p: [T; 3]) -> T {
    assert!(
        p.iter().all(|c| c.is_finite()),
        "non-finite sample point {p:?}"
    );
    let dims = vol.dims();
    let mut ijk = [0usize; 3];
    for a in 0..3 {
        let hi = T::of((dims[a] - 1) as f64);
        ijk[a] = p[a].max(T::zero()).min(hi).round().to_usize().unwrap();
    }
    vol.at(ijk[0], ijk[1], ijk[2])
}

/// Resample `vol` at `x + ddf(x)` for every voxel `x`.
///
/// Intensity volumes are interpolated trilinearly, label volumes by nearest
/// neighbour. The output keeps the geometry and kind of `vol`.
pub fn warp<T: Real>(vol: &Volume<T>, ddf: &DisplacementField<T>) -> Result<Volume<T>> {
    let nearest = vol.kind() == VolumeKind::Label;
    warp_with(vol, ddf, nearest)
}

/// Like [`warp`], with the interpolation chosen explicitly.
pub fn warp_with<T: Real>(
    vol: &Volume<T>,
    ddf: &DisplacementField<T>,
    nearest: bool,
) -> Result<Volume<T>> {
    let dims = vol.dims();
    dims.ensure_same(&ddf.dims(), "warp (volume vs displacement)")?;
    let data = if nearest {
        ddf.vectors()
            .par_iter()
            .enumerate()
            .map(|(idx, &d)| nearest_sample(vol, displaced(dims, idx, d)))
            .collect()
    } else {
        warp_values(vol.data(), dims, ddf.vectors())
    };
    Ok(vol.with_data_unchecked(data))
}

pub(crate) fn warp_values<T: Real>(src: &[T], dims: Dims, field: &[[T; 3]]) -> Vec<T> {
    field
        .par_iter()
        .enumerate()
        .map(|(idx, &d)| Cell::locate(dims, displaced(dims, idx, d)).sample(src))
        .collect()
}

/// Warped values together with their derivative with respect to the displacement.
pub(crate) fn warp_values_with_jacobian<T: Real>(
    src: &[T],
    dims: Dims,
    field: &[[T; 3]],
) -> (Vec<T>, Vec<[T; 3]>) {
    field
        .par_iter()
        .enumerate()
        .map(|(idx, &d)| Cell::locate(dims, displaced(dims, idx, d)).sample_with_gradient(src))
        .unzip()
}

/// Transpose of `warp_values` with respect to the source image.
pub(crate) fn warp_values_transpose<T: Real>(
    adj_out: &[T],
    dims: Dims,
    field: &[[T; 3]],
) -> Vec<T> {
    let mut adj = vec![T::zero(); dims.len()];
    for (idx, (&d, &g)) in field.iter().zip(adj_out).enumerate() {
        if g != T::zero() {
            Cell::locate(dims, displaced(dims, idx, d)).scatter(&mut adj, g);
        }
    }
    adj
}

/// Composite displacement `w` such that warping by `u` and then by `v` equals
/// warping once by `w`: `w(x) = v(x) + u(x + v(x))`, with `u` sampled trilinearly.
pub fn compose<T: Real>(
    u: &DisplacementField<T>,
    v: &DisplacementField<T>,
) -> Result<DisplacementField<T>> {
    let dims = u.dims();
    dims.ensure_same(&v.dims(), "compose")?;
    let uv = u.vectors();
    let vectors = v
        .vectors()
        .par_iter()
        .enumerate()
        .map(|(idx, &d)| {
            let s: [T; 3] = Cell::locate(dims, displaced(dims, idx, d)).sample(uv);
            [d[0] + s[0], d[1] + s[1], d[2] + s[2]]
        })
        .collect();
    Ok(DisplacementField::from_vectors_unchecked(
        dims,
        v.spacing(),
        vectors,
    ))
}

/// Trilinear regridding of `vol` onto the grid of `target`, through world
/// coordinates `origin + spacing * index` (orientation is not modelled).
pub fn resample_to_grid<T: Real, U: Real>(
    vol: &Volume<T>,
    target: &Volume<U>,
) -> Result<Volume<T>> {
    let dims = target.dims();
    let (ts, to) = (target.spacing(), target.origin());
    let (ss, so) = (vol.spacing(), vol.origin());
    let nearest = vol.kind() == VolumeKind::Label;
    let data = (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            let c = dims.coords(idx);
            let mut p = [T::zero(); 3];
            for a in 0..3 {
                let world = to[a] + ts[a] * c[a] as f64;
                p[a] = T::of((world - so[a]) / ss[a]);
            }
            if nearest {
                nearest_sample(vol, p)
            } else {
                trilinear_sample(vol, p)
            }
        })
        .collect();
    Volume::new(dims, ts, to, data, vol.kind())
}

pub(crate) fn ensure_intensity<T: Real>(vol: &Volume<T>, context: &str) -> Result<()> {
    if vol.kind() != VolumeKind::Intensity {
        return Err(Error::InvalidArgument(format!(
            "{context} requires an intensity volume"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_field, random_volume};

    fn ramp0(n: usize) -> Volume<f64> {
        Volume::from_fn(Dims::cube(n), VolumeKind::Intensity, |i, _, _| i as f64).unwrap()
    }

    #[test]
    fn sample_preserves_linear_ramp() {
        let v = ramp0(4);
        assert!((trilinear_sample(&v, [2.5, 1.0, 1.0]) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn sample_is_exact_at_nodes() {
        let v = random_volume(Dims([4, 5, 3]), 7);
        for idx in 0..v.dims().len() {
            let [i, j, k] = v.dims().coords(idx);
            let p = [i as f64, j as f64, k as f64];
            assert_eq!(trilinear_sample(&v, p), v.data()[idx]);
        }
    }

    #[test]
    fn sample_cube_centre_is_corner_mean() {
        let v =
            Volume::<f64>::intensity(Dims::cube(2), (0..8).map(|x| x as f64).collect()).unwrap();
        // hand evaluation: every corner carries weight 1/8, mean of 0..7 is 3.5
        assert_eq!(trilinear_sample(&v, [0.5, 0.5, 0.5]), 3.5);
    }

    #[test]
    fn sample_clamps_outside() {
        let v = ramp0(4);
        assert_eq!(trilinear_sample(&v, [-3.0, 1.0, 1.0]), 0.0);
        assert_eq!(trilinear_sample(&v, [9.0, 1.0, 1.0]), 3.0);
    }

    #[test]
    #[should_panic]
    fn sample_rejects_nan() {
        trilinear_sample(&ramp0(2), [f64::NAN, 0.0, 0.0]);
    }

    #[test]
    fn warp_identity_is_bit_exact() {
        let v = random_volume(Dims([5, 6, 7]), 3);
        let z = DisplacementField::zeros(v.dims());
        assert_eq!(warp(&v, &z).unwrap(), v);
        let lab = Volume::from_fn(Dims::cube(4), VolumeKind::Label, |i, j, _| {
            ((i + j) % 3) as f64
        })
        .unwrap();
        assert_eq!(
            warp(&lab, &DisplacementField::zeros(lab.dims())).unwrap(),
            lab
        );
    }

    #[test]
    fn warp_translates_ramp() {
        let v = ramp0(6);
        let d = DisplacementField::constant(v.dims(), [1.0, 0.0, 0.0]);
        let w = warp(&v, &d).unwrap();
        for i in 0..5 {
            assert_eq!(w.at(i, 2, 3), i as f64 + 1.0);
        }
        assert_eq!(w.at(5, 2, 3), 5.0);
    }

    #[test]
    fn warp_integer_shift_matches_index_oracle() {
        let dims = Dims::cube(8);
        let v = random_volume(dims, 11);
        let w = warp(&v, &DisplacementField::constant(dims, [2.0, 0.0, 0.0])).unwrap();
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    let src = (i + 2).min(7);
                    assert_eq!(w.at(i, j, k), v.at(src, j, k));
                }
            }
        }
    }

    #[test]
    fn warp_rejects_mismatch() {
        let v = ramp0(4);
        let d = DisplacementField::<f64>::zeros(Dims::cube(5));
        let err = warp(&v, &d).unwrap_err();
        assert!(err.to_string().contains("4x4x4") && err.to_string().contains("5x5x5"));
    }

    #[test]
    fn compose_neutral_and_constant() {
        let dims = Dims::cube(6);
        let v = random_field(dims, 1.5, 4);
        let zero = DisplacementField::zeros(dims);
        assert_eq!(compose(&zero, &v).unwrap(), v);

        let a = DisplacementField::constant(dims, [1.0, 0.0, 0.0]);
        let b = DisplacementField::constant(dims, [0.0, 1.0, 0.0]);
        let w = compose(&a, &b).unwrap();
        assert_eq!(w.at(2, 2, 2), [1.0, 1.0, 0.0]);
    }

    #[test]
    fn compose_inverse_constant_cancels() {
        let dims = Dims::cube(8);
        let u = DisplacementField::<f64>::constant(dims, [0.75, -0.5, 0.25]);
        let v = DisplacementField::constant(dims, [-0.75, 0.5, -0.25]);
        let w = compose(&u, &v).unwrap();
        assert!(w.at(4, 4, 4).iter().all(|c: &f64| c.abs() < 1e-15));
    }

    #[test]
    fn double_warp_matches_composed_warp_for_constant_fields() {
        // exact when either constant field lands on grid nodes; two fractional
        // shifts would interpolate an interpolant
        let dims = Dims::cube(8);
        let img = random_volume(dims, 5);
        let pairs = [
            ([1.0, -1.0, 0.0], [-1.0, 1.0, 0.0]),
            ([2.0, 0.0, -1.0], [-0.4, 0.3, 0.7]),
            ([0.6, -0.2, 0.35], [-1.0, 1.0, 0.0]),
        ];
        for (a, b) in pairs {
            let u = DisplacementField::constant(dims, a);
            let v = DisplacementField::constant(dims, b);
            let twice = warp(&warp(&img, &u).unwrap(), &v).unwrap();
            let once = warp(&img, &compose(&u, &v).unwrap()).unwrap();
            for k in 2..6 {
                for j in 2..6 {
                    for i in 2..6 {
                        assert!((twice.at(i, j, k) - once.at(i, j, k)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_matches_dot_product() {
        let dims = Dims([5, 4, 6]);
        let img = random_volume(dims, 1);
        let y = random_volume(dims, 2);
        let f = random_field(dims, 2.0, 3);
        let wx = warp_values(img.data(), dims, f.vectors());
        let wty = warp_values_transpose(y.data(), dims, f.vectors());
        let lhs: f64 = wx.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.data().iter().zip(&wty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn resample_same_grid_is_identity() {
        let v = random_volume(Dims([4, 3, 5]), 9);
        let r = resample_to_grid(&v, &v).unwrap();
        assert_eq!(r, v);
    }
}
