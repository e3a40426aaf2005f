//! Coarse-to-fine resolution pyramids.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Dims, DisplacementField, Volume};
use crate::scalar::Real;
use crate::smooth::GaussianKernel;
use crate::warp::Cell;

const PRESMOOTH_SIGMA: f64 = 1.0;
const MIN_COARSE_DIM: usize = 4;

fn halved(d: Dims) -> Dims {
    Dims(d.0.map(|n| n.div_ceil(2)))
}

/// Grid sizes of every pyramid level, finest first.
pub fn pyramid_dims(dims: Dims, levels: usize) -> Result<Vec<Dims>> {
    if levels == 0 {
        return Err(Error::InvalidArgument(
            "pyramid needs at least one level".into(),
        ));
    }
    let mut out = vec![dims];
    for _ in 1..levels {
        out.push(halved(*out.last().unwrap()));
    }
    let coarsest = *out.last().unwrap();
    if coarsest.min_dim() < MIN_COARSE_DIM {
        return Err(Error::VolumeTooSmall {
            dims,
            reason: format!(
                "{levels} levels give a {coarsest} coarsest grid, every axis needs at least {MIN_COARSE_DIM}"
            ),
        });
    }
    Ok(out)
}

/// Level 0 is `vol`; each further level is smoothed with a sigma = 1 voxel
/// Gaussian and then keeps every other voxel per axis (spacing doubles).
pub fn resample_pyramid<T: Real>(vol: &Volume<T>, levels: usize) -> Result<Vec<Volume<T>>> {
    let sizes = pyramid_dims(vol.dims(), levels)?;
    let kernel = GaussianKernel::<T>::new(PRESMOOTH_SIGMA)?;
    let mut out = vec![vol.clone()];
    for &coarse in &sizes[1..] {
        let fine = out.last().unwrap();
        let fd = fine.dims();
        let smoothed = kernel.smooth(fine.data(), fd);
        let data = (0..coarse.len())
            .map(|idx| {
                let [i, j, k] = coarse.coords(idx);
                smoothed[fd.index(2 * i, 2 * j, 2 * k)]
            })
            .collect();
        let spacing = fine.spacing().map(|s| 2.0 * s);
        out.push(Volume::new(
            coarse,
            spacing,
            fine.origin(),
            data,
            fine.kind(),
        )?);
    }
    Ok(out)
}

/// Carry a field from a coarse level to the next finer grid: trilinear
/// resampling at `x / 2` with vectors scaled by 2.
pub fn upsample_field<T: Real>(
    field: &DisplacementField<T>,
    fine: Dims,
) -> Result<DisplacementField<T>> {
    let coarse = field.dims();
    if halved(fine) != coarse {
        return Err(Error::DimensionMismatch {
            context: "field upsampling (halved fine grid vs coarse field)",
            left: halved(fine),
            right: coarse,
        });
    }
    let half = T::of(0.5);
    let two = T::of(2.0);
    let src = field.vectors();
    let vectors = (0..fine.len())
        .into_par_iter()
        .map(|idx| {
            let c = fine.coords(idx);
            let p = c.map(|x| T::of(x as f64) * half);
            let s: [T; 3] = Cell::locate(coarse, p).sample(src);
            s.map(|x| x * two)
        })
        .collect();
    Ok(DisplacementField::from_vectors_unchecked(
        fine,
        field.spacing().map(|s| s / 2.0),
        vectors,
    ))
}
