//! Cycle consistency, displacement smoothness and the weighted total objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, DisplacementField, Volume};
use crate::optim::RegistrationConfig;
use crate::scalar::{neumaier_sum, Real};
use crate::segi::{segi, segi_loss_with_eps};
use crate::warp::{ensure_intensity, warp_values};

/// Value of every term of the objective for one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sg: f64,
    pub l_cc: f64,
    pub psi_u: f64,
    pub psi_v: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn from_parts(
        l_sg: f64,
        l_cc: f64,
        psi_u: f64,
        psi_v: f64,
        lambda1: f64,
        lambda2: f64,
    ) -> Self {
        LossBreakdown {
            l_sg,
            l_cc,
            psi_u,
            psi_v,
            total: Self::combine(l_sg, l_cc, psi_u, psi_v, lambda1, lambda2),
            lambda1,
            lambda2,
        }
    }

    /// `l_sg + lambda1 * l_cc + lambda2 * (psi_u + psi_v)`
    pub fn combine(
        l_sg: f64,
        l_cc: f64,
        psi_u: f64,
        psi_v: f64,
        lambda1: f64,
        lambda2: f64,
    ) -> f64 {
        l_sg + lambda1 * l_cc + lambda2 * (psi_u + psi_v)
    }

    pub fn is_finite(&self) -> bool {
        [self.l_sg, self.l_cc, self.psi_u, self.psi_v, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Mean absolute difference between `moving` and its round trip through `u` then `v`.
pub fn cycle_loss<T: Real>(
    moving: &Volume<T>,
    u: &DisplacementField<T>,
    v: &DisplacementField<T>,
) -> Result<T> {
    ensure_intensity(moving, "cycle_loss")?;
    let dims = moving.dims();
    dims.ensure_same(&u.dims(), "cycle_loss (moving vs forward field)")?;
    dims.ensure_same(&v.dims(), "cycle_loss (moving vs backward field)")?;
    let once = warp_values(moving.data(), dims, u.vectors());
    let twice = warp_values(&once, dims, v.vectors());
    let diffs = twice
        .iter()
        .zip(moving.data())
        .map(|(a, b)| (*a - *b).abs());
    Ok(neumaier_sum(diffs) / T::of(dims.len() as f64))
}

fn check_smoothness_dims(dims: Dims) -> Result<()> {
    if dims.min_dim() < 2 {
        return Err(Error::VolumeTooSmall {
            dims,
            reason: "smoothness needs at least 2 voxels per axis".into(),
        });
    }
    Ok(())
}

/// Diffusion regularizer: `(1/|Omega|) sum_x sum_c |grad d_c(x)|^2` with
/// forward differences; the last slice per axis contributes nothing.
pub fn smoothness<T: Real>(d: &DisplacementField<T>) -> Result<T> {
    let dims = d.dims();
    check_smoothness_dims(dims)?;
    let vs = d.vectors();
    let per_voxel: Vec<T> = (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            let c = dims.coords(idx);
            let mut acc = T::zero();
            for a in 0..3 {
                if c[a] + 1 < dims[a] {
                    let n = vs[idx + dims.stride(a)];
                    let h = vs[idx];
                    for k in 0..3 {
                        let diff = n[k] - h[k];
                        acc += diff * diff;
                    }
                }
            }
            acc
        })
        .collect();
    Ok(neumaier_sum(per_voxel) / T::of(dims.len() as f64))
}

/// Derivative of `weight * smoothness(d)` with respect to every component of `d`.
pub(crate) fn smoothness_gradient<T: Real>(d: &[[T; 3]], dims: Dims, weight: T) -> Vec<[T; 3]> {
    let scale = T::of(2.0) * weight / T::of(dims.len() as f64);
    (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            let c = dims.coords(idx);
            let h = d[idx];
            let mut g = [T::zero(); 3];
            for a in 0..3 {
                let s = dims.stride(a);
                if c[a] >= 1 {
                    let p = d[idx - s];
                    for k in 0..3 {
                        g[k] += h[k] - p[k];
                    }
                }
                if c[a] + 1 < dims[a] {
                    let n = d[idx + s];
                    for k in 0..3 {
                        g[k] -= n[k] - h[k];
                    }
                }
            }
            g.map(|x| x * scale)
        })
        .collect()
}

/// Evaluate the full objective. The moved image's encoding is taken after
/// warping: `segi(warp(moving, u))` against `segi(fixed)`.
pub fn total_loss<T: Real>(
    moving: &Volume<T>,
    fixed: &Volume<T>,
    u: &DisplacementField<T>,
    v: &DisplacementField<T>,
    cfg: &RegistrationConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    ensure_intensity(moving, "total_loss")?;
    ensure_intensity(fixed, "total_loss")?;
    let dims = moving.dims();
    dims.ensure_same(&fixed.dims(), "total_loss (moving vs fixed)")?;
    dims.ensure_same(&u.dims(), "total_loss (forward field)")?;
    dims.ensure_same(&v.dims(), "total_loss (backward field)")?;

    let moved = moving.with_data_unchecked(warp_values(moving.data(), dims, u.vectors()));
    let fixed_sg = segi(fixed, &cfg.sigmas, cfg.grad_eps)?;
    let mut l_sg = segi_loss_with_eps(
        &segi(&moved, &cfg.sigmas, cfg.grad_eps)?,
        &fixed_sg,
        cfg.grad_eps,
    )?
    .as_f64();
    if cfg.symmetric_similarity {
        let moved_back = fixed.with_data_unchecked(warp_values(fixed.data(), dims, v.vectors()));
        let moving_sg = segi(moving, &cfg.sigmas, cfg.grad_eps)?;
        let back = segi_loss_with_eps(
            &segi(&moved_back, &cfg.sigmas, cfg.grad_eps)?,
            &moving_sg,
            cfg.grad_eps,
        )?;
        l_sg = 0.5 * (l_sg + back.as_f64());
    }
    let l_cc = cycle_loss(moving, u, v)?.as_f64();
    let psi_u = smoothness(u)?.as_f64();
    let psi_v = smoothness(v)?.as_f64();
    let out = LossBreakdown::from_parts(l_sg, l_cc, psi_u, psi_v, cfg.lambda1, cfg.lambda2);
    if !out.is_finite() {
        return Err(Error::NonFinite {
            stage: "total loss",
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VolumeKind;
    use crate::testutil::{random_field, random_volume};

    #[test]
    fn cycle_loss_zero_cases() {
        let dims = Dims::cube(6);
        let m = random_volume(dims, 1);
        let z = DisplacementField::zeros(dims);
        assert_eq!(cycle_loss(&m, &z, &z).unwrap(), 0.0);
        let c = Volume::<f64>::constant(dims, 0.7);
        let u = random_field(dims, 2.0, 2);
        let v = random_field(dims, 2.0, 3);
        assert!(cycle_loss(&c, &u, &v).unwrap().abs() < 1e-15);
    }

    #[test]
    fn cycle_loss_translation_pair_matches_double_warp_oracle() {
        let dims = Dims::cube(8);
        let ramp = Volume::<f64>::from_fn(dims, VolumeKind::Intensity, |i, _, _| i as f64).unwrap();
        let u = DisplacementField::constant(dims, [1.0, 0.0, 0.0]);
        let v = DisplacementField::constant(dims, [-1.0, 0.0, 0.0]);
        // oracle: first warp gives min(i+1, 7); second samples that at max(i-1, 0)
        let row: f64 = (0..8usize)
            .map(|i| ((i.saturating_sub(1) + 1).min(7) as f64 - i as f64).abs())
            .sum();
        let expected = 64.0 * row / 512.0;
        // only the i = 0 slice is off by one: 64 voxels of 512
        assert_eq!(expected, 0.125);
        assert_eq!(cycle_loss(&ramp, &u, &v).unwrap(), expected);
    }

    #[test]
    fn smoothness_cases() {
        let dims = Dims::cube(8);
        assert_eq!(
            smoothness(&DisplacementField::<f64>::zeros(dims)).unwrap(),
            0.0
        );
        assert_eq!(
            smoothness(&DisplacementField::constant(dims, [1.0, -2.0, 3.0])).unwrap(),
            0.0
        );
        let shear = DisplacementField::from_fn(dims, |i, _, _| [i as f64, 0.0, 0.0]).unwrap();
        // forward differences are 1 along axis 0 except on the last slice: 7 of 8
        assert_eq!(smoothness(&shear).unwrap(), 7.0 / 8.0);
        assert!(smoothness(&DisplacementField::<f64>::zeros(Dims([1, 4, 4]))).is_err());
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let dims = Dims([4, 5, 3]);
        let d = random_field(dims, 1.0, 9);
        let g = smoothness_gradient(d.vectors(), dims, 1.0);
        let h = 1e-5;
        for idx in [0, 7, 22, 59] {
            for c in 0..3 {
                let mut p = d.clone().into_vectors();
                p[idx][c] += h;
                let mut m = d.clone().into_vectors();
                m[idx][c] -= h;
                let fp = smoothness(&DisplacementField::new(dims, [1.0; 3], p).unwrap()).unwrap();
                let fm = smoothness(&DisplacementField::new(dims, [1.0; 3], m).unwrap()).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[idx][c]).abs() < 1e-8, "{fd} vs {}", g[idx][c]);
            }
        }
    }

    #[test]
    fn total_loss_identity_and_degenerate_weights() {
        let dims = Dims::cube(8);
        let img = random_volume(dims, 4);
        let z = DisplacementField::zeros(dims);
        let cfg = RegistrationConfig::default();
        let b = total_loss(&img, &img, &z, &z, &cfg).unwrap();
        let s = segi(&img, &cfg.sigmas, cfg.grad_eps).unwrap();
        assert_eq!(b.l_sg, segi_loss_with_eps(&s, &s, cfg.grad_eps).unwrap());
        assert_eq!((b.l_cc, b.psi_u, b.psi_v), (0.0, 0.0, 0.0));

        let fixed = random_volume(dims, 5);
        let u = random_field(dims, 1.0, 6);
        let v = random_field(dims, 1.0, 7);
        let cfg0 = RegistrationConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..RegistrationConfig::default()
        };
        let b = total_loss(&img, &fixed, &u, &v, &cfg0).unwrap();
        assert_eq!(b.total, b.l_sg);
    }
}
