//! Synthetic multi-modality pairs with a known deformation.
//!
//! A smooth-edged shape (1 inside, 0 outside, 2-voxel transition band) is the
//! base image. The fixed image is the base plus optional noise; the moving
//! image is the base warped by the ground-truth field and passed through a
//! modality remap. The truth is defined on the fixed grid, so
//! `warp(base, truth)` is the moving image before remapping, and the field a
//! registration should recover is its inverse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, DisplacementField, Volume, VolumeKind};
use crate::scalar::{neumaier_sum, norm3, Real};
use crate::warp::warp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// Radius a quarter of the smallest dimension, centred.
    Sphere,
    /// Two spheres side by side along axis 0, labelled 1 and 2.
    TwoSpheres,
    /// Centred box with a slot cut into its +axis-0 face.
    CuboidWithNotch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityRemap {
    Identity,
    Invert,
    Square,
    PiecewiseMonotone,
    /// Non-monotone tent: rises on `[0, 1/2]`, falls on `[1/2, 1]`.
    ContrastFold,
}

impl ModalityRemap {
    pub fn apply(self, t: f64) -> f64 {
        match self {
            ModalityRemap::Identity => t,
            ModalityRemap::Invert => 1.0 - t,
            ModalityRemap::Square => t * t,
            ModalityRemap::PiecewiseMonotone => {
                const KNOTS: [(f64, f64); 4] = [(0.0, 0.0), (0.3, 0.55), (0.6, 0.65), (1.0, 1.0)];
                let t = t.clamp(0.0, 1.0);
                let seg = KNOTS.windows(2).find(|w| t <= w[1].0).unwrap();
                let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
                y0 + (y1 - y0) * (t - x0) / (x1 - x0)
            }
            ModalityRemap::ContrastFold => 1.0 - (2.0 * t - 1.0).abs(),
        }
    }

    /// True for remaps that are strictly increasing on `[0, 1]`.
    pub fn is_increasing(self) -> bool {
        matches!(
            self,
            ModalityRemap::Identity | ModalityRemap::Square | ModalityRemap::PiecewiseMonotone
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Deformation {
    Zero,
    Translation {
        t: [f64; 3],
    },
    /// `amplitude * exp(-|x - center|^2 / (2 width^2))`
    GaussianBump {
        center: [f64; 3],
        amplitude: [f64; 3],
        width: f64,
    },
}

impl Deformation {
    pub fn at(&self, p: [f64; 3]) -> [f64; 3] {
        match *self {
            Deformation::Zero => [0.0; 3],
            Deformation::Translation { t } => t,
            Deformation::GaussianBump {
                center,
                amplitude,
                width,
            } => {
                let r2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
                let g = (-r2 / (2.0 * width * width)).exp();
                amplitude.map(|a| a * g)
            }
        }
    }

    /// Largest spectral norm of the displacement Jacobian over space.
    pub fn max_jacobian(&self) -> f64 {
        match *self {
            Deformation::Zero | Deformation::Translation { .. } => 0.0,
            // rank one: |a| * max_r (r / w^2) exp(-r^2 / 2w^2) = |a| e^{-1/2} / w
            Deformation::GaussianBump {
                amplitude, width, ..
            } => norm3(amplitude) * (-0.5f64).exp() / width,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Deformation::Zero => Ok(()),
            Deformation::Translation { t } => {
                if t.iter().all(|x| x.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument("translation must be finite".into()))
                }
            }
            Deformation::GaussianBump {
                center,
                amplitude,
                width,
            } => {
                if !(width.is_finite() && width > 0.0)
                    || center.iter().chain(&amplitude).any(|x| !x.is_finite())
                {
                    return Err(Error::InvalidArgument(
                        "gaussian bump needs finite center/amplitude and positive width".into(),
                    ));
                }
                let j = self.max_jacobian();
                if j >= 1.0 {
                    return Err(Error::Folding { max_jacobian: j });
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub shape: Shape,
    pub modality_remap: ModalityRemap,
    pub deformation: Deformation,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<Dims> {
        let dims = Dims::new(self.dims[0], self.dims[1], self.dims[2])?;
        if dims.min_dim() < 4 {
            return Err(Error::VolumeTooSmall {
                dims,
                reason: "phantoms need at least 4 voxels per axis".into(),
            });
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        self.deformation.validate()?;
        Ok(dims)
    }
}

/// Signed distance (voxels, negative inside) and structure id of the nearest part.
fn shape_sdf(shape: Shape, dims: Dims, p: [f64; 3]) -> (f64, u32) {
    let d = dims.0.map(|n| n as f64);
    let c = d.map(|n| (n - 1.0) / 2.0);
    let min_d = d[0].min(d[1]).min(d[2]);
    let sphere = |center: [f64; 3], r: f64| {
        let dist: f64 = (0..3)
            .map(|a| (p[a] - center[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        dist - r
    };
    let sdf_box = |center: [f64; 3], half: [f64; 3]| {
        let q: [f64; 3] = std::array::from_fn(|a| (p[a] - center[a]).abs() - half[a]);
        let outside = q.iter().map(|x| x.max(0.0).powi(2)).sum::<f64>().sqrt();
        let inside = q[0].max(q[1]).max(q[2]).min(0.0);
        outside + inside
    };
    match shape {
        Shape::Sphere => (sphere(c, 0.25 * min_d), 1),
        Shape::TwoSpheres => {
            let r = 0.15 * min_d;
            let off = 0.2 * d[0];
            let a = sphere([c[0] - off, c[1], c[2]], r);
            let b = sphere([c[0] + off, c[1], c[2]], r);
            if a <= b {
                (a, 1)
            } else {
                (b, 2)
            }
        }
        Shape::CuboidWithNotch => {
            let body = sdf_box(c, d.map(|n| 0.25 * n));
            let notch = sdf_box(
                [c[0] + 0.25 * d[0], c[1], c[2]],
                [0.1 * d[0], 0.1 * d[1], 0.3 * d[2]],
            );
            (body.max(-notch), 1)
        }
    }
}

/// Intensity profile across the edge: 1 at signed distance <= -1, 0 at >= 1,
/// smoothstep in between.
fn edge_profile(sd: f64) -> f64 {
    let t = ((1.0 - sd) / 2.0).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn voxel(dims: Dims, idx: usize) -> [f64; 3] {
    dims.coords(idx).map(|c| c as f64)
}

/// Generated pair and its ground truth.
#[derive(Clone, Debug)]
pub struct PhantomPair<T> {
    pub moving: Volume<T>,
    pub fixed: Volume<T>,
    pub moving_label: Volume<T>,
    pub fixed_label: Volume<T>,
    /// Field with `warp(base, truth)` = moving image before the remap.
    pub truth: DisplacementField<T>,
    /// Inverse of `truth`: the field that maps the moving image back onto the fixed one.
    pub truth_inverse: DisplacementField<T>,
}

/// Solve `w(x) = -d(x + w(x))` by fixed-point iteration (contractive when the
/// deformation does not fold).
pub fn invert_deformation(def: &Deformation, p: [f64; 3]) -> [f64; 3] {
    let mut w = def.at(p).map(|x| -x);
    for _ in 0..200 {
        let q: [f64; 3] = std::array::from_fn(|a| p[a] + w[a]);
        let next = def.at(q).map(|x| -x);
        let delta = (0..3).map(|a| (next[a] - w[a]).abs()).fold(0.0, f64::max);
        w = next;
        if delta < 1e-14 {
            break;
        }
    }
    w
}

pub fn generate_pair<T: Real>(spec: &PhantomSpec) -> Result<PhantomPair<T>> {
    let dims = spec.validate()?;
    let n = dims.len();
    let base = Volume::new(
        dims,
        [1.0; 3],
        [0.0; 3],
        (0..n)
            .map(|idx| {
                T::of(edge_profile(
                    shape_sdf(spec.shape, dims, voxel(dims, idx)).0,
                ))
            })
            .collect(),
        VolumeKind::Intensity,
    )?;
    let label_at = |p: [f64; 3]| {
        let (sd, id) = shape_sdf(spec.shape, dims, p);
        T::of(if sd <= 0.0 { id as f64 } else { 0.0 })
    };
    let def = spec.deformation;
    let truth = DisplacementField::new(
        dims,
        [1.0; 3],
        (0..n)
            .map(|idx| def.at(voxel(dims, idx)).map(T::of))
            .collect(),
    )?;
    let truth_inverse = DisplacementField::new(
        dims,
        [1.0; 3],
        (0..n)
            .map(|idx| invert_deformation(&def, voxel(dims, idx)).map(T::of))
            .collect(),
    )?;

    let fixed_label = Volume::new(
        dims,
        [1.0; 3],
        [0.0; 3],
        (0..n).map(|idx| label_at(voxel(dims, idx))).collect(),
        VolumeKind::Label,
    )?;
    let moving_label = Volume::new(
        dims,
        [1.0; 3],
        [0.0; 3],
        (0..n)
            .map(|idx| {
                let x = voxel(dims, idx);
                let t = def.at(x);
                label_at(std::array::from_fn(|a| x[a] + t[a]))
            })
            .collect(),
        VolumeKind::Label,
    )?;

    let remap = spec.modality_remap;
    let moving = warp(&base, &truth)?.map(|t| T::of(remap.apply(t.as_f64())));

    let fixed = if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let noisy = base
            .data()
            .iter()
            .map(|&t| t + T::of(normal.sample(&mut rng)))
            .collect();
        base.with_data(noisy)?
    } else {
        base
    };

    Ok(PhantomPair {
        moving,
        fixed,
        moving_label,
        fixed_label,
        truth,
        truth_inverse,
    })
}

/// Mean Euclidean distance between `estimate` and `truth` over the nonzero
/// voxels of `mask`, in voxels.
pub fn endpoint_error<T: Real>(
    estimate: &DisplacementField<T>,
    truth: &DisplacementField<T>,
    mask: &Volume<T>,
) -> Result<f64> {
    let dims = estimate.dims();
    dims.ensure_same(&truth.dims(), "endpoint_error (estimate vs truth)")?;
    dims.ensure_same(&mask.dims(), "endpoint_error (estimate vs mask)")?;
    let errors: Vec<f64> = estimate
        .vectors()
        .iter()
        .zip(truth.vectors())
        .zip(mask.data())
        .filter(|(_, m)| **m != T::zero())
        .map(|((e, t), _)| norm3([e[0] - t[0], e[1] - t[1], e[2] - t[2]]).as_f64())
        .collect();
    if errors.is_empty() {
        return Err(Error::EmptyStructure { id: 0 });
    }
    let count = errors.len() as f64;
    Ok(neumaier_sum(errors) / count)
}
