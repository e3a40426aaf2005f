//! Multi-modality deformable registration of 3-D volumes.
//!
//! A moving volume is aligned to a fixed volume by optimizing a forward
//! displacement field `u` and a backward field `v` directly, under an
//! unsupervised objective built from spatially encoded gradient information
//! (Gaussian-accumulated unit image gradients at several scales), a cycle
//! consistency term and a diffusion smoothness term.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar for the common cases.

pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod losses;
pub mod optim;
pub mod phantom;
pub mod pyramid;
pub mod scalar;
pub mod segi;
pub mod smooth;
pub mod warp;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use eval::{asd, dice, evaluate_labels, EvalReport, StructureScore};
pub use grid::{Dims, DisplacementField, VectorField, Volume, VolumeKind};
pub use losses::{cycle_loss, smoothness, total_loss, LossBreakdown};
pub use optim::{
    loss_gradient, loss_gradient_masked, register, LossGradient, OptimizationTrace, Polarity,
    Registration, RegistrationConfig, TermMask,
};
pub use phantom::{endpoint_error, generate_pair, PhantomPair, PhantomSpec};
pub use pyramid::resample_pyramid;
pub use scalar::{ElementType, Real};
pub use segi::{
    gaussian_smooth_field, image_gradient, normalize_gradient, segi, segi_loss, SegiField,
};
pub use warp::{compose, nearest_sample, trilinear_sample, warp};

pub type Volume64 = Volume<f64>;
pub type Volume32 = Volume<f32>;
pub type DisplacementField64 = DisplacementField<f64>;
pub type DisplacementField32 = DisplacementField<f32>;
pub type VectorField64 = VectorField<f64>;
pub type VectorField32 = VectorField<f32>;
pub type SegiField64 = SegiField<f64>;
pub type SegiField32 = SegiField<f32>;
