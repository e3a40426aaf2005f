//! Direct optimization of the forward and backward displacement fields.
//!
//! Both fields are dense, one vector per voxel of the current pyramid level,
//! and are updated jointly with Adam from a single evaluation of the total
//! objective per iteration. Gradients are accumulated in reverse through
//! hand-written adjoints of each stage:
//!
//! * trilinear warp: derivative of the interpolation weights with respect to
//!   the sample point (zero along clamped axes), and a scatter of the weights
//!   for the dependence on the warped image itself;
//! * central-difference gradient and Gaussian smoothing: exact transposes of
//!   the linear operators, clamp-to-edge included;
//! * normalization: projection `(I - n n^T) / |g|`, zero under the guard;
//! * cosine reduction: `(b_hat - cos a_hat) / |a|`, zero under the guard;
//! * L1 cycle term: `sign(residual)`, with `sign(0) = 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, DisplacementField, Volume};
use crate::losses::{smoothness_gradient, LossBreakdown};
use crate::pyramid::{resample_pyramid, upsample_field};
use crate::scalar::{neumaier_sum, Real};
use crate::segi::{SegiEncoder, DEFAULT_EPS};
use crate::warp::{ensure_intensity, warp_values_transpose, warp_values_with_jacobian};

/// Contrast polarity of the moving image relative to the fixed one.
///
/// The cosine similarity is sign sensitive, and inverting the intensities of
/// an image negates its encoding exactly. `Negative` registers `1 - moving`
/// (after min-max normalization) instead of `moving`; `Auto` picks whichever
/// polarity gives the lower similarity loss at the coarsest level with zero
/// fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    #[default]
    Auto,
    Positive,
    Negative,
}

/// Settings of one registration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Gaussian scales of the gradient encoding, in voxels of the current level.
    pub sigmas: Vec<f64>,
    /// Weight of the cycle-consistency term.
    pub lambda1: f64,
    /// Weight of the smoothness term on each field.
    pub lambda2: f64,
    pub levels: usize,
    pub iters_per_level: usize,
    /// Adam learning rate, in voxels of the current level.
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Norm guard for gradient normalization and cosines.
    pub grad_eps: f64,
    /// Also compare `warp(fixed, v)` against the moving image's encoding.
    pub symmetric_similarity: bool,
    pub polarity: Polarity,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            sigmas: vec![1.0, 1.5, 3.0],
            lambda1: 0.1,
            lambda2: 1.0,
            levels: 3,
            iters_per_level: 200,
            step_size: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_eps: DEFAULT_EPS,
            symmetric_similarity: false,
            polarity: Polarity::Auto,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!(
                "sigmas must be a nonempty list of positive values, got {:?}",
                self.sigmas
            ));
        }
        for (name, x) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(x.is_finite() && x >= 0.0) {
                return bad(format!("{name} must be nonnegative, got {x}"));
            }
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.iters_per_level == 0 {
            return bad("iters_per_level must be at least 1".into());
        }
        for (name, x) in [
            ("step_size", self.step_size),
            ("adam_eps", self.adam_eps),
            ("grad_eps", self.grad_eps),
        ] {
            if !(x.is_finite() && x > 0.0) {
                return bad(format!("{name} must be positive, got {x}"));
            }
        }
        for (name, x) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&x) {
                return bad(format!("{name} must lie in [0, 1), got {x}"));
            }
        }
        Ok(())
    }
}

/// One optimizer iteration, recorded before the update is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Pyramid level, 0 being full resolution.
    pub level: usize,
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub max_disp_u: f64,
    pub max_disp_v: f64,
    pub step_size: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub seed: u64,
    /// Polarity actually used (never `Auto`).
    pub polarity: Polarity,
    pub records: Vec<TraceRecord>,
}

impl OptimizationTrace {
    /// Records of one level, in iteration order.
    pub fn level(&self, level: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.level == level)
    }
}

/// Which terms of the objective contribute to the value and gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermMask {
    pub similarity: bool,
    pub cycle: bool,
    pub smoothness: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        similarity: true,
        cycle: true,
        smoothness: true,
    };
    pub const SIMILARITY: TermMask = TermMask {
        similarity: true,
        cycle: false,
        smoothness: false,
    };
    pub const CYCLE: TermMask = TermMask {
        similarity: false,
        cycle: true,
        smoothness: false,
    };
    pub const SMOOTHNESS: TermMask = TermMask {
        similarity: false,
        cycle: false,
        smoothness: true,
    };
}

/// Objective value with its gradient with respect to both fields.
#[derive(Clone, Debug)]
pub struct LossGradient<T> {
    /// Value of the masked objective (equals `breakdown.total` for [`TermMask::ALL`]).
    pub value: f64,
    pub breakdown: LossBreakdown,
    pub d_u: DisplacementField<T>,
    pub d_v: DisplacementField<T>,
}

/// The objective on one grid, with the fixed (and, if needed, moving)
/// encodings computed once.
pub(crate) struct Objective<'a, T> {
    moving: &'a Volume<T>,
    fixed: &'a Volume<T>,
    dims: Dims,
    encoder: SegiEncoder<T>,
    fixed_sg: Vec<Vec<[T; 3]>>,
    moving_sg: Option<Vec<Vec<[T; 3]>>>,
    cfg: &'a RegistrationConfig,
    mask: TermMask,
}

fn ensure_finite<T: Real>(values: &[[T; 3]], stage: &'static str) -> Result<()> {
    if values.iter().flatten().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage })
    }
}

#[inline]
fn add_scaled<T: Real>(acc: &mut [[T; 3]], adj: &[T], jac: &[[T; 3]]) {
    acc.par_iter_mut()
        .zip(adj.par_iter().zip(jac))
        .for_each(|(a, (&g, j))| {
            for c in 0..3 {
                a[c] += g * j[c];
            }
        });
}

impl<'a, T: Real> Objective<'a, T> {
    pub(crate) fn new(
        moving: &'a Volume<T>,
        fixed: &'a Volume<T>,
        cfg: &'a RegistrationConfig,
        mask: TermMask,
    ) -> Result<Self> {
        cfg.validate()?;
        ensure_intensity(moving, "registration")?;
        ensure_intensity(fixed, "registration")?;
        let dims = moving.dims();
        dims.ensure_same(&fixed.dims(), "objective (moving vs fixed)")?;
        let encoder = SegiEncoder::new(&cfg.sigmas, cfg.grad_eps)?;
        let fixed_sg = encoder.forward(fixed.data(), dims)?.smoothed().to_vec();
        let moving_sg = if cfg.symmetric_similarity {
            Some(encoder.forward(moving.data(), dims)?.smoothed().to_vec())
        } else {
            None
        };
        Ok(Objective {
            moving,
            fixed,
            dims,
            encoder,
            fixed_sg,
            moving_sg,
            cfg,
            mask,
        })
    }

    pub(crate) fn evaluate(
        &self,
        u: &DisplacementField<T>,
        v: &DisplacementField<T>,
    ) -> Result<LossGradient<T>> {
        let dims = self.dims;
        dims.ensure_same(&u.dims(), "loss gradient (forward field)")?;
        dims.ensure_same(&v.dims(), "loss gradient (backward field)")?;
        let n = T::of(dims.len() as f64);
        let (l1, l2) = (self.cfg.lambda1, self.cfg.lambda2);
        let mut du = vec![[T::zero(); 3]; dims.len()];
        let mut dv = vec![[T::zero(); 3]; dims.len()];

        // similarity, forward direction
        let (moved, jac_u) = warp_values_with_jacobian(self.moving.data(), dims, u.vectors());
        let sim_weight = if self.moving_sg.is_some() { 0.5 } else { 1.0 };
        let tape = self.encoder.forward(&moved, dims)?;
        let mut l_sg = self.encoder.loss(&tape, &self.fixed_sg).as_f64();
        if self.mask.similarity {
            let adj = self
                .encoder
                .loss_adjoint(&tape, &self.fixed_sg, T::of(sim_weight));
            add_scaled(&mut du, &adj, &jac_u);
        }
        drop(tape);

        // similarity, backward direction (opt-in)
        if let Some(moving_sg) = &self.moving_sg {
            let (moved_back, jac_v) =
                warp_values_with_jacobian(self.fixed.data(), dims, v.vectors());
            let tape = self.encoder.forward(&moved_back, dims)?;
            let back = self.encoder.loss(&tape, moving_sg).as_f64();
            l_sg = 0.5 * (l_sg + back);
            if self.mask.similarity {
                let adj = self.encoder.loss_adjoint(&tape, moving_sg, T::of(0.5));
                add_scaled(&mut dv, &adj, &jac_v);
            }
        }
        ensure_finite(&du, "similarity adjoint")?;

        // cycle consistency: moving -> u -> v should restore moving
        let (twice, jac_cv) = warp_values_with_jacobian(&moved, dims, v.vectors());
        let residual: Vec<T> = twice
            .iter()
            .zip(self.moving.data())
            .map(|(a, b)| *a - *b)
            .collect();
        let l_cc = (neumaier_sum(residual.iter().map(|r| r.abs())) / n).as_f64();
        if self.mask.cycle && l1 != 0.0 {
            let w = T::of(l1) / n;
            let adj_twice: Vec<T> = residual
                .iter()
                .map(|&r| {
                    if r > T::zero() {
                        w
                    } else if r < T::zero() {
                        -w
                    } else {
                        T::zero()
                    }
                })
                .collect();
            add_scaled(&mut dv, &adj_twice, &jac_cv);
            let adj_moved = warp_values_transpose(&adj_twice, dims, v.vectors());
            add_scaled(&mut du, &adj_moved, &jac_u);
        }
        ensure_finite(&du, "cycle adjoint")?;
        ensure_finite(&dv, "cycle adjoint")?;

        // smoothness
        let psi_u = crate::losses::smoothness(u)?.as_f64();
        let psi_v = crate::losses::smoothness(v)?.as_f64();
        if self.mask.smoothness && l2 != 0.0 {
            for (acc, g) in [
                (&mut du, smoothness_gradient(u.vectors(), dims, T::of(l2))),
                (&mut dv, smoothness_gradient(v.vectors(), dims, T::of(l2))),
            ] {
                acc.par_iter_mut().zip(g).for_each(|(a, b)| {
                    for c in 0..3 {
                        a[c] += b[c];
                    }
                });
            }
        }

        let breakdown = LossBreakdown::from_parts(l_sg, l_cc, psi_u, psi_v, l1, l2);
        if !breakdown.is_finite() {
            return Err(Error::NonFinite {
                stage: "loss evaluation",
            });
        }
        let mut value = 0.0;
        if self.mask.similarity {
            value += l_sg;
        }
        if self.mask.cycle {
            value += l1 * l_cc;
        }
        if self.mask.smoothness {
            value += l2 * (psi_u + psi_v);
        }
        ensure_finite(&du, "forward field gradient")?;
        ensure_finite(&dv, "backward field gradient")?;
        Ok(LossGradient {
            value,
            breakdown,
            d_u: DisplacementField::from_vectors_unchecked(dims, u.spacing(), du),
            d_v: DisplacementField::from_vectors_unchecked(dims, v.spacing(), dv),
        })
    }
}

/// Total objective and its exact gradient with respect to every component
/// of `u` and `v`.
pub fn loss_gradient<T: Real>(
    moving: &Volume<T>,
    fixed: &Volume<T>,
    u: &DisplacementField<T>,
    v: &DisplacementField<T>,
    cfg: &RegistrationConfig,
) -> Result<LossGradient<T>> {
    loss_gradient_masked(moving, fixed, u, v, cfg, TermMask::ALL)
}

/// [`loss_gradient`] restricted to a subset of the terms.
pub fn loss_gradient_masked<T: Real>(
    moving: &Volume<T>,
    fixed: &Volume<T>,
    u: &DisplacementField<T>,
    v: &DisplacementField<T>,
    cfg: &RegistrationConfig,
    mask: TermMask,
) -> Result<LossGradient<T>> {
    Objective::new(moving, fixed, cfg, mask)?.evaluate(u, v)
}

/// Adam state for one dense field.
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Vec<[T; 3]>,
    v: Vec<[T; 3]>,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, cfg: &RegistrationConfig) -> Self {
        Adam {
            lr: T::of(cfg.step_size),
            beta1: T::of(cfg.beta1),
            beta2: T::of(cfg.beta2),
            eps: T::of(cfg.adam_eps),
            t: 0,
            m: vec![[T::zero(); 3]; len],
            v: vec![[T::zero(); 3]; len],
        }
    }

    pub fn step(&mut self, params: &mut [[T; 3]], grad: &[[T; 3]]) {
        self.t += 1;
        let one = T::one();
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let c1 = one - b1.powi(self.t);
        let c2 = one - b2.powi(self.t);
        params
            .par_iter_mut()
            .zip(self.m.par_iter_mut().zip(self.v.par_iter_mut()))
            .zip(grad)
            .for_each(|((p, (m, v)), g)| {
                for c in 0..3 {
                    m[c] = b1 * m[c] + (one - b1) * g[c];
                    v[c] = b2 * v[c] + (one - b2) * g[c] * g[c];
                    let m_hat = m[c] / c1;
                    let v_hat = v[c] / c2;
                    p[c] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
    }
}

/// Registration result: forward field `u` (moving onto fixed), backward
/// field `v`, and the per-iteration trace.
#[derive(Clone, Debug)]
pub struct Registration<T> {
    pub u: DisplacementField<T>,
    pub v: DisplacementField<T>,
    pub trace: OptimizationTrace,
}

/// Coarse-to-fine registration of `moving` onto `fixed`.
///
/// Both volumes must share a grid. Intensities are min-max normalized to
/// `[0, 1]` per volume first. At the coarsest level both fields start at
/// zero; between levels they are upsampled trilinearly and doubled.
pub fn register<T: Real>(
    moving: &Volume<T>,
    fixed: &Volume<T>,
    cfg: &RegistrationConfig,
) -> Result<Registration<T>> {
    register_with_observer(moving, fixed, cfg, |_| {})
}

/// [`register`] with a callback invoked on every trace record as it is produced.
pub fn register_with_observer<T: Real>(
    moving: &Volume<T>,
    fixed: &Volume<T>,
    cfg: &RegistrationConfig,
    mut observer: impl FnMut(&TraceRecord),
) -> Result<Registration<T>> {
    cfg.validate()?;
    ensure_intensity(moving, "register")?;
    ensure_intensity(fixed, "register")?;
    moving
        .dims()
        .ensure_same(&fixed.dims(), "register (moving vs fixed)")?;

    let mut moving_pyr = resample_pyramid(&moving.normalized_min_max(), cfg.levels)?;
    let fixed_pyr = resample_pyramid(&fixed.normalized_min_max(), cfg.levels)?;
    let coarsest = cfg.levels - 1;
    let mut u = DisplacementField::zeros_like(&fixed_pyr[coarsest]);
    let mut v = DisplacementField::zeros_like(&fixed_pyr[coarsest]);

    let polarity = match cfg.polarity {
        Polarity::Auto => {
            let probe = Objective::new(
                &moving_pyr[coarsest],
                &fixed_pyr[coarsest],
                cfg,
                TermMask::SIMILARITY,
            )?;
            if probe.evaluate(&u, &v)?.breakdown.l_sg > 0.0 {
                Polarity::Negative
            } else {
                Polarity::Positive
            }
        }
        p => p,
    };
    if polarity == Polarity::Negative {
        for level in moving_pyr.iter_mut() {
            *level = level.map(|x| T::one() - x);
        }
    }
    let mut trace = OptimizationTrace {
        seed: cfg.seed,
        polarity,
        records: Vec::new(),
    };

    for level in (0..cfg.levels).rev() {
        let (m, f) = (&moving_pyr[level], &fixed_pyr[level]);
        if level != coarsest {
            u = upsample_field(&u, f.dims())?.with_spacing(f.spacing())?;
            v = upsample_field(&v, f.dims())?.with_spacing(f.spacing())?;
        }
        let objective = Objective::new(m, f, cfg, TermMask::ALL)?;
        let mut adam_u = Adam::new(f.dims().len(), cfg);
        let mut adam_v = Adam::new(f.dims().len(), cfg);
        for iteration in 0..cfg.iters_per_level {
            let eval = match objective.evaluate(&u, &v) {
                Ok(e) => e,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        level,
                        iteration,
                        trace: Box::new(trace),
                    })
                }
                Err(e) => return Err(e),
            };
            let record = TraceRecord {
                level,
                iteration,
                loss: eval.breakdown,
                max_disp_u: u.max_magnitude().as_f64(),
                max_disp_v: v.max_magnitude().as_f64(),
                step_size: cfg.step_size,
            };
            observer(&record);
            trace.records.push(record);
            adam_u.step(u.vectors_mut(), eval.d_u.vectors());
            adam_v.step(v.vectors_mut(), eval.d_v.vectors());
            if !(u.is_finite() && v.is_finite()) {
                return Err(Error::Diverged {
                    level,
                    iteration,
                    trace: Box::new(trace),
                });
            }
        }
    }
    let spacing = fixed.spacing();
    Ok(Registration {
        u: u.with_spacing(spacing)?,
        v: v.with_spacing(spacing)?,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_field, random_volume};

    #[test]
    fn default_config_is_valid() {
        let cfg = RegistrationConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.sigmas, vec![1.0, 1.5, 3.0]);
        assert_eq!((cfg.lambda1, cfg.lambda2), (0.1, 1.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = RegistrationConfig::default();
        let cases = [
            RegistrationConfig {
                sigmas: vec![],
                ..base.clone()
            },
            RegistrationConfig {
                sigmas: vec![1.0, -1.0],
                ..base.clone()
            },
            RegistrationConfig {
                lambda1: -0.1,
                ..base.clone()
            },
            RegistrationConfig {
                iters_per_level: 0,
                ..base.clone()
            },
            RegistrationConfig {
                levels: 0,
                ..base.clone()
            },
            RegistrationConfig {
                beta1: 1.0,
                ..base.clone()
            },
            RegistrationConfig {
                step_size: 0.0,
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = RegistrationConfig::default();
        let mut adam = Adam::<f64>::new(1, &cfg);
        let mut p = [[1.0, 1.0, 1.0]];
        adam.step(&mut p, &[[2.0, -3.0, 0.0]]);
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p[0][0] - (1.0 - 0.05)).abs() < 1e-9);
        assert!((p[0][1] - (1.0 + 0.05)).abs() < 1e-9);
        assert_eq!(p[0][2], 1.0);
    }

    #[test]
    fn masked_values_add_up() {
        let dims = Dims::cube(8);
        let m = random_volume(dims, 1);
        let f = random_volume(dims, 2);
        let u = random_field(dims, 1.0, 3);
        let v = random_field(dims, 1.0, 4);
        let cfg = RegistrationConfig::default();
        let all = loss_gradient(&m, &f, &u, &v, &cfg).unwrap();
        let parts: f64 = [TermMask::SIMILARITY, TermMask::CYCLE, TermMask::SMOOTHNESS]
            .iter()
            .map(|&mask| {
                loss_gradient_masked(&m, &f, &u, &v, &cfg, mask)
                    .unwrap()
                    .value
            })
            .sum();
        assert!((all.value - parts).abs() < 1e-12);
        assert_eq!(all.value, all.breakdown.total);
    }
}
