#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segireg::smooth::gaussian_smooth_volume;
use segireg::warp::warp;
use segireg::{
    cycle_loss, loss_gradient_masked, segi, segi_loss, smoothness, total_loss, Dims,
    DisplacementField, RegistrationConfig, TermMask, Volume,
};

/// Smoothed uniform noise rescaled to [0, 1].
pub fn smooth_random_volume(dims: Dims, sigma: f64, seed: u64) -> Volume<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw =
        Volume::intensity(dims, (0..dims.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
    gaussian_smooth_volume(&raw, sigma)
        .unwrap()
        .normalized_min_max()
}

/// Smoothed noise field whose largest vector has length `max_len`.
pub fn smooth_random_field(
    dims: Dims,
    sigma: f64,
    max_len: f64,
    seed: u64,
) -> DisplacementField<f64> {
    let comps: Vec<Volume<f64>> = (0..3)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 3 + c);
            let raw = Volume::intensity(
                dims,
                (0..dims.len()).map(|_| rng.random::<f64>() - 0.5).collect(),
            )
            .unwrap();
            gaussian_smooth_volume(&raw, sigma).unwrap()
        })
        .collect();
    let vectors: Vec<[f64; 3]> = (0..dims.len())
        .map(|i| [comps[0].data()[i], comps[1].data()[i], comps[2].data()[i]])
        .collect();
    let peak = vectors
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .fold(0.0, f64::max);
    let scale = max_len / peak;
    DisplacementField::new(
        dims,
        [1.0; 3],
        vectors.into_iter().map(|v| v.map(|c| c * scale)).collect(),
    )
    .unwrap()
}

const H: f64 = 1e-3;

/// Objective value computed through the public forward operators only.
fn similarity(moved: &Volume<f64>, reference: &Volume<f64>, cfg: &RegistrationConfig) -> f64 {
    let a = segi(moved, &cfg.sigmas, cfg.grad_eps).unwrap();
    let b = segi(reference, &cfg.sigmas, cfg.grad_eps).unwrap();
    segi_loss(&a, &b).unwrap()
}

pub fn reference_value(
    m: &Volume<f64>,
    f: &Volume<f64>,
    u: &DisplacementField<f64>,
    v: &DisplacementField<f64>,
    cfg: &RegistrationConfig,
    mask: TermMask,
) -> f64 {
    if mask == TermMask::ALL {
        return total_loss(m, f, u, v, cfg).unwrap().total;
    }
    let mut value = 0.0;
    if mask.similarity {
        let forward = similarity(&warp(m, u).unwrap(), f, cfg);
        value += if cfg.symmetric_similarity {
            0.5 * (forward + similarity(&warp(f, v).unwrap(), m, cfg))
        } else {
            forward
        };
    }
    if mask.cycle {
        value += cfg.lambda1 * cycle_loss(m, u, v).unwrap();
    }
    if mask.smoothness {
        value += cfg.lambda2 * (smoothness(u).unwrap() + smoothness(v).unwrap());
    }
    value
}

fn perturbed(
    d: &DisplacementField<f64>,
    idx: usize,
    c: usize,
    delta: f64,
) -> DisplacementField<f64> {
    let mut vs = d.clone().into_vectors();
    vs[idx][c] += delta;
    DisplacementField::new(d.dims(), d.spacing(), vs).unwrap()
}

fn relative_error(fd: f64, analytic: f64) -> f64 {
    let denom = fd.abs().max(analytic.abs());
    if denom == 0.0 {
        0.0
    } else {
        (fd - analytic).abs() / denom
    }
}

/// Worst relative errors of the analytic gradient over sampled components.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdErrors {
    /// Against plain central differences with step `H`.
    pub central: f64,
    /// Against the Richardson combination of steps `H` and `H / 2`, whose
    /// truncation error is O(H⁴) instead of O(H²).
    pub extrapolated: f64,
}

impl FdErrors {
    pub fn max(self, other: Self) -> Self {
        Self {
            central: self.central.max(other.central),
            extrapolated: self.extrapolated.max(other.extrapolated),
        }
    }
}

/// Compares the analytic gradient with finite differences over `samples`
/// random components of each field.
pub fn fd_errors(seed: u64, mask: TermMask, samples: usize, cfg: &RegistrationConfig) -> FdErrors {
    let dims = Dims::cube(16);
    let m = smooth_random_volume(dims, 1.5, 100 + seed);
    let f = smooth_random_volume(dims, 1.5, 200 + seed);
    let u = smooth_random_field(dims, 2.0, 2.0, 300 + seed);
    let v = smooth_random_field(dims, 2.0, 2.0, 400 + seed);
    let grad = loss_gradient_masked(&m, &f, &u, &v, cfg, mask).unwrap();
    let value = reference_value(&m, &f, &u, &v, cfg, mask);
    assert!(
        (grad.value - value).abs() < 1e-12,
        "value {} vs {}",
        grad.value,
        value
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = FdErrors::default();
    for field in 0..2 {
        for _ in 0..samples {
            // trilinear sampling is piecewise linear in the sample point, with
            // kinks on integer coordinates (cell faces and the clamp limits);
            // components whose stencil straddles one are redrawn
            let (idx, c) = loop {
                let idx = rng.random_range(0..dims.len());
                let c = rng.random_range(0..3);
                let d = if field == 0 {
                    u.vectors()[idx][c]
                } else {
                    v.vectors()[idx][c]
                };
                let p = dims.coords(idx)[c] as f64 + d;
                if (p - p.round()).abs() > H {
                    break (idx, c);
                }
            };
            let central = |h: f64| {
                let (plus, minus) = if field == 0 {
                    (
                        reference_value(&m, &f, &perturbed(&u, idx, c, h), &v, cfg, mask),
                        reference_value(&m, &f, &perturbed(&u, idx, c, -h), &v, cfg, mask),
                    )
                } else {
                    (
                        reference_value(&m, &f, &u, &perturbed(&v, idx, c, h), cfg, mask),
                        reference_value(&m, &f, &u, &perturbed(&v, idx, c, -h), cfg, mask),
                    )
                };
                (plus - minus) / (2.0 * h)
            };
            let analytic = if field == 0 {
                grad.d_u.vectors()[idx][c]
            } else {
                grad.d_v.vectors()[idx][c]
            };
            let coarse = central(H);
            let fine = central(H / 2.0);
            worst = worst.max(FdErrors {
                central: relative_error(coarse, analytic),
                extrapolated: relative_error((4.0 * fine - coarse) / 3.0, analytic),
            });
        }
    }
    worst
}

/// Random label map with ids in `0..=max_id`, grown from a few random boxes
/// so structures have interiors as well as surfaces.
pub fn random_labels(dims: Dims, max_id: u32, rng: &mut impl Rng) -> Volume<f64> {
    let mut data = vec![0.0; dims.len()];
    for _ in 0..rng.random_range(1..=4) {
        let id = rng.random_range(1..=max_id) as f64;
        let lo: Vec<usize> = (0..3).map(|a| rng.random_range(0..dims[a])).collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| rng.random_range(lo[a]..dims[a]) + 1)
            .collect();
        for (idx, slot) in data.iter_mut().enumerate() {
            let c = dims.coords(idx);
            if (0..3).all(|a| c[a] >= lo[a] && c[a] < hi[a]) {
                *slot = id;
            }
        }
    }
    // salt a few isolated voxels
    for _ in 0..rng.random_range(0..4) {
        let idx = rng.random_range(0..dims.len());
        data[idx] = rng.random_range(0..=max_id) as f64;
    }
    Volume::label(dims, data).unwrap()
}

/// Dice by direct counting.
pub fn brute_dice(a: &Volume<f64>, b: &Volume<f64>, id: u32) -> f64 {
    let t = id as f64;
    let na = a.data().iter().filter(|&&x| x == t).count();
    let nb = b.data().iter().filter(|&&x| x == t).count();
    let both = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(&x, &y)| x == t && y == t)
        .count();
    2.0 * both as f64 / (na + nb) as f64
}

fn brute_surface(v: &Volume<f64>, id: u32) -> Vec<[usize; 3]> {
    let dims = v.dims();
    let t = id as f64;
    let label = |c: [isize; 3]| {
        if (0..3).any(|a| c[a] < 0 || c[a] >= dims[a] as isize) {
            return None;
        }
        Some(v.at(c[0] as usize, c[1] as usize, c[2] as usize))
    };
    let mut out = Vec::new();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                if v.at(i, j, k) != t {
                    continue;
                }
                let c = [i as isize, j as isize, k as isize];
                let boundary = (0..3).any(|a| {
                    [-1isize, 1].iter().any(|&d| {
                        let mut n = c;
                        n[a] += d;
                        label(n) != Some(t)
                    })
                });
                if boundary {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// ASD by exhaustive search over surface-voxel pairs.
pub fn brute_asd(a: &Volume<f64>, b: &Volume<f64>, id: u32, spacing: [f64; 3]) -> f64 {
    let sa = brute_surface(a, id);
    let sb = brute_surface(b, id);
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 - q[a] as f64) * spacing[a];
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| {
        set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)
    };
    let total: f64 = sa.iter().map(|p| nearest(p, &sb)).sum::<f64>()
        + sb.iter().map(|p| nearest(p, &sa)).sum::<f64>();
    total / (sa.len() + sb.len()) as f64
}
