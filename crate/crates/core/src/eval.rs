//! Overlap and surface-distance scores between label maps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Volume};
use crate::scalar::Real;

fn count_and_check<T: Real>(
    a: &Volume<T>,
    b: &Volume<T>,
    id: u32,
) -> Result<(usize, usize, usize)> {
    a.dims().ensure_same(&b.dims(), "label comparison")?;
    let target = T::of(id as f64);
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == target, y == target);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok((na, nb, both))
}

/// Dice overlap `2|A ∩ B| / (|A| + |B|)` of the voxels labelled `id`.
///
/// Fails with [`Error::EmptyStructure`] when neither volume contains `id`.
pub fn dice<T: Real>(a: &Volume<T>, b: &Volume<T>, id: u32) -> Result<f64> {
    let (na, nb, both) = count_and_check(a, b, id)?;
    if na + nb == 0 {
        return Err(Error::EmptyStructure { id });
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Voxels labelled `id` with at least one 6-connected neighbour that is not
/// (voxels on the volume border always qualify).
pub fn surface_mask<T: Real>(vol: &Volume<T>, id: u32) -> Vec<bool> {
    let dims = vol.dims();
    let target = T::of(id as f64);
    let data = vol.data();
    (0..dims.len())
        .map(|idx| {
            if data[idx] != target {
                return false;
            }
            let c = dims.coords(idx);
            (0..3).any(|a| {
                let s = dims.stride(a);
                c[a] == 0
                    || c[a] + 1 == dims[a]
                    || data[idx - s] != target
                    || data[idx + s] != target
            })
        })
        .collect()
}

/// Squared distance along one line to the nearest finite sample, via the
/// lower envelope of parabolas rooted at the finite samples.
fn edt_line(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * spacing;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        let fq = f[q] + pos(q) * pos(q);
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (fq - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *slot = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// seed voxel, separable over the three axes.
pub fn squared_distance_transform(seeds: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let mut cur: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = Vec::new();
    let mut out_line = Vec::new();
    for a in 0..3 {
        let n = dims[a];
        let s = dims.stride(a);
        line.resize(n, 0.0);
        out_line.resize(n, 0.0);
        let mut next = cur.clone();
        for idx in 0..dims.len() {
            if dims.coords(idx)[a] != 0 {
                continue;
            }
            for q in 0..n {
                line[q] = cur[idx + q * s];
            }
            edt_line(&line, spacing[a], &mut out_line);
            for q in 0..n {
                next[idx + q * s] = out_line[q];
            }
        }
        cur = next;
    }
    cur
}

/// Average symmetric surface distance in mm: every surface voxel of either
/// structure contributes its distance to the nearest surface voxel of the
/// other, and all contributions are averaged together.
pub fn asd<T: Real>(a: &Volume<T>, b: &Volume<T>, id: u32, spacing: [f64; 3]) -> Result<f64> {
    let (na, nb, _) = count_and_check(a, b, id)?;
    if na == 0 || nb == 0 {
        return Err(Error::EmptyStructure { id });
    }
    let dims = a.dims();
    let sa = surface_mask(a, id);
    let sb = surface_mask(b, id);
    let da = squared_distance_transform(&sa, dims, spacing);
    let db = squared_distance_transform(&sb, dims, spacing);
    let mut total = 0.0;
    let mut count = 0usize;
    for idx in 0..dims.len() {
        if sa[idx] {
            total += db[idx].sqrt();
            count += 1;
        }
        if sb[idx] {
            total += da[idx].sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureScore {
    pub id: u32,
    pub dice: f64,
    pub asd: f64,
}

/// Per-structure scores with mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<StructureScore>,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub asd_mean: f64,
    pub asd_std: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_entries(entries: Vec<StructureScore>) -> Self {
        let (dice_mean, dice_std) = mean_std(entries.iter().map(|e| e.dice));
        let (asd_mean, asd_std) = mean_std(entries.iter().map(|e| e.asd));
        EvalReport {
            entries,
            dice_mean,
            dice_std,
            asd_mean,
            asd_std,
        }
    }

    /// Text table: Dice as a percentage and ASD in mm, two decimals each.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<12}{:>16}{:>16}", "structure", "DS (%)", "ASD (mm)").unwrap();
        for e in &self.entries {
            writeln!(s, "{:<12}{:>16.2}{:>16.2}", e.id, 100.0 * e.dice, e.asd).unwrap();
        }
        let ds = format!("{:.2}±{:.2}", 100.0 * self.dice_mean, 100.0 * self.dice_std);
        let asd = format!("{:.2}±{:.2}", self.asd_mean, self.asd_std);
        writeln!(s, "{:<12}{:>16}{:>16}", "mean±std", ds, asd).unwrap();
        s
    }
}

/// Dice and ASD for each structure id.
pub fn evaluate_labels<T: Real>(
    a: &Volume<T>,
    b: &Volume<T>,
    ids: &[u32],
    spacing: [f64; 3],
) -> Result<EvalReport> {
    let entries = ids
        .iter()
        .map(|&id| {
            Ok(StructureScore {
                id,
                dice: dice(a, b, id)?,
                asd: asd(a, b, id, spacing)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_entries(entries))
}
