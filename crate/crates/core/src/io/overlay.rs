//! Grayscale slice renderings with label contours, as binary PPM.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::eval::surface_mask;
use crate::grid::{Dims, Volume};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    /// Fixed axis 2; image x = axis 0, image y = axis 1.
    Axial,
    /// Fixed axis 1; image x = axis 0, image y = axis 2 (top row is the last slice).
    Coronal,
    /// Fixed axis 0; image x = axis 1, image y = axis 2 (top row is the last slice).
    Sagittal,
}

impl Plane {
    fn normal_axis(self) -> usize {
        match self {
            Plane::Axial => 2,
            Plane::Coronal => 1,
            Plane::Sagittal => 0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    /// Voxel under image pixel `(x, y)` of slice `index`.
    fn voxel(self, dims: Dims, index: usize, x: usize, y: usize) -> [usize; 3] {
        match self {
            Plane::Axial => [x, y, index],
            Plane::Coronal => [x, index, dims[2] - 1 - y],
            Plane::Sagittal => [index, x, dims[2] - 1 - y],
        }
    }

    fn image_size(self, dims: Dims) -> (usize, usize) {
        match self {
            Plane::Axial => (dims[0], dims[1]),
            Plane::Coronal => (dims[0], dims[2]),
            Plane::Sagittal => (dims[1], dims[2]),
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Contour colours, assigned to label volumes in order and cycled.
/// The first (blue) is meant for the reference segmentation.
pub const CONTOUR_COLORS: [[u8; 3]; 6] = [
    [0, 0, 255],
    [255, 0, 0],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

fn gray<T: Real>(v: T) -> u8 {
    let v = v.as_f64();
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

/// Render slice `index` of `fixed` with intensities windowed to `[0, 1]`.
/// Surface voxels of every nonzero label in each contour volume are painted
/// in that volume's colour; later volumes draw over earlier ones.
pub fn render_overlay<T: Real>(
    fixed: &Volume<T>,
    label_contours: &[&Volume<T>],
    plane: Plane,
    index: usize,
) -> Result<RgbImage> {
    let dims = fixed.dims();
    let len = dims[plane.normal_axis()];
    if index >= len {
        return Err(Error::SliceOutOfRange {
            plane: plane.name(),
            index,
            len,
        });
    }
    let masks = label_contours
        .iter()
        .map(|labels| {
            labels.dims().ensure_same(&dims, "overlay contour")?;
            let mut union = vec![false; dims.len()];
            for id in labels.label_ids().into_iter().filter(|&id| id != 0) {
                for (u, s) in union.iter_mut().zip(surface_mask(labels, id)) {
                    *u |= s;
                }
            }
            Ok(union)
        })
        .collect::<Result<Vec<_>>>()?;

    let (width, height) = plane.image_size(dims);
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let [i, j, k] = plane.voxel(dims, index, x, y);
            let idx = dims.index(i, j, k);
            let g = gray(fixed.data()[idx]);
            let mut px = [g; 3];
            for (m, mask) in masks.iter().enumerate() {
                if mask[idx] {
                    px = CONTOUR_COLORS[m % CONTOUR_COLORS.len()];
                }
            }
            pixels.push(px);
        }
    }
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

pub fn emit_overlay<T: Real>(
    fixed: &Volume<T>,
    label_contours: &[&Volume<T>],
    plane: Plane,
    index: usize,
    path: &Path,
) -> Result<()> {
    let image = render_overlay(fixed, label_contours, plane, index)?;
    write_atomic(path, &image.to_ppm())
}
