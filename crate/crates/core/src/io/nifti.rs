//! Read-only NIfTI-1 single-file (`.nii`, `.nii.gz`) subset.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Volume, VolumeKind};
use crate::scalar::{ElementType, Real};

const HEADER_SIZE: usize = 348;

/// Orientation metadata, recorded but never applied.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NiftiOrientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub qfac: f32,
    pub srow: [[f32; 4]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiftiHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub datatype: ElementType,
    pub vox_offset: usize,
    /// `None` when the file stores slope 0 (no scaling).
    pub scaling: Option<(f64, f64)>,
    pub orientation: NiftiOrientation,
}

struct Fields<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Fields<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = self.bytes[at..at + 2].try_into().unwrap();
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b = self.bytes[at..at + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

fn datatype_name(code: i16) -> String {
    let name = match code {
        1 => "binary",
        8 => "int32",
        32 => "complex64",
        128 => "rgb24",
        256 => "int8",
        512 => "uint16",
        768 => "uint32",
        1024 => "int64",
        1280 => "uint64",
        1536 => "float128",
        _ => "unknown",
    };
    format!("code {code} ({name})")
}

fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parse the 348-byte header. Both byte orders are accepted.
pub fn parse_header(path: &Path, bytes: &[u8]) -> Result<(NiftiHeader, bool)> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_SIZE {
        return Err(malformed(format!(
            "{} bytes, header needs {HEADER_SIZE}",
            bytes.len()
        )));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "n+1",
        });
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, le.swap_bytes()) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(malformed(format!("sizeof_hdr is {le}, expected 348"))),
    };
    let h = Fields { bytes, big_endian };

    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(malformed(format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    let mut dims = [1usize; 3];
    for axis in 0..ndim {
        let d = h.i16(42 + 2 * axis);
        if d < 1 {
            return Err(malformed(format!("dim[{}] = {d}", axis + 1)));
        }
        if let Some(slot) = dims.get_mut(axis) {
            *slot = d as usize;
        } else if d != 1 {
            return Err(malformed(format!(
                "only 3-D volumes are supported, dim[{}] = {d}",
                axis + 1
            )));
        }
    }

    let code = h.i16(70);
    let datatype = match code {
        2 => ElementType::Uint8,
        4 => ElementType::Int16,
        16 => ElementType::Float32,
        64 => ElementType::Float64,
        other => {
            return Err(Error::UnsupportedDatatype {
                path: path.to_path_buf(),
                datatype: datatype_name(other),
            })
        }
    };

    let mut spacing = [1.0f64; 3];
    for (axis, s) in spacing.iter_mut().enumerate().take(ndim.min(3)) {
        let p = h.f32(80 + 4 * axis) as f64;
        if !(p.is_finite() && p != 0.0) {
            return Err(malformed(format!("pixdim[{}] = {p}", axis + 1)));
        }
        *s = p.abs();
    }

    let vox_offset = h.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(malformed(format!("vox_offset = {vox_offset}")));
    }
    let slope = h.f32(112) as f64;
    let inter = h.f32(116) as f64;
    let scaling = (slope.is_finite() && slope != 0.0)
        .then_some((slope, if inter.is_finite() { inter } else { 0.0 }));

    let mut srow = [[0.0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, x) in row.iter_mut().enumerate() {
            *x = h.f32(280 + 16 * r + 4 * c);
        }
    }
    let orientation = NiftiOrientation {
        qform_code: h.i16(252),
        sform_code: h.i16(254),
        quatern: [h.f32(256), h.f32(260), h.f32(264)],
        qoffset: [h.f32(268), h.f32(272), h.f32(276)],
        qfac: h.f32(76),
        srow,
    };
    Ok((
        NiftiHeader {
            dims,
            spacing,
            datatype,
            vox_offset: vox_offset as usize,
            scaling,
            orientation,
        },
        big_endian,
    ))
}

/// Read a NIfTI-1 volume as intensity data, applying `scl_slope`/`scl_inter`.
///
/// The origin is taken from the qform offset (or the sform translation when
/// only an sform is present); rotations are not applied.
pub fn read_nifti<T: Real>(path: &Path) -> Result<(Volume<T>, NiftiHeader)> {
    let bytes = load_bytes(path)?;
    let (header, big_endian) = parse_header(path, &bytes)?;
    let dims = Dims(header.dims);
    let size = header.datatype.byte_size();
    let expected = dims.len() * size;
    let available = bytes.len().saturating_sub(header.vox_offset);
    if available < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: available,
        });
    }
    let payload = &bytes[header.vox_offset..header.vox_offset + expected];
    let data = payload
        .chunks_exact(size)
        .map(|b| {
            let raw = if big_endian {
                let mut swapped = [0u8; 8];
                swapped[..size].copy_from_slice(b);
                swapped[..size].reverse();
                header.datatype.decode_le(&swapped[..size])
            } else {
                header.datatype.decode_le(b)
            };
            T::of(match header.scaling {
                Some((slope, inter)) => raw * slope + inter,
                None => raw,
            })
        })
        .collect();
    let o = &header.orientation;
    let origin = if o.qform_code > 0 {
        o.qoffset.map(f64::from)
    } else if o.sform_code > 0 {
        [
            o.srow[0][3] as f64,
            o.srow[1][3] as f64,
            o.srow[2][3] as f64,
        ]
    } else {
        [0.0; 3]
    };
    let vol = Volume::new(dims, header.spacing, origin, data, VolumeKind::Intensity)?;
    Ok((vol, header))
}
