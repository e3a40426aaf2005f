//! Native format: a TOML header next to a raw little-endian payload.
//!
//! `write_volume(v, "a/moving.toml")` produces `a/moving.toml` and
//! `a/moving.raw`; the header names its payload relative to itself. Voxel
//! order is axis 0 fastest, and multi-component data interleave the
//! components of each voxel.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::grid::{Dims, DisplacementField, VectorField, Volume, VolumeKind};
use crate::scalar::{ElementType, Real};
use crate::segi::SegiField;

pub const FORMAT_TAG: &str = "segireg-native";
pub const AXIS_ORDER: &str = "axis0-fastest";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Content {
    Volume,
    Field,
    Segi,
}

/// Header of a native file pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeFileHeader {
    pub format: String,
    pub version: u32,
    pub content: Content,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub element: ElementType,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<VolumeKind>,
    pub components: usize,
    pub axis_order: String,
    /// Scales of a SEGI dump; components are `3 * sigmas.len()`, scale-major
    /// within each voxel.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<Vec<f64>>,
    pub payload: String,
}

fn payload_path(header: &Path) -> Result<PathBuf> {
    if header.extension().is_some_and(|e| e == "raw") {
        return Err(Error::InvalidArgument(format!(
            "{}: a native header may not use the .raw extension",
            header.display()
        )));
    }
    Ok(header.with_extension("raw"))
}

fn write_pair(path: &Path, mut header: VolumeFileHeader, payload: &[u8]) -> Result<()> {
    let raw = payload_path(path)?;
    header.payload = raw.file_name().unwrap().to_string_lossy().into_owned();
    let text = toml::to_string(&header).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    write_atomic(&raw, payload)?;
    write_atomic(path, text.as_bytes())
}

/// Parse and validate a native header, returning it with its payload bytes.
pub fn read_pair(path: &Path) -> Result<(VolumeFileHeader, Vec<u8>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| malformed(e.message().to_string()))?;
    if table.get("format").and_then(|v| v.as_str()) != Some(FORMAT_TAG) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: FORMAT_TAG,
        });
    }
    let header: VolumeFileHeader =
        toml::from_str(&text).map_err(|e| malformed(e.message().to_string()))?;
    if header.version != VERSION {
        return Err(malformed(format!("unsupported version {}", header.version)));
    }
    if header.axis_order != AXIS_ORDER {
        return Err(malformed(format!(
            "unsupported axis order `{}`",
            header.axis_order
        )));
    }
    let dims = Dims::new(header.dims[0], header.dims[1], header.dims[2])
        .map_err(|e| malformed(e.to_string()))?;
    if header.components == 0 {
        return Err(malformed("components must be positive".into()));
    }
    let raw = path.with_file_name(&header.payload);
    let payload = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = dims.len() * header.components * header.element.byte_size();
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            path: raw,
            expected,
            found: payload.len(),
        });
    }
    Ok((header, payload))
}

fn decode<T: Real>(header: &VolumeFileHeader, payload: &[u8]) -> Vec<T> {
    let size = header.element.byte_size();
    if header.element == T::ELEMENT {
        payload.chunks_exact(size).map(T::read_le).collect()
    } else {
        payload
            .chunks_exact(size)
            .map(|b| T::of(header.element.decode_le(b)))
            .collect()
    }
}

fn expect_content(path: &Path, header: &VolumeFileHeader, content: Content) -> Result<()> {
    if header.content != content {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("expected {content:?} content, found {:?}", header.content),
        });
    }
    Ok(())
}

fn expect_components(path: &Path, header: &VolumeFileHeader, expected: usize) -> Result<()> {
    if header.components != expected {
        return Err(Error::ComponentMismatch {
            path: path.to_path_buf(),
            expected,
            found: header.components,
        });
    }
    Ok(())
}

fn base_header<T: Real>(
    content: Content,
    dims: Dims,
    spacing: [f64; 3],
    components: usize,
) -> VolumeFileHeader {
    VolumeFileHeader {
        format: FORMAT_TAG.into(),
        version: VERSION,
        content,
        dims: dims.0,
        spacing,
        origin: [0.0; 3],
        element: T::ELEMENT,
        kind: None,
        components,
        axis_order: AXIS_ORDER.into(),
        sigmas: None,
        payload: String::new(),
    }
}

pub fn write_native_volume<T: Real>(vol: &Volume<T>, path: &Path) -> Result<()> {
    let mut header = base_header::<T>(Content::Volume, vol.dims(), vol.spacing(), 1);
    header.origin = vol.origin();
    header.kind = Some(vol.kind());
    let mut payload = Vec::with_capacity(vol.data().len() * T::ELEMENT.byte_size());
    for &x in vol.data() {
        x.write_le(&mut payload);
    }
    write_pair(path, header, &payload)
}

pub fn read_native_volume<T: Real>(path: &Path) -> Result<Volume<T>> {
    let (header, payload) = read_pair(path)?;
    expect_components(path, &header, 1)?;
    expect_content(path, &header, Content::Volume)?;
    let dims = Dims(header.dims);
    let kind = header.kind.unwrap_or(VolumeKind::Intensity);
    Volume::new(
        dims,
        header.spacing,
        header.origin,
        decode(&header, &payload),
        kind,
    )
    .map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn encode_vectors<T: Real>(vectors: &[[T; 3]], out: &mut Vec<u8>) {
    for v in vectors {
        for &c in v {
            c.write_le(out);
        }
    }
}

pub fn write_field<T: Real>(field: &DisplacementField<T>, path: &Path) -> Result<()> {
    let header = base_header::<T>(Content::Field, field.dims(), field.spacing(), 3);
    let mut payload = Vec::with_capacity(field.vectors().len() * 3 * T::ELEMENT.byte_size());
    encode_vectors(field.vectors(), &mut payload);
    write_pair(path, header, &payload)
}

pub fn read_field<T: Real>(path: &Path) -> Result<DisplacementField<T>> {
    let (header, payload) = read_pair(path)?;
    expect_components(path, &header, 3)?;
    expect_content(path, &header, Content::Field)?;
    let values: Vec<T> = decode(&header, &payload);
    let vectors = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    DisplacementField::new(Dims(header.dims), header.spacing, vectors).map_err(|e| {
        Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })
}

/// Write a SEGI field: `3K` components per voxel, the `K` scale vectors in
/// the order of `sigmas`.
pub fn write_segi<T: Real>(segi: &SegiField<T>, spacing: [f64; 3], path: &Path) -> Result<()> {
    let k = segi.sigmas().len();
    let mut header = base_header::<T>(Content::Segi, segi.dims(), spacing, 3 * k);
    header.sigmas = Some(segi.sigmas().to_vec());
    let n = segi.dims().len();
    let mut payload = Vec::with_capacity(n * 3 * k * T::ELEMENT.byte_size());
    for idx in 0..n {
        for f in segi.fields() {
            encode_vectors(&f.vectors()[idx..idx + 1], &mut payload);
        }
    }
    write_pair(path, header, &payload)
}

pub fn read_segi<T: Real>(path: &Path) -> Result<SegiField<T>> {
    let (header, payload) = read_pair(path)?;
    expect_content(path, &header, Content::Segi)?;
    let sigmas = header
        .sigmas
        .clone()
        .ok_or_else(|| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "segi content without sigmas".into(),
        })?;
    expect_components(path, &header, 3 * sigmas.len())?;
    let values: Vec<T> = decode(&header, &payload);
    let k = sigmas.len();
    let dims = Dims(header.dims);
    let fields = (0..k)
        .map(|s| {
            let vectors = values
                .chunks_exact(3 * k)
                .map(|c| [c[3 * s], c[3 * s + 1], c[3 * s + 2]])
                .collect();
            VectorField::new(dims, vectors)
        })
        .collect::<Result<Vec<_>>>()?;
    SegiField::new(sigmas, fields)
}
