//! File formats: native volume/field pairs, NIfTI-1 input, configuration,
//! optimization traces and slice overlays.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Volume;
use crate::optim::{OptimizationTrace, Polarity, RegistrationConfig, TraceRecord};
use crate::scalar::Real;

pub mod native;
pub mod nifti;
pub mod overlay;

pub use native::{read_field, read_segi, write_field, write_segi, VolumeFileHeader};
pub use nifti::{read_nifti, NiftiHeader};
pub use overlay::{emit_overlay, render_overlay, Plane, RgbImage};

/// Environment variable naming the directory that relative output paths
/// are resolved against.
pub const OUT_DIR_ENV: &str = "SEGIREG_OUT_DIR";

/// Resolve an output path: relative paths go under `$SEGIREG_OUT_DIR` when set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() && !dir.is_empty() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// Write via a sibling temporary file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = std::fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn is_nifti(path: &Path) -> bool {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Read a volume, choosing NIfTI-1 for `.nii`/`.nii.gz` and the native
/// format otherwise.
pub fn read_volume<T: Real>(path: &Path) -> Result<Volume<T>> {
    if is_nifti(path) {
        Ok(read_nifti(path)?.0)
    } else {
        native::read_native_volume(path)
    }
}

/// Write a volume in the native format (NIfTI output is not supported).
pub fn write_volume<T: Real>(vol: &Volume<T>, path: &Path) -> Result<()> {
    if is_nifti(path) {
        return Err(Error::InvalidArgument(format!(
            "{}: NIfTI is read-only, write the native format instead",
            path.display()
        )));
    }
    native::write_native_volume(vol, path)
}

pub fn load_config(path: &Path) -> Result<RegistrationConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RegistrationConfig = toml::from_str(&text).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        reason: e.message().to_string(),
    })?;
    cfg.validate().map_err(|e| Error::Config {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(cfg)
}

pub fn save_config(cfg: &RegistrationConfig, path: &Path) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    write_atomic(path, text.as_bytes())
}

#[derive(Serialize)]
struct TraceLine<'a> {
    seed: u64,
    polarity: Polarity,
    #[serde(flatten)]
    record: &'a TraceRecord,
}

/// One JSON object per line, one line per iteration.
pub fn trace_to_jsonl(trace: &OptimizationTrace) -> String {
    let mut out = String::new();
    for record in &trace.records {
        let line = TraceLine {
            seed: trace.seed,
            polarity: trace.polarity,
            record,
        };
        out.push_str(&serde_json::to_string(&line).expect("trace records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_trace(trace: &OptimizationTrace, path: &Path) -> Result<()> {
    write_atomic(path, trace_to_jsonl(trace).as_bytes())
}
