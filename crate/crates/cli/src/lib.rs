//! Library half of the `vocabscale` binary: argument parsing helpers,
//! artifact loading and the HTTP service, split out so they can be tested
//! without spawning processes.

pub mod server;

use std::path::{Path, PathBuf};

use vocabscale_core::{ArtifactSet, Error};

/// Parses a floating-point argument. Scientific notation (`1.3e21`) is
/// accepted; non-finite values are not.
pub fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("'{s}' is not finite"))
    }
}

/// Parses a non-negative integer, also written in scientific notation
/// (`3.2e3` is 3200).
pub fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.trim().parse::<u64>() {
        return Ok(v);
    }
    let v = parse_f64(s)?;
    if v < 0.0 || v.fract() != 0.0 || v > u64::MAX as f64 {
        return Err(format!("'{s}' is not a non-negative integer"));
    }
    Ok(v as u64)
}

pub fn parse_u32(s: &str) -> Result<u32, String> {
    let v = parse_count(s)?;
    u32::try_from(v).map_err(|_| format!("'{s}' is too large"))
}

pub fn parse_usize(s: &str) -> Result<usize, String> {
    let v = parse_count(s)?;
    usize::try_from(v).map_err(|_| format!("'{s}' is too large"))
}

/// Where the artifacts came from, reported by the service.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ArtifactSource {
    pub preset: String,
    pub dir: Option<PathBuf>,
    pub files: Vec<String>,
}

/// Starts from a preset and overlays any artifact files found in `dir`.
pub fn load_artifacts(preset: &str, dir: Option<&Path>) -> Result<(ArtifactSet, ArtifactSource), Error> {
    let base = ArtifactSet::preset(preset)?;
    let (art, files) = match dir {
        Some(d) => base.overlay_dir(d)?,
        None => (base, Vec::new()),
    };
    Ok((
        art,
        ArtifactSource {
            preset: preset.to_string(),
            dir: dir.map(Path::to_path_buf),
            files,
        },
    ))
}
