//! On-disk volume format: a JSON header next to a raw little-endian `f32`
//! payload with the same stem and a `.raw` extension.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub voxel_mm: f64,
    pub dtype: String,
    /// Saliency grids record what produced them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
}

impl VolumeHeader {
    pub fn for_volume(volume: &Volume) -> Self {
        Self {
            dims: volume.dims(),
            voxel_mm: volume.voxel_mm(),
            dtype: DTYPE_F32LE.to_string(),
            kind: None,
            normalization: None,
            block: None,
        }
    }
}

/// Path of the payload that belongs to a header.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    save_with_header(volume, &VolumeHeader::for_volume(volume), path.as_ref())
}

pub(crate) fn save_with_header(volume: &Volume, header: &VolumeHeader, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut json = serde_json::to_string_pretty(header)?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let payload: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let raw = payload_path(path);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    load_with_header(path.as_ref()).map(|(v, _)| v)
}

pub(crate) fn load_with_header(path: &Path) -> Result<(Volume, VolumeHeader)> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, format!("header: {e}")))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::load(path, format!("header: {e}")))?;
    if header.dtype != DTYPE_F32LE {
        return Err(Error::load(
            path,
            format!("unsupported dtype `{}`, expected `{DTYPE_F32LE}`", header.dtype),
        ));
    }
    if header.dims.contains(&0) {
        return Err(Error::load(path, format!("dims {:?} must be >= 1", header.dims)));
    }
    let raw = payload_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::load(&raw, format!("payload: {e}")))?;
    let expected = 4 * header.dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::load(
            &raw,
            format!(
                "payload length mismatch for dims {:?}: expected {expected} bytes, found {}",
                header.dims,
                bytes.len()
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(at) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::load(&raw, format!("non-finite value at voxel {at}")));
    }
    let volume = Volume::new(header.dims, data)?.with_voxel_mm(header.voxel_mm);
    Ok((volume, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        let vol = Volume::zeros([2, 2, 2]).with_voxel_mm(1.5);
        save_volume(&vol, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap(), vol);
    }

    #[test]
    fn resave_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        let vol = Volume::from_fn([3, 4, 5], |i, j, k| (i as f32).sin() + j as f32 * 0.1 - k as f32);
        save_volume(&vol, &a).unwrap();
        save_volume(&load_volume(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(payload_path(&a)).unwrap(), fs::read(payload_path(&b)).unwrap());
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn short_payload_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, r#"{"dims":[91,109,91],"voxel_mm":2.0,"dtype":"f32le"}"#).unwrap();
        fs::write(payload_path(&path), vec![0u8; 400]).unwrap();
        let msg = load_volume(&path).unwrap_err().to_string();
        assert!(msg.contains(&format!("expected {} bytes", 4 * 91 * 109 * 91)), "{msg}");
        assert!(msg.contains("found 400"), "{msg}");
    }

    #[test]
    fn missing_and_non_finite_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_volume(dir.path().join("nope.json")).is_err());
        let path = dir.path().join("nan.json");
        let mut vol = Volume::zeros([1, 1, 2]);
        vol.set(0, 0, 1, f32::NAN);
        save_volume(&vol, &path).unwrap();
        let msg = load_volume(&path).unwrap_err().to_string();
        assert!(msg.contains("non-finite"), "{msg}");
    }
}
