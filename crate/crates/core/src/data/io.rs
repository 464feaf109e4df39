//! Raw voxel files with JSON sidecars, and the dataset manifest.
//!
//! A volume `name.raw` holds the voxels in x-fastest order, either
//! little-endian `f32` or one byte per voxel. Its sidecar `name.json` reads
//!
//! ```json
//! {"shape": [64, 64, 48], "spacing": [1.0, 1.0, 1.0], "dtype": "f32", "role": "image"}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::split::{DatasetSplit, LabeledCase, UnlabeledCase};
use crate::error::{DtmlError, Result};
use crate::grid::{Geometry, Mask, Shape3, Spacing3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Image,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: Shape3,
    pub spacing: Spacing3,
    pub dtype: Dtype,
    pub role: Role,
}

/// Path of the sidecar belonging to a raw file.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DtmlError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| DtmlError::io(path, e))
}

fn write_sidecar(raw: &Path, sidecar: &Sidecar) -> Result<()> {
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    write_bytes(&sidecar_path(raw), text.as_bytes())
}

/// Reads a raw file and its sidecar.
pub fn read_raw(path: &Path) -> Result<(Sidecar, Vec<u8>)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| DtmlError::io(&side, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| DtmlError::format(&side, e))?;
    let geom = Geometry::new(sidecar.shape, sidecar.spacing)
        .map_err(|e| DtmlError::format(&side, e))?;
    let bytes = fs::read(path).map_err(|e| DtmlError::io(path, e))?;
    let want = geom.len() * sidecar.dtype.width();
    if bytes.len() != want {
        return Err(DtmlError::format(
            path,
            format!("expected {want} bytes for {:?}, found {}", sidecar.shape, bytes.len()),
        ));
    }
    Ok((sidecar, bytes))
}

/// Writes `data` as little-endian `f32` with the given role.
pub fn write_f32(path: &Path, geom: &Geometry, data: &[f64], role: Role) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write_bytes(path, &bytes)?;
    write_sidecar(
        path,
        &Sidecar {
            shape: geom.shape,
            spacing: geom.spacing,
            dtype: Dtype::F32,
            role,
        },
    )
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_f32(path, v.geometry(), v.data(), Role::Image)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    write_bytes(path, &m.to_u8())?;
    write_sidecar(
        path,
        &Sidecar {
            shape: m.shape(),
            spacing: m.geometry().spacing,
            dtype: Dtype::U8,
            role: Role::Mask,
        },
    )
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Voxel values of any raw file as `f64`, with its geometry.
pub fn read_values(path: &Path) -> Result<(Sidecar, Geometry, Vec<f64>)> {
    let (sidecar, bytes) = read_raw(path)?;
    let geom = Geometry::new(sidecar.shape, sidecar.spacing)?;
    let values = match sidecar.dtype {
        Dtype::F32 => decode_f32(&bytes),
        Dtype::U8 => bytes.iter().map(|&b| b as f64).collect(),
    };
    Ok((sidecar, geom, values))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (_, geom, values) = read_values(path)?;
    Volume::new(geom, values).map_err(|e| DtmlError::format(path, e))
}

/// Reads a mask; any nonzero voxel is foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let (sidecar, geom, values) = read_values(path)?;
    if sidecar.role != Role::Mask {
        return Err(DtmlError::format(path, "sidecar role is not \"mask\""));
    }
    Mask::new(geom, values.iter().map(|&v| v != 0.0).collect())
}

/// One case of a manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// File lists per partition. Unlabeled entries may name a mask; it is read
/// only when diagnostics are requested.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub labeled: Vec<ManifestEntry>,
    pub unlabeled: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DtmlError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DtmlError::format(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_bytes(path, text.as_bytes())
    }
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn load_labeled(base: &Path, entries: &[ManifestEntry]) -> Result<Vec<LabeledCase>> {
    entries
        .iter()
        .map(|e| {
            let mask = e.mask.as_ref().ok_or_else(|| {
                DtmlError::InvalidConfig(format!("case {} has no mask path", e.id))
            })?;
            let volume = read_volume(&base.join(&e.image))?;
            let mask = read_mask(&base.join(mask))?;
            volume.geometry().ensure_same_shape(mask.geometry())?;
            Ok(LabeledCase {
                id: e.id.clone(),
                volume,
                mask,
            })
        })
        .collect()
}

/// Loads the partitions of a manifest. Unlabeled masks are read only with
/// `diagnostics` set, and then only into
/// [`DatasetSplit::diagnostic_masks`].
pub fn load_split(manifest_path: &Path, diagnostics: bool) -> Result<DatasetSplit> {
    let manifest = Manifest::load(manifest_path)?;
    let base = base_dir(manifest_path);
    let labeled = load_labeled(&base, &manifest.labeled)?;
    let test = load_labeled(&base, &manifest.test)?;
    let mut unlabeled = Vec::with_capacity(manifest.unlabeled.len());
    let mut withheld = Vec::new();
    for e in &manifest.unlabeled {
        let volume = read_volume(&base.join(&e.image))?;
        if diagnostics {
            if let Some(m) = &e.mask {
                withheld.push((e.id.clone(), read_mask(&base.join(m))?));
            }
        }
        unlabeled.push(UnlabeledCase {
            id: e.id.clone(),
            volume,
        });
    }
    Ok(DatasetSplit::new(labeled, unlabeled, test)?.with_withheld(withheld))
}

/// Loads only the test partition.
pub fn load_test(manifest_path: &Path) -> Result<Vec<LabeledCase>> {
    let manifest = Manifest::load(manifest_path)?;
    load_labeled(&base_dir(manifest_path), &manifest.test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([2, 3, 4], [0.5, 1.0, 2.5]).unwrap();
        let data: Vec<f64> = (0..24).map(|i| (i as f32 * 0.1) as f64).collect();
        let v = Volume::new(g, data).unwrap();
        let path = dir.path().join("nested/img.raw");
        write_volume(&path, &v).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
        assert_eq!(fs::metadata(&path).unwrap().len(), 96);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::isotropic([3, 1, 1]).unwrap();
        let m = Mask::from_u8(g, &[0, 1, 1]).unwrap();
        let path = dir.path().join("m.raw");
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
        let side: Sidecar =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side.dtype, Dtype::U8);
        assert_eq!(side.role, Role::Mask);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::isotropic([4, 1, 1]).unwrap();
        let path = dir.path().join("v.raw");
        write_volume(&path, &Volume::new(g, vec![0.0; 4]).unwrap()).unwrap();
        fs::write(&path, [0u8; 7]).unwrap();
        assert!(matches!(read_volume(&path), Err(DtmlError::Format { .. })));
    }

    #[test]
    fn unknown_sidecar_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        fs::write(&path, [0u8; 4]).unwrap();
        fs::write(
            sidecar_path(&path),
            r#"{"shape":[1,1,1],"spacing":[1,1,1],"dtype":"f32","role":"image","extra":1}"#,
        )
        .unwrap();
        assert!(matches!(read_volume(&path), Err(DtmlError::Format { .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_volume(Path::new("/nonexistent/x.raw")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.json"));
    }
}
