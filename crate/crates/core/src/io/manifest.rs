//! Dataset manifests (JSON) and 16-bit PGM depth maps.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::read_features;
use crate::error::{Result, VopError};
use crate::types::{CameraModel, DepthMap, ImageFeatures, PatchGrid};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraSpec {
    #[serde(rename = "R")]
    pub rotation: Vec<f64>,
    pub t: Vec<f64>,
    #[serde(rename = "K")]
    pub intrinsics: Vec<f64>,
}

impl CameraSpec {
    pub fn from_camera(cam: &CameraModel) -> Self {
        let (r, t, k) = cam.row_major();
        Self {
            rotation: r.to_vec(),
            t: t.to_vec(),
            intrinsics: k.to_vec(),
        }
    }

    pub fn to_camera(&self) -> Result<CameraModel> {
        CameraModel::from_slices(&self.rotation, &self.t, &self.intrinsics)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DepthSpec {
    pub path: PathBuf,
    /// Multiplier applied to the raw 16-bit values.
    pub scale: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestImage {
    pub id: String,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthSpec>,
}

/// Lists the images of a dataset with their feature files and optional
/// geometry. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    #[serde(default = "default_image_side")]
    pub image_side: u32,
    #[serde(default = "default_patch_side")]
    pub patch_side: u32,
    pub images: Vec<ManifestImage>,
    /// Image pairs to supervise. Defaults to every pair within a scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(String, String)>>,
    /// JSON file holding reconstructed 3D points as `[[x, y, z], ...]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_image_side() -> u32 {
    crate::types::DEFAULT_IMAGE_SIDE
}

fn default_patch_side() -> u32 {
    crate::types::DEFAULT_PATCH_SIDE
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VopError::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        super::atomic_write_bytes(path.as_ref(), text.as_bytes())
    }

    fn validate(&self) -> Result<()> {
        self.grid()?;
        let mut seen = std::collections::HashSet::new();
        for img in &self.images {
            if !seen.insert(img.id.as_str()) {
                return Err(VopError::Validation(format!("duplicate image id `{}`", img.id)));
            }
        }
        if let Some(pairs) = &self.pairs {
            for (a, b) in pairs {
                for id in [a, b] {
                    if !seen.contains(id.as_str()) {
                        return Err(VopError::UnknownImage(id.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_side, self.patch_side)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn image(&self, id: &str) -> Result<&ManifestImage> {
        self.images
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| VopError::UnknownImage(id.to_string()))
    }

    pub fn camera(&self, id: &str) -> Result<CameraModel> {
        self.image(id)?
            .camera
            .as_ref()
            .ok_or_else(|| VopError::Validation(format!("image `{id}` has no camera")))?
            .to_camera()
    }

    pub fn depth(&self, id: &str) -> Result<DepthMap> {
        let spec = self
            .image(id)?
            .depth
            .as_ref()
            .ok_or_else(|| VopError::Validation(format!("image `{id}` has no depth map")))?;
        read_depth_pgm(self.resolve(&spec.path), spec.scale)
    }

    /// Pairs to supervise: the explicit list, or all unordered pairs of images
    /// sharing a scene (all pairs when no scenes are given), in manifest order.
    pub fn supervision_pairs(&self) -> Vec<(String, String)> {
        if let Some(p) = &self.pairs {
            return p.clone();
        }
        let mut out = Vec::new();
        for (a, ia) in self.images.iter().enumerate() {
            for ib in &self.images[a + 1..] {
                if ia.scene == ib.scene {
                    out.push((ia.id.clone(), ib.id.clone()));
                }
            }
        }
        out
    }

    /// Loads the features of every listed image, in manifest order.
    pub fn load_features(&self) -> Result<Vec<ImageFeatures>> {
        let grid = self.grid()?;
        let mut cache: HashMap<PathBuf, HashMap<String, ImageFeatures>> = HashMap::new();
        let mut out = Vec::with_capacity(self.images.len());
        for img in &self.images {
            let path = self.resolve(&img.features);
            if !cache.contains_key(&path) {
                let recs = read_features(&path)?;
                cache.insert(
                    path.clone(),
                    recs.into_iter().map(|r| (r.image_id.clone(), r)).collect(),
                );
            }
            let mut rec = cache[&path]
                .get(&img.id)
                .cloned()
                .ok_or_else(|| VopError::UnknownImage(img.id.clone()))?;
            if rec.n_patches() != grid.n_patches() {
                return Err(VopError::DimensionMismatch {
                    context: "manifest grid vs feature file",
                    expected: grid.n_patches(),
                    actual: rec.n_patches(),
                });
            }
            rec.grid = grid;
            out.push(rec);
        }
        Ok(out)
    }

    pub fn load_points(&self) -> Result<Option<Vec<Vector3<f64>>>> {
        let Some(p) = &self.points else {
            return Ok(None);
        };
        let path = self.resolve(p);
        let text = std::fs::read_to_string(&path).map_err(|e| VopError::io(&path, e))?;
        let raw: Vec<[f64; 3]> = serde_json::from_str(&text)?;
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VopError::Validation("non-finite 3D point".into()));
        }
        Ok(Some(raw.into_iter().map(Vector3::from).collect()))
    }
}

/// Reads a PGM depth map; raw zero marks invalid pixels.
pub fn read_depth_pgm(path: impl AsRef<Path>, scale: f64) -> Result<DepthMap> {
    let path = path.as_ref();
    if !(scale.is_finite() && scale > 0.0) {
        return Err(VopError::Validation(format!("bad depth scale {scale}")));
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| VopError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| VopError::io(path, e))?
        .decode()
        .map_err(|e| VopError::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width(), img.height());
    let raw: Vec<u16> = match img {
        image::DynamicImage::ImageLuma16(buf) => buf.into_raw(),
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u16::from).collect(),
        _ => {
            return Err(VopError::Format(format!(
                "{}: depth map must be a grayscale PGM",
                path.display()
            )))
        }
    };
    DepthMap::new(w, h, raw.into_iter().map(|v| v as f64 * scale).collect())
}

/// Writes a depth map as a 16-bit binary PGM, quantizing `depth / scale`.
pub fn write_depth_pgm(depth: &DepthMap, scale: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut raw = Vec::with_capacity(depth.values().len());
    for d in depth.values() {
        let q = (d / scale).round();
        if q > u16::MAX as f64 {
            return Err(VopError::Validation(format!(
                "depth {d} exceeds the 16-bit range at scale {scale}"
            )));
        }
        raw.push(q as u16);
    }
    // binary 16-bit graymap, samples big-endian
    let mut bytes = format!("P5\n{} {}\n65535\n", depth.width(), depth.height()).into_bytes();
    bytes.extend(raw.iter().flat_map(|v| v.to_be_bytes()));
    super::atomic_write_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_preserves_quantized_depth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        let depth = DepthMap::new(3, 2, vec![0.0, 1.5, 2.25, 10.0, 65.535, 0.001]).unwrap();
        write_depth_pgm(&depth, 0.001, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        let back = read_depth_pgm(&path, 0.001).unwrap();
        for (a, b) in depth.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(back.at(0, 0), None);
    }

    #[test]
    fn manifest_pairs_default_to_same_scene() {
        let text = r#"{
            "images": [
                {"id": "a", "features": "f.vopf", "scene": "s0"},
                {"id": "b", "features": "f.vopf", "scene": "s1"},
                {"id": "c", "features": "f.vopf", "scene": "s0"}
            ]
        }"#;
        let m: Manifest = serde_json::from_str(text).unwrap();
        m.validate().unwrap();
        assert_eq!(m.grid().unwrap(), PatchGrid::default());
        assert_eq!(m.supervision_pairs(), vec![("a".to_string(), "c".to_string())]);
    }

    #[test]
    fn manifest_rejects_unknown_pair_ids_and_duplicates() {
        let text = r#"{"images": [{"id": "a", "features": "f"}], "pairs": [["a", "zz"]]}"#;
        let m: Manifest = serde_json::from_str(text).unwrap();
        assert!(matches!(m.validate(), Err(VopError::UnknownImage(_))));
        let text = r#"{"images": [{"id": "a", "features": "f"}, {"id": "a", "features": "g"}]}"#;
        let m: Manifest = serde_json::from_str(text).unwrap();
        assert!(m.validate().is_err());
    }

    #[test]
    fn camera_spec_roundtrip() {
        let cam = CameraModel::look_along(
            Vector3::new(0.5, 0.0, -1.0),
            Vector3::new(0.0, 0.1, 1.0),
            Vector3::new(0.0, 1.0, 0.0),
            CameraModel::centered_intrinsics(200.0, 224),
        )
        .unwrap();
        let spec = CameraSpec::from_camera(&cam);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"R\"") && json.contains("\"K\""));
        let back: CameraSpec = serde_json::from_str(&json).unwrap();
        let back = back.to_camera().unwrap();
        assert!((back.rotation() - cam.rotation()).abs().max() < 1e-15);
        assert!((back.translation() - cam.translation()).abs().max() < 1e-15);
        assert_eq!(back.intrinsics(), cam.intrinsics());
    }
}
