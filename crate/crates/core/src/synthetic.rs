//! Synthetic datasets with known ground truth.
//!
//! * [`latent_pair_dataset`]: chains of images whose matched patches share a
//!   random latent vector plus noise.
//! * [`SyntheticRoom`]: posed pinhole cameras inside a textured box room,
//!   with ray-cast depth, surface points and per-patch features averaged
//!   from the latent vectors of the wall cells each patch sees.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VopError};
use crate::geometry::{image_overlap, overlap_from_points, GtMatchSet};
use crate::io::{write_depth_pgm, write_features, CameraSpec, DepthSpec, Manifest, ManifestImage, OverlapRecord};
use crate::types::{CameraModel, DepthMap, ImageFeatures, PatchGrid};

fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPairConfig {
    pub scenes: usize,
    pub pairs_per_scene: usize,
    pub image_side: u32,
    pub patch_side: u32,
    pub dim: usize,
    /// Standard deviation of the per-image Gaussian noise.
    pub noise: f64,
    pub overlap_min: f64,
    pub overlap_max: f64,
    pub seed: u64,
}

impl Default for LatentPairConfig {
    fn default() -> Self {
        Self {
            scenes: 40,
            pairs_per_scene: 10,
            image_side: 224,
            patch_side: 14,
            dim: 1024,
            noise: 0.05,
            overlap_min: 0.10,
            overlap_max: 0.70,
            seed: 0,
        }
    }
}

/// Each scene is a chain of `pairs_per_scene + 1` images; consecutive images
/// form a supervised pair sharing a random fraction (in the configured
/// range) of their patches at random positions. Every patch carries a
/// standard-normal latent; features are latent plus noise.
pub fn latent_pair_dataset(cfg: &LatentPairConfig) -> Result<(Vec<ImageFeatures>, Vec<GtMatchSet>)> {
    let grid = PatchGrid::new(cfg.image_side, cfg.patch_side)?;
    let n = grid.n_patches();
    if !(0.0 <= cfg.overlap_min && cfg.overlap_min <= cfg.overlap_max && cfg.overlap_max <= 1.0) {
        return Err(VopError::Validation("bad overlap range".into()));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| VopError::Validation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k_min = (cfg.overlap_min * n as f64).ceil() as usize;
    let k_max = ((cfg.overlap_max * n as f64).floor() as usize).max(k_min);
    let mut feats = Vec::new();
    let mut sets = Vec::new();
    for s in 0..cfg.scenes {
        let mut latents: Vec<Vec<f32>> = (0..n).map(|_| gaussian_vec(&mut rng, cfg.dim)).collect();
        for t in 0..=cfg.pairs_per_scene {
            let id = format!("s{s:03}_i{t:02}");
            if t > 0 {
                let k = rng.gen_range(k_min..=k_max);
                let src = sample(&mut rng, n, k).into_vec();
                let dst = sample(&mut rng, n, k).into_vec();
                let mut next: Vec<Vec<f32>> = (0..n).map(|_| gaussian_vec(&mut rng, cfg.dim)).collect();
                for (p, q) in src.iter().zip(&dst) {
                    next[*q] = latents[*p].clone();
                }
                let pos: Vec<(usize, usize)> = src.into_iter().zip(dst).collect();
                let prev = format!("s{s:03}_i{:02}", t - 1);
                sets.push(GtMatchSet::new(prev, id.clone(), n, &pos, &[])?);
                latents = next;
            }
            let data = Array2::from_shape_fn((n, cfg.dim), |(p, k)| {
                latents[p][k] + noise.sample(&mut rng) as f32
            });
            feats.push(ImageFeatures::new(id, grid, data, None)?);
        }
    }
    Ok((feats, sets))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomConfig {
    pub seed: u64,
    /// Half extents of the box along x, y (vertical, pointing down) and z.
    pub half_extent: [f64; 3],
    /// Side of the square texture cells on every wall.
    pub cell_size: f64,
    pub dim: usize,
    pub noise: f64,
    pub image_side: u32,
    pub patch_side: u32,
    pub fov_deg: f64,
    /// Camera positions, sampled in the central half of the floor plan.
    pub positions: usize,
    /// Viewing directions per position, evenly spaced in yaw.
    pub yaws: usize,
    /// Rays per patch along each axis when averaging cell latents.
    pub rays_per_patch_side: usize,
    pub n_points: usize,
}

impl Default for RoomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            half_extent: [4.0, 1.5, 4.0],
            cell_size: 0.5,
            dim: 1024,
            noise: 0.05,
            image_side: 224,
            patch_side: 14,
            fov_deg: 60.0,
            positions: 4,
            yaws: 5,
            rays_per_patch_side: 3,
            n_points: 20_000,
        }
    }
}

/// A rendered room: cameras, depth maps, patch features and surface points.
#[derive(Clone, Debug)]
pub struct SyntheticRoom {
    pub config: RoomConfig,
    pub grid: PatchGrid,
    pub ids: Vec<String>,
    pub cameras: Vec<CameraModel>,
    pub depths: Vec<DepthMap>,
    pub features: Vec<ImageFeatures>,
    pub points: Vec<Vector3<f64>>,
}

/// Nearest wall hit along `o + s·d`, `s > 0`, from inside the box: returns
/// `(s, wall, hit point)`; wall `2a` is the negative and `2a + 1` the
/// positive face along axis `a`.
fn cast(o: &Vector3<f64>, d: &Vector3<f64>, half: &[f64; 3]) -> (f64, usize, Vector3<f64>) {
    let mut best = (f64::INFINITY, 0);
    for a in 0..3 {
        let (s, wall) = if d[a] > 0.0 {
            ((half[a] - o[a]) / d[a], 2 * a + 1)
        } else if d[a] < 0.0 {
            ((-half[a] - o[a]) / d[a], 2 * a)
        } else {
            continue;
        };
        if s < best.0 {
            best = (s, wall);
        }
    }
    (best.0, best.1, o + d * best.0)
}

fn cell_of(wall: usize, hit: &Vector3<f64>, half: &[f64; 3], cell: f64) -> (usize, i64, i64) {
    let a = wall / 2;
    let (b, c) = ((a + 1) % 3, (a + 2) % 3);
    let coord = |k: usize| {
        let max = ((2.0 * half[k]) / cell).ceil() as i64 - 1;
        (((hit[k] + half[k]) / cell).floor() as i64).clamp(0, max)
    };
    (wall, coord(b), coord(c))
}

impl SyntheticRoom {
    pub fn generate(cfg: &RoomConfig) -> Result<Self> {
        let grid = PatchGrid::new(cfg.image_side, cfg.patch_side)?;
        if cfg.positions == 0 || cfg.yaws == 0 || cfg.rays_per_patch_side == 0 {
            return Err(VopError::Validation("room needs cameras and rays".into()));
        }
        let half = cfg.half_extent;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let focal = (cfg.image_side as f64 / 2.0) / (cfg.fov_deg.to_radians() / 2.0).tan();
        let k = CameraModel::centered_intrinsics(focal, cfg.image_side);
        let base_yaw = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut ids = Vec::new();
        let mut cameras = Vec::new();
        for p in 0..cfg.positions {
            let center = Vector3::new(
                rng.gen_range(-half[0] / 2.0..half[0] / 2.0),
                0.0,
                rng.gen_range(-half[2] / 2.0..half[2] / 2.0),
            );
            for y in 0..cfg.yaws {
                let yaw = base_yaw + y as f64 * std::f64::consts::TAU / cfg.yaws as f64;
                let forward = Vector3::new(yaw.sin(), 0.0, yaw.cos());
                cameras.push(CameraModel::look_along(center, forward, Vector3::new(0.0, 1.0, 0.0), k)?);
                ids.push(format!("r{}_p{p}_y{y}", cfg.seed));
            }
        }

        let side = cfg.image_side as usize;
        let depths = cameras
            .iter()
            .map(|cam| {
                let o = cam.center();
                let mut d = Vec::with_capacity(side * side);
                for v in 0..side {
                    for u in 0..side {
                        let ray = cam.rotation().transpose()
                            * (cam.intrinsics_inv() * Vector3::new(u as f64 + 0.5, v as f64 + 0.5, 1.0));
                        d.push(cast(&o, &ray, &half).0);
                    }
                }
                DepthMap::new(cfg.image_side, cfg.image_side, d)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut latents: HashMap<(usize, i64, i64), Vec<f32>> = HashMap::new();
        let latent_seed = rng.gen::<u64>();
        let mut latent = |key: (usize, i64, i64)| -> Vec<f32> {
            latents
                .entry(key)
                .or_insert_with(|| {
                    let mut r = ChaCha8Rng::seed_from_u64(latent_seed);
                    r.set_stream(((key.0 as u64) << 40) ^ ((key.1 as u64) << 20) ^ key.2 as u64);
                    gaussian_vec(&mut r, cfg.dim)
                })
                .clone()
        };
        let noise = Normal::new(0.0, cfg.noise).map_err(|e| VopError::Validation(e.to_string()))?;
        let s = cfg.rays_per_patch_side;
        let ps = cfg.patch_side as f64;
        let mut features = Vec::with_capacity(cameras.len());
        for (cam, id) in cameras.iter().zip(&ids) {
            let o = cam.center();
            let mut data = Array2::<f32>::zeros((grid.n_patches(), cfg.dim));
            for p in 0..grid.n_patches() {
                let (r, c) = grid.row_col(p);
                let mut acc = Array1::<f64>::zeros(cfg.dim);
                for a in 0..s {
                    for b in 0..s {
                        let u = c as f64 * ps + (b as f64 + 0.5) * ps / s as f64;
                        let v = r as f64 * ps + (a as f64 + 0.5) * ps / s as f64;
                        let ray = cam.rotation().transpose() * (cam.intrinsics_inv() * Vector3::new(u, v, 1.0));
                        let (_, wall, hit) = cast(&o, &ray, &half);
                        let l = latent(cell_of(wall, &hit, &half, cfg.cell_size));
                        acc.iter_mut().zip(&l).for_each(|(x, y)| *x += f64::from(*y));
                    }
                }
                let scale = 1.0 / (s * s) as f64;
                for (dst, v) in data.row_mut(p).iter_mut().zip(acc.iter()) {
                    *dst = (v * scale + noise.sample(&mut rng)) as f32;
                }
            }
            features.push(ImageFeatures::new(id.clone(), grid, data, None)?);
        }

        // surface points, uniform over the total wall area
        let areas: Vec<f64> = (0..6)
            .map(|w| {
                let a = w / 2;
                4.0 * half[(a + 1) % 3] * half[(a + 2) % 3]
            })
            .collect();
        let total: f64 = areas.iter().sum();
        let points = (0..cfg.n_points)
            .map(|_| {
                let mut x = rng.gen_range(0.0..total);
                let mut wall = 0;
                while wall < 5 && x >= areas[wall] {
                    x -= areas[wall];
                    wall += 1;
                }
                let a = wall / 2;
                let mut pt = Vector3::zeros();
                pt[a] = if wall % 2 == 1 { half[a] } else { -half[a] };
                for b in [(a + 1) % 3, (a + 2) % 3] {
                    pt[b] = rng.gen_range(-half[b]..half[b]);
                }
                pt
            })
            .collect();

        Ok(Self {
            config: cfg.clone(),
            grid,
            ids,
            cameras,
            depths,
            features,
            points,
        })
    }

    /// Ground-truth image overlap of every unordered camera pair.
    pub fn overlaps(&self) -> Vec<OverlapRecord> {
        let mut out = Vec::new();
        for i in 0..self.cameras.len() {
            for j in i + 1..self.cameras.len() {
                let m = overlap_from_points(&self.points, &self.cameras[i], &self.cameras[j], &self.grid);
                out.push(OverlapRecord {
                    i: self.ids[i].clone(),
                    j: self.ids[j].clone(),
                    overlap: image_overlap(&m).0,
                });
            }
        }
        out
    }

    /// Writes features, depth maps, points and a manifest into `dir` and
    /// returns the manifest path. All images get the scene tag `scene`.
    pub fn write_dataset(&self, dir: &Path, scene: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.join("depth")).map_err(|e| VopError::io(dir, e))?;
        let feats = dir.join("features.vopf");
        write_features(&self.features, &feats)?;
        let scale = 0.001;
        let mut images = Vec::new();
        for ((id, cam), depth) in self.ids.iter().zip(&self.cameras).zip(&self.depths) {
            let rel = PathBuf::from("depth").join(format!("{id}.pgm"));
            write_depth_pgm(depth, scale, dir.join(&rel))?;
            images.push(ManifestImage {
                id: id.clone(),
                features: PathBuf::from("features.vopf"),
                scene: Some(scene.to_string()),
                camera: Some(CameraSpec::from_camera(cam)),
                depth: Some(DepthSpec { path: rel, scale }),
            });
        }
        let pts: Vec<[f64; 3]> = self.points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let pts_bytes = serde_json::to_vec(&pts)?;
        crate::io::atomic_write_bytes(&dir.join("points.json"), &pts_bytes)?;
        let manifest = Manifest {
            image_side: self.grid.image_side(),
            patch_side: self.grid.patch_side(),
            images,
            pairs: None,
            points: Some(PathBuf::from("points.json")),
            base_dir: dir.to_path_buf(),
        };
        let path = dir.join("manifest.json");
        manifest.save(&path)?;
        Ok(path)
    }
}
