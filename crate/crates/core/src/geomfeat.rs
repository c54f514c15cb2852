//! Dense 2D–3D correspondence maps rendered analytically by ray casting, plus
//! the noise model that stands in for learned-map error.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{ray_param, BBox2D, BlockModel, CameraIntrinsics, GeometryError, Pose};

pub const DEFAULT_MAP_SIZE: usize = 32;
pub const DEFAULT_PAD_RATIO: f64 = 0.1;

/// Normalized object coordinates (3 channels) and visibility mask over a square ROI.
///
/// Arrays are row-major; `coords` is channel-major (`c * S * S + row * S + col`).
#[derive(Clone, Debug, PartialEq)]
pub struct GeomMaps {
    pub size: usize,
    pub coords: Vec<f64>,
    pub mask: Vec<f64>,
    pub roi: BBox2D,
}

impl GeomMaps {
    pub fn empty(size: usize, roi: BBox2D) -> Self {
        Self {
            size,
            coords: vec![0.0; 3 * size * size],
            mask: vec![0.0; size * size],
            roi,
        }
    }

    pub fn visible_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.5).count()
    }

    /// Image position of the center of map cell `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let (u0, v0) = self.roi.min();
        let step = self.roi.w / self.size as f64;
        (u0 + (col as f64 + 0.5) * step, v0 + (row as f64 + 0.5) * step)
    }

    /// Four stacked channels `[x, y, z, mask]`, each `S × S`.
    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = self.coords.clone();
        out.extend_from_slice(&self.mask);
        out
    }
}

/// Square box with side `max(w, h) * (1 + pad_ratio)` around the same center.
pub fn square_roi(bbox: &BBox2D, pad_ratio: f64) -> BBox2D {
    let side = bbox.w.max(bbox.h) * (1.0 + pad_ratio);
    BBox2D {
        cx: bbox.cx,
        cy: bbox.cy,
        w: side,
        h: side,
    }
}

/// Casts one camera ray per map cell and stores normalized object coordinates of the hit.
pub fn render_maps(
    k: &CameraIntrinsics,
    pose: &Pose,
    model: &BlockModel,
    roi: &BBox2D,
    size: usize,
) -> Result<GeomMaps, GeometryError> {
    assert!(size >= 8, "map size must be at least 8");
    assert!((roi.w - roi.h).abs() <= 1e-9 * roi.w.max(1.0), "roi must be square");
    if !(pose.t.z > 1e-6) {
        return Err(GeometryError::BehindCamera);
    }
    let inv = pose.invert();
    let origin = inv.t;
    let r = model.half_extents;
    let mut maps = GeomMaps::empty(size, *roi);
    let plane = size * size;
    for row in 0..size {
        for col in 0..size {
            let (u, v) = maps.pixel_center(row, col);
            let dir = inv.rot.apply(&k.ray_direction(u, v));
            if let Some(t) = ray_param(model, &origin, &dir) {
                let p = origin + dir * t;
                let i = row * size + col;
                maps.mask[i] = 1.0;
                for c in 0..3 {
                    maps.coords[c * plane + i] = ((p[c] + r[c]) / (2.0 * r[c])).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(maps)
}

/// Inverse of the coordinate normalization.
pub fn denormalize(model: &BlockModel, c: [f64; 3]) -> Vector3<f64> {
    let r = model.half_extents;
    Vector3::new(c[0] * 2.0 * r.x - r.x, c[1] * 2.0 * r.y - r.y, c[2] * 2.0 * r.z - r.z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Gaussian std-dev added to visible coordinates.
    pub sigma: f64,
    /// Per-pixel mask flip probability.
    pub flip_p: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 0.02,
            flip_p: 0.02,
        }
    }
}

impl NoiseConfig {
    pub const NONE: NoiseConfig = NoiseConfig { sigma: 0.0, flip_p: 0.0 };
}

/// Adds clamped Gaussian coordinate noise and Bernoulli mask flips.
///
/// Pixels flipped to invisible lose their coordinates; pixels flipped to
/// visible keep zero coordinates.
pub fn perturb_maps(maps: &GeomMaps, noise: &NoiseConfig, rng_seed: u64) -> GeomMaps {
    let mut out = maps.clone();
    if noise.sigma <= 0.0 && noise.flip_p <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, noise.sigma.max(0.0)).expect("finite sigma");
    let plane = maps.size * maps.size;
    for i in 0..plane {
        if maps.mask[i] > 0.5 && noise.sigma > 0.0 {
            for c in 0..3 {
                let v = &mut out.coords[c * plane + i];
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        if noise.flip_p > 0.0 && rng.random::<f64>() < noise.flip_p {
            out.mask[i] = 1.0 - out.mask[i];
            if out.mask[i] < 0.5 {
                for c in 0..3 {
                    out.coords[c * plane + i] = 0.0;
                }
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct MapSidecar {
    shape: [usize; 3],
    dtype: String,
    roi: BBox2D,
    record_id: u64,
}

/// Writes `[x, y, z, mask]` as little-endian float32 plus a `.json` sidecar.
pub fn dump_maps(path: &Path, maps: &GeomMaps, record_id: u64) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in maps.to_channels() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.flush()?;
    let sidecar = MapSidecar {
        shape: [4, maps.size, maps.size],
        dtype: "float32".into(),
        roi: maps.roi,
        record_id,
    };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    std::fs::write(side, serde_json::to_string_pretty(&sidecar)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{block_catalog, Rotation3};
    use crate::scene::tight_bbox;

    fn cube_facing_camera(z: f64) -> (CameraIntrinsics, Pose, &'static BlockModel) {
        // object +z points at the camera
        let k = CameraIntrinsics::default();
        let pose = Pose::new(Rotation3::rx(180.0), Vector3::new(0.0, 0.0, z));
        (k, pose, block_catalog().by_name("cube").unwrap())
    }

    #[test]
    fn square_roi_cases() {
        let b = BBox2D::new(50.0, 60.0, 100.0, 50.0).unwrap();
        let r = square_roi(&b, 0.0);
        assert_eq!((r.cx, r.cy, r.w, r.h), (50.0, 60.0, 100.0, 100.0));
        let r = square_roi(&b, 0.1);
        assert!((r.w - 110.0).abs() < 1e-12 && r.w == r.h);
        assert!(r.contains_box(&b));
    }

    #[test]
    fn center_pixel_hits_near_face() {
        let (k, pose, cube) = cube_facing_camera(800.0);
        let roi = BBox2D::new(k.cx, k.cy, 40.0, 40.0).unwrap();
        // odd size puts a cell center on the optical axis
        let maps = render_maps(&k, &pose, cube, &roi, 9).unwrap();
        let i = 4 * 9 + 4;
        assert_eq!(maps.mask[i], 1.0);
        let c: Vec<f64> = (0..3).map(|ch| maps.coords[ch * 81 + i]).collect();
        assert!((c[0] - 0.5).abs() < 1e-9 && (c[1] - 0.5).abs() < 1e-9);
        assert!((c[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn object_outside_roi_is_empty() {
        let (k, pose, cube) = cube_facing_camera(800.0);
        let roi = BBox2D::new(40.0, 40.0, 30.0, 30.0).unwrap();
        let maps = render_maps(&k, &pose, cube, &roi, 16).unwrap();
        assert_eq!(maps.visible_count(), 0);
        assert!(maps.coords.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn behind_camera_is_an_error() {
        let (k, _, cube) = cube_facing_camera(800.0);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -100.0));
        let roi = BBox2D::new(k.cx, k.cy, 40.0, 40.0).unwrap();
        assert_eq!(render_maps(&k, &pose, cube, &roi, 16), Err(GeometryError::BehindCamera));
    }

    #[test]
    fn mask_area_shrinks_with_depth() {
        let (k, _, _) = cube_facing_camera(500.0);
        let brick = block_catalog().by_name("brick").unwrap();
        let rot = Rotation3::from_axis_angle(&Vector3::new(1.0, 0.4, 0.2), 130.0);
        let near = Pose::new(rot, Vector3::new(20.0, -10.0, 500.0));
        let roi = square_roi(&tight_bbox(&k, &near, brick).unwrap(), 0.1);
        let mut last = usize::MAX;
        for step in 0..8 {
            let pose = Pose::new(rot, Vector3::new(20.0, -10.0, 500.0 + 100.0 * step as f64));
            let n = render_maps(&k, &pose, brick, &roi, 32).unwrap().visible_count();
            assert!(n < last, "step {step}: {n} >= {last}");
            last = n;
        }
    }

    fn interior_maps(seed: u64) -> GeomMaps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let roi = BBox2D::new(100.0, 100.0, 50.0, 50.0).unwrap();
        let mut m = GeomMaps::empty(32, roi);
        for i in 0..32 * 32 {
            if rng.random::<f64>() < 0.6 {
                m.mask[i] = 1.0;
                for c in 0..3 {
                    m.coords[c * 1024 + i] = rng.random_range(0.2..0.8);
                }
            }
        }
        m
    }

    #[test]
    fn zero_noise_is_identity() {
        let m = interior_maps(1);
        assert_eq!(perturb_maps(&m, &NoiseConfig::NONE, 5), m);
    }

    #[test]
    fn perturbation_is_deterministic() {
        let m = interior_maps(2);
        let n = NoiseConfig::default();
        assert_eq!(perturb_maps(&m, &n, 9), perturb_maps(&m, &n, 9));
        assert_ne!(perturb_maps(&m, &n, 9), perturb_maps(&m, &n, 10));
    }

    #[test]
    fn coordinate_noise_matches_folded_normal() {
        let noise = NoiseConfig { sigma: 0.02, flip_p: 0.0 };
        let expected = 0.02 * (2.0 / std::f64::consts::PI).sqrt();
        let (mut sum, mut count) = (0.0, 0usize);
        for s in 0..100 {
            let m = interior_maps(100 + s);
            let p = perturb_maps(&m, &noise, s);
            for i in 0..1024 {
                if m.mask[i] > 0.5 {
                    for c in 0..3 {
                        sum += (p.coords[c * 1024 + i] - m.coords[c * 1024 + i]).abs();
                        count += 1;
                    }
                }
            }
        }
        let mean = sum / count as f64;
        assert!((mean - expected).abs() < 0.1 * expected, "{mean} vs {expected}");
    }

    #[test]
    fn mask_flip_rate() {
        let noise = NoiseConfig { sigma: 0.0, flip_p: 0.02 };
        let (mut flips, mut total) = (0usize, 0usize);
        let mut s = 0;
        while total < 1_000_000 {
            let m = interior_maps(s);
            let p = perturb_maps(&m, &noise, 1000 + s);
            flips += m.mask.iter().zip(&p.mask).filter(|(a, b)| a != b).count();
            total += m.mask.len();
            s += 1;
        }
        let rate = flips as f64 / total as f64;
        assert!((0.015..=0.025).contains(&rate), "{rate}");
    }

    #[test]
    fn perturbed_maps_keep_invariants() {
        let m = interior_maps(3);
        let p = perturb_maps(&m, &NoiseConfig { sigma: 0.5, flip_p: 0.3 }, 4);
        for i in 0..1024 {
            for c in 0..3 {
                let v = p.coords[c * 1024 + i];
                assert!((0.0..=1.0).contains(&v));
                if p.mask[i] < 0.5 {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn dump_writes_float32_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maps.bin");
        let m = interior_maps(5);
        dump_maps(&path, &m, 42).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 4 * 4 * 1024);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("maps.bin.json")).unwrap()).unwrap();
        assert_eq!(side["record_id"], 42);
        assert_eq!(side["shape"], serde_json::json!([4, 32, 32]));
    }
}
