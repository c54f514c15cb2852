use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{tight_bbox, GenConfig, Plane, Scene, SceneError, SceneObject};
use crate::geometry::{block_catalog, BlockModel, Pose, Rotation3};
use crate::instruction::{Color, ObjectDescriptor, Shape};

impl Plane {
    pub fn rotation(&self) -> Rotation3 {
        let az = self.azimuth_deg.to_radians();
        Rotation3::from_axis_angle(&Vector3::new(az.cos(), az.sin(), 0.0), self.tilt_deg)
    }

    pub fn origin(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.height_mm)
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.rotation().apply(&Vector3::z())
    }

    /// Signed distance of a world point above the plane.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.origin()).dot(&self.normal())
    }
}

/// World pose of a block resting upright on the plane at plane coordinates
/// `(x, y)` with yaw `yaw_deg` about the plane normal.
pub fn resting_pose(plane: &Plane, block: &BlockModel, x: f64, y: f64, yaw_deg: f64) -> Pose {
    let rp = plane.rotation();
    Pose::new(
        rp * Rotation3::rz(yaw_deg),
        plane.origin() + rp.apply(&Vector3::new(x, y, block.half_extents.z)),
    )
}

/// Representative of a camera-frame pose within its symmetry orbit: the member
/// whose object x-axis points most along camera +x (first wins on ties).
pub fn canonical_pose(pose: &Pose, block: &BlockModel) -> Pose {
    let mut best = pose.rot;
    let mut best_x = f64::NEG_INFINITY;
    for s in &block.sym_group {
        let r = pose.rot * *s;
        let x = r.matrix()[(0, 0)];
        if x > best_x + 1e-12 {
            best = r;
            best_x = x;
        }
    }
    Pose::new(best, pose.t)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let f = (target - eye).normalize();
    let x = f.cross(&Vector3::z()).normalize();
    let y = f.cross(&x);
    let cam_to_world = Pose::new(
        Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[x, y, f])),
        *eye,
    );
    cam_to_world.invert()
}

struct Placed<'a> {
    block: &'a BlockModel,
    descriptor: ObjectDescriptor,
    world: Pose,
}

/// Samples a scene of 2–4 blocks resting on a random plane, seen from a camera
/// in a view cone around the scene center. Poses are stored in the camera frame.
pub fn sample_scene(cfg: &GenConfig, rng_seed: u64) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let cat = block_catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut rejections = 0usize;
    let reject = |rejections: &mut usize| {
        *rejections += 1;
        if *rejections >= cfg.max_rejections {
            Err(SceneError::SamplingExhausted(*rejections))
        } else {
            Ok(())
        }
    };

    'layout: loop {
        let plane = Plane {
            tilt_deg: uniform(&mut rng, cfg.tilt_deg),
            azimuth_deg: rng.random_range(0.0..360.0),
            height_mm: uniform(&mut rng, cfg.height_mm),
        };
        let n = rng.random_range(cfg.objects[0]..=cfg.objects[1]);
        let mut placed: Vec<Placed> = Vec::with_capacity(n);
        // shapes are fixed per slot so rejection does not favour small blocks
        let shapes: Vec<Shape> = (0..n).map(|_| Shape::ALL[rng.random_range(0..Shape::ALL.len())]).collect();
        for shape in shapes {
            let block = cat.get(shape.block_id()).ok_or(SceneError::UnknownBlock(shape.block_id()))?;
            let mut color = Color::ALL[rng.random_range(0..Color::ALL.len())];
            while placed.iter().any(|p| p.descriptor == ObjectDescriptor { shape, color }) {
                color = Color::ALL[rng.random_range(0..Color::ALL.len())];
            }
            let descriptor = ObjectDescriptor { shape, color };
            let mut tries = 0;
            let world = loop {
                let r = cfg.placement_radius_mm * rng.random::<f64>().sqrt();
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                let yaw = rng.random_range(0.0..360.0);
                let world = resting_pose(&plane, block, r * th.cos(), r * th.sin(), yaw);
                let clash = placed
                    .iter()
                    .any(|p| (p.world.t - world.t).norm() < (p.block.diameter + block.diameter) / 2.0);
                if !clash {
                    break world;
                }
                reject(&mut rejections)?;
                tries += 1;
                if tries == 50 {
                    continue 'layout;
                }
            };
            placed.push(Placed { block, descriptor, world });
        }

        // a few camera draws per layout before resampling the layout
        for _ in 0..8 {
            let jitter = Vector3::from_fn(|_, _| {
                rng.random_range(-cfg.lookat_jitter_mm..=cfg.lookat_jitter_mm)
            });
            let center = plane.origin() + jitter;
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let el = uniform(&mut rng, cfg.elevation_deg).to_radians();
            let dist = uniform(&mut rng, cfg.distance_mm);
            let eye = center + Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * dist;
            let world_to_camera = look_at(&eye, &center);

            let objects: Vec<SceneObject> = placed
                .iter()
                .enumerate()
                .map(|(i, p)| SceneObject {
                    id: i as u32,
                    block_id: p.block.id,
                    pose: canonical_pose(&world_to_camera.compose(&p.world), p.block),
                    descriptor: p.descriptor,
                })
                .collect();
            let visible = objects.iter().zip(&placed).all(|(o, p)| {
                let tz = o.pose.t.z;
                tz >= cfg.tz_range_mm[0]
                    && tz <= cfg.tz_range_mm[1]
                    && tight_bbox(&cfg.camera, &o.pose, p.block).is_ok_and(|b| {
                        let (u0, v0) = b.min();
                        let (u1, v1) = b.max();
                        u0 >= 0.0
                            && v0 >= 0.0
                            && u1 <= cfg.camera.width as f64
                            && v1 <= cfg.camera.height as f64
                    })
            });
            if visible {
                return Ok(Scene {
                    plane,
                    world_to_camera,
                    camera: cfg.camera,
                    objects,
                });
            }
            reject(&mut rejections)?;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resting_on_flat_plane() {
        let plane = Plane {
            tilt_deg: 0.0,
            azimuth_deg: 0.0,
            height_mm: 0.0,
        };
        let cube = block_catalog().by_name("cube").unwrap();
        let pose = resting_pose(&plane, cube, 12.0, -7.0, 33.0);
        assert!((plane.signed_distance(&pose.t) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn resting_on_tilted_plane() {
        let plane = Plane {
            tilt_deg: 12.0,
            azimuth_deg: 70.0,
            height_mm: 55.0,
        };
        for b in block_catalog().blocks() {
            let pose = resting_pose(&plane, b, 30.0, 40.0, 200.0);
            let bottom = pose.transform_point(&Vector3::new(0.0, 0.0, -b.half_extents.z));
            assert!(plane.signed_distance(&bottom).abs() < 1e-9);
            assert!((plane.signed_distance(&pose.t) - b.half_extents.z).abs() < 1e-9);
        }
    }

    #[test]
    fn canonical_pose_is_orbit_representative() {
        let cat = block_catalog();
        let cube = cat.by_name("cube").unwrap();
        let pose = Pose::new(Rotation3::rz(100.0), Vector3::new(0.0, 0.0, 500.0));
        let c = canonical_pose(&pose, cube);
        assert!((c.rot.matrix()[(0, 0)] - 10f64.to_radians().cos()).abs() < 1e-12);
        assert_eq!(canonical_pose(&c, cube), c);
        let corner = cat.by_name("corner").unwrap();
        assert_eq!(canonical_pose(&pose, corner), pose);
    }

    #[test]
    fn deterministic() {
        let cfg = GenConfig::default();
        assert_eq!(sample_scene(&cfg, 99).unwrap(), sample_scene(&cfg, 99).unwrap());
        assert_ne!(sample_scene(&cfg, 99).unwrap(), sample_scene(&cfg, 100).unwrap());
    }

    #[test]
    fn scene_invariants_over_many_seeds() {
        let cfg = GenConfig::default();
        let cat = block_catalog();
        for seed in 0..1000 {
            let s = sample_scene(&cfg, seed).unwrap();
            assert!((2..=4).contains(&s.objects.len()));
            let cam_to_world = s.world_to_camera.invert();
            for (i, a) in s.objects.iter().enumerate() {
                let ba = cat.get(a.block_id).unwrap();
                assert!(a.pose.rot.is_valid(1e-9));
                assert_eq!(canonical_pose(&a.pose, ba), a.pose);
                assert!(a.pose.t.z >= 400.0 && a.pose.t.z <= 1600.0);
                let bottom = cam_to_world
                    .compose(&a.pose)
                    .transform_point(&Vector3::new(0.0, 0.0, -ba.half_extents.z));
                assert!(s.plane.signed_distance(&bottom).abs() < 1.0);
                for b in &s.objects[i + 1..] {
                    let bb = cat.get(b.block_id).unwrap();
                    assert!((a.pose.t - b.pose.t).norm() >= (ba.diameter + bb.diameter) / 2.0);
                    assert_ne!(a.descriptor, b.descriptor);
                }
            }
        }
    }

    #[test]
    fn exhaustion_is_reported() {
        let cfg = GenConfig {
            objects: [4, 4],
            placement_radius_mm: 1.0,
            max_rejections: 50,
            ..Default::default()
        };
        assert!(matches!(sample_scene(&cfg, 1), Err(SceneError::SamplingExhausted(_))));
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Vector3::new(300.0, -200.0, 500.0);
        let target = Vector3::new(10.0, 20.0, 30.0);
        let w2c = look_at(&eye, &target);
        let p = w2c.transform_point(&target);
        assert!(p.x.abs() < 1e-9 && p.y.abs() < 1e-9 && p.z > 0.0);
        // world up maps to image up (negative camera y)
        let up = w2c.rot.apply(&Vector3::z());
        assert!(up.y < 0.0);
    }
}
