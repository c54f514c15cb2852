use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lanpose_core::geomfeat::{denormalize, render_maps, square_roi};
use lanpose_core::geometry::{block_catalog, ray_intersect, BlockModel, CameraIntrinsics, Pose, Rotation3};
use lanpose_core::scene::tight_bbox;

/// Sphere tracing on the union SDF: first `t` where the ray comes within `eps` of the surface.
fn sphere_trace(model: &BlockModel, o: &Vector3<f64>, d: &Vector3<f64>, t_max: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..100_000 {
        let dist = model.sdf(&(o + d * t));
        if dist < 1e-7 {
            return Some(t);
        }
        t += dist;
        if t > t_max {
            return None;
        }
    }
    None
}

fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

#[test]
fn ray_hits_agree_with_sphere_tracing() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hits = 0;
    for b in block_catalog().blocks() {
        for _ in 0..1500 {
            let origin = unit(&mut rng) * 200.0;
            // aim at a jittered point inside the bounding box
            let aim = Vector3::from_fn(|i, _| rng.random_range(-1.2..1.2) * b.half_extents[i]);
            let dir = (aim - origin).normalize();
            let got = ray_intersect(b, &origin, &dir);
            let want = sphere_trace(b, &origin, &dir, 500.0);
            match (got, want) {
                (Some(p), Some(t)) => {
                    assert!(b.sdf(&p).abs() < 1e-6, "{} hit off surface", b.name);
                    assert!(((p - origin).norm() - t).abs() < 1e-4, "{}: {} vs {t}", b.name, (p - origin).norm());
                    hits += 1;
                }
                (None, None) => {}
                // grazing rays: the tracer stalls within eps of an edge the exact test misses
                (None, Some(t)) => assert!(b.sdf(&(origin + dir * t)).abs() < 1e-6),
                (Some(p), None) => panic!("{}: hit {p:?} not found by tracer", b.name),
            }
        }
    }
    assert!(hits > 5000);
}

#[test]
fn maps_reproject_onto_their_pixels() {
    let k = CameraIntrinsics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for b in block_catalog().blocks() {
        for _ in 0..1000 {
            let rot = Rotation3::from_axis_angle(&unit(&mut rng), rng.random_range(0.0..180.0));
            let t = Vector3::new(rng.random_range(-150.0..150.0), rng.random_range(-100.0..100.0), rng.random_range(400.0..1600.0));
            let pose = Pose::new(rot, t);
            let roi = square_roi(&tight_bbox(&k, &pose, b).unwrap(), 0.1);
            let maps = render_maps(&k, &pose, b, &roi, 32).unwrap();
            assert!(maps.visible_count() > 0);
            for row in 0..32 {
                for col in 0..32 {
                    let i = row * 32 + col;
                    if maps.mask[i] < 0.5 {
                        continue;
                    }
                    let c = [maps.coords[i], maps.coords[1024 + i], maps.coords[2048 + i]];
                    let p = pose.transform_point(&denormalize(b, c));
                    let (u, v) = maps.pixel_center(row, col);
                    let err = ((k.fx * p.x / p.z + k.cx - u).powi(2) + (k.fy * p.y / p.z + k.cy - v).powi(2)).sqrt();
                    worst = worst.max(err);
                }
            }
        }
    }
    assert!(worst < 1.0, "max reprojection error {worst} px");
}
