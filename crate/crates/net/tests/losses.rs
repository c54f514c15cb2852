use lanpose_core::geometry::{block_catalog, geodesic_angle, BlockModel, Rotation3};
use lanpose_net::data::{MapBatch, PoseTarget};
use lanpose_net::graph::Graph;
use lanpose_net::loss::{loss_assembly, loss_geom, loss_pose, loss_total};
use lanpose_net::model::{DirectOut, PoseVars};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3 {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64));
    Rotation3::from_axis_angle(&axis.normalize(), rng.random_range(-180.0..180.0))
}

/// First two columns of a rotation, the 6D parametrization.
fn to_r6d(r: &Rotation3) -> [f64; 6] {
    let m = r.matrix();
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

fn pose_vars(g: &mut Graph, r6d: &[[f64; 6]], site: &[[f64; 3]]) -> PoseVars {
    let b = r6d.len();
    let r = g.leaf(&[b, 6], r6d.concat(), true).unwrap();
    let s = g.leaf(&[b, 3], site.concat(), true).unwrap();
    PoseVars { r6d: r, site: s }
}

fn blocks() -> &'static [BlockModel] {
    block_catalog().blocks()
}

/// Exhaustive oracle: every symmetry candidate, the one nearest the prediction, every vertex.
fn brute_force(pred_rot: &Rotation3, pred_site: &[f64; 3], t: &PoseTarget) -> f64 {
    let mut best = (f64::INFINITY, t.rot);
    for s in &t.model.sym_group {
        let cand = t.rot * *s;
        let a = geodesic_angle(&cand, pred_rot);
        if a < best.0 {
            best = (a, cand);
        }
    }
    let (rp, rt) = (pred_rot.matrix(), best.1.matrix());
    let mut acc = 0.0;
    for x in &t.model.vertices {
        let d = rp * x - rt * x;
        acc += d.x.abs() + d.y.abs() + d.z.abs();
    }
    let rot = acc / t.model.vertices.len() as f64;
    rot + (0..3).map(|i| (pred_site[i] - t.trans[i]).abs()).sum::<f64>()
}

#[test]
fn exact_prediction_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in blocks() {
        let rot = random_rotation(&mut rng);
        let t = PoseTarget { rot, trans: [0.1, -0.2, 120.0], model: m };
        let mut g = Graph::new();
        let p = pose_vars(&mut g, &[to_r6d(&rot)], &[t.trans]);
        let l = loss_assembly(&mut g, &p, &[t]).unwrap();
        assert!(g.scalar(l.total).abs() < 1e-9, "{}: {}", m.name, g.scalar(l.total));
    }
}

#[test]
fn symmetric_rotation_has_zero_rotation_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in blocks().iter().filter(|m| m.is_symmetric()) {
        for s in &m.sym_group {
            let gt = random_rotation(&mut rng);
            let pred = gt * *s;
            let t = PoseTarget { rot: gt, trans: [0.0, 0.0, 100.0], model: m };
            let mut g = Graph::new();
            let p = pose_vars(&mut g, &[to_r6d(&pred)], &[t.trans]);
            let l = loss_assembly(&mut g, &p, &[t]).unwrap();
            assert!(g.value(l.rot)[0] < 1e-9, "{}: {}", m.name, g.value(l.rot)[0]);
        }
    }
}

#[test]
fn loss_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let b = rng.random_range(1..5);
        let mut r6d = Vec::new();
        let mut site = Vec::new();
        let mut targets = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..b {
            let m = &blocks()[rng.random_range(0..blocks().len())];
            let pred = random_rotation(&mut rng);
            r6d.push(to_r6d(&pred));
            preds.push(pred);
            site.push([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(50.0..150.0)]);
            targets.push(PoseTarget {
                rot: random_rotation(&mut rng),
                trans: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(50.0..150.0)],
                model: m,
            });
        }
        let mut g = Graph::new();
        let p = pose_vars(&mut g, &r6d, &site);
        let l = loss_pose(&mut g, &p, &targets).unwrap();
        for i in 0..b {
            let want = brute_force(&preds[i], &site[i], &targets[i]);
            let got = g.value(l.total)[i];
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }
}

fn geom_case(coords: Vec<f64>, logits: Vec<f64>, clean: Vec<f64>, mask: Vec<f64>, s: usize) -> (f64, Graph, DirectOut) {
    let b = mask.len() / (s * s);
    let batch = MapBatch {
        size: s,
        maps: vec![0.0; b * 4 * s * s],
        clean_coords: clean,
        clean_mask: mask,
        classes: vec![1; b],
        roi_features: vec![0.0; 3 * b],
    };
    let mut g = Graph::new();
    let c = g.leaf(&[b, 3, s, s], coords, true).unwrap();
    let m = g.leaf(&[b, s * s], logits, true).unwrap();
    let dummy = g.input(&[1], vec![0.0]).unwrap();
    let out = DirectOut { coords: c, mask_logits: m, features: dummy, pose: PoseVars { r6d: dummy, site: dummy } };
    let l = loss_geom(&mut g, &out, &batch).unwrap();
    let total = g.value(l).iter().sum();
    (total, g, out)
}

#[test]
fn geom_loss_cases() {
    let s = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clean: Vec<f64> = (0..3 * s * s).map(|_| rng.random::<f64>()).collect();
    let mask: Vec<f64> = (0..s * s).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let saturated: Vec<f64> = mask.iter().map(|&m| if m > 0.5 { 40.0 } else { -40.0 }).collect();

    let (exact, ..) = geom_case(clean.clone(), saturated.clone(), clean.clone(), mask.clone(), s);
    assert!(exact <= 1e-6, "{exact}");

    let shifted: Vec<f64> = clean.iter().map(|v| v + 0.1).collect();
    let (off, ..) = geom_case(shifted, saturated, clean.clone(), mask.clone(), s);
    assert!((off - 0.1).abs() < 1e-9, "{off}");

    // per-pixel recomputation
    let coords: Vec<f64> = (0..3 * s * s).map(|_| rng.random::<f64>()).collect();
    let logits: Vec<f64> = (0..s * s).map(|_| rng.random_range(-5.0..5.0)).collect();
    let (got, ..) = geom_case(coords.clone(), logits.clone(), clean.clone(), mask.clone(), s);
    let count: f64 = mask.iter().sum();
    let mut l1 = 0.0;
    for ch in 0..3 {
        for i in 0..s * s {
            l1 += mask[i] * (coords[ch * s * s + i] - clean[ch * s * s + i]).abs();
        }
    }
    let bce: f64 = logits
        .iter()
        .zip(&mask)
        .map(|(&z, &t)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / (s * s) as f64;
    let want = l1 / (3.0 * count) + bce;
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn stage_one_total_is_sum_of_parts() {
    let s = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clean: Vec<f64> = (0..2 * 3 * s * s).map(|_| rng.random::<f64>()).collect();
    let coords: Vec<f64> = (0..2 * 3 * s * s).map(|_| rng.random::<f64>()).collect();
    let mask: Vec<f64> = (0..2 * s * s).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let logits: Vec<f64> = (0..2 * s * s).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (_, mut g, out) = geom_case(coords, logits, clean.clone(), mask.clone(), s);
    let batch = MapBatch { size: s, maps: vec![0.0; 2 * 4 * s * s], clean_coords: clean, clean_mask: mask, classes: vec![1, 2], roi_features: vec![0.0; 6] };
    let geom = loss_geom(&mut g, &out, &batch).unwrap();
    let m = &blocks()[0];
    let targets: Vec<PoseTarget> = (0..2).map(|_| PoseTarget { rot: random_rotation(&mut rng), trans: [0.0, 0.0, 100.0], model: m }).collect();
    let p = pose_vars(&mut g, &[to_r6d(&random_rotation(&mut rng)), to_r6d(&random_rotation(&mut rng))], &[[0.1, 0.1, 90.0], [0.0, 0.2, 110.0]]);
    let pose = loss_pose(&mut g, &p, &targets).unwrap();
    let total = loss_total(&mut g, 1, pose.total, Some(geom)).unwrap();
    let parts: f64 = (0..2).map(|i| g.value(pose.rot)[i] + g.value(pose.trans)[i] + g.value(geom)[i]).sum::<f64>() / 2.0;
    assert!((g.scalar(total) - parts).abs() < 1e-12);
    assert!(loss_total(&mut g, 1, pose.total, None).is_err());
}
