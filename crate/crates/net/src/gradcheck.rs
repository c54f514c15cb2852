//! Central finite-difference checks of the reverse-mode gradients.

use lanpose_core::geomfeat::NoiseConfig;
use lanpose_core::geometry::{block_catalog, Rotation3};
use lanpose_core::instruction::Grammar;
use lanpose_core::scene::{generate_record, GenConfig};
use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    assembly_target, object_sample, object_target, relative_target, MapBatch, PoseTarget, Role, TokenBatch,
};
use crate::graph::{Graph, Var};
use crate::loss::{loss_assembly, loss_geom, loss_pose, loss_total};
use crate::model::{Bound, DirectOut, FusionVariant, ModelConfig, Network, PoseVars};
use crate::params::{Init, ParamSet};
use crate::NetError;

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, per unit of loss magnitude. Central
/// differences carry roundoff of order ε·|L|/h, so gradients below this floor
/// are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one check.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdStats {
    pub max_rel: f64,
    pub probed: usize,
    /// Probes whose ±h interval crosses an L1 kink or a symmetry switch.
    pub skipped: usize,
}

impl FdStats {
    pub fn merge(self, o: FdStats) -> FdStats {
        FdStats { max_rel: self.max_rel.max(o.max_rel), probed: self.probed + o.probed, skipped: self.skipped + o.skipped }
    }
}

/// Scalar loss and the leaves whose gradients are checked, in `state` order.
pub struct Built {
    pub loss: Var,
    pub leaves: Vec<Var>,
}

fn rel_err(a: f64, n: f64, loss: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR * loss.abs().max(1.0))
}

/// Compares analytic and central-difference gradients at `probes` (tensor, index).
pub fn check<F>(state: &[Vec<f64>], probes: &[(usize, usize)], build: F) -> Result<FdStats, NetError>
where
    F: Fn(&mut Graph, &[Vec<f64>]) -> Result<Built, NetError>,
{
    let mut g = Graph::new();
    let built = build(&mut g, state)?;
    let grads = g.backward(built.loss);
    let loss = g.scalar(built.loss);
    let eval = |s: &[Vec<f64>]| -> Result<(f64, Vec<f64>), NetError> {
        let mut g = Graph::new();
        let b = build(&mut g, s)?;
        Ok((g.scalar(b.loss), g.regime()))
    };
    let mut st = FdStats::default();
    let mut s = state.to_vec();
    for &(t, i) in probes {
        let a = grads.get(built.leaves[t]).map_or(0.0, |gr| gr[i]);
        let x0 = s[t][i];
        s[t][i] = x0 + STEP;
        let (fp, rp) = eval(&s)?;
        s[t][i] = x0 - STEP;
        let (fm, rm) = eval(&s)?;
        s[t][i] = x0;
        if rp != rm {
            st.skipped += 1;
            continue;
        }
        st.probed += 1;
        st.max_rel = st.max_rel.max(rel_err(a, (fp - fm) / (2.0 * STEP), loss));
    }
    Ok(st)
}

fn all_probes(state: &[Vec<f64>]) -> Vec<(usize, usize)> {
    state.iter().enumerate().flat_map(|(t, v)| (0..v.len()).map(move |i| (t, i))).collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

/// `Σ out ⊙ w` with a fixed random `w`, so every output element matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let w = g.input(&shape, uniform(&mut rng, n, 1.0))?;
    let y = g.mul(out, w)?;
    let m = g.mean(y);
    Ok(g.scale(m, n as f64))
}

fn leaves(g: &mut Graph, shapes: &[Vec<usize>], s: &[Vec<f64>]) -> Result<Vec<Var>, NetError> {
    shapes.iter().zip(s).map(|(sh, d)| g.leaf(sh, d.clone(), true)).collect()
}

/// Checks an op on random leaves: `f` maps leaves to the op output.
fn op_case<F>(seed: u64, shapes: Vec<Vec<usize>>, scale: f64, f: F) -> Result<FdStats, NetError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NetError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state: Vec<Vec<f64>> = shapes.iter().map(|s| uniform(&mut rng, s.iter().product(), scale)).collect();
    check(&state, &all_probes(&state), |g, s| {
        let l = leaves(g, &shapes, s)?;
        let out = f(g, &l)?;
        Ok(Built { loss: project(g, out, seed)?, leaves: l })
    })
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3 {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis.normalize() };
    Rotation3::from_axis_angle(&axis, rng.random_range(-180.0..180.0))
}

fn random_mask(rng: &mut ChaCha8Rng, b: usize, l: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..b * l).map(|_| rng.random::<f64>() < 0.6).collect();
    for bi in 0..b {
        m[bi * l] = true;
    }
    m
}

pub fn conv2d(seed: u64) -> Result<FdStats, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
    let k = *[1usize, 3].choose(&mut rng).expect("non-empty");
    let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
    let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
    op_case(seed, vec![vec![b, cin, h, w], vec![cout, cin, k, k], vec![cout]], 1.0, |g, l| {
        g.conv2d(l[0], l[1], l[2], stride, pad)
    })
}

pub fn group_norm(seed: u64) -> Result<FdStats, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, groups, per) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
    let c = groups * per;
    let (h, w) = (rng.random_range(2..5), rng.random_range(2..5));
    op_case(seed, vec![vec![b, c, h, w], vec![c], vec![c]], 2.0, |g, l| g.group_norm(l[0], l[1], l[2], groups))
}

pub fn gelu(seed: u64) -> Result<FdStats, NetError> {
    let n = 5 + (seed as usize % 16);
    op_case(seed, vec![vec![n]], 3.0, |g, l| Ok(g.gelu(l[0])))
}

pub fn sigmoid(seed: u64) -> Result<FdStats, NetError> {
    let n = 5 + (seed as usize % 16);
    op_case(seed, vec![vec![n]], 4.0, |g, l| Ok(g.sigmoid(l[0])))
}

pub fn linear(seed: u64) -> Result<FdStats, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, l, din, dout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
    let bias = rng.random::<bool>();
    let x = if rng.random::<bool>() { vec![b, l, din] } else { vec![b, din] };
    let mut shapes = vec![x, vec![dout, din]];
    if bias {
        shapes.push(vec![dout]);
    }
    op_case(seed, shapes, 1.0, move |g, v| g.linear(v[0], v[1], bias.then(|| v[2])))
}

pub fn softmax(seed: u64) -> Result<FdStats, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, lq, lk) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..7));
    let mask = random_mask(&mut rng, b, lk);
    op_case(seed, vec![vec![b, lq, lk]], 3.0, move |g, l| g.softmax(l[0], Some(&mask)))
}

pub fn bmm(seed: u64) -> Result<FdStats, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, m, k, n) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let (ta, tb) = (rng.random::<bool>(), rng.random::<bool>());
    let sa = if ta { vec![b, k, m] } else { vec![b, m, k] };
    let sb = if tb { vec![b, n, k] } else { vec![b, k, n] };
    op_case(seed, vec![sa, sb], 1.0, move |g, l| g.bmm(l[0], l[1], ta, tb))
}

/// Add, broadcast add, multiply, scale, affine, reshape, concat and gather chained together.
pub fn elementwise(seed: u64) -> Result<FdStats, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, n) = (rng.random_range(1..4), rng.random_range(2..5));
    let scale = uniform(&mut rng, n, 2.0);
    let offset = uniform(&mut rng, n, 2.0);
    let idx: Vec<usize> = (0..b * 2 * n).map(|_| rng.random_range(0..b * 2 * n)).collect();
    op_case(seed, vec![vec![b, n], vec![b, n], vec![n]], 1.0, move |g, l| {
        let s = g.add(l[0], l[1])?;
        let s = g.add_broadcast(s, l[2])?;
        let p = g.mul(s, l[1])?;
        let p = g.scale(p, 1.7);
        let a = g.affine(p, &scale, &offset)?;
        let c = g.concat(&[a, l[0]], 1)?;
        let r = g.reshape(c, &[b * 2 * n])?;
        g.gather(r, idx.clone(), &[b, 2 * n])
    })
}

pub fn embedding_and_pooling(seed: u64) -> Result<FdStats, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d, b, l) = (rng.random_range(3..8), rng.random_range(1..5), rng.random_range(1..3), rng.random_range(2..6));
    let ids: Vec<usize> = (0..b * l).map(|_| rng.random_range(0..v)).collect();
    let mask: Vec<f64> = random_mask(&mut rng, b, l).into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect();
    op_case(seed, vec![vec![v, d]], 1.0, move |g, t| {
        let e = g.embedding(t[0], &ids, &[b, l])?;
        g.masked_mean(e, &mask)
    })
}

/// L1 rows, masked L1 and BCE with logits.
pub fn elementwise_losses(seed: u64) -> Result<FdStats, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, c, hw, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..5), rng.random_range(1..5));
    let t1 = uniform(&mut rng, b * w, 1.0);
    let t2 = uniform(&mut rng, b * c * hw * hw, 1.0);
    let mask: Vec<f64> = (0..b * hw * hw).map(|_| if rng.random::<f64>() < 0.6 { 1.0 } else { 0.0 }).collect();
    let t3: Vec<f64> = (0..b * w).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    op_case(seed, vec![vec![b, w], vec![b, c, hw, hw], vec![b, w]], 2.0, move |g, l| {
        let a = g.l1_rows(l[0], &t1)?;
        let m = g.masked_l1(l[1], &t2, &mask)?;
        let e = g.bce_logits(l[2], &t3)?;
        let s = g.add(a, m)?;
        g.add(s, e)
    })
}

pub fn rot6d(seed: u64) -> Result<FdStats, NetError> {
    let b = 1 + seed as usize % 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = vec![uniform(&mut rng, b * 6, 1.0)];
    for row in state[0].chunks_mut(6) {
        row[0] += 1.5;
        row[4] += 1.5;
    }
    check(&state, &all_probes(&state), |g, s| {
        let x = g.leaf(&[b, 6], s[0].clone(), true)?;
        let r = g.rot6d(x)?;
        Ok(Built { loss: project(g, r, seed)?, leaves: vec![x] })
    })
}

fn small_config(variant: FusionVariant) -> ModelConfig {
    ModelConfig {
        map_size: 8,
        refine_channels: 4,
        head_channels: [4, 4, 4],
        fc_width: 8,
        d_model: 8,
        n_patches: 64,
        variant,
    }
}

/// Sets every parameter of `ps` from `s` and binds them all as trainable leaves.
fn bind_state(g: &mut Graph, base: &ParamSet, s: &[Vec<f64>]) -> Result<(ParamSet, Vec<Var>), NetError> {
    let mut ps = base.clone();
    for i in 0..ps.len() {
        *ps.data_mut(i) = s[i].clone();
    }
    let vars = ps.bind(g, true)?;
    Ok((ps, vars))
}

pub fn cross_attention(seed: u64) -> Result<FdStats, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 4 * rng.random_range(1..3);
    let (b, np, l) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(2..6));
    let mask = random_mask(&mut rng, b, l);
    let net = Network::new(small_config(FusionVariant::CrossAttention), seed)?;
    let mut ps = ParamSet::new();
    let mut prng = crate::params::seeded(seed);
    for m in ["q", "k", "v"] {
        ps.add(&format!("lang.attn.{m}.w"), &[d, d], Init::Normal(0.5), &mut prng);
    }
    let mut state: Vec<Vec<f64>> = (0..ps.len()).map(|i| ps.data(i).to_vec()).collect();
    state.push(uniform(&mut rng, b * np * d, 1.0));
    state.push(uniform(&mut rng, b * l * d, 1.0));
    check(&state, &all_probes(&state), |g, s| {
        let (ps2, mut vars) = bind_state(g, &ps, s)?;
        let q = g.leaf(&[b, np, d], s[3].clone(), true)?;
        let kv = g.leaf(&[b, l, d], s[4].clone(), true)?;
        let bound = Bound::from_vars(&ps2, vars.clone());
        let (out, _) = net.cross_attention(g, &bound, q, kv, &mask)?;
        vars.extend([q, kv]);
        Ok(Built { loss: project(g, out, seed)?, leaves: vars })
    })
}

fn random_targets(rng: &mut ChaCha8Rng, b: usize) -> Vec<PoseTarget> {
    let cat = block_catalog();
    (0..b)
        .map(|_| {
            let id = rng.random_range(1..=cat.blocks().len() as u8);
            PoseTarget {
                rot: random_rotation(rng),
                trans: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(50.0..150.0)],
                model: cat.get(id).expect("catalog id"),
            }
        })
        .collect()
}

pub fn assembly_loss(seed: u64) -> Result<FdStats, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..4);
    let targets = random_targets(&mut rng, b);
    let mut r6d = uniform(&mut rng, b * 6, 1.0);
    for row in r6d.chunks_mut(6) {
        row[0] += 1.0;
        row[4] += 1.0;
    }
    let site: Vec<f64> = (0..b).flat_map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(50.0..150.0)]).collect();
    let state = vec![r6d, site];
    check(&state, &all_probes(&state), |g, s| {
        let r6d = g.leaf(&[b, 6], s[0].clone(), true)?;
        let site = g.leaf(&[b, 3], s[1].clone(), true)?;
        let l = loss_assembly(g, &PoseVars { r6d, site }, &targets)?;
        let loss = g.mean(l.total);
        Ok(Built { loss, leaves: vec![r6d, site] })
    })
}

pub fn geom_loss(seed: u64) -> Result<FdStats, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, s) = (rng.random_range(1..3), 8);
    let plane = s * s;
    let clean_mask: Vec<f64> = (0..b * plane).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
    let batch = MapBatch {
        size: s,
        maps: vec![0.0; b * 4 * plane],
        clean_coords: (0..b * 3 * plane).map(|_| rng.random::<f64>()).collect(),
        clean_mask,
        classes: vec![1; b],
        roi_features: vec![0.0; b * 3],
    };
    let state = vec![(0..b * 3 * plane).map(|_| rng.random::<f64>()).collect(), uniform(&mut rng, b * plane, 4.0)];
    check(&state, &all_probes(&state), |g, st| {
        let coords = g.leaf(&[b, 3, s, s], st[0].clone(), true)?;
        let mask_logits = g.leaf(&[b, plane], st[1].clone(), true)?;
        let dummy = g.input(&[1], vec![0.0])?;
        let out = DirectOut { coords, mask_logits, features: dummy, pose: PoseVars { r6d: dummy, site: dummy } };
        let l = loss_geom(g, &out, &batch)?;
        Ok(Built { loss: g.mean(l), leaves: vec![coords, mask_logits] })
    })
}

/// Stage-1 and stage-2 objectives summed through both branches, every parameter trainable.
/// Probes one coordinate of each parameter tensor plus `extra` random ones.
pub fn composition(seed: u64, extra: usize) -> Result<FdStats, NetError> {
    let variant = FusionVariant::ALL[seed as usize % 3];
    let net = Network::new(small_config(variant), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = GenConfig::default();
    let recs: Vec<_> = (0..2).map(|i| generate_record(&gen, seed, i)).collect::<Result<_, _>>()?;
    let noise = NoiseConfig::default();
    let base: Vec<_> = recs.iter().map(|r| object_sample(r, Role::Base, 8, &noise, seed)).collect::<Result<_, _>>()?;
    let batch = MapBatch::from_samples(&base.iter().collect::<Vec<_>>());
    let obj_targets: Vec<PoseTarget> = base.iter().map(object_target).collect::<Result<_, _>>()?;
    let asm_targets: Vec<PoseTarget> = recs
        .iter()
        .map(|r| if variant == FusionVariant::Relative { relative_target(r) } else { assembly_target(r) })
        .collect::<Result<_, _>>()?;
    let texts: Vec<&str> = recs.iter().map(|r| r.instruction.as_str()).collect();
    let tokens = TokenBatch::from_texts(Grammar::builtin(), &texts);

    let state: Vec<Vec<f64>> = (0..net.params.len()).map(|i| net.params.data(i).to_vec()).collect();
    let mut probes: Vec<(usize, usize)> = state.iter().enumerate().map(|(t, v)| (t, rng.random_range(0..v.len()))).collect();
    let emb = net.params.id("lang.text.emb").expect("embedding table");
    let d = net.cfg.d_model;
    for &tok in tokens.ids.iter().filter(|&&t| t != 0).take(4) {
        probes.push((emb, tok * d + rng.random_range(0..d)));
    }
    for _ in 0..extra {
        let t = rng.random_range(0..state.len());
        probes.push((t, rng.random_range(0..state[t].len())));
    }
    check(&state, &probes, |g, s| {
        let (ps, vars) = bind_state(g, &net.params, s)?;
        let b = Bound::from_vars(&ps, vars.clone());
        let out = net.direct_branch(g, &b, &batch)?;
        let pose = loss_pose(g, &out.pose, &obj_targets)?;
        let geom = loss_geom(g, &out, &batch)?;
        let l1 = loss_total(g, 1, pose.total, Some(geom))?;
        let text = net.text_encode(g, &b, &tokens)?;
        let pred = net.language_branch(g, &b, out.features, text, &tokens, &batch)?;
        let asm = loss_assembly(g, &pred, &asm_targets)?;
        let l2 = loss_total(g, 2, asm.total, None)?;
        Ok(Built { loss: g.add(l1, l2)?, leaves: vars })
    })
}

pub type Case = fn(u64) -> Result<FdStats, NetError>;

/// Every checked op with its name.
pub fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv2d),
        ("group_norm", group_norm),
        ("gelu", gelu),
        ("linear", linear),
        ("softmax", softmax),
        ("cross_attention", cross_attention),
        ("loss_assembly", assembly_loss),
        ("loss_geom", geom_loss),
        ("sigmoid", sigmoid),
        ("bmm", bmm),
        ("elementwise", elementwise),
        ("embedding+masked_mean", embedding_and_pooling),
        ("l1/bce", elementwise_losses),
        ("rot6d", rot6d),
    ]
}

/// Runs `case` over seeds `0..n`.
pub fn over_seeds(case: impl Fn(u64) -> Result<FdStats, NetError>, n: u64) -> Result<FdStats, NetError> {
    (0..n).try_fold(FdStats::default(), |acc, s| Ok(acc.merge(case(s)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_finite_differences() {
        for (name, case) in op_cases() {
            let st = over_seeds(case, 20).unwrap();
            assert!(st.max_rel < TOLERANCE, "{name}: {st:?}");
            assert!(st.skipped * 20 <= st.probed, "{name}: {st:?}");
        }
    }

    #[test]
    fn composition_passes_finite_differences() {
        let st = over_seeds(|s| composition(s, 16), 20).unwrap();
        assert!(st.max_rel < TOLERANCE, "{st:?}");
        assert!(st.skipped * 20 <= st.probed, "{st:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // the reported leaf is a detached copy, so its analytic gradient is zero
        let state = vec![vec![0.3, -0.7]];
        let st = check(&state, &all_probes(&state), |g, s| {
            let x = g.leaf(&[2], s[0].clone(), true)?;
            let y = g.scale(x, 2.0);
            let copy = g.leaf(&[2], s[0].clone(), true)?;
            Ok(Built { loss: g.mean(y), leaves: vec![copy] })
        })
        .unwrap();
        assert!(st.max_rel > 0.5, "{st:?}");
    }
}
