use std::collections::HashSet;
use std::sync::OnceLock;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{GeometryError, Rotation3};

const BUILTIN_CATALOG: &str = include_str!("../../data/blocks.json");

/// Minimum number of surface samples per block.
pub const MIN_VERTICES: usize = 500;

/// Tolerance used when checking that symmetry rotations preserve the shape.
pub const SYMMETRY_TOL: f64 = 1e-6;

/// Solid primitive in the object frame. Cylinders are aligned with z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Cuboid { center: Vector3<f64>, half: Vector3<f64> },
    Cylinder { center: Vector3<f64>, radius: f64, half_height: f64 },
}

impl Primitive {
    /// Signed distance: negative inside, zero on the surface.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Cuboid { center, half } => {
                let q = (p - center).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Primitive::Cylinder { center, radius, half_height } => {
                let d = p - center;
                let a = (d.x * d.x + d.y * d.y).sqrt() - radius;
                let b = d.z.abs() - half_height;
                let outside = (a.max(0.0).powi(2) + b.max(0.0).powi(2)).sqrt();
                outside + a.max(b).min(0.0)
            }
        }
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            Primitive::Cuboid { center, half } => (center - half, center + half),
            Primitive::Cylinder { center, radius, half_height } => {
                let h = Vector3::new(*radius, *radius, *half_height);
                (center - h, center + h)
            }
        }
    }

    /// Nearest ray parameter `t > 0` at which the ray meets this primitive.
    pub fn ray_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self {
            Primitive::Cuboid { center, half } => {
                let mut tnear = f64::NEG_INFINITY;
                let mut tfar = f64::INFINITY;
                for i in 0..3 {
                    let lo = center[i] - half[i];
                    let hi = center[i] + half[i];
                    if d[i].abs() < 1e-15 {
                        if o[i] < lo || o[i] > hi {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (lo - o[i]) / d[i];
                    let t2 = (hi - o[i]) / d[i];
                    tnear = tnear.max(t1.min(t2));
                    tfar = tfar.min(t1.max(t2));
                }
                if tnear > tfar || tfar <= 0.0 {
                    None
                } else if tnear > 0.0 {
                    Some(tnear)
                } else {
                    Some(tfar)
                }
            }
            Primitive::Cylinder { center, radius, half_height } => {
                let q = o - center;
                let mut best: Option<f64> = None;
                let mut take = |t: f64| {
                    if t > 0.0 && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-15 {
                    let b = 2.0 * (q.x * d.x + q.y * d.y);
                    let c = q.x * q.x + q.y * q.y - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            let z = q.z + t * d.z;
                            if z.abs() <= *half_height {
                                take(t);
                            }
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    for zc in [-half_height, *half_height] {
                        let t = (zc - q.z) / d.z;
                        let x = q.x + t * d.x;
                        let y = q.y + t * d.y;
                        if x * x + y * y <= radius * radius {
                            take(t);
                        }
                    }
                }
                best
            }
        }
    }

    /// Grid samples on the primitive surface with outward normals.
    fn surface_samples(&self, spacing: f64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let mut out = Vec::new();
        match self {
            Primitive::Cuboid { center, half } => {
                for axis in 0..3 {
                    let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
                    let nu = cells(2.0 * half[ua], spacing);
                    let nv = cells(2.0 * half[va], spacing);
                    for sign in [-1.0, 1.0] {
                        let mut n = Vector3::zeros();
                        n[axis] = sign;
                        for i in 0..nu {
                            for j in 0..nv {
                                let mut p = *center;
                                p[axis] += sign * half[axis];
                                p[ua] += -half[ua] + (i as f64 + 0.5) * 2.0 * half[ua] / nu as f64;
                                p[va] += -half[va] + (j as f64 + 0.5) * 2.0 * half[va] / nv as f64;
                                out.push((p, n));
                            }
                        }
                    }
                }
            }
            Primitive::Cylinder { center, radius, half_height } => {
                let nz = cells(2.0 * half_height, spacing);
                let ntheta = ring_count(*radius, spacing);
                for k in 0..ntheta {
                    let th = std::f64::consts::TAU * k as f64 / ntheta as f64;
                    let n = Vector3::new(th.cos(), th.sin(), 0.0);
                    for j in 0..nz {
                        let z = -half_height + (j as f64 + 0.5) * 2.0 * half_height / nz as f64;
                        out.push((center + n * *radius + Vector3::new(0.0, 0.0, z), n));
                    }
                }
                let nr = cells(*radius, spacing);
                for sign in [-1.0, 1.0] {
                    let n = Vector3::new(0.0, 0.0, sign);
                    for i in 0..nr {
                        let rho = (i as f64 + 0.5) * radius / nr as f64;
                        let m = ring_count(rho, spacing);
                        for k in 0..m {
                            let th = std::f64::consts::TAU * k as f64 / m as f64;
                            out.push((
                                center + Vector3::new(rho * th.cos(), rho * th.sin(), sign * half_height),
                                n,
                            ));
                        }
                    }
                }
            }
        }
        out
    }
}

fn cells(extent: f64, spacing: f64) -> usize {
    ((extent / spacing).round() as usize).max(1)
}

fn ring_count(radius: f64, spacing: f64) -> usize {
    let n = (std::f64::consts::TAU * radius / spacing / 4.0).ceil() as usize;
    4 * n.max(2)
}

/// Discrete symmetry class about the object z axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymClass {
    Id,
    Z2,
    Z4,
}

impl SymClass {
    pub fn group(self) -> Vec<Rotation3> {
        let n = match self {
            SymClass::Id => 1,
            SymClass::Z2 => 2,
            SymClass::Z4 => 4,
        };
        (0..n).map(|k| Rotation3::rz(360.0 * k as f64 / n as f64)).collect()
    }
}

/// Peg/hole features used by the insert action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum InsertFeature {
    /// Through hole centered on the z axis.
    Hole,
    /// Downward peg; `shoulder_z` is the object-frame height where the peg meets the body.
    Peg { shoulder_z: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Cuboid,
    Cylinder,
}

/// Serialized primitive: `dims` are full extents, `[d, d, h]` for a cylinder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub dims: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockSpec {
    pub id: u8,
    pub name: String,
    pub primitives: Vec<PrimitiveSpec>,
    pub sym: SymClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insert: Option<InsertFeature>,
}

impl PrimitiveSpec {
    fn build(&self) -> Result<Primitive, GeometryError> {
        let c = Vector3::from(self.center);
        let [a, b, h] = self.dims;
        if !(a > 0.0 && b > 0.0 && h > 0.0) {
            return Err(GeometryError::InvalidBlock("non-positive primitive dims".into()));
        }
        Ok(match self.kind {
            PrimitiveKind::Cuboid => Primitive::Cuboid {
                center: c,
                half: Vector3::new(a, b, h) / 2.0,
            },
            PrimitiveKind::Cylinder => {
                if a != b {
                    return Err(GeometryError::InvalidBlock("cylinder needs equal x/y dims".into()));
                }
                Primitive::Cylinder {
                    center: c,
                    radius: a / 2.0,
                    half_height: h / 2.0,
                }
            }
        })
    }
}

/// Parametric block: primitives, sampled surface vertices, diameter and symmetry group.
#[derive(Clone, Debug)]
pub struct BlockModel {
    pub id: u8,
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub vertices: Vec<Vector3<f64>>,
    pub diameter: f64,
    pub sym: SymClass,
    pub sym_group: Vec<Rotation3>,
    pub insert: Option<InsertFeature>,
    /// Half-extent of the bounding cuboid (centered on the origin).
    pub half_extents: Vector3<f64>,
}

impl BlockModel {
    pub fn from_spec(spec: &BlockSpec) -> Result<Self, GeometryError> {
        if spec.primitives.is_empty() {
            return Err(GeometryError::InvalidBlock(format!("block {} has no primitives", spec.id)));
        }
        let primitives = spec
            .primitives
            .iter()
            .map(PrimitiveSpec::build)
            .collect::<Result<Vec<_>, _>>()?;
        let (mut lo, mut hi) = primitives[0].bounds();
        for p in &primitives[1..] {
            let (a, b) = p.bounds();
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
        if (lo + hi).amax() > 1e-9 {
            return Err(GeometryError::InvalidBlock(format!(
                "block {} is not centered on its bounding cuboid",
                spec.id
            )));
        }
        let sym_group = spec.sym.group();
        let raw = raw_surface_samples(&primitives, pick_spacing(&primitives, &sym_group));
        for s in &sym_group {
            for (p, _) in &raw {
                let d = union_sdf(&primitives, &s.apply(p));
                if d.abs() > SYMMETRY_TOL {
                    return Err(GeometryError::InvalidBlock(format!(
                        "block {}: symmetry {:?} does not preserve the shape",
                        spec.id, spec.sym
                    )));
                }
            }
        }
        let vertices = symmetrize(raw.iter().map(|(p, _)| *p), &sym_group);
        let diameter = max_pairwise_distance(&vertices);
        Ok(Self {
            id: spec.id,
            name: spec.name.clone(),
            primitives,
            vertices,
            diameter,
            sym: spec.sym,
            sym_group,
            insert: spec.insert,
            half_extents: hi,
        })
    }

    pub fn dims(&self) -> Vector3<f64> {
        self.half_extents * 2.0
    }

    pub fn is_symmetric(&self) -> bool {
        self.sym_group.len() > 1
    }

    /// Signed distance to the primitive union (exact outside, a bound inside).
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        union_sdf(&self.primitives, p)
    }

    pub fn penetration_depth(&self, p: &Vector3<f64>) -> f64 {
        (-self.sdf(p)).max(0.0)
    }
}

fn union_sdf(primitives: &[Primitive], p: &Vector3<f64>) -> f64 {
    primitives.iter().map(|q| q.sdf(p)).fold(f64::INFINITY, f64::min)
}

/// Surface samples of the union: drops faces covered by another primitive.
fn raw_surface_samples(primitives: &[Primitive], spacing: f64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut out = Vec::new();
    for (i, prim) in primitives.iter().enumerate() {
        for (p, n) in prim.surface_samples(spacing) {
            let probe = p + n * 1e-6;
            let covered = primitives
                .iter()
                .enumerate()
                .any(|(j, q)| j != i && (q.sdf(&probe) <= 0.0 || q.sdf(&p) < -1e-9));
            if !covered {
                out.push((p, n));
            }
        }
    }
    out
}

fn pick_spacing(primitives: &[Primitive], group: &[Rotation3]) -> f64 {
    for spacing in [10.0, 8.0, 20.0 / 3.0, 5.0, 4.0, 10.0 / 3.0, 2.5, 2.0] {
        let raw = raw_surface_samples(primitives, spacing);
        if symmetrize(raw.iter().map(|(p, _)| *p), group).len() >= MIN_VERTICES {
            return spacing;
        }
    }
    1.0
}

fn symmetrize(points: impl Iterator<Item = Vector3<f64>>, group: &[Rotation3]) -> Vec<Vector3<f64>> {
    let base: Vec<_> = points.collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in group {
        for p in &base {
            let q = s.apply(p);
            let key = (
                (q.x * 1e6).round() as i64,
                (q.y * 1e6).round() as i64,
                (q.z * 1e6).round() as i64,
            );
            if seen.insert(key) {
                out.push(q);
            }
        }
    }
    out
}

fn max_pairwise_distance(pts: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

/// Nearest intersection of a ray (object frame) with the block, if any.
pub fn ray_intersect(model: &BlockModel, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Vector3<f64>> {
    ray_param(model, origin, dir).map(|t| origin + dir * t)
}

pub(crate) fn ray_param(model: &BlockModel, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    model
        .primitives
        .iter()
        .filter_map(|p| p.ray_hit(origin, dir))
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))))
}

/// The seven parametric blocks, indexed by id 1..=7.
#[derive(Clone, Debug)]
pub struct BlockCatalog {
    blocks: Vec<BlockModel>,
}

impl BlockCatalog {
    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let specs: Vec<BlockSpec> =
            serde_json::from_str(text).map_err(|e| GeometryError::InvalidBlock(e.to_string()))?;
        Self::from_specs(&specs)
    }

    pub fn from_specs(specs: &[BlockSpec]) -> Result<Self, GeometryError> {
        let mut blocks = specs.iter().map(BlockModel::from_spec).collect::<Result<Vec<_>, _>>()?;
        blocks.sort_by_key(|b| b.id);
        for w in blocks.windows(2) {
            if w[0].id == w[1].id || w[0].name == w[1].name {
                return Err(GeometryError::InvalidBlock(format!("duplicate block {}", w[1].id)));
            }
        }
        Ok(Self { blocks })
    }

    pub fn builtin_json() -> &'static str {
        BUILTIN_CATALOG
    }

    pub fn blocks(&self) -> &[BlockModel] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, id: u8) -> Option<&BlockModel> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn by_name(&self, name: &str) -> Option<&BlockModel> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// The built-in catalog, built once per process.
pub fn block_catalog() -> &'static BlockCatalog {
    static CATALOG: OnceLock<BlockCatalog> = OnceLock::new();
    CATALOG.get_or_init(|| BlockCatalog::from_json(BUILTIN_CATALOG).expect("built-in catalog is valid"))
}
