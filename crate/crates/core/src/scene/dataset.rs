use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{assembly_pose, sample_scene, tight_bbox, GenConfig, Scene, SceneError};
use crate::geometry::{block_catalog, BBox2D, BlockModel, InsertFeature, Pose};
use crate::instruction::{AssemblyAction, Command, Grammar, InstructionError};
use crate::parallel::thread_pool;

pub const RECORD_VERSION: u32 = 1;

/// Record counts for a train/validation split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
}

impl SplitSizes {
    pub const DESK: SplitSizes = SplitSizes { train: 5000, val: 500 };
    pub const PAPER: SplitSizes = SplitSizes { train: 39000, val: 1000 };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "P_base")]
    pub base: Pose,
    #[serde(rename = "P_target")]
    pub target: Pose,
    #[serde(rename = "P_assembly")]
    pub assembly: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub v: u32,
    pub id: u64,
    pub seed: u64,
    pub scene: Scene,
    pub instruction: String,
    pub template: String,
    pub cmd: Command,
    pub base_id: u32,
    pub target_id: u32,
    pub boxes: BTreeMap<u32, BBox2D>,
    pub gt: GroundTruth,
}

impl DatasetRecord {
    pub fn base_block(&self) -> u8 {
        self.scene.object(self.base_id).map(|o| o.block_id).unwrap_or(0)
    }

    pub fn target_block(&self) -> u8 {
        self.scene.object(self.target_id).map(|o| o.block_id).unwrap_or(0)
    }

    pub fn base_box(&self) -> BBox2D {
        self.boxes[&self.base_id]
    }

    pub fn target_box(&self) -> BBox2D {
        self.boxes[&self.target_id]
    }

    /// Checks internal consistency, re-deriving the assembly pose.
    pub fn validate(&self) -> Result<(), SceneError> {
        let err = |msg: String| SceneError::BadRecord { id: self.id, msg };
        if self.v != RECORD_VERSION {
            return Err(err(format!("unsupported record version {}", self.v)));
        }
        let cat = block_catalog();
        let base = self.scene.object(self.base_id).ok_or_else(|| err("missing base object".into()))?;
        let target = self.scene.object(self.target_id).ok_or_else(|| err("missing target object".into()))?;
        let bm = cat.get(base.block_id).ok_or(SceneError::UnknownBlock(base.block_id))?;
        let tm = cat.get(target.block_id).ok_or(SceneError::UnknownBlock(target.block_id))?;
        if base.pose != self.gt.base || target.pose != self.gt.target {
            return Err(err("object poses disagree with ground truth".into()));
        }
        if assembly_pose(&self.gt.base, self.cmd.action, bm, tm)? != self.gt.assembly {
            return Err(err("assembly pose does not match its re-derivation".into()));
        }
        for o in &self.scene.objects {
            if !self.boxes.contains_key(&o.id) {
                return Err(err(format!("no box for object {}", o.id)));
            }
        }
        Ok(())
    }
}

/// Per-record seed derived from the dataset seed (SplitMix64 finalizer).
pub fn record_seed(base_seed: u64, index: u64) -> u64 {
    let mut z = base_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Acceptance weight of a block in a non-insert record, as (target, base).
///
/// `insert_to` only pairs peg targets with hole bases; thinning those blocks
/// elsewhere keeps overall block counts near uniform.
fn balance_weight(block: &BlockModel) -> (f64, f64) {
    match block.insert {
        Some(InsertFeature::Peg { .. }) => (0.1, 1.0),
        Some(InsertFeature::Hole) => (1.0, 0.6),
        None => (1.0, 1.0),
    }
}

/// Builds record `index`: the action is drawn uniformly first, then scenes are
/// resampled until one supports it with an in-range assembly pose.
pub fn generate_record(cfg: &GenConfig, base_seed: u64, index: u64) -> Result<DatasetRecord, SceneError> {
    let seed = record_seed(base_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let action = AssemblyAction::ALL[rng.random_range(0..AssemblyAction::ALL.len())];
    let cat = block_catalog();
    let grammar = Grammar::builtin();
    for _ in 0..cfg.max_rejections {
        let scene = sample_scene(cfg, rng.random())?;
        let expr = match grammar.generate_for(&scene, action, rng.random()) {
            Ok(e) => e,
            Err(InstructionError::NoCompatiblePair(_)) | Err(InstructionError::AmbiguousScene) => continue,
            Err(e) => return Err(e.into()),
        };
        let base = scene.object(expr.base_id).expect("generator returns scene ids");
        let target = scene.object(expr.target_id).expect("generator returns scene ids");
        let bm = cat.get(base.block_id).ok_or(SceneError::UnknownBlock(base.block_id))?;
        let tm = cat.get(target.block_id).ok_or(SceneError::UnknownBlock(target.block_id))?;
        if action != AssemblyAction::InsertTo {
            let keep = balance_weight(tm).0 * balance_weight(bm).1;
            if rng.random::<f64>() >= keep {
                continue;
            }
        }
        let assembly = assembly_pose(&base.pose, action, bm, tm)?;
        if assembly.t.z < cfg.tz_range_mm[0] || assembly.t.z > cfg.tz_range_mm[1] {
            continue;
        }
        let mut boxes = BTreeMap::new();
        for o in &scene.objects {
            let m = cat.get(o.block_id).ok_or(SceneError::UnknownBlock(o.block_id))?;
            boxes.insert(o.id, tight_bbox(&scene.camera, &o.pose, m)?);
        }
        let gt = GroundTruth {
            base: base.pose,
            target: target.pose,
            assembly,
        };
        return Ok(DatasetRecord {
            v: RECORD_VERSION,
            id: index,
            seed,
            instruction: expr.text,
            template: expr.template,
            cmd: expr.cmd,
            base_id: expr.base_id,
            target_id: expr.target_id,
            boxes,
            gt,
            scene,
        });
    }
    Err(SceneError::SamplingExhausted(cfg.max_rejections))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub v: u32,
    pub seed: u64,
    pub n_records: usize,
    pub config: GenConfig,
    pub config_hash: String,
    pub content_hash: String,
    pub action_counts: BTreeMap<AssemblyAction, usize>,
    /// Base and target occurrences per block id.
    pub block_counts: BTreeMap<u8, usize>,
}

pub fn manifest_path(out_path: &Path) -> PathBuf {
    let mut s = out_path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes `n_records` JSON lines to `out_path` and a manifest next to it.
pub fn generate_dataset(
    cfg: &GenConfig,
    n_records: usize,
    rng_seed: u64,
    out_path: &Path,
) -> Result<Manifest, SceneError> {
    cfg.validate()?;
    let records: Vec<DatasetRecord> = thread_pool().install(|| {
        (0..n_records as u64)
            .into_par_iter()
            .map(|i| generate_record(cfg, rng_seed, i))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut bytes = Vec::new();
    write_records(&mut bytes, &records)?;
    std::fs::write(out_path, &bytes)?;

    let mut action_counts: BTreeMap<AssemblyAction, usize> =
        AssemblyAction::ALL.iter().map(|a| (*a, 0)).collect();
    let mut block_counts: BTreeMap<u8, usize> = block_catalog().blocks().iter().map(|b| (b.id, 0)).collect();
    for r in &records {
        *action_counts.entry(r.cmd.action).or_default() += 1;
        *block_counts.entry(r.base_block()).or_default() += 1;
        *block_counts.entry(r.target_block()).or_default() += 1;
    }
    let manifest = Manifest {
        v: RECORD_VERSION,
        seed: rng_seed,
        n_records,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        content_hash: hex::encode(Sha256::digest(&bytes)),
        action_counts,
        block_counts,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(manifest_path(out_path), text)?;
    Ok(manifest)
}

pub fn write_records<W: Write>(w: W, records: &[DatasetRecord]) -> Result<(), SceneError> {
    let mut w = BufWriter::new(w);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>, SceneError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads and validates a JSON-lines dataset file.
pub fn load_records(path: &Path) -> Result<Vec<DatasetRecord>, SceneError> {
    read_records(BufReader::new(File::open(path)?))
}
