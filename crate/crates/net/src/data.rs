use lanpose_core::geomfeat::{perturb_maps, render_maps, square_roi, GeomMaps, NoiseConfig, DEFAULT_PAD_RATIO};
use lanpose_core::geometry::{
    block_catalog, site_encode, BBox2D, BlockModel, CameraIntrinsics, Pose, Rotation3, SiteTranslation,
};
use lanpose_core::instruction::{Grammar, MAX_TOKENS, PAD_ID};
use lanpose_core::scene::{record_seed, relative_transform, DatasetRecord};

use crate::NetError;

pub const N_CLASSES: usize = 7;
/// ROI center ray (2) and ROI side over focal length (1).
pub const N_ROI_FEATURES: usize = 3;
const ROI_SCALE_GAIN: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Base,
    Target,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Base => 0,
            Role::Target => 1,
        }
    }
}

/// Clean and noisy maps of one object with the data needed to score it.
#[derive(Clone, Debug)]
pub struct ObjectSample {
    pub clean: GeomMaps,
    pub noisy: GeomMaps,
    pub bbox: BBox2D,
    pub block: &'static BlockModel,
    pub pose: Pose,
    pub k: CameraIntrinsics,
}

pub fn object_sample(
    rec: &DatasetRecord,
    role: Role,
    size: usize,
    noise: &NoiseConfig,
    noise_seed: u64,
) -> Result<ObjectSample, NetError> {
    let (bbox, block_id, pose) = match role {
        Role::Base => (rec.base_box(), rec.base_block(), rec.gt.base),
        Role::Target => (rec.target_box(), rec.target_block(), rec.gt.target),
    };
    let block = block_catalog()
        .get(block_id)
        .ok_or(lanpose_core::scene::SceneError::UnknownBlock(block_id))?;
    let k = rec.scene.camera;
    let roi = square_roi(&bbox, DEFAULT_PAD_RATIO);
    let clean = render_maps(&k, &pose, block, &roi, size)?;
    let noisy = perturb_maps(&clean, noise, noise_seed);
    Ok(ObjectSample { clean, noisy, bbox, block, pose, k })
}

/// Noise seed for evaluation: fixed per record and role, independent of training seeds.
pub fn eval_noise_seed(rec: &DatasetRecord, role: Role) -> u64 {
    record_seed(rec.seed ^ 0x5eed_e7a1, role.tag())
}

/// Noise seed for a training sample.
pub fn train_noise_seed(seed: u64, stage: u8, epoch: usize, rec: &DatasetRecord, role: Role) -> u64 {
    let s = record_seed(seed, ((stage as u64) << 32) | epoch as u64);
    record_seed(s ^ rec.id.wrapping_mul(0x2545_F491_4F6C_DD1D), role.tag())
}

/// Network inputs for a batch of objects.
#[derive(Clone, Debug)]
pub struct MapBatch {
    pub size: usize,
    /// `[B, 4, S, S]` noisy coords + mask.
    pub maps: Vec<f64>,
    /// `[B, 3, S, S]`.
    pub clean_coords: Vec<f64>,
    /// `[B, S·S]`.
    pub clean_mask: Vec<f64>,
    pub classes: Vec<u8>,
    /// `[B, N_ROI_FEATURES]`.
    pub roi_features: Vec<f64>,
}

fn roi_features(k: &CameraIntrinsics, roi: &BBox2D) -> [f64; N_ROI_FEATURES] {
    [(roi.cx - k.cx) / k.fx, (roi.cy - k.cy) / k.fy, ROI_SCALE_GAIN * roi.w / k.fx]
}

impl MapBatch {
    pub fn from_samples(samples: &[&ObjectSample]) -> Self {
        let size = samples.first().map(|s| s.clean.size).unwrap_or(0);
        let mut b = MapBatch {
            size,
            maps: Vec::with_capacity(samples.len() * 4 * size * size),
            clean_coords: Vec::with_capacity(samples.len() * 3 * size * size),
            clean_mask: Vec::with_capacity(samples.len() * size * size),
            classes: Vec::with_capacity(samples.len()),
            roi_features: Vec::with_capacity(samples.len() * N_ROI_FEATURES),
        };
        for s in samples {
            b.maps.extend_from_slice(&s.noisy.coords);
            b.maps.extend_from_slice(&s.noisy.mask);
            b.clean_coords.extend_from_slice(&s.clean.coords);
            b.clean_mask.extend_from_slice(&s.clean.mask);
            b.classes.push(s.block.id);
            b.roi_features.extend_from_slice(&roi_features(&s.k, &s.noisy.roi));
        }
        b
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// ROI-relative pixel-center coordinates in [−0.5, 0.5], `[B, 2, S, S]`.
    pub fn grid(&self) -> Vec<f64> {
        let s = self.size;
        let mut one = Vec::with_capacity(2 * s * s);
        for ch in 0..2 {
            for r in 0..s {
                for c in 0..s {
                    let v = if ch == 0 { c } else { r };
                    one.push((v as f64 + 0.5) / s as f64 - 0.5);
                }
            }
        }
        one.repeat(self.len())
    }

    /// One-hot block class followed by ROI features, `[B, N_CLASSES + N_ROI_FEATURES]`.
    pub fn direct_extras(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * (N_CLASSES + N_ROI_FEATURES));
        for (i, &c) in self.classes.iter().enumerate() {
            for j in 0..N_CLASSES {
                out.push(if j + 1 == c as usize { 1.0 } else { 0.0 });
            }
            out.extend_from_slice(&self.roi_features[i * N_ROI_FEATURES..(i + 1) * N_ROI_FEATURES]);
        }
        out
    }
}

/// Padded token ids `[B, MAX_TOKENS]` with key masks.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn from_texts<S: AsRef<str>>(grammar: &Grammar, texts: &[S]) -> Self {
        let mut ids = Vec::with_capacity(texts.len() * MAX_TOKENS);
        for t in texts {
            ids.extend(grammar.tokenize(t.as_ref()));
        }
        let mask = ids.iter().map(|&i| i != PAD_ID).collect();
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len() / MAX_TOKENS
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// Supervision for one pose head output.
#[derive(Clone, Copy, Debug)]
pub struct PoseTarget {
    pub rot: Rotation3,
    /// SITE for absolute heads, base-frame translation (mm) for the relative head.
    pub trans: [f64; 3],
    pub model: &'static BlockModel,
}

pub fn object_target(s: &ObjectSample) -> Result<PoseTarget, NetError> {
    let site: SiteTranslation = site_encode(&s.pose.t, &s.bbox, &s.k)?;
    Ok(PoseTarget { rot: s.pose.rot, trans: site.to_array(), model: s.block })
}

/// Assembly target in SITE form relative to the base box.
pub fn assembly_target(rec: &DatasetRecord) -> Result<PoseTarget, NetError> {
    let model = block(rec.target_block())?;
    let site = site_encode(&rec.gt.assembly.t, &rec.base_box(), &rec.scene.camera)?;
    Ok(PoseTarget { rot: rec.gt.assembly.rot, trans: site.to_array(), model })
}

/// Base-frame relative transform target.
pub fn relative_target(rec: &DatasetRecord) -> Result<PoseTarget, NetError> {
    let (bm, tm) = (block(rec.base_block())?, block(rec.target_block())?);
    let rel = relative_transform(rec.cmd.action, bm, tm)?;
    Ok(PoseTarget { rot: rel.rot, trans: [rel.t.x, rel.t.y, rel.t.z], model: tm })
}

fn block(id: u8) -> Result<&'static BlockModel, NetError> {
    block_catalog()
        .get(id)
        .ok_or_else(|| lanpose_core::scene::SceneError::UnknownBlock(id).into())
}
