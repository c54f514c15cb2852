//! Block scenes resting on tilted planes, assembly ground truth, image boxes
//! and the JSON-lines dataset writer.

mod assembly;
mod dataset;
mod sample;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError, Pose};
use crate::instruction::{InstructionError, ObjectDescriptor};

pub use assembly::{
    action_supported, assembly_pose, interpenetration_depth, relative_transform, tight_bbox,
};
pub use dataset::{
    generate_dataset, generate_record, load_records, manifest_path, read_records, record_seed,
    write_records, DatasetRecord, GroundTruth, Manifest, SplitSizes, RECORD_VERSION,
};
pub use sample::{canonical_pose, resting_pose, sample_scene};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("sampling exhausted after {0} rejections")]
    SamplingExhausted(usize),
    #[error("action {action} is not defined for base block {base} and target block {target}")]
    IncompatiblePair { action: String, base: u8, target: u8 },
    #[error("invalid generation config field `{0}`")]
    InvalidConfig(String),
    #[error("unknown block id {0}")]
    UnknownBlock(u8),
    #[error("record {id}: {msg}")]
    BadRecord { id: u64, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Support plane, in world coordinates (z up).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    /// Inclination about a horizontal axis, degrees.
    pub tilt_deg: f64,
    /// Direction of the horizontal tilt axis, degrees from world x.
    pub azimuth_deg: f64,
    /// Offset of the plane origin along world z, mm.
    pub height_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub block_id: u8,
    /// Object-to-camera transform.
    pub pose: Pose,
    pub descriptor: ObjectDescriptor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub plane: Plane,
    pub world_to_camera: Pose,
    pub camera: CameraIntrinsics,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }
}

/// Sampling ranges for scene synthesis. Every range is `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub tilt_deg: [f64; 2],
    pub height_mm: [f64; 2],
    pub objects: [usize; 2],
    pub elevation_deg: [f64; 2],
    pub distance_mm: [f64; 2],
    pub lookat_jitter_mm: f64,
    pub placement_radius_mm: f64,
    pub tz_range_mm: [f64; 2],
    pub camera: CameraIntrinsics,
    pub max_rejections: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            tilt_deg: [0.0, 15.0],
            height_mm: [0.0, 100.0],
            objects: [2, 4],
            elevation_deg: [30.0, 60.0],
            distance_mm: [600.0, 1200.0],
            lookat_jitter_mm: 50.0,
            placement_radius_mm: 150.0,
            tz_range_mm: [400.0, 1600.0],
            camera: CameraIntrinsics::default(),
            max_rejections: 1000,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |f: &str| Err(SceneError::InvalidConfig(f.to_string()));
        let range = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !range(self.tilt_deg) || self.tilt_deg[0] < 0.0 || self.tilt_deg[1] >= 90.0 {
            return bad("tilt_deg");
        }
        if !range(self.height_mm) {
            return bad("height_mm");
        }
        if self.objects[0] < 2 || self.objects[0] > self.objects[1] {
            return bad("objects");
        }
        if !range(self.elevation_deg) || self.elevation_deg[0] <= 0.0 || self.elevation_deg[1] >= 90.0 {
            return bad("elevation_deg");
        }
        if !range(self.distance_mm) || self.distance_mm[0] <= 0.0 {
            return bad("distance_mm");
        }
        if !(self.lookat_jitter_mm >= 0.0) {
            return bad("lookat_jitter_mm");
        }
        if !(self.placement_radius_mm > 0.0) {
            return bad("placement_radius_mm");
        }
        if !range(self.tz_range_mm) || self.tz_range_mm[0] <= 0.0 {
            return bad("tz_range_mm");
        }
        if self.camera.validate().is_err() {
            return bad("camera");
        }
        if self.max_rejections == 0 {
            return bad("max_rejections");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
