//! Rigid-body pose algebra, pinhole projection, the scale-invariant translation
//! encoding, and the parametric block catalog.
//!
//! Units: millimetres, degrees, pixels.

mod block;
mod camera;
mod pose;
mod rotation;

pub use block::{
    block_catalog, ray_intersect, BlockCatalog, BlockModel, BlockSpec, InsertFeature, Primitive,
    PrimitiveKind, PrimitiveSpec, SymClass, MIN_VERTICES, SYMMETRY_TOL,
};
pub(crate) use block::ray_param;
pub use camera::{project, site_decode, site_encode, BBox2D, CameraIntrinsics, SiteTranslation};
pub use pose::{compose, invert, Pose};
pub use rotation::{geodesic_angle, rot6d_to_matrix, sym_align, Rotation3, ORTHONORMAL_TOL};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate 6D rotation input (zero or parallel columns)")]
    DegenerateInput,
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("matrix is not a proper rotation")]
    NotARotation,
    #[error("invalid camera intrinsics")]
    InvalidIntrinsics,
    #[error("invalid bounding box")]
    InvalidBox,
    #[error("invalid block definition: {0}")]
    InvalidBlock(String),
}
