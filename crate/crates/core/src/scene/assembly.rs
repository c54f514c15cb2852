use nalgebra::Vector3;

use super::SceneError;
use crate::geometry::{project, BBox2D, BlockModel, CameraIntrinsics, GeometryError, InsertFeature, Pose};
use crate::instruction::AssemblyAction;

/// Target pose relative to the base frame for an action.
///
/// Rotation is always identity. Lateral and stacking offsets put the two
/// bounding cuboids in face contact; `InsertTo` drops a peg block into a
/// centered hole until its shoulder meets the base top.
pub fn relative_transform(
    action: AssemblyAction,
    base: &BlockModel,
    target: &BlockModel,
) -> Result<Pose, SceneError> {
    let b = base.half_extents;
    let t = target.half_extents;
    let offset = match action {
        AssemblyAction::StackOn => Vector3::new(0.0, 0.0, b.z + t.z),
        AssemblyAction::AssembleFront => Vector3::new(0.0, -(b.y + t.y), 0.0),
        AssemblyAction::AssembleBack => Vector3::new(0.0, b.y + t.y, 0.0),
        AssemblyAction::AssembleLeft => Vector3::new(-(b.x + t.x), 0.0, 0.0),
        AssemblyAction::AssembleRight => Vector3::new(b.x + t.x, 0.0, 0.0),
        // flush on +x with the bottom faces level
        AssemblyAction::CombineWith => Vector3::new(b.x + t.x, 0.0, t.z - b.z),
        AssemblyAction::InsertTo => match (base.insert, target.insert) {
            (Some(InsertFeature::Hole), Some(InsertFeature::Peg { shoulder_z })) => {
                Vector3::new(0.0, 0.0, b.z - shoulder_z)
            }
            _ => {
                return Err(SceneError::IncompatiblePair {
                    action: action.to_string(),
                    base: base.id,
                    target: target.id,
                })
            }
        },
    };
    Ok(Pose::from_translation(offset))
}

pub fn action_supported(action: AssemblyAction, base: &BlockModel, target: &BlockModel) -> bool {
    relative_transform(action, base, target).is_ok()
}

/// `base_pose ∘ T_rel(action, base, target)`.
pub fn assembly_pose(
    base_pose: &Pose,
    action: AssemblyAction,
    base: &BlockModel,
    target: &BlockModel,
) -> Result<Pose, SceneError> {
    Ok(base_pose.compose(&relative_transform(action, base, target)?))
}

/// Tight image box around the projected model vertices.
pub fn tight_bbox(k: &CameraIntrinsics, pose: &Pose, model: &BlockModel) -> Result<BBox2D, GeometryError> {
    let uv = project(k, pose, &model.vertices)?;
    let (mut u0, mut v0) = (f64::INFINITY, f64::INFINITY);
    let (mut u1, mut v1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &uv {
        u0 = u0.min(p.x);
        v0 = v0.min(p.y);
        u1 = u1.max(p.x);
        v1 = v1.max(p.y);
    }
    BBox2D::from_min_max(u0, v0, u1, v1)
}

/// Deepest penetration of either block's surface samples into the other.
pub fn interpenetration_depth(base: &BlockModel, base_pose: &Pose, target: &BlockModel, target_pose: &Pose) -> f64 {
    let t_in_b = base_pose.invert().compose(target_pose);
    let b_in_t = t_in_b.invert();
    let a = target
        .vertices
        .iter()
        .map(|v| base.penetration_depth(&t_in_b.transform_point(v)))
        .fold(0.0, f64::max);
    let b = base
        .vertices
        .iter()
        .map(|v| target.penetration_depth(&b_in_t.transform_point(v)))
        .fold(0.0, f64::max);
    a.max(b)
}
