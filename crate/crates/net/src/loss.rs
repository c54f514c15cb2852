//! Disentangled pose loss (rotation point matching + SITE L1), map loss and
//! the per-stage totals.

use lanpose_core::geometry::{sym_align, Rotation3};
use nalgebra::Matrix3;

use crate::data::{MapBatch, PoseTarget};
use crate::graph::{Graph, Var};
use crate::model::{DirectOut, PoseVars};
use crate::NetError;

/// Per-sample loss vectors `[B]` for one pose head.
#[derive(Clone, Copy, Debug)]
pub struct PoseLoss {
    pub rot: Var,
    pub trans: Var,
    pub total: Var,
}

fn row_major(r: &Rotation3) -> [f64; 9] {
    r.to_rows()
}

/// `L_R + L_center + L_z`. The symmetry-aligned target rotation is chosen from
/// the current prediction and held constant.
pub fn loss_assembly(g: &mut Graph, pred: &PoseVars, targets: &[PoseTarget]) -> Result<PoseLoss, NetError> {
    let r = g.rot6d(pred.r6d)?;
    let rv = g.value(r).to_vec();
    let aligned: Vec<[f64; 9]> = targets
        .iter()
        .zip(rv.chunks(9))
        .map(|(t, m)| {
            let pred_rot = Rotation3::from_matrix_unchecked(Matrix3::from_row_slice(m));
            row_major(&sym_align(&t.rot, &pred_rot, &t.model.sym_group))
        })
        .collect();
    let points: Vec<_> = targets.iter().map(|t| t.model.vertices.as_slice()).collect();
    let rot = g.point_match_l1(r, &aligned, &points)?;
    let trans_target: Vec<f64> = targets.iter().flat_map(|t| t.trans).collect();
    let trans = g.l1_rows(pred.site, &trans_target)?;
    let total = g.add(rot, trans)?;
    Ok(PoseLoss { rot, trans, total })
}

/// Object-pose loss; same disentangled form as the assembly loss.
pub fn loss_pose(g: &mut Graph, pred: &PoseVars, targets: &[PoseTarget]) -> Result<PoseLoss, NetError> {
    loss_assembly(g, pred, targets)
}

/// Masked coordinate L1 plus mask BCE, per sample.
pub fn loss_geom(g: &mut Graph, out: &DirectOut, batch: &MapBatch) -> Result<Var, NetError> {
    let l1 = g.masked_l1(out.coords, &batch.clean_coords, &batch.clean_mask)?;
    let bce = g.bce_logits(out.mask_logits, &batch.clean_mask)?;
    g.add(l1, bce)
}

/// Batch-mean objective for a stage: stage 1 is `L_Pose + L_Geom`, stage 2 is `L_Assembly`.
pub fn loss_total(g: &mut Graph, stage: u8, pose: Var, geom: Option<Var>) -> Result<Var, NetError> {
    let per_sample = match (stage, geom) {
        (1, Some(geom)) => g.add(pose, geom)?,
        (1, None) => return Err(NetError::ShapeMismatch("stage 1 needs the map loss".into())),
        _ => pose,
    };
    Ok(g.mean(per_sample))
}
