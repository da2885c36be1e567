use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::pose::{lift_prediction, metrics, root_relative, MetricReport, Pose25D};
use crate::synthhand::{distance, Dataset, MIDDLE_MCP, ROOT};

/// Scores 2.5D predictions for `indices` of `data`.
///
/// 2D EPE is in pixels. For 3D, each prediction is lifted with the root
/// depth recovered from its own 2.5D output and the ground-truth length of
/// the middle-MCP/wrist bone (the ground-truth root depth stands in when the
/// quadratic has no valid root), and both skeletons are compared root-relative.
pub fn evaluate_poses(preds: &[Pose25D], data: &Dataset, indices: &[usize], aligned: bool) -> Result<MetricReport> {
    if preds.len() != indices.len() {
        return Err(Error::shape(format!("{} predictions for {} samples", preds.len(), indices.len())));
    }
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty sample set"));
    }
    let mut p3 = Vec::with_capacity(preds.len());
    let mut g3 = Vec::with_capacity(preds.len());
    let mut p2 = Vec::with_capacity(preds.len());
    let mut g2 = Vec::with_capacity(preds.len());
    for (pred, &i) in preds.iter().zip(indices) {
        let l = &data.labels[i];
        let bone = distance(l.j3d[MIDDLE_MCP], l.j3d[ROOT]);
        let (lifted, _) = lift_prediction(pred, &data.intrinsics(i), bone, l.j3d[ROOT][2]);
        p3.push(root_relative(&lifted));
        g3.push(root_relative(&l.j3d));
        p2.push(pred.j2d.clone());
        g2.push(l.j2d.clone());
    }
    metrics(&p3, &g3, &p2, &g2, aligned)
}

pub fn ground_truth_poses(data: &Dataset, indices: &[usize]) -> Vec<Pose25D> {
    indices
        .iter()
        .map(|&i| Pose25D {
            j2d: data.labels[i].j2d.clone(),
            d_r: data.labels[i].d_r.clone(),
        })
        .collect()
}

pub fn evaluate_model(model: &Model, data: &Dataset, indices: &[usize], aligned: bool) -> Result<MetricReport> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty sample set"));
    }
    let images: Vec<_> = indices.iter().map(|&i| data.image(i)).collect();
    let preds = model.predict_pose(&images)?;
    evaluate_poses(&preds, data, indices, aligned)
}
