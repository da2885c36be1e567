//! 2.5D pose: L1 training losses, root-depth recovery from one reference
//! bone, lifting to 3D, Procrustes alignment, PCK/AUC metrics and the
//! equivariance deviation of keypoint predictors.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::geometry::AffineTransform2D;
use crate::image::Image;
use crate::ndiff::{Graph, NodeId, Tensor};
use crate::synthhand::{MIDDLE_MCP, NUM_JOINTS, ROOT};

pub const PCK_STEPS: usize = 100;
pub const PCK_MAX: f64 = 5.0;
/// Improvement ratios with a smaller baseline deviation are skipped.
pub const IMPROVEMENT_EPS: f64 = 1e-9;
/// Middle MCP to wrist.
pub const DEFAULT_REF_BONE: (usize, usize) = (MIDDLE_MCP, ROOT);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose25D {
    /// Pixels.
    pub j2d: Vec<[f64; 2]>,
    /// Root-relative depth, cm.
    pub d_r: Vec<f64>,
}

/// Mean absolute error of the 2D coordinates and of the relative depths.
pub fn pose_losses(pred: &Pose25D, gt: &Pose25D) -> Result<(f64, f64)> {
    if pred.j2d.len() != gt.j2d.len() || pred.d_r.len() != gt.d_r.len() || pred.j2d.is_empty() {
        return Err(Error::shape("pose_losses: joint counts differ"));
    }
    let l2d = pred
        .j2d
        .iter()
        .zip(&gt.j2d)
        .map(|(p, g)| (p[0] - g[0]).abs() + (p[1] - g[1]).abs())
        .sum::<f64>()
        / (2 * pred.j2d.len()) as f64;
    let ldr = pred.d_r.iter().zip(&gt.d_r).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.d_r.len() as f64;
    Ok((l2d, ldr))
}

/// In-graph L1 terms over a `(B, 2J + J)` head output laid out as the `2J`
/// keypoint coordinates followed by the `J` depths. Returns `(L_2d, L_dr)`
/// scalar nodes in whatever units `pred` and `target` use.
pub fn pose_loss_nodes(g: &mut Graph, pred: NodeId, target: NodeId, joints: usize) -> Result<(NodeId, NodeId)> {
    let shape = g.shape_of(pred).to_vec();
    if shape.len() != 2 || shape[1] != 3 * joints {
        return Err(Error::shape(format!("pose head output {shape:?} for {joints} joints")));
    }
    let batch = shape[0];
    let diff = g.sub(pred, target)?;
    let neg = g.scale(diff, -1.0)?;
    let pos_part = g.relu(diff)?;
    let neg_part = g.relu(neg)?;
    let abs = g.add(pos_part, neg_part)?;
    let term = |g: &mut Graph, lo: usize, hi: usize| -> Result<NodeId> {
        let mask: Vec<f64> = (0..batch)
            .flat_map(|_| (0..3 * joints).map(move |c| if (lo..hi).contains(&c) { 1.0 } else { 0.0 }))
            .collect();
        let mask = g.constant(Tensor::new(vec![batch, 3 * joints], mask)?);
        let picked = g.mul(abs, mask)?;
        let total = g.sum(picked, None)?;
        g.scale(total, 1.0 / (batch * (hi - lo)) as f64)
    };
    let l2d = term(g, 0, 2 * joints)?;
    let ldr = term(g, 2 * joints, 3 * joints)?;
    Ok((l2d, ldr))
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Absolute root depth from the reference bone `(n, m)` of known length:
/// the larger root of `‖x_n (d_n + D) - x_m (d_m + D)‖ = len` with
/// `x = K⁻¹ (u, v, 1)`.
pub fn recover_root_depth(
    j2d: &[[f64; 2]],
    d_r: &[f64],
    k: &Intrinsics,
    ref_bone: (usize, usize),
    ref_len: f64,
) -> Result<f64> {
    let (n, m) = ref_bone;
    if n >= j2d.len() || m >= j2d.len() || n == m || d_r.len() != j2d.len() {
        return Err(Error::invalid(format!("reference bone ({n}, {m}) is not a joint pair")));
    }
    if !(ref_len > 0.0) {
        return Err(Error::invalid("reference bone length must be positive"));
    }
    let xn = k.ray(j2d[n]);
    let xm = k.ray(j2d[m]);
    let a = [xn[0] - xm[0], xn[1] - xm[1], xn[2] - xm[2]];
    let b: [f64; 3] = std::array::from_fn(|i| xn[i] * d_r[n] - xm[i] * d_r[m]);
    let aa = dot3(a, a);
    if aa < 1e-18 {
        return Err(Error::Degenerate(
            "reference joints project to the same pixel; root depth is unconstrained".into(),
        ));
    }
    let ab = dot3(a, b);
    let disc = ab * ab - aa * (dot3(b, b) - ref_len * ref_len);
    if disc < 0.0 {
        return Err(Error::Degenerate(format!(
            "no real root depth (discriminant {disc:e}); 2D, depths and bone length are inconsistent"
        )));
    }
    let root = (-ab + disc.sqrt()) / aa;
    if !(root > 0.0) {
        return Err(Error::Degenerate(format!("largest root depth {root} is not positive")));
    }
    Ok(root)
}

/// `J3D_j = K⁻¹ (u_j, v_j, 1) · (d_r_j + d_root)`.
pub fn lift_to_3d(j2d: &[[f64; 2]], d_r: &[f64], d_root: f64, k: &Intrinsics) -> Result<Vec<[f64; 3]>> {
    if j2d.len() != d_r.len() {
        return Err(Error::shape("lift_to_3d: joint counts differ"));
    }
    j2d.iter()
        .zip(d_r)
        .enumerate()
        .map(|(j, (&uv, &dr))| {
            let z = dr + d_root;
            if !(z > 0.0) {
                return Err(Error::invalid(format!("joint {j} has nonpositive absolute depth {z}")));
            }
            let r = k.ray(uv);
            Ok([r[0] * z, r[1] * z, z])
        })
        .collect()
}

/// Similarity transform `x -> s R x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: DMatrix<f64>,
    pub scale: f64,
    pub translation: DVector<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(p);
        let out = self.scale * (&self.rotation * v) + &self.translation;
        out.iter().copied().collect()
    }
}

fn to_matrix<const D: usize>(pts: &[[f64; D]]) -> DMatrix<f64> {
    DMatrix::from_fn(pts.len(), D, |i, j| pts[i][j])
}

/// Least-squares similarity aligning `pred` onto `gt` (proper rotation, with
/// scale), in any dimension.
pub fn procrustes<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]]) -> Result<Similarity> {
    if pred.len() != gt.len() {
        return Err(Error::shape("procrustes: point counts differ"));
    }
    if pred.len() < D {
        return Err(Error::Degenerate(format!("procrustes needs at least {D} points")));
    }
    let p = to_matrix(pred);
    let g = to_matrix(gt);
    let n = pred.len() as f64;
    let mp = p.row_mean();
    let mg = g.row_mean();
    let pc = DMatrix::from_fn(p.nrows(), D, |i, j| p[(i, j)] - mp[j]);
    let gc = DMatrix::from_fn(g.nrows(), D, |i, j| g[(i, j)] - mg[j]);
    let var_p = pc.iter().map(|v| v * v).sum::<f64>() / n;
    if var_p < 1e-24 {
        return Err(Error::Degenerate("prediction collapses to a single point".into()));
    }
    let sigma = gc.transpose() * &pc / n;
    let svd = sigma.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if D >= 2 && sv[D - 2] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::Degenerate("points are collinear; rotation is undetermined".into()));
    }
    let mut d = DMatrix::<f64>::identity(D, D);
    if (u.determinant() * vt.determinant()) < 0.0 {
        d[(D - 1, D - 1)] = -1.0;
    }
    let rotation = &u * &d * &vt;
    let trace_sd: f64 = (0..D).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace_sd / var_p;
    let mp_v = DVector::from_iterator(D, mp.iter().copied());
    let mg_v = DVector::from_iterator(D, mg.iter().copied());
    let translation = mg_v - scale * (&rotation * mp_v);
    Ok(Similarity {
        rotation,
        scale,
        translation,
    })
}

pub fn procrustes_align<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]]) -> Result<Vec<[f64; D]>> {
    let t = procrustes(pred, gt)?;
    Ok(pred
        .iter()
        .map(|p| {
            let q = t.apply(p);
            std::array::from_fn(|i| q[i])
        })
        .collect())
}

fn dist<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `k · 5/100` for `k = 1..=100`.
pub fn pck_thresholds() -> Vec<f64> {
    (1..=PCK_STEPS).map(|k| PCK_MAX * k as f64 / PCK_STEPS as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointMetrics {
    pub epe: f64,
    pub auc: f64,
    pub pck: Vec<f64>,
}

/// EPE over all joints of all samples, PCK with strict `<` at
/// [`pck_thresholds`], and AUC as the mean PCK value.
pub fn keypoint_metrics<const D: usize>(
    pred: &[Vec<[f64; D]>],
    gt: &[Vec<[f64; D]>],
    aligned: bool,
) -> Result<KeypointMetrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("metrics: prediction and ground-truth sets differ in size or are empty"));
    }
    let mut distances = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::shape("metrics: joint counts differ"));
        }
        let p = if aligned { procrustes_align(p, g)? } else { p.clone() };
        distances.extend(p.iter().zip(g).map(|(a, b)| dist(a, b)));
    }
    let total = distances.len() as f64;
    let epe = distances.iter().sum::<f64>() / total;
    let pck: Vec<f64> = pck_thresholds()
        .iter()
        .map(|&t| distances.iter().filter(|&&d| d < t).count() as f64 / total)
        .collect();
    let auc = pck.iter().sum::<f64>() / pck.len() as f64;
    Ok(KeypointMetrics { epe, auc, pck })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// cm.
    pub epe: f64,
    /// cm, after per-sample Procrustes alignment.
    pub pa_epe: f64,
    pub auc: f64,
    /// At [`pck_thresholds`] (cm), aligned or not per `aligned`.
    pub pck: Vec<f64>,
    /// px.
    pub epe_2d: f64,
    pub aligned: bool,
    pub count: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "count,aligned,epe_cm,pa_epe_cm,auc,epe_2d_px";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.count, self.aligned, self.epe, self.pa_epe, self.auc, self.epe_2d
        )
    }
}

pub fn metrics(
    pred_3d: &[Vec<[f64; 3]>],
    gt_3d: &[Vec<[f64; 3]>],
    pred_2d: &[Vec<[f64; 2]>],
    gt_2d: &[Vec<[f64; 2]>],
    aligned: bool,
) -> Result<MetricReport> {
    let raw = keypoint_metrics(pred_3d, gt_3d, false)?;
    let pa = keypoint_metrics(pred_3d, gt_3d, true)?;
    let k2 = keypoint_metrics(pred_2d, gt_2d, false)?;
    let chosen = if aligned { &pa } else { &raw };
    Ok(MetricReport {
        epe: raw.epe,
        pa_epe: pa.epe,
        auc: chosen.auc,
        pck: chosen.pck.clone(),
        epe_2d: k2.epe,
        aligned,
        count: pred_3d.len(),
    })
}

/// Anything mapping images to 2D keypoints (pixels).
pub trait KeypointPredictor {
    fn predict_2d(&self, images: &[Image]) -> Result<Vec<Vec<[f64; 2]>>>;
}

/// Transforms keypoints the way [`AffineTransform2D::apply_to_image`] moves
/// pixels (pivot at the image center).
pub fn transform_keypoints(t: &AffineTransform2D, img: &Image, pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    t.with_center(img.center()).apply_to_points(pts)
}

fn deviation(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `‖t_g f(I) - f(t_g(I))‖₂` over all keypoint coordinates.
pub fn equivariance_error(model: &dyn KeypointPredictor, image: &Image, t_g: &AffineTransform2D) -> Result<f64> {
    let warped = t_g.apply_to_image(image, 0.0);
    let preds = model.predict_2d(&[image.clone(), warped])?;
    Ok(deviation(&transform_keypoints(t_g, image, &preds[0]), &preds[1]))
}

/// Per-image deviations for every grid transform, batching predictions.
pub fn equivariance_errors(
    model: &dyn KeypointPredictor,
    images: &[Image],
    grid: &[AffineTransform2D],
) -> Result<Vec<Vec<f64>>> {
    let base = model.predict_2d(images)?;
    grid.iter()
        .map(|t| {
            let warped: Vec<Image> = images.iter().map(|img| t.apply_to_image(img, 0.0)).collect();
            let preds = model.predict_2d(&warped)?;
            Ok(images
                .iter()
                .zip(&base)
                .zip(&preds)
                .map(|((img, b), p)| deviation(&transform_keypoints(t, img, b), p))
                .collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    pub equiv_a: f64,
    pub equiv_b: f64,
    /// Mean over images of `(L_a - L_b) / L_a`; `None` when every image was skipped.
    pub improvement: Option<f64>,
    /// Images whose `L_a` fell below [`IMPROVEMENT_EPS`].
    pub skipped: usize,
}

/// Relative equivariance improvement of `model_b` over `model_a` at each grid point.
pub fn equivariance_improvement(
    model_a: &dyn KeypointPredictor,
    model_b: &dyn KeypointPredictor,
    images: &[Image],
    grid: &[AffineTransform2D],
) -> Result<Vec<ImprovementRow>> {
    if images.is_empty() {
        return Err(Error::invalid("equivariance report needs at least one image"));
    }
    let ea = equivariance_errors(model_a, images, grid)?;
    let eb = equivariance_errors(model_b, images, grid)?;
    let n = images.len() as f64;
    Ok(grid
        .iter()
        .zip(ea.iter().zip(&eb))
        .map(|(t, (a, b))| {
            let ratios: Vec<f64> = a
                .iter()
                .zip(b)
                .filter(|(la, _)| **la >= IMPROVEMENT_EPS)
                .map(|(la, lb)| (la - lb) / la)
                .collect();
            ImprovementRow {
                rotation_deg: t.rotation_deg,
                translation: t.translation,
                equiv_a: a.iter().sum::<f64>() / n,
                equiv_b: b.iter().sum::<f64>() / n,
                improvement: (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
                skipped: a.len() - ratios.len(),
            }
        })
        .collect())
}

/// `count` rotations evenly spaced over `[-max_deg, max_deg]`.
pub fn rotation_grid(count: usize, max_deg: f64) -> Vec<AffineTransform2D> {
    linspace(-max_deg, max_deg, count)
        .into_iter()
        .map(|r| AffineTransform2D::rotation(r, [0.0, 0.0]))
        .collect()
}

/// `count × count` translations evenly spaced over `[-max_px, max_px]²`.
pub fn translation_grid(count: usize, max_px: f64) -> Vec<AffineTransform2D> {
    let axis = linspace(-max_px, max_px, count);
    axis.iter()
        .flat_map(|&ty| axis.iter().map(move |&tx| AffineTransform2D::translation(tx, ty)))
        .collect()
}

fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

fn image_key(img: &Image) -> u64 {
    let mut h = DefaultHasher::new();
    (img.height(), img.width()).hash(&mut h);
    for v in img.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Predictor that knows the exact keypoints of a fixed set of images and of
/// their warps under a fixed set of transforms; an exactly equivariant
/// reference for in-frame transforms.
#[derive(Clone, Debug, Default)]
pub struct GroundTruthLabeler {
    table: HashMap<u64, Vec<(Image, Vec<[f64; 2]>)>>,
}

impl GroundTruthLabeler {
    pub fn new(samples: &[(Image, Vec<[f64; 2]>)], transforms: &[AffineTransform2D]) -> Self {
        let mut labeler = GroundTruthLabeler::default();
        for (img, j2d) in samples {
            labeler.insert(img.clone(), j2d.clone());
            for t in transforms {
                labeler.insert(t.apply_to_image(img, 0.0), transform_keypoints(t, img, j2d));
            }
        }
        labeler
    }

    fn insert(&mut self, img: Image, j2d: Vec<[f64; 2]>) {
        self.table.entry(image_key(&img)).or_default().push((img, j2d));
    }
}

impl KeypointPredictor for GroundTruthLabeler {
    fn predict_2d(&self, images: &[Image]) -> Result<Vec<Vec<[f64; 2]>>> {
        images
            .iter()
            .map(|img| {
                self.table
                    .get(&image_key(img))
                    .and_then(|bucket| bucket.iter().find(|(i, _)| i == img))
                    .map(|(_, j)| j.clone())
                    .ok_or_else(|| Error::invalid("image unknown to the ground-truth labeler"))
            })
            .collect()
    }
}

/// Root-relative 3D error after lifting with the recovered root depth; the
/// fallback when recovery fails is the supplied reference depth.
pub fn lift_prediction(
    pose: &Pose25D,
    k: &Intrinsics,
    ref_len: f64,
    fallback_root: f64,
) -> (Vec<[f64; 3]>, bool) {
    let (root, recovered) = match recover_root_depth(&pose.j2d, &pose.d_r, k, DEFAULT_REF_BONE, ref_len) {
        Ok(d) => (d, true),
        Err(_) => (fallback_root, false),
    };
    let pts = pose
        .j2d
        .iter()
        .zip(&pose.d_r)
        .map(|(&uv, &dr)| {
            let r = k.ray(uv);
            let z = dr + root;
            [r[0] * z, r[1] * z, z]
        })
        .collect();
    (pts, recovered)
}

/// Subtracts the root joint from every joint.
pub fn root_relative(pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let r = pts[ROOT];
    pts.iter().map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]]).collect()
}

pub fn num_pose_outputs() -> usize {
    3 * NUM_JOINTS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::{grad_check, GradCheckOptions, ParamSet};
    use crate::rng;
    use crate::synthhand::{self, distance, SynthConfig};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn pose(j2d: Vec<[f64; 2]>, d_r: Vec<f64>) -> Pose25D {
        Pose25D { j2d, d_r }
    }

    #[test]
    fn loss_examples() {
        let gt = pose(vec![[1.0, 2.0], [3.0, 4.0]], vec![0.0, 1.5]);
        assert_eq!(pose_losses(&gt, &gt).unwrap(), (0.0, 0.0));
        let shifted = pose(vec![[2.0, 3.0], [4.0, 5.0]], vec![0.0, 1.5]);
        assert_eq!(pose_losses(&shifted, &gt).unwrap(), (1.0, 0.0));
        let up = pose(vec![[1.3, 1.0], [3.0, 4.7]], vec![0.5, 1.0]);
        let down = pose(vec![[0.7, 3.0], [3.0, 3.3]], vec![-0.5, 2.0]);
        assert_eq!(pose_losses(&up, &gt).unwrap(), pose_losses(&down, &gt).unwrap());
    }

    #[test]
    fn loss_nodes_match_values_and_gradients() {
        let (batch, joints) = (3, 4);
        let mut r = rng::stream(2, "pose", 0);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = rand_t(&[batch, 5]);
        let target = rand_t(&[batch, 3 * joints]);
        let mut params = ParamSet::new();
        params.insert("w", rand_t(&[5, 3 * joints]));
        params.insert("b", rand_t(&[3 * joints]));
        let mut g = Graph::new();
        let xi = g.input("x", &[batch, 5]).unwrap();
        let ti = g.input("target", &[batch, 3 * joints]).unwrap();
        let w = g.param("w", &[5, 3 * joints]).unwrap();
        let b = g.param("b", &[3 * joints]).unwrap();
        let y = g.dense(xi, w, b).unwrap();
        let (l2d, ldr) = pose_loss_nodes(&mut g, y, ti, joints).unwrap();
        let total = g.add(l2d, ldr).unwrap();
        g.mark_output("l2d", l2d).unwrap();
        g.mark_output("ldr", ldr).unwrap();
        g.mark_output("loss", total).unwrap();
        let out = g.forward(&params, &[("x", &x), ("target", &target)]).unwrap();
        let yv = g.value(y).unwrap().clone();
        let mut expect = (0.0, 0.0);
        for bi in 0..batch {
            let row = |t: &Tensor, c: usize| t.data()[bi * 3 * joints + c];
            let p = pose(
                (0..joints).map(|j| [row(&yv, 2 * j), row(&yv, 2 * j + 1)]).collect(),
                (0..joints).map(|j| row(&yv, 2 * joints + j)).collect(),
            );
            let q = pose(
                (0..joints).map(|j| [row(&target, 2 * j), row(&target, 2 * j + 1)]).collect(),
                (0..joints).map(|j| row(&target, 2 * joints + j)).collect(),
            );
            let (a, c) = pose_losses(&p, &q).unwrap();
            expect.0 += a / batch as f64;
            expect.1 += c / batch as f64;
        }
        assert!((out["l2d"].item() - expect.0).abs() < 1e-12);
        assert!((out["ldr"].item() - expect.1).abs() < 1e-12);
        let rep = grad_check(&mut g, &params, &[("x", &x), ("target", &target)], "loss", &GradCheckOptions::default())
            .unwrap();
        assert!(rep.max_relative_error < 1e-4, "{rep:?}");
    }

    fn rendered(seed: u64) -> synthhand::PoseSample {
        let ds = synthhand::generate(1, seed, 1.0, &SynthConfig::with_size(32)).unwrap();
        ds.sample(0)
    }

    #[test]
    fn lifting_recovers_ground_truth() {
        for seed in 0..50 {
            let s = rendered(seed);
            let len = distance(s.j3d[MIDDLE_MCP], s.j3d[ROOT]);
            let root = recover_root_depth(&s.j2d, &s.d_r, &s.k, DEFAULT_REF_BONE, len).unwrap();
            assert!((root - s.root_depth()).abs() < 1e-6, "seed {seed}: {root} vs {}", s.root_depth());
            let lifted = lift_to_3d(&s.j2d, &s.d_r, root, &s.k).unwrap();
            for (a, b) in lifted.iter().zip(&s.j3d) {
                assert!(distance(*a, *b) < 1e-6);
            }
        }
    }

    #[test]
    fn lifting_examples() {
        let k = Intrinsics::identity();
        assert_eq!(lift_to_3d(&[[0.0, 0.0]], &[0.0], 5.0, &k).unwrap(), vec![[0.0, 0.0, 5.0]]);
        let s = rendered(3);
        let once = lift_to_3d(&s.j2d, &s.d_r, s.root_depth(), &s.k).unwrap();
        let d2: Vec<f64> = s.d_r.iter().map(|d| 2.0 * d).collect();
        let twice = lift_to_3d(&s.j2d, &d2, 2.0 * s.root_depth(), &s.k).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            for i in 0..3 {
                assert!((2.0 * a[i] - b[i]).abs() < 1e-9);
            }
        }
        assert!(lift_to_3d(&[[0.0, 0.0]], &[-6.0], 5.0, &k).is_err());
    }

    /// Largest zero of `‖a D + b‖ - len` by bisection on the increasing branch.
    fn search_root(j2d: &[[f64; 2]], d_r: &[f64], k: &Intrinsics, len: f64) -> f64 {
        let residual = |d: f64| {
            let xn = k.ray(j2d[MIDDLE_MCP]);
            let xm = k.ray(j2d[ROOT]);
            let p: Vec<f64> = (0..3).map(|i| xn[i] * (d_r[MIDDLE_MCP] + d) - xm[i] * (d_r[ROOT] + d)).collect();
            p.iter().map(|v| v * v).sum::<f64>().sqrt() - len
        };
        let (mut lo, mut hi) = (0.0f64, 1e5f64);
        // Move `lo` onto the increasing branch: golden-section minimum first.
        let (mut a, mut b) = (0.0f64, 1e5f64);
        for _ in 0..300 {
            let m1 = a + (b - a) * 0.382;
            let m2 = a + (b - a) * 0.618;
            if residual(m1) < residual(m2) {
                b = m2;
            } else {
                a = m1;
            }
        }
        lo = lo.max(a);
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if residual(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn scaled_bone_matches_line_search() {
        for seed in 0..10 {
            let s = rendered(seed);
            let len = distance(s.j3d[MIDDLE_MCP], s.j3d[ROOT]);
            let d2: Vec<f64> = s.d_r.iter().map(|d| 2.0 * d).collect();
            let closed = recover_root_depth(&s.j2d, &d2, &s.k, DEFAULT_REF_BONE, 2.0 * len).unwrap();
            let searched = search_root(&s.j2d, &d2, &s.k, 2.0 * len);
            assert!((closed - searched).abs() < 1e-6, "{closed} vs {searched}");
            assert!((closed - 2.0 * s.root_depth()).abs() < 1e-6);
        }
    }

    #[test]
    fn coincident_reference_joints_are_an_error() {
        let mut j2d = vec![[10.0, 10.0]; NUM_JOINTS];
        j2d[MIDDLE_MCP] = [10.0, 10.0];
        let d_r = vec![0.0; NUM_JOINTS];
        let err = recover_root_depth(&j2d, &d_r, &Intrinsics::default_for(64, 64), DEFAULT_REF_BONE, 8.0);
        assert!(matches!(err, Err(Error::Degenerate(_))));
        let mut j2d = vec![[10.0, 10.0]; NUM_JOINTS];
        j2d[MIDDLE_MCP] = [10.5, 10.0];
        let mut d_r = vec![0.0; NUM_JOINTS];
        d_r[MIDDLE_MCP] = 30.0;
        // The depth gap alone exceeds the bone length.
        let err = recover_root_depth(&j2d, &d_r, &Intrinsics::default_for(64, 64), DEFAULT_REF_BONE, 8.0);
        assert!(err.is_err());
    }

    fn random_points(r: &mut rng::Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| std::array::from_fn(|_| r.random_range(-10.0..10.0)))
            .collect()
    }

    fn random_rotation(r: &mut rng::Rng) -> DMatrix<f64> {
        let q = nalgebra::UnitQuaternion::from_euler_angles(
            r.random_range(-3.0..3.0),
            r.random_range(-1.5..1.5),
            r.random_range(-3.0..3.0),
        );
        let m = q.to_rotation_matrix();
        DMatrix::from_fn(3, 3, |i, j| m[(i, j)])
    }

    fn transform(pts: &[[f64; 3]], rot: &DMatrix<f64>, s: f64, t: [f64; 3]) -> Vec<[f64; 3]> {
        pts.iter()
            .map(|p| {
                let v = rot * DVector::from_column_slice(p);
                std::array::from_fn(|i| s * v[i] + t[i])
            })
            .collect()
    }

    #[test]
    fn similarity_copies_align_exactly() {
        let mut r = rng::stream(1, "pa", 0);
        for _ in 0..20 {
            let gt = random_points(&mut r, 21);
            let rot = random_rotation(&mut r);
            let pred = transform(&gt, &rot, r.random_range(0.2..5.0), [1.0, -4.0, 30.0]);
            let aligned = procrustes_align(&pred, &gt).unwrap();
            let err = aligned.iter().zip(&gt).map(|(a, b)| dist(a, b)).sum::<f64>() / 21.0;
            assert!(err < 1e-6, "{err}");
        }
        let gt = random_points(&mut r, 10);
        let t = procrustes(&gt, &gt).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!((t.rotation.clone() - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-12);
        assert!(t.translation.abs().max() < 1e-9);
    }

    #[test]
    fn degenerate_configurations_are_rejected() {
        let line: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        let other: Vec<[f64; 3]> = (0..5).map(|i| [0.0, i as f64, 1.0 + i as f64]).collect();
        assert!(procrustes(&line, &other).is_err());
        let point = vec![[1.0, 1.0, 1.0]; 5];
        assert!(procrustes(&point, &other).is_err());
    }

    fn residual_of(pred: &[[f64; 3]], gt: &[[f64; 3]], x: &[f64; 7]) -> f64 {
        let rot = nalgebra::Rotation3::from_scaled_axis(nalgebra::Vector3::new(x[0], x[1], x[2]));
        pred.iter()
            .zip(gt)
            .map(|(p, g)| {
                let v = rot * nalgebra::Vector3::new(p[0], p[1], p[2]);
                (0..3).map(|i| (x[3] * v[i] + x[4 + i] - g[i]).powi(2)).sum::<f64>()
            })
            .sum()
    }

    /// Levenberg–Marquardt on (axis-angle, scale, translation) with a
    /// finite-difference Jacobian.
    fn refine(pred: &[[f64; 3]], gt: &[[f64; 3]], mut x: [f64; 7]) -> f64 {
        let residuals = |x: &[f64; 7]| -> DVector<f64> {
            let rot = nalgebra::Rotation3::from_scaled_axis(nalgebra::Vector3::new(x[0], x[1], x[2]));
            DVector::from_iterator(
                3 * pred.len(),
                pred.iter().zip(gt).flat_map(|(p, g)| {
                    let v = rot * nalgebra::Vector3::new(p[0], p[1], p[2]);
                    (0..3).map(move |i| x[3] * v[i] + x[4 + i] - g[i]).collect::<Vec<_>>()
                }),
            )
        };
        let mut lambda = 1e-3;
        for _ in 0..500 {
            let r0 = residuals(&x);
            let mut jac = DMatrix::zeros(r0.len(), 7);
            for j in 0..7 {
                let mut xp = x;
                xp[j] += 1e-7;
                let col = (residuals(&xp) - &r0) / 1e-7;
                jac.set_column(j, &col);
            }
            let jt = jac.transpose();
            let mut h = &jt * &jac;
            for i in 0..7 {
                h[(i, i)] *= 1.0 + lambda;
            }
            let Some(step) = h.lu().solve(&(-(&jt * &r0))) else { break };
            let mut xn = x;
            for i in 0..7 {
                xn[i] += step[i];
            }
            if residuals(&xn).norm_squared() < r0.norm_squared() {
                x = xn;
                lambda *= 0.3;
            } else {
                lambda *= 10.0;
            }
        }
        residual_of(pred, gt, &x)
    }

    #[test]
    fn closed_form_matches_iterative_refinement() {
        let mut r = rng::stream(7, "lm", 0);
        for _ in 0..8 {
            let gt = random_points(&mut r, 12);
            let rot = random_rotation(&mut r);
            let mut pred = transform(&gt, &rot, 1.7, [2.0, 0.0, -3.0]);
            for p in &mut pred {
                for v in p.iter_mut() {
                    *v += r.random_range(-2.0..2.0);
                }
            }
            let aligned = procrustes_align(&pred, &gt).unwrap();
            let closed: f64 = aligned.iter().zip(&gt).map(|(a, b)| dist(a, b).powi(2)).sum();
            let mut best = f64::INFINITY;
            for _ in 0..6 {
                let start: [f64; 7] = [
                    r.random_range(-2.0..2.0),
                    r.random_range(-2.0..2.0),
                    r.random_range(-2.0..2.0),
                    r.random_range(0.3..1.5),
                    0.0,
                    0.0,
                    0.0,
                ];
                best = best.min(refine(&pred, &gt, start));
            }
            assert!((closed - best).abs() < 1e-6, "closed {closed} refined {best}");
        }
    }

    #[test]
    fn metric_examples() {
        let mut r = rng::stream(3, "m", 0);
        let gt: Vec<Vec<[f64; 3]>> = (0..4).map(|_| random_points(&mut r, 21)).collect();
        let perfect = keypoint_metrics(&gt, &gt, false).unwrap();
        assert_eq!(perfect.epe, 0.0);
        assert_eq!(perfect.auc, 1.0);

        let off: Vec<Vec<[f64; 3]>> = gt
            .iter()
            .map(|s| s.iter().map(|p| [p[0] + 3.0, p[1] + 4.0, p[2]]).collect())
            .collect();
        let m = keypoint_metrics(&off, &gt, false).unwrap();
        assert!((m.epe - 5.0).abs() < 1e-12);
        // Strict < : even the 5 cm threshold does not count a 5 cm error.
        assert!(m.pck.iter().all(|&p| p == 0.0));
        assert_eq!(m.auc, 0.0);

        // Hand-computed: distances 1, 2, 3 (and 0 for the rest).
        let gt1 = vec![vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]];
        let pr1 = vec![vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0], [0.0, 0.0, 0.0]]];
        let m = keypoint_metrics(&pr1, &gt1, false).unwrap();
        assert!((m.epe - 1.5).abs() < 1e-9);
        // Thresholds 0.05..1.0 see one hit, 1.05..2.0 two, 2.05..3.0 three, then all four.
        let expected_auc = (20.0 * 0.25 + 20.0 * 0.5 + 20.0 * 0.75 + 40.0 * 1.0) / 100.0;
        assert!((m.auc - expected_auc).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn metric_invariants(seed in 0u64..500) {
            let mut r = rng::stream(seed, "mi", 0);
            let gt: Vec<Vec<[f64; 3]>> = (0..3).map(|_| random_points(&mut r, 21)).collect();
            let pred: Vec<Vec<[f64; 3]>> = gt
                .iter()
                .map(|s| s.iter().map(|p| std::array::from_fn(|i| p[i] + r.random_range(-4.0..4.0))).collect())
                .collect();
            let raw = keypoint_metrics(&pred, &gt, false).unwrap();
            let pa = keypoint_metrics(&pred, &gt, true).unwrap();
            prop_assert!(raw.epe >= pa.epe - 1e-9);
            for m in [&raw, &pa] {
                prop_assert!((0.0..=1.0).contains(&m.auc));
                prop_assert!(m.pck.windows(2).all(|w| w[0] <= w[1]));
            }
            // Pre-rotating the prediction does not change the aligned residual.
            let rot = random_rotation(&mut r);
            let rotated: Vec<Vec<[f64; 3]>> = pred.iter().map(|s| transform(s, &rot, 1.0, [0.0; 3])).collect();
            let pa2 = keypoint_metrics(&rotated, &gt, true).unwrap();
            prop_assert!((pa.epe - pa2.epe).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_labeler_is_equivariant() {
        let ds = synthhand::generate(3, 5, 1.0, &SynthConfig::with_size(32)).unwrap();
        let samples: Vec<(Image, Vec<[f64; 2]>)> = (0..3).map(|i| (ds.image(i), ds.labels[i].j2d.clone())).collect();
        let grid = rotation_grid(5, 80.0);
        let labeler = GroundTruthLabeler::new(&samples, &grid);
        for (img, _) in &samples {
            for t in &grid {
                assert!(equivariance_error(&labeler, img, t).unwrap() < 1e-9);
            }
        }
        let images: Vec<Image> = samples.iter().map(|(i, _)| i.clone()).collect();
        let rows = equivariance_improvement(&labeler, &labeler, &images, &grid).unwrap();
        assert_eq!(rows.len(), 5);
        // The labeler is exact, so every image is skipped rather than divided by zero.
        assert!(rows.iter().all(|r| r.improvement.is_none() && r.skipped == 3));
    }

    /// Predicts a fixed constellation regardless of the image.
    struct Constant(Vec<[f64; 2]>);

    impl KeypointPredictor for Constant {
        fn predict_2d(&self, images: &[Image]) -> Result<Vec<Vec<[f64; 2]>>> {
            Ok(vec![self.0.clone(); images.len()])
        }
    }

    #[test]
    fn improvement_examples() {
        let ds = synthhand::generate(2, 6, 1.0, &SynthConfig::with_size(32)).unwrap();
        let images: Vec<Image> = (0..2).map(|i| ds.image(i)).collect();
        let samples: Vec<(Image, Vec<[f64; 2]>)> = (0..2).map(|i| (ds.image(i), ds.labels[i].j2d.clone())).collect();
        let constant = Constant(ds.labels[0].j2d.clone());
        let grid = rotation_grid(17, 80.0);
        assert_eq!(grid.len(), 17);
        assert_eq!(translation_grid(5, 25.0).len(), 25);

        let same = equivariance_improvement(&constant, &constant, &images, &grid).unwrap();
        for row in &same {
            if row.rotation_deg == 0.0 {
                assert_eq!(row.equiv_a, 0.0);
                assert!(row.improvement.is_none());
            } else {
                assert_eq!(row.improvement, Some(0.0));
            }
        }
        let oracle = GroundTruthLabeler::new(&samples, &grid);
        let vs_oracle = equivariance_improvement(&constant, &oracle, &images, &grid).unwrap();
        for row in vs_oracle.iter().filter(|r| r.rotation_deg != 0.0) {
            assert!((row.improvement.unwrap() - 1.0).abs() < 1e-9);
        }
        assert_eq!(equivariance_error(&constant, &images[0], &AffineTransform2D::identity()).unwrap(), 0.0);
    }
}
