//! Procedural articulated hands with exact 3D, 2D and depth labels.
//!
//! Poses come from forward kinematics over joint angles drawn uniformly within
//! limits, a random global orientation, and a root 30–60 cm in front of the
//! camera. Images are flat-shaded capsules over a textured background; every
//! label is computed from the 3D joints, never from pixels.

mod dataset;
mod render;
mod skeleton;

pub use dataset::{
    generate, make_dataset, read_raster, write_raster, Dataset, DatasetIndex, LabelRecord, RASTER_MAGIC,
};
pub use render::render_image;
pub use skeleton::{
    bones, distance, joint_index, parent, AngleLimit, FingerSpec, HandSkeleton, JointAngles, Vec3, MIDDLE_MCP,
    NUM_FINGERS, NUM_JOINTS, ROOT,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Square image side, px.
    pub image_size: usize,
    /// Root (wrist) depth range, cm.
    pub root_depth: [f64; 2],
    /// In-plane rotation about the optical axis, degrees.
    pub roll_deg: [f64; 2],
    /// Out-of-plane tilts about x and y, degrees.
    pub tilt_deg: [f64; 2],
    /// Offset of the hand centroid from the principal point, as a fraction of the side.
    pub center_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            root_depth: [30.0, 60.0],
            roll_deg: [-90.0, 90.0],
            tilt_deg: [-35.0, 35.0],
            center_jitter: 0.08,
        }
    }
}

impl SynthConfig {
    pub fn with_size(size: usize) -> Self {
        SynthConfig {
            image_size: size,
            ..Self::default()
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::default_for(self.image_size, self.image_size)
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if !ordered(self.root_depth) || self.root_depth[0] <= 0.0 {
            return Err(Error::Config("root_depth must be a positive, ordered range".into()));
        }
        if !ordered(self.roll_deg) || !ordered(self.tilt_deg) {
            return Err(Error::Config("rotation ranges must be ordered".into()));
        }
        if !(0.0..=0.5).contains(&self.center_jitter) {
            return Err(Error::Config("center_jitter must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandPose {
    pub angles: JointAngles,
    /// Camera-frame joints, cm.
    pub j3d: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    pub image: Image,
    pub j3d: Vec<Vec3>,
    pub j2d: Vec<[f64; 2]>,
    /// Joint depth minus root depth, cm.
    pub d_r: Vec<f64>,
    pub k: Intrinsics,
    pub labeled: bool,
}

impl PoseSample {
    pub fn root_depth(&self) -> f64 {
        self.j3d[ROOT][2]
    }
}

fn rot_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn mat3_apply(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Random articulated pose placed in front of the camera.
pub fn sample_pose(rng: &mut Rng, skeleton: &HandSkeleton, cfg: &SynthConfig) -> HandPose {
    let angles = skeleton.sample_angles(rng);
    let local = skeleton.forward_kinematics(&angles);
    let roll = uniform(rng, cfg.roll_deg).to_radians();
    let pitch = uniform(rng, cfg.tilt_deg).to_radians();
    let yaw = uniform(rng, cfg.tilt_deg).to_radians();
    let rot = mat3_mul(&rot_z(roll), &mat3_mul(&rot_y(yaw), &rot_x(pitch)));
    let rotated: Vec<Vec3> = local.iter().map(|&p| mat3_apply(&rot, p)).collect();

    let root_depth = uniform(rng, cfg.root_depth);
    let jitter = cfg.center_jitter * cfg.image_size as f64;
    let du = uniform(rng, [-jitter, jitter]);
    let dv = uniform(rng, [-jitter, jitter]);
    let k = cfg.intrinsics();
    let n = rotated.len() as f64;
    let centroid: Vec3 = std::array::from_fn(|i| rotated.iter().map(|p| p[i]).sum::<f64>() / n);
    // Shift so the centroid projects `(du, dv)` px from the principal point.
    let zc = root_depth + centroid[2];
    let offset = [du * zc / k.fx - centroid[0], dv * zc / k.fy - centroid[1], root_depth];
    let j3d = rotated
        .iter()
        .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
        .collect();
    HandPose { angles, j3d }
}

/// Projects the joints, splits depth into root-relative values, and draws the image.
pub fn render(
    skeleton: &HandSkeleton,
    j3d: &[Vec3],
    k: &Intrinsics,
    size: usize,
    style_seed: u64,
) -> Result<PoseSample> {
    if j3d.len() != NUM_JOINTS {
        return Err(Error::shape(format!("expected {NUM_JOINTS} joints, got {}", j3d.len())));
    }
    if let Some(j) = j3d.iter().position(|p| !(p[2] > 0.0)) {
        return Err(Error::invalid(format!("joint {j} is behind the camera (z = {})", j3d[j][2])));
    }
    let j2d = j3d.iter().map(|&p| k.project(p)).collect::<Result<Vec<_>>>()?;
    let root = j3d[ROOT][2];
    let d_r = j3d.iter().map(|p| p[2] - root).collect();
    let image = render_image(skeleton, j3d, &j2d, k, size, style_seed)?;
    Ok(PoseSample {
        image,
        j3d: j3d.to_vec(),
        j2d,
        d_r,
        k: *k,
        labeled: false,
    })
}
