use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const NUM_JOINTS: usize = 21;
pub const NUM_FINGERS: usize = 5;
pub const ROOT: usize = 0;
/// Middle-finger MCP, the default reference bone's distal end.
pub const MIDDLE_MCP: usize = 9;

pub type Vec3 = [f64; 3];

/// Index of joint `k` (0 = MCP .. 3 = TIP) of finger `f` (0 = thumb .. 4 = pinky).
pub fn joint_index(finger: usize, k: usize) -> usize {
    1 + 4 * finger + k
}

pub fn parent(joint: usize) -> Option<usize> {
    match joint {
        0 => None,
        j if (j - 1) % 4 == 0 => Some(ROOT),
        j => Some(j - 1),
    }
}

pub fn bones() -> Vec<(usize, usize)> {
    (1..NUM_JOINTS).map(|j| (parent(j).expect("non-root"), j)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleLimit {
    pub min: f64,
    pub max: f64,
}

impl AngleLimit {
    const fn new(min: f64, max: f64) -> Self {
        AngleLimit { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerSpec {
    /// Wrist-to-MCP vector in the hand frame, cm.
    pub mcp_offset: [f64; 2],
    /// In-plane direction of the straight finger, degrees from +y toward +x.
    pub direction_deg: f64,
    /// MCP→PIP, PIP→DIP, DIP→TIP, cm.
    pub phalanges: [f64; 3],
    /// Tilt of the flexion plane out of the palm, degrees (0 = curls straight into the palm).
    pub bend_tilt_deg: f64,
    pub abduction: AngleLimit,
    /// MCP, PIP, DIP flexion limits, degrees.
    pub flexion: [AngleLimit; 3],
    /// Capsule radius for rendering, cm.
    pub radius: f64,
}

/// Hand frame: wrist at the origin, fingers along +y, thumb toward +x, palm
/// normal along -z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandSkeleton {
    pub fingers: [FingerSpec; NUM_FINGERS],
}

impl Default for HandSkeleton {
    fn default() -> Self {
        let finger = |mcp_offset, direction_deg, phalanges, radius| FingerSpec {
            mcp_offset,
            direction_deg,
            phalanges,
            bend_tilt_deg: 0.0,
            abduction: AngleLimit::new(-15.0, 15.0),
            flexion: [
                AngleLimit::new(-10.0, 90.0),
                AngleLimit::new(0.0, 100.0),
                AngleLimit::new(0.0, 80.0),
            ],
            radius,
        };
        let thumb = FingerSpec {
            mcp_offset: [2.4, 2.2],
            direction_deg: 40.0,
            phalanges: [4.0, 3.1, 2.7],
            bend_tilt_deg: 50.0,
            abduction: AngleLimit::new(-20.0, 20.0),
            flexion: [
                AngleLimit::new(0.0, 50.0),
                AngleLimit::new(0.0, 60.0),
                AngleLimit::new(0.0, 80.0),
            ],
            radius: 1.0,
        };
        HandSkeleton {
            fingers: [
                thumb,
                finger([2.2, 8.4], 8.0, [3.9, 2.3, 2.0], 0.85),
                finger([0.4, 8.8], 0.0, [4.4, 2.7, 2.1], 0.85),
                finger([-1.4, 8.3], -8.0, [4.1, 2.6, 2.1], 0.8),
                finger([-3.0, 7.5], -16.0, [3.3, 1.8, 1.8], 0.7),
            ],
        }
    }
}

/// Per-finger abduction and the three flexion angles, degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct JointAngles {
    pub abduction: [f64; NUM_FINGERS],
    pub flexion: [[f64; 3]; NUM_FINGERS],
}

fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalize(v: Vec3) -> Vec3 {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn axpy(a: f64, x: Vec3, y: Vec3) -> Vec3 {
    [a * x[0] + y[0], a * x[1] + y[1], a * x[2] + y[2]]
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

impl HandSkeleton {
    pub fn validate(&self) -> Result<()> {
        for (f, spec) in self.fingers.iter().enumerate() {
            let meta = (spec.mcp_offset[0].powi(2) + spec.mcp_offset[1].powi(2)).sqrt();
            if !(meta > 0.0) || spec.phalanges.iter().any(|&l| !(l > 0.0)) || !(spec.radius > 0.0) {
                return Err(Error::invalid(format!("finger {f}: bone lengths and radius must be positive")));
            }
            let limits = std::iter::once(&spec.abduction).chain(spec.flexion.iter());
            for lim in limits {
                if !(lim.min <= lim.max) {
                    return Err(Error::invalid(format!("finger {f}: angle limit min exceeds max")));
                }
            }
        }
        Ok(())
    }

    /// Rest length of the bone ending at `joint`.
    pub fn bone_length(&self, joint: usize) -> f64 {
        let f = (joint - 1) / 4;
        let k = (joint - 1) % 4;
        let spec = &self.fingers[f];
        if k == 0 {
            (spec.mcp_offset[0].powi(2) + spec.mcp_offset[1].powi(2)).sqrt()
        } else {
            spec.phalanges[k - 1]
        }
    }

    pub fn within_limits(&self, angles: &JointAngles) -> bool {
        self.fingers.iter().enumerate().all(|(f, spec)| {
            spec.abduction.contains(angles.abduction[f])
                && (0..3).all(|k| spec.flexion[k].contains(angles.flexion[f][k]))
        })
    }

    pub fn sample_angles(&self, rng: &mut Rng) -> JointAngles {
        let mut angles = JointAngles::default();
        for (f, spec) in self.fingers.iter().enumerate() {
            angles.abduction[f] = rng.random_range(spec.abduction.min..=spec.abduction.max);
            for k in 0..3 {
                let lim = spec.flexion[k];
                angles.flexion[f][k] = rng.random_range(lim.min..=lim.max);
            }
        }
        angles
    }

    /// Joint positions in the hand frame.
    pub fn forward_kinematics(&self, angles: &JointAngles) -> Vec<Vec3> {
        let normal = [0.0, 0.0, -1.0];
        let mut joints = vec![[0.0; 3]; NUM_JOINTS];
        for (f, spec) in self.fingers.iter().enumerate() {
            let d = spec.direction_deg.to_radians();
            let u0 = [d.sin(), d.cos(), 0.0];
            // Flexion bends toward `bend`: the palm normal tilted toward the palm center.
            let inward = cross(normal, u0);
            let t = spec.bend_tilt_deg.to_radians();
            let bend = normalize(axpy(t.sin(), inward, [t.cos() * normal[0], t.cos() * normal[1], t.cos() * normal[2]]));
            let a = angles.abduction[f].to_radians();
            let side = cross(bend, u0);
            let u = axpy(a.sin(), side, [a.cos() * u0[0], a.cos() * u0[1], a.cos() * u0[2]]);

            let mcp = [spec.mcp_offset[0], spec.mcp_offset[1], 0.0];
            joints[joint_index(f, 0)] = mcp;
            let mut pos = mcp;
            let mut phi = 0.0;
            for k in 0..3 {
                phi += angles.flexion[f][k].to_radians();
                let dir = axpy(phi.sin(), bend, [phi.cos() * u[0], phi.cos() * u[1], phi.cos() * u[2]]);
                pos = axpy(spec.phalanges[k], dir, pos);
                joints[joint_index(f, k + 1)] = pos;
            }
        }
        joints
    }
}
