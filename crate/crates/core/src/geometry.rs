//! Planar similarity transforms on images and point sets, and their inversion
//! in the latent projection space.
//!
//! A transform maps a point `p` to `s·R(θ)(p - c) + c + t`: scale and rotation
//! about the pivot `c`, then translation. Images use their center as pivot.
//! Latent point sets use their centroid, which makes the latent inverse
//! independent of where the projection sits in latent space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::ndiff::point_affine_row;

pub type Point2 = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform2D {
    pub rotation_deg: f64,
    /// Pixels.
    pub translation: [f64; 2],
    pub scale: f64,
    /// Rotation/scale pivot.
    pub center: [f64; 2],
}

impl Default for AffineTransform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform2D {
    pub fn identity() -> Self {
        AffineTransform2D {
            rotation_deg: 0.0,
            translation: [0.0, 0.0],
            scale: 1.0,
            center: [0.0, 0.0],
        }
    }

    pub fn new(rotation_deg: f64, translation: [f64; 2], scale: f64, center: [f64; 2]) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("scale must be positive, got {scale}")));
        }
        Ok(AffineTransform2D {
            rotation_deg,
            translation,
            scale,
            center,
        })
    }

    pub fn rotation(rotation_deg: f64, center: [f64; 2]) -> Self {
        AffineTransform2D {
            rotation_deg,
            center,
            ..Self::identity()
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineTransform2D {
            translation: [tx, ty],
            ..Self::identity()
        }
    }

    pub fn with_center(mut self, center: [f64; 2]) -> Self {
        self.center = center;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.translation == [0.0, 0.0] && self.scale == 1.0
    }

    fn cos_sin(&self) -> (f64, f64) {
        let r = self.rotation_deg.to_radians();
        (r.cos(), r.sin())
    }

    /// Homogeneous 3×3 matrix, row-major.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (c, s) = self.cos_sin();
        let (a, b, d, e) = (self.scale * c, -self.scale * s, self.scale * s, self.scale * c);
        let [cx, cy] = self.center;
        let [tx, ty] = self.translation;
        [
            [a, b, cx - a * cx - b * cy + tx],
            [d, e, cy - d * cx - e * cy + ty],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Exact inverse: rotation `-θ`, scale `1/s`, pivot moved by the translation.
    pub fn inverse(&self) -> Self {
        AffineTransform2D {
            rotation_deg: -self.rotation_deg,
            translation: [-self.translation[0], -self.translation[1]],
            scale: 1.0 / self.scale,
            center: [
                self.center[0] + self.translation[0],
                self.center[1] + self.translation[1],
            ],
        }
    }

    /// `self ∘ other` (apply `other` first), expressed about the origin.
    pub fn compose(&self, other: &AffineTransform2D) -> Self {
        let m = mat_mul(&self.to_matrix(), &other.to_matrix());
        AffineTransform2D {
            rotation_deg: self.rotation_deg + other.rotation_deg,
            translation: [m[0][2], m[1][2]],
            scale: self.scale * other.scale,
            center: [0.0, 0.0],
        }
    }

    pub fn apply_to_point(&self, p: Point2) -> Point2 {
        let (c, s) = self.cos_sin();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [
            self.scale * (c * dx - s * dy) + self.center[0] + self.translation[0],
            self.scale * (s * dx + c * dy) + self.center[1] + self.translation[1],
        ]
    }

    pub fn apply_to_points(&self, pts: &[Point2]) -> Vec<Point2> {
        pts.iter().map(|&p| self.apply_to_point(p)).collect()
    }

    /// Source location of output pixel `p` under this transform.
    fn source_of(&self, p: Point2) -> Point2 {
        let (c, s) = self.cos_sin();
        let qx = p[0] - self.center[0] - self.translation[0];
        let qy = p[1] - self.center[1] - self.translation[1];
        let inv = 1.0 / self.scale;
        [
            inv * (c * qx + s * qy) + self.center[0],
            inv * (-s * qx + c * qy) + self.center[1],
        ]
    }

    /// Inverse-warps `img` with bilinear sampling; source pixels outside the
    /// frame read as `fill`. The transform's own pivot is ignored in favour of
    /// the image center.
    pub fn apply_to_image(&self, img: &Image, fill: f64) -> Image {
        let t = self.with_center(img.center());
        let (h, w) = (img.height(), img.width());
        let src = img.data();
        let mut out = Image::filled(h, w, fill);
        let read = |x: isize, y: isize, ch: usize| -> f64 {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                fill
            } else {
                src[(y as usize * w + x as usize) * CHANNELS + ch]
            }
        };
        let dst = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let [sx, sy] = t.source_of([x as f64, y as f64]);
                if !(sx > -1.0 && sy > -1.0 && sx < w as f64 && sy < h as f64) {
                    continue;
                }
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let (x0, y0) = (x0 as isize, y0 as isize);
                for ch in 0..CHANNELS {
                    let top = (1.0 - fx) * read(x0, y0, ch) + fx * read(x0 + 1, y0, ch);
                    let bottom = (1.0 - fx) * read(x0, y0 + 1, ch) + fx * read(x0 + 1, y0 + 1, ch);
                    dst[(y * w + x) * CHANNELS + ch] = (1.0 - fy) * top + fy * bottom;
                }
            }
        }
        out
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Flat projection `z ∈ R^{2m}` viewed as `m` planar points.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentProjection {
    flat: Vec<f64>,
}

impl LatentProjection {
    pub fn from_flat(flat: Vec<f64>) -> Result<Self> {
        if flat.len() < 4 || flat.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "latent projection needs an even length of at least 4, got {}",
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent projection has non-finite values"));
        }
        Ok(LatentProjection { flat })
    }

    pub fn from_points(points: &[Point2]) -> Result<Self> {
        Self::from_flat(points.iter().flat_map(|p| [p[0], p[1]]).collect())
    }

    pub fn num_points(&self) -> usize {
        self.flat.len() / 2
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn points(&self) -> Vec<Point2> {
        self.flat.chunks(2).map(|c| [c[0], c[1]]).collect()
    }

    pub fn centroid(&self) -> Point2 {
        let m = self.num_points() as f64;
        [
            self.flat.iter().step_by(2).sum::<f64>() / m,
            self.flat.iter().skip(1).step_by(2).sum::<f64>() / m,
        ]
    }

    /// `max(z) - min(z)` over all `2m` coordinates.
    pub fn range(&self) -> f64 {
        let max = self.flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.flat.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// How an image translation is carried into latent space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationMode {
    /// `v̂ = v / L · L_z`: proportional to the projection's coordinate range.
    Normalized,
    /// Raw pixel translation, no rescaling.
    Direct,
}

/// `v̂ = (v / L) · L_z`; zero when the projection is constant.
pub fn normalize_translation(v: [f64; 2], image_side: f64, z: &LatentProjection) -> Result<[f64; 2]> {
    if !(image_side > 0.0) {
        return Err(Error::invalid("image side length must be positive"));
    }
    let lz = z.range();
    if lz == 0.0 {
        return Ok([0.0, 0.0]);
    }
    Ok([v[0] / image_side * lz, v[1] / image_side * lz])
}

/// Per-sample map `[a11, a12, a21, a22, ox, oy]` that undoes the rotation and
/// translation of `t` on a latent point set, in the layout consumed by the
/// graph's point-map op. Scale is dropped. In [`TranslationMode::Normalized`]
/// the offset is `-v / L` and still has to be multiplied by the sample's range.
pub fn latent_inverse_map(t: &AffineTransform2D, image_side: f64, mode: TranslationMode) -> [f64; 6] {
    let r = (-t.rotation_deg).to_radians();
    let (c, s) = (r.cos(), r.sin());
    let (ox, oy) = match mode {
        TranslationMode::Normalized => (-t.translation[0] / image_side, -t.translation[1] / image_side),
        TranslationMode::Direct => (-t.translation[0], -t.translation[1]),
    };
    [c, -s, s, c, ox, oy]
}

/// `(t̃)⁻¹ z`, where `t̃` has `t`'s rotation about the latent centroid, the
/// translation carried over per `mode`, and unit scale.
pub fn invert_in_latent_with(
    t: &AffineTransform2D,
    z: &LatentProjection,
    image_side: f64,
    mode: TranslationMode,
) -> Result<LatentProjection> {
    if mode == TranslationMode::Normalized && !(image_side > 0.0) {
        return Err(Error::invalid("image side length must be positive"));
    }
    let map = latent_inverse_map(t, image_side, mode);
    let mut flat = z.flat.clone();
    point_affine_row(&mut flat, &map, mode == TranslationMode::Normalized);
    LatentProjection::from_flat(flat)
}

pub fn invert_in_latent(t: &AffineTransform2D, z: &LatentProjection, image_side: f64) -> Result<LatentProjection> {
    invert_in_latent_with(t, z, image_side, TranslationMode::Normalized)
}
