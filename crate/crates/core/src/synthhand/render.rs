use rand::Rng as _;

use super::skeleton::{bones, HandSkeleton, Vec3, NUM_FINGERS};
use crate::camera::Intrinsics;
use crate::error::Result;
use crate::image::Image;
use crate::rng::{self, Rng};

/// Per-finger tint multipliers so fingers are distinguishable, thumb first.
const FINGER_TINT: [[f64; 3]; NUM_FINGERS] = [
    [1.00, 0.80, 0.80],
    [0.85, 1.00, 0.85],
    [0.85, 0.85, 1.00],
    [1.00, 1.00, 0.75],
    [0.80, 1.00, 1.00],
];

struct Capsule {
    a: [f64; 2],
    b: [f64; 2],
    radius_px: f64,
    depth: f64,
    color_a: [f64; 3],
    color_b: [f64; 3],
}

fn background(rng: &mut Rng, h: usize, w: usize) -> Image {
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
    let c2: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
    let kx = rng.random_range(-0.25..0.25);
    let ky = rng.random_range(-0.25..0.25);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let grain = rng.random_range(0.0..12.0);
    let mut img = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let m = 0.5 + 0.5 * (kx * x as f64 + ky * y as f64 + phase).sin();
            let n = grain * (rng.random::<f64>() - 0.5);
            img.set_pixel(x, y, std::array::from_fn(|c| c1[c] * (1.0 - m) + c2[c] * m + n));
        }
    }
    img
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    ((d[0] * d[0] + d[1] * d[1]).sqrt(), t)
}

/// Anti-aliased capsules per bone (plus palm webbing) over a textured
/// background, painted far to near. `style_seed` picks skin tone and background.
pub fn render_image(
    skeleton: &HandSkeleton,
    j3d: &[Vec3],
    j2d: &[[f64; 2]],
    k: &Intrinsics,
    size: usize,
    style_seed: u64,
) -> Result<Image> {
    let mut rng = rng::stream(style_seed, "style", 0);
    let mut img = background(&mut rng, size, size);
    let tone = rng.random_range(0.0..1.0);
    let skin: [f64; 3] = std::array::from_fn(|c| {
        let light = [245.0, 210.0, 180.0][c];
        let dark = [120.0, 80.0, 55.0][c];
        light * (1.0 - tone) + dark * tone
    });

    let zmin = j3d.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    let zmax = j3d.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
    let shade = |z: f64, along: f64, tint: [f64; 3]| -> [f64; 3] {
        let depth_term = if zmax > zmin { 1.0 - 0.35 * (z - zmin) / (zmax - zmin) } else { 1.0 };
        let f = depth_term * (0.8 + 0.2 * along);
        std::array::from_fn(|c| skin[c] * tint[c] * f)
    };

    let mut caps = Vec::with_capacity(24);
    for (p, c) in bones() {
        let finger = (c - 1) / 4;
        let depth_avg = 0.5 * (j3d[p][2] + j3d[c][2]);
        let radius_cm = if p == 0 { 1.3 } else { skeleton.fingers[finger].radius };
        let along = ((c - 1) % 4) as f64 / 3.0;
        let tint = if p == 0 { [1.0; 3] } else { FINGER_TINT[finger] };
        caps.push(Capsule {
            a: j2d[p],
            b: j2d[c],
            radius_px: radius_cm * k.fx / depth_avg,
            depth: depth_avg,
            color_a: shade(j3d[p][2], (along - 1.0 / 3.0).max(0.0), tint),
            color_b: shade(j3d[c][2], along, tint),
        });
    }
    // Webbing between neighbouring MCPs fills the palm.
    for f in 1..NUM_FINGERS - 1 {
        let (p, c) = (1 + 4 * f, 1 + 4 * (f + 1));
        let depth_avg = 0.5 * (j3d[p][2] + j3d[c][2]);
        caps.push(Capsule {
            a: j2d[p],
            b: j2d[c],
            radius_px: 1.1 * k.fx / depth_avg,
            depth: depth_avg,
            color_a: shade(j3d[p][2], 0.0, [1.0; 3]),
            color_b: shade(j3d[c][2], 0.0, [1.0; 3]),
        });
    }
    caps.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    for cap in &caps {
        let r = cap.radius_px;
        let x0 = (cap.a[0].min(cap.b[0]) - r - 1.0).floor().max(0.0) as usize;
        let y0 = (cap.a[1].min(cap.b[1]) - r - 1.0).floor().max(0.0) as usize;
        let x1 = (cap.a[0].max(cap.b[0]) + r + 1.0).ceil().min(size as f64 - 1.0);
        let y1 = (cap.a[1].max(cap.b[1]) + r + 1.0).ceil().min(size as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let (d, t) = segment_distance([x as f64, y as f64], cap.a, cap.b);
                let cover = (r + 0.5 - d).clamp(0.0, 1.0);
                if cover == 0.0 {
                    continue;
                }
                // Rounded profile: darker toward the silhouette.
                let rim = 1.0 - 0.25 * (d / r.max(1e-9)).min(1.0).powi(2);
                let bg = img.pixel(x, y);
                let px = std::array::from_fn(|c| {
                    let fg = ((1.0 - t) * cap.color_a[c] + t * cap.color_b[c]) * rim;
                    cover * fg + (1.0 - cover) * bg[c]
                });
                img.set_pixel(x, y, px);
            }
        }
    }
    img.quantize();
    Ok(img)
}
