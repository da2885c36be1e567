//! Composite augmentations `t = t_g ∘ t_a`: an appearance part applied first,
//! then a geometric warp about the image center.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AffineTransform2D;
use crate::image::Image;
use crate::rng::{self, Rng};

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        if self.0 == self.1 {
            // Still consume a draw so the stream layout does not depend on the range.
            let _: f64 = rng.random();
            return self.0;
        }
        self.0 + (self.1 - self.0) * rng.random::<f64>()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite()) || self.0 > self.1 {
            return Err(Error::Config(format!(
                "{name}: range [{}, {}] must be finite with lower <= upper",
                self.0, self.1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceSpec {
    pub hue_scale: f64,
    pub sat_scale: f64,
    pub bright_scale: f64,
    /// Pixel value (0–255 scale).
    pub bright_bias: f64,
    pub drop_color: bool,
    /// Pixels; 0 disables blur.
    pub blur_sigma: f64,
    /// Pixel value; 0 disables noise.
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl AppearanceSpec {
    pub fn identity() -> Self {
        AppearanceSpec {
            hue_scale: 1.0,
            sat_scale: 1.0,
            bright_scale: 1.0,
            bright_bias: 0.0,
            drop_color: false,
            blur_sigma: 0.0,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        let id = Self::identity();
        AppearanceSpec {
            noise_seed: 0,
            ..*self
        } == id
    }
}

impl Default for AppearanceSpec {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct TransformSpec {
    pub geometric: AffineTransform2D,
    pub appearance: AppearanceSpec,
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self::default()
    }
}

/// Named augmentation families, the unit of the composition search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Scale,
    Rotation,
    Translation,
    ColorJitter,
    DropColor,
    Blur,
    Noise,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Scale,
        Component::Rotation,
        Component::Translation,
        Component::ColorJitter,
        Component::DropColor,
        Component::Blur,
        Component::Noise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::Scale => "scale",
            Component::Rotation => "rotation",
            Component::Translation => "translation",
            Component::ColorJitter => "color_jitter",
            Component::DropColor => "drop_color",
            Component::Blur => "blur",
            Component::Noise => "noise",
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, Component::Scale | Component::Rotation | Component::Translation)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let alias = match key.as_str() {
            "rot" => "rotation",
            "trans" => "translation",
            "jitter" | "color" => "color_jitter",
            other => other,
        };
        Component::ALL
            .into_iter()
            .find(|c| c.name() == alias)
            .ok_or_else(|| Error::invalid(format!("unknown augmentation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation: bool,
    pub rotation_deg: Range,
    pub translation: bool,
    /// Applied independently to x and y.
    pub translation_px: Range,
    pub scale: bool,
    pub scale_range: Range,
    pub color_jitter: bool,
    pub hue_scale: Range,
    pub sat_scale: Range,
    pub bright_scale: Range,
    pub bright_bias: Range,
    pub drop_color: bool,
    pub drop_color_prob: f64,
    pub blur: bool,
    pub blur_sigma: Range,
    pub noise: bool,
    pub noise_std: Range,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl AugmentConfig {
    /// Contrastive pretraining ranges with the scale/rotation/translation/jitter composition.
    pub fn pretrain() -> Self {
        AugmentConfig {
            rotation: true,
            rotation_deg: Range(-45.0, 45.0),
            translation: true,
            translation_px: Range(-15.0, 15.0),
            scale: true,
            scale_range: Range(0.6, 2.0),
            color_jitter: true,
            hue_scale: Range(0.01, 1.0),
            sat_scale: Range(0.01, 1.0),
            bright_scale: Range(0.5, 1.0),
            bright_bias: Range(5.0, 20.0),
            drop_color: false,
            drop_color_prob: 0.2,
            blur: false,
            blur_sigma: Range(0.1, 2.0),
            noise: false,
            noise_std: Range(0.0, 10.0),
        }
    }

    /// Supervised fine-tuning ranges.
    pub fn finetune() -> Self {
        AugmentConfig {
            rotation_deg: Range(-90.0, 90.0),
            translation_px: Range(-20.0, 20.0),
            scale_range: Range(0.7, 1.3),
            ..Self::pretrain()
        }
    }

    /// Everything off.
    pub fn none() -> Self {
        let mut c = Self::pretrain();
        c.set_components(&[]);
        c
    }

    pub fn enabled(&self, c: Component) -> bool {
        match c {
            Component::Scale => self.scale,
            Component::Rotation => self.rotation,
            Component::Translation => self.translation,
            Component::ColorJitter => self.color_jitter,
            Component::DropColor => self.drop_color,
            Component::Blur => self.blur,
            Component::Noise => self.noise,
        }
    }

    pub fn set_enabled(&mut self, c: Component, on: bool) {
        let flag = match c {
            Component::Scale => &mut self.scale,
            Component::Rotation => &mut self.rotation,
            Component::Translation => &mut self.translation,
            Component::ColorJitter => &mut self.color_jitter,
            Component::DropColor => &mut self.drop_color,
            Component::Blur => &mut self.blur,
            Component::Noise => &mut self.noise,
        };
        *flag = on;
    }

    /// Enables exactly `components`, keeping all ranges.
    pub fn set_components(&mut self, components: &[Component]) {
        for c in Component::ALL {
            self.set_enabled(c, components.contains(&c));
        }
    }

    pub fn with_components(mut self, components: &[Component]) -> Self {
        self.set_components(components);
        self
    }

    pub fn components(&self) -> Vec<Component> {
        Component::ALL.into_iter().filter(|&c| self.enabled(c)).collect()
    }

    /// Multiplies the translation range, e.g. by `L / 128` for smaller images.
    pub fn scale_translation(&mut self, factor: f64) {
        self.translation_px = Range(self.translation_px.0 * factor, self.translation_px.1 * factor);
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_deg", self.rotation_deg),
            ("translation_px", self.translation_px),
            ("scale_range", self.scale_range),
            ("hue_scale", self.hue_scale),
            ("sat_scale", self.sat_scale),
            ("bright_scale", self.bright_scale),
            ("bright_bias", self.bright_bias),
            ("blur_sigma", self.blur_sigma),
            ("noise_std", self.noise_std),
        ];
        for (name, r) in ranges {
            r.validate(name)?;
        }
        if self.scale_range.lo() <= 0.0 {
            return Err(Error::Config("scale_range must be positive".into()));
        }
        if self.blur_sigma.lo() < 0.0 || self.noise_std.lo() < 0.0 {
            return Err(Error::Config("blur_sigma and noise_std must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_color_prob) {
            return Err(Error::Config("drop_color_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Draws one transform. Every parameter is drawn in a fixed order whether or
/// not its family is enabled, so toggling one family leaves the others' draws
/// unchanged; disabled families are then reset to identity.
pub fn sample_transform(rng: &mut Rng, cfg: &AugmentConfig) -> TransformSpec {
    let rotation = cfg.rotation_deg.sample(rng);
    let tx = cfg.translation_px.sample(rng);
    let ty = cfg.translation_px.sample(rng);
    let scale = cfg.scale_range.sample(rng);
    let hue = cfg.hue_scale.sample(rng);
    let sat = cfg.sat_scale.sample(rng);
    let bright = cfg.bright_scale.sample(rng);
    let bias = cfg.bright_bias.sample(rng);
    let drop = rng.random::<f64>() < cfg.drop_color_prob;
    let sigma = cfg.blur_sigma.sample(rng);
    let noise = cfg.noise_std.sample(rng);
    let noise_seed: u64 = rng.random();

    let geometric = AffineTransform2D {
        rotation_deg: if cfg.rotation { rotation } else { 0.0 },
        translation: if cfg.translation { [tx, ty] } else { [0.0, 0.0] },
        scale: if cfg.scale { scale } else { 1.0 },
        center: [0.0, 0.0],
    };
    let mut appearance = AppearanceSpec::identity();
    if cfg.color_jitter {
        appearance.hue_scale = hue;
        appearance.sat_scale = sat;
        appearance.bright_scale = bright;
        appearance.bright_bias = bias;
    }
    appearance.drop_color = cfg.drop_color && drop;
    if cfg.blur {
        appearance.blur_sigma = sigma;
    }
    if cfg.noise {
        appearance.noise_std = noise;
        appearance.noise_seed = noise_seed;
    }
    TransformSpec {
        geometric,
        appearance,
    }
}

/// RGB in `[0, 255]` to HSV with all components in `[0, 1]`.
fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let (r, g, b) = (r / 255.0, g / 255.0, b / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r * 255.0, g * 255.0, b * 255.0]
}

fn gaussian_blur(img: &mut Image, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return;
    }
    let kernel: Vec<f64> = {
        let k: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = k.iter().sum();
        k.into_iter().map(|v| v / total).collect()
    };
    let (h, w) = (img.height() as isize, img.width() as isize);
    for horizontal in [true, false] {
        let src = img.data().to_vec();
        let dst = img.data_mut();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for (k, weight) in kernel.iter().enumerate() {
                        let o = k as isize - radius;
                        let (sx, sy) = if horizontal {
                            ((x + o).clamp(0, w - 1), y)
                        } else {
                            (x, (y + o).clamp(0, h - 1))
                        };
                        acc += weight * src[((sy * w + sx) * 3) as usize + ch];
                    }
                    dst[((y * w + x) * 3) as usize + ch] = acc;
                }
            }
        }
    }
}

/// Hue/saturation scaling in HSV, brightness `a·v + b` on every channel, then
/// the optional grayscale drop, blur and noise; clipped to `[0, 255]`.
pub fn apply_appearance(spec: &AppearanceSpec, img: &Image) -> Image {
    let mut out = img.clone();
    if spec.is_identity() {
        return out;
    }
    let jitter_hs = spec.hue_scale != 1.0 || spec.sat_scale != 1.0;
    for px in out.pixels_mut() {
        let mut rgb = [px[0], px[1], px[2]];
        if jitter_hs {
            let [h, s, v] = rgb_to_hsv(rgb);
            rgb = hsv_to_rgb([h * spec.hue_scale, (s * spec.sat_scale).clamp(0.0, 1.0), v]);
        }
        for (dst, c) in px.iter_mut().zip(rgb) {
            *dst = (spec.bright_scale * c + spec.bright_bias).clamp(0.0, 255.0);
        }
        if spec.drop_color {
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            // Exact fixed point for pixels that are already gray.
            let gray = if px[0] == px[1] && px[1] == px[2] { px[0] } else { gray };
            px.fill(gray);
        }
    }
    if spec.blur_sigma > 0.0 {
        gaussian_blur(&mut out, spec.blur_sigma);
    }
    if spec.noise_std > 0.0 {
        let mut rng = rng::stream(spec.noise_seed, "appearance_noise", 0);
        let normal = Normal::new(0.0, spec.noise_std).expect("finite positive std");
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out.clamp_to_byte_range();
    out
}

/// `t_g(t_a(img))`; out-of-frame pixels are filled with 0.
pub fn apply(spec: &TransformSpec, img: &Image) -> Image {
    let appearance = apply_appearance(&spec.appearance, img);
    if spec.geometric.is_identity() {
        return appearance;
    }
    let mut out = spec.geometric.apply_to_image(&appearance, 0.0);
    out.clamp_to_byte_range();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_image(seed: u64, side: usize) -> Image {
        let mut rng = rng::stream(seed, "test_image", 0);
        let data = (0..side * side * 3).map(|_| rng.random_range(0..=255) as f64).collect();
        Image::new(side, side, data).unwrap()
    }

    #[test]
    fn all_disabled_gives_identity() {
        let mut rng = rng::stream(3, rng::STREAM_AUGMENT, 0);
        let spec = sample_transform(&mut rng, &AugmentConfig::none());
        assert!(spec.geometric.is_identity());
        assert!(spec.appearance.is_identity());
    }

    #[test]
    fn same_seed_same_spec() {
        let cfg = AugmentConfig::pretrain();
        let a = sample_transform(&mut rng::stream(9, rng::STREAM_AUGMENT, 4), &cfg);
        let b = sample_transform(&mut rng::stream(9, rng::STREAM_AUGMENT, 4), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_draws_stay_in_range_and_center() {
        // Uniform on [-45, 45] has std 90/√12 ≈ 26; the mean of 10k draws has
        // std 0.26, so 1.5 is a ~6σ bound.
        let cfg = AugmentConfig::pretrain().with_components(&[Component::Rotation]);
        let mut rng = rng::stream(1, rng::STREAM_AUGMENT, 0);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| sample_transform(&mut rng, &cfg).geometric.rotation_deg)
            .collect();
        let min = draws.iter().copied().fold(f64::INFINITY, f64::min);
        let max = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(min >= -45.0 && max <= 45.0);
        assert!(mean.abs() < 1.5, "mean {mean}");
    }

    #[test]
    fn toggling_a_family_keeps_other_draws() {
        let full = AugmentConfig::pretrain();
        let rot_only = full.clone().with_components(&[Component::Rotation]);
        let a = sample_transform(&mut rng::stream(5, "x", 0), &full);
        let b = sample_transform(&mut rng::stream(5, "x", 0), &rot_only);
        assert_eq!(a.geometric.rotation_deg, b.geometric.rotation_deg);
        assert_eq!(b.geometric.scale, 1.0);
    }

    #[test]
    fn neutral_appearance_is_exact() {
        let img = test_image(2, 8);
        let spec = AppearanceSpec {
            hue_scale: 1.0,
            sat_scale: 1.0,
            ..AppearanceSpec::identity()
        };
        assert_eq!(apply_appearance(&spec, &img), img);
    }

    #[test]
    fn hsv_round_trip_is_tight() {
        let img = test_image(4, 8);
        for px in img.data().chunks(3) {
            let rgb = [px[0], px[1], px[2]];
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-9);
            }
        }
        // Forcing the HSV path with unit scales stays within 1e-9.
        let spec = AppearanceSpec {
            hue_scale: 1.0 + 1e-15,
            ..AppearanceSpec::identity()
        };
        let out = apply_appearance(&spec, &img);
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn brightness_bias_adds_and_clips() {
        let img = Image::new(1, 2, vec![0.0, 100.0, 250.0, 30.0, 245.0, 255.0]).unwrap();
        let spec = AppearanceSpec {
            bright_bias: 10.0,
            ..AppearanceSpec::identity()
        };
        let out = apply_appearance(&spec, &img);
        assert_eq!(out.data(), &[10.0, 110.0, 255.0, 40.0, 255.0, 255.0]);
    }

    #[test]
    fn drop_color_fixes_gray() {
        let mut img = Image::filled(4, 4, 0.0);
        for (i, px) in img.pixels_mut().enumerate() {
            px.fill((i * 13 % 256) as f64);
        }
        let spec = AppearanceSpec {
            drop_color: true,
            ..AppearanceSpec::identity()
        };
        assert_eq!(apply_appearance(&spec, &img), img);
    }

    #[test]
    fn identity_spec_is_noop() {
        let img = test_image(6, 16);
        assert_eq!(apply(&TransformSpec::identity(), &img), img);
    }

    #[test]
    fn parts_match_their_direct_application() {
        let img = test_image(7, 16);
        let geo = AffineTransform2D::new(20.0, [2.0, -3.0], 1.2, [0.0, 0.0]).unwrap();
        let spec = TransformSpec {
            geometric: geo,
            appearance: AppearanceSpec::identity(),
        };
        assert_eq!(apply(&spec, &img), geo.apply_to_image(&img, 0.0));

        let app = AppearanceSpec {
            hue_scale: 0.3,
            sat_scale: 0.6,
            bright_scale: 0.8,
            bright_bias: 12.0,
            ..AppearanceSpec::identity()
        };
        let spec = TransformSpec {
            geometric: AffineTransform2D::identity(),
            appearance: app,
        };
        assert_eq!(apply(&spec, &img), apply_appearance(&app, &img));
    }

    #[test]
    fn order_is_appearance_then_geometry() {
        // Brightness bias after a translation would lift the zero fill; applied
        // first, the fill stays zero.
        let img = Image::filled(8, 8, 100.0);
        let spec = TransformSpec {
            geometric: AffineTransform2D::translation(4.0, 0.0),
            appearance: AppearanceSpec {
                bright_bias: 10.0,
                ..AppearanceSpec::identity()
            },
        };
        let ours = apply(&spec, &img);
        let reversed = apply_appearance(&spec.appearance, &spec.geometric.apply_to_image(&img, 0.0));
        assert_ne!(ours, reversed);
        assert_eq!(ours.pixel(0, 0), [0.0; 3]);
        assert_eq!(ours.pixel(7, 0), [110.0; 3]);
    }

    #[test]
    fn blur_preserves_constant_images_and_smooths_edges() {
        let img = Image::filled(6, 6, 80.0);
        let spec = AppearanceSpec {
            blur_sigma: 1.5,
            ..AppearanceSpec::identity()
        };
        let out = apply_appearance(&spec, &img);
        assert!(out.data().iter().all(|v| (v - 80.0).abs() < 1e-9));
    }

    #[test]
    fn component_names_parse() {
        for c in Component::ALL {
            assert_eq!(c.name().parse::<Component>().unwrap(), c);
        }
        assert_eq!("rot".parse::<Component>().unwrap(), Component::Rotation);
        assert!("cutout".parse::<Component>().is_err());
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let mut cfg = AugmentConfig::pretrain();
        cfg.rotation_deg = Range(10.0, -10.0);
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::pretrain();
        cfg.scale_range = Range(0.0, 1.0);
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::finetune().validate().is_ok());
    }

    proptest! {
        #[test]
        fn apply_keeps_shape_and_byte_range(seed in 0u64..10_000) {
            let mut cfg = AugmentConfig::pretrain();
            cfg.set_components(&Component::ALL);
            cfg.drop_color_prob = 0.5;
            let spec = sample_transform(&mut rng::stream(seed, "p", 0), &cfg);
            let img = test_image(seed, 12);
            let out = apply(&spec, &img);
            prop_assert_eq!((out.height(), out.width()), (12, 12));
            prop_assert!(out.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }

        #[test]
        fn sampled_parameters_lie_in_ranges(seed in 0u64..10_000) {
            let mut cfg = AugmentConfig::finetune();
            cfg.set_components(&Component::ALL);
            let s = sample_transform(&mut rng::stream(seed, "q", 0), &cfg);
            let g = s.geometric;
            prop_assert!((-90.0..=90.0).contains(&g.rotation_deg));
            prop_assert!((0.7..=1.3).contains(&g.scale));
            prop_assert!(g.translation.iter().all(|t| (-20.0..=20.0).contains(t)));
            let a = s.appearance;
            prop_assert!((0.01..=1.0).contains(&a.hue_scale));
            prop_assert!((0.5..=1.0).contains(&a.bright_scale));
            prop_assert!((5.0..=20.0).contains(&a.bright_bias));
        }
    }
}
