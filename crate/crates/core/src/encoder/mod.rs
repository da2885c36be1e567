//! The trainable model: a stride-2 convolutional encoder `E` followed by
//! either a two-layer projection head `g` (pretraining) or a linear pose head
//! (fine-tuning), plus the checkpoint container.
//!
//! Parameter names: `enc.conv{i}.w/b`, `enc.fc.w/b`, `proj.fc1.w/b`,
//! `proj.fc2.w/b`, `pose.w/b`. Convolution weights are `(out, in, 3, 3)`,
//! dense weights `(in, out)`.

mod checkpoint;

pub use checkpoint::{swap_head_for_pose, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LatentProjection;
use crate::image::{to_network_input, Image, CHANNELS};
use crate::ndiff::{Graph, NodeId, ParamSet, Tensor};
use crate::pose::{KeypointPredictor, Pose25D};
use crate::rng;
use crate::synthhand::NUM_JOINTS;

/// Relative depths are predicted in units of this many cm.
pub const POSE_DEPTH_SCALE: f64 = 10.0;
pub const POSE_OUTPUTS: usize = 3 * NUM_JOINTS;
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Projection,
    Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Square input side, px.
    pub input_side: usize,
    /// Output channels of each stride-2 stage.
    pub channels: Vec<usize>,
    pub feature_dim: usize,
    pub projection_hidden: usize,
    /// Points `m` of the latent projection; its dimension is `2m`.
    pub latent_points: usize,
    pub head: HeadKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_side: 64,
            channels: vec![8, 16, 32, 32],
            feature_dim: 128,
            projection_hidden: 128,
            latent_points: 64,
            head: HeadKind::Projection,
        }
    }
}

fn conv_out(extent: usize) -> usize {
    (extent + 1) / 2
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_points < 2 {
            return Err(Error::Config("latent_points must be at least 2".into()));
        }
        if self.input_side < 4 {
            return Err(Error::Config("input_side must be at least 4".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must be a non-empty list of positive widths".into()));
        }
        if self.feature_dim == 0 || self.projection_hidden == 0 {
            return Err(Error::Config("feature_dim and projection_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn final_side(&self) -> usize {
        self.channels.iter().fold(self.input_side, |s, _| conv_out(s))
    }

    pub fn flat_dim(&self) -> usize {
        let side = self.final_side();
        self.channels.last().copied().unwrap_or(0) * side * side
    }

    pub fn projection_dim(&self) -> usize {
        2 * self.latent_points
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadKind::Projection => self.projection_dim(),
            HeadKind::Pose => POSE_OUTPUTS,
        }
    }

    /// Every parameter this configuration declares, by name.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        let mut cin = CHANNELS;
        for (i, &c) in self.channels.iter().enumerate() {
            shapes.insert(format!("enc.conv{i}.w"), vec![c, cin, 3, 3]);
            shapes.insert(format!("enc.conv{i}.b"), vec![c]);
            cin = c;
        }
        shapes.insert("enc.fc.w".into(), vec![self.flat_dim(), self.feature_dim]);
        shapes.insert("enc.fc.b".into(), vec![self.feature_dim]);
        match self.head {
            HeadKind::Projection => {
                shapes.insert("proj.fc1.w".into(), vec![self.feature_dim, self.projection_hidden]);
                shapes.insert("proj.fc1.b".into(), vec![self.projection_hidden]);
                shapes.insert("proj.fc2.w".into(), vec![self.projection_hidden, self.projection_dim()]);
                shapes.insert("proj.fc2.b".into(), vec![self.projection_dim()]);
            }
            HeadKind::Pose => {
                shapes.insert("pose.w".into(), vec![self.feature_dim, POSE_OUTPUTS]);
                shapes.insert("pose.b".into(), vec![POSE_OUTPUTS]);
            }
        }
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().values().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Node handles of a model graph.
#[derive(Clone, Copy, Debug)]
pub struct ModelNodes {
    pub images: NodeId,
    pub features: NodeId,
    pub output: NodeId,
}

/// Appends `E` to `g`, reading the `(B, 3, H, W)` node `x`.
pub fn encoder_nodes(g: &mut Graph, cfg: &EncoderConfig, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    let mut cin = CHANNELS;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let w = g.param(&format!("enc.conv{i}.w"), &[c, cin, 3, 3])?;
        let b = g.param(&format!("enc.conv{i}.b"), &[c])?;
        let y = g.conv2d(h, w, b, 2)?;
        h = g.relu(y)?;
        cin = c;
    }
    let flat = g.flatten(h)?;
    let w = g.param("enc.fc.w", &[cfg.flat_dim(), cfg.feature_dim])?;
    let b = g.param("enc.fc.b", &[cfg.feature_dim])?;
    let y = g.dense(flat, w, b)?;
    g.relu(y)
}

/// Appends the configured head on top of encoder features.
pub fn head_nodes(g: &mut Graph, cfg: &EncoderConfig, features: NodeId) -> Result<NodeId> {
    match cfg.head {
        HeadKind::Projection => {
            let w1 = g.param("proj.fc1.w", &[cfg.feature_dim, cfg.projection_hidden])?;
            let b1 = g.param("proj.fc1.b", &[cfg.projection_hidden])?;
            let h = g.dense(features, w1, b1)?;
            let h = g.relu(h)?;
            let w2 = g.param("proj.fc2.w", &[cfg.projection_hidden, cfg.projection_dim()])?;
            let b2 = g.param("proj.fc2.b", &[cfg.projection_dim()])?;
            g.dense(h, w2, b2)
        }
        HeadKind::Pose => {
            let w = g.param("pose.w", &[cfg.feature_dim, POSE_OUTPUTS])?;
            let b = g.param("pose.b", &[POSE_OUTPUTS])?;
            g.dense(features, w, b)
        }
    }
}

/// Graph of `f` for a fixed batch size with input `"images"` and outputs
/// `"features"` and `"output"`.
pub fn model_graph(cfg: &EncoderConfig, batch: usize) -> Result<(Graph, ModelNodes)> {
    cfg.validate()?;
    let mut g = Graph::new();
    let images = g.input("images", &[batch, CHANNELS, cfg.input_side, cfg.input_side])?;
    let features = encoder_nodes(&mut g, cfg, images)?;
    let output = head_nodes(&mut g, cfg, features)?;
    g.mark_output("features", features)?;
    g.mark_output("output", output)?;
    Ok((
        g,
        ModelNodes {
            images,
            features,
            output,
        },
    ))
}

/// He-uniform weights `U(±√(6 / fan_in))`, zero biases, for the named
/// parameters in name order.
pub fn he_uniform(shapes: &BTreeMap<String, Vec<usize>>, rng: &mut rng::Rng) -> ParamSet {
    let mut params = ParamSet::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let t = if shape.len() >= 2 {
            let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
                .expect("sized from shape")
        } else {
            Tensor::zeros(shape)
        };
        params.insert(name.clone(), t);
    }
    params
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl Model {
    /// Fresh model; weights come from the `init` stream of `seed`.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = he_uniform(&config.param_shapes(), &mut rng::stream(seed, rng::STREAM_INIT, 0));
        Ok(Model { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        check_param_shapes(&config, &params)?;
        Ok(Model { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    fn check_images(&self, images: &[Image]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::invalid("empty image batch"));
        }
        let s = self.config.input_side;
        if let Some(img) = images.iter().find(|i| i.height() != s || i.width() != s) {
            return Err(Error::shape(format!(
                "model expects {s}×{s} images, got {}×{}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    /// `(features, head output)` row blocks for the images, evaluated in chunks.
    pub fn forward(&self, images: &[Image]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_images(images)?;
        let mut features = Vec::with_capacity(images.len());
        let mut outputs = Vec::with_capacity(images.len());
        let mut cached: Option<(usize, Graph)> = None;
        for chunk in images.chunks(EVAL_CHUNK) {
            if cached.as_ref().map(|(n, _)| *n) != Some(chunk.len()) {
                cached = Some((chunk.len(), model_graph(&self.config, chunk.len())?.0));
            }
            let g = &mut cached.as_mut().expect("just set").1;
            let refs: Vec<&Image> = chunk.iter().collect();
            let x = to_network_input(&refs)?;
            let out = g.forward(&self.params, &[("images", &x)])?;
            let f = &out["features"];
            let o = &out["output"];
            features.extend(f.data().chunks(self.config.feature_dim).map(<[f64]>::to_vec));
            outputs.extend(o.data().chunks(self.config.output_dim()).map(<[f64]>::to_vec));
        }
        Ok((features, outputs))
    }

    pub fn features(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(images)?.0)
    }

    /// `z = f(I)` as `m × 2` point sets.
    pub fn encode_project(&self, images: &[Image]) -> Result<Vec<LatentProjection>> {
        if self.config.head != HeadKind::Projection {
            return Err(Error::invalid("model has a pose head, not a projection head"));
        }
        self.forward(images)?.1.into_iter().map(LatentProjection::from_flat).collect()
    }

    pub fn predict_pose(&self, images: &[Image]) -> Result<Vec<Pose25D>> {
        if self.config.head != HeadKind::Pose {
            return Err(Error::invalid("model has a projection head, not a pose head"));
        }
        let side = self.config.input_side as f64;
        Ok(self.forward(images)?.1.iter().map(|row| decode_pose(row, side)).collect())
    }
}

impl KeypointPredictor for Model {
    fn predict_2d(&self, images: &[Image]) -> Result<Vec<Vec<[f64; 2]>>> {
        Ok(self.predict_pose(images)?.into_iter().map(|p| p.j2d).collect())
    }
}

pub(crate) fn check_param_shapes(cfg: &EncoderConfig, params: &ParamSet) -> Result<()> {
    let expected = cfg.param_shapes();
    let got: BTreeMap<String, Vec<usize>> = params.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
    if expected != got {
        let missing: Vec<&String> = expected.keys().filter(|k| !got.contains_key(*k)).collect();
        let extra: Vec<&String> = got.keys().filter(|k| !expected.contains_key(*k)).collect();
        return Err(Error::Config(format!(
            "parameters do not match the encoder config (missing {missing:?}, unexpected {extra:?}, or differing shapes)"
        )));
    }
    Ok(())
}

/// Pose-head target row: `2J` normalized image coordinates
/// `(u - c) / (L/2)` interleaved as `u, v`, then `J` depths in
/// [`POSE_DEPTH_SCALE`] units.
pub fn encode_pose(j2d: &[[f64; 2]], d_r: &[f64], side: f64) -> Vec<f64> {
    let c = (side - 1.0) / 2.0;
    let half = side / 2.0;
    j2d.iter()
        .flat_map(|p| [(p[0] - c) / half, (p[1] - c) / half])
        .chain(d_r.iter().map(|d| d / POSE_DEPTH_SCALE))
        .collect()
}

pub fn decode_pose(row: &[f64], side: f64) -> Pose25D {
    let joints = row.len() / 3;
    let c = (side - 1.0) / 2.0;
    let half = side / 2.0;
    Pose25D {
        j2d: (0..joints).map(|j| [row[2 * j] * half + c, row[2 * j + 1] * half + c]).collect(),
        d_r: row[2 * joints..].iter().map(|d| d * POSE_DEPTH_SCALE).collect(),
    }
}
