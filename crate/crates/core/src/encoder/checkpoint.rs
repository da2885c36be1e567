//! Checkpoint container, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "EQCKPT\0\0"
//! version    u32
//! header_len u64
//! header     JSON: config, schedule_step, rng, optimizer, tensors[{name, shape, offset, len}]
//! payload    f64 values; offsets and lengths count values, not bytes
//! ```
//!
//! Tensor names carry a `param/`, `adam_m/` or `adam_v/` prefix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_param_shapes, he_uniform, EncoderConfig, HeadKind, Model};
use crate::error::{Error, Result};
use crate::ndiff::{ParamSet, Tensor};
use crate::rng;
use crate::trainer::{OptimizerMeta, OptimizerState};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"EQCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREFIX_PARAM: &str = "param/";
const PREFIX_M: &str = "adam_m/";
const PREFIX_V: &str = "adam_v/";

/// Where the training run's randomness stands: root seed and the number of
/// per-step streams already consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub schedule_step: u64,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: EncoderConfig,
    schedule_step: u64,
    rng: RngState,
    optimizer: OptimizerMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("<checkpoint>", reason)
}

impl Checkpoint {
    /// A freshly initialized model with zeroed optimizer state.
    pub fn fresh(model: Model, lars: bool, weight_decay: f64, seed: u64) -> Self {
        let optimizer = OptimizerState::new(&model.params, lars, weight_decay);
        Checkpoint {
            model,
            optimizer,
            schedule_step: 0,
            rng: RngState { seed, counter: 0 },
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        for (prefix, set) in [
            (PREFIX_PARAM, &self.model.params),
            (PREFIX_M, &self.optimizer.m),
            (PREFIX_V, &self.optimizer.v),
        ] {
            for (name, t) in set.iter() {
                tensors.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                    len: t.len(),
                });
                payload.extend_from_slice(t.data());
            }
        }
        let header = Header {
            config: self.model.config.clone(),
            schedule_step: self.schedule_step,
            rng: self.rng,
            optimizer: self.optimizer.meta(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if header_len > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
        let raw = &body[header_len..];
        if raw.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut expected_offset = 0;
        let (mut params, mut m, mut v) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.len || e.offset != expected_offset {
                return Err(bad(format!("manifest entry `{}` disagrees with its shape or offset", e.name)));
            }
            let end = e.offset + e.len;
            if end > values.len() {
                return Err(bad(format!("truncated payload at tensor `{}`", e.name)));
            }
            expected_offset = end;
            let t = Tensor::new(e.shape, values[e.offset..end].to_vec())?;
            let (set, name) = if let Some(n) = e.name.strip_prefix(PREFIX_PARAM) {
                (&mut params, n)
            } else if let Some(n) = e.name.strip_prefix(PREFIX_M) {
                (&mut m, n)
            } else if let Some(n) = e.name.strip_prefix(PREFIX_V) {
                (&mut v, n)
            } else {
                return Err(bad(format!("unknown tensor group in `{}`", e.name)));
            };
            if set.contains(name) {
                return Err(bad(format!("duplicate tensor `{}`", e.name)));
            }
            set.insert(name, t);
        }
        if expected_offset != values.len() {
            return Err(bad("trailing payload beyond the manifest"));
        }
        let config = header.config;
        config.validate()?;
        check_param_shapes(&config, &params)?;
        check_param_shapes(&config, &m)?;
        check_param_shapes(&config, &v)?;
        Ok(Checkpoint {
            model: Model { config, params },
            optimizer: OptimizerState {
                step: header.optimizer.step,
                lars: header.optimizer.lars,
                weight_decay: header.optimizer.weight_decay,
                m,
                v,
            },
            schedule_step: header.schedule_step,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }

    /// [`Checkpoint::load`], failing unless the stored encoder config equals `expected`.
    pub fn load_expecting(path: &Path, expected: &EncoderConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.model.config != expected {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different encoder config",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}

/// Drops the projection head, adds a linear pose head drawn from the `init`
/// stream of `seed`, and resets optimizer and schedule state. Encoder
/// weights are carried over untouched.
pub fn swap_head_for_pose(ckpt: &Checkpoint, seed: u64) -> Result<Checkpoint> {
    if ckpt.model.config.head != HeadKind::Projection {
        return Err(Error::invalid("checkpoint already has a pose head"));
    }
    let config = EncoderConfig {
        head: HeadKind::Pose,
        ..ckpt.model.config.clone()
    };
    let mut params = ckpt.model.params.clone();
    let proj: Vec<String> = params.names().filter(|n| n.starts_with("proj.")).cloned().collect();
    for n in proj {
        params.remove(&n);
    }
    let head_shapes = config
        .param_shapes()
        .into_iter()
        .filter(|(n, _)| n.starts_with("pose."))
        .collect();
    for (name, t) in he_uniform(&head_shapes, &mut rng::stream(seed, rng::STREAM_INIT, 1)).iter() {
        params.insert(name.clone(), t.clone());
    }
    let model = Model::from_params(config, params)?;
    Ok(Checkpoint::fresh(
        model,
        ckpt.optimizer.lars,
        ckpt.optimizer.weight_decay,
        ckpt.rng.seed,
    ))
}
