use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::data::BatchSampler;
use super::eval::evaluate_poses;
use super::{adam_lars_step, OptimizerState, Schedule};
use crate::encoder::{decode_pose, encode_pose, he_uniform, Model};
use crate::error::{Error, Result};
use crate::ndiff::{Graph, ParamSet, Tensor};
use crate::pose::{pose_loss_nodes, MetricReport};
use crate::rng;
use crate::synthhand::{Dataset, NUM_JOINTS};

/// Two-layer MLP trained on frozen encoder features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Trailing share of the samples held out for scoring.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 128,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            holdout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Scores on the held-out split.
    pub metrics: MetricReport,
    pub final_train_loss: f64,
    pub train_count: usize,
    pub eval_count: usize,
}

fn probe_graph(input: usize, hidden: usize, batch: usize, with_loss: bool) -> Result<Graph> {
    let out = 3 * NUM_JOINTS;
    let mut g = Graph::new();
    let x = g.input("features", &[batch, input])?;
    let w1 = g.param("probe.fc1.w", &[input, hidden])?;
    let b1 = g.param("probe.fc1.b", &[hidden])?;
    let h = g.dense(x, w1, b1)?;
    let h = g.relu(h)?;
    let w2 = g.param("probe.fc2.w", &[hidden, out])?;
    let b2 = g.param("probe.fc2.b", &[out])?;
    let y = g.dense(h, w2, b2)?;
    g.mark_output("output", y)?;
    if with_loss {
        let t = g.input("target", &[batch, out])?;
        let (l2d, ldr) = pose_loss_nodes(&mut g, y, t, NUM_JOINTS)?;
        let loss = g.add(l2d, ldr)?;
        g.mark_output("loss", loss)?;
    }
    Ok(g)
}

/// Per-dimension centering and one global scale (the RMS deviation) fitted
/// on `rows`. A single scale keeps near-constant units from being blown up.
fn standardizer(rows: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let var = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (n * d as f64);
    let inv = if var > 1e-20 { 1.0 / var.sqrt() } else { 0.0 };
    (mean, inv)
}

fn rows_tensor(rows: &[&Vec<f64>]) -> Result<Tensor> {
    let d = rows[0].len();
    Tensor::new(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect())
}

/// Freezes `model`'s encoder, fits a two-layer MLP from its features to the
/// 2.5D labels on the leading `1 - holdout` of `data`, and scores the rest.
pub fn probe(model: &Model, data: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) || cfg.hidden == 0 || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("probe needs 0 < holdout < 1 and positive sizes".into()));
    }
    let n = data.len();
    let n_eval = ((n as f64 * cfg.holdout).round() as usize).max(1);
    if n_eval >= n {
        return Err(Error::invalid(format!("dataset of {n} samples is too small for a probe split")));
    }
    let n_train = n - n_eval;
    let images: Vec<_> = (0..n).map(|i| data.image(i)).collect();
    let raw = model.features(&images)?;
    let (mean, inv_scale) = standardizer(&raw[..n_train]);
    let feats: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * inv_scale).collect())
        .collect();
    let side = data.image_size() as f64;
    let targets: Vec<Vec<f64>> = data.labels.iter().map(|l| encode_pose(&l.j2d, &l.d_r, side)).collect();

    let input = feats[0].len();
    let batch = cfg.batch_size.min(n_train);
    let steps_per_epoch = (n_train / batch).max(1) as u64;
    let schedule = Schedule::from_epochs(cfg.lr, 0, cfg.epochs, steps_per_epoch)?;
    let mut g = probe_graph(input, cfg.hidden, batch, true)?;
    let shapes: BTreeMap<String, Vec<usize>> = g.param_shapes();
    let mut params: ParamSet = he_uniform(&shapes, &mut rng::stream(cfg.seed, rng::STREAM_INIT, 2));
    let mut opt = OptimizerState::new(&params, false, 0.0);
    let mut sampler = BatchSampler::new(&[n_train], cfg.seed)?;
    let seed_grad = Tensor::scalar(1.0);
    let mut last = f64::NAN;
    for step in 0..schedule.total_steps {
        let picks: Vec<usize> = sampler.next_batch(batch).into_iter().map(|(_, i)| i).collect();
        let x = rows_tensor(&picks.iter().map(|&i| &feats[i]).collect::<Vec<_>>())?;
        let t = rows_tensor(&picks.iter().map(|&i| &targets[i]).collect::<Vec<_>>())?;
        let out = g.forward(&params, &[("features", &x), ("target", &t)])?;
        last = out["loss"].item();
        if !last.is_finite() {
            return Err(Error::Numeric(format!("probe loss is {last} at step {}", step + 1)));
        }
        let grads = g.backward(&[("loss", &seed_grad)])?;
        adam_lars_step(&mut params, &grads.params, &mut opt, schedule.lr_at(step + 1))?;
    }

    let eval_idx: Vec<usize> = (n_train..n).collect();
    let mut eg = probe_graph(input, cfg.hidden, n_eval, false)?;
    let x = rows_tensor(&eval_idx.iter().map(|&i| &feats[i]).collect::<Vec<_>>())?;
    let out = eg.forward(&params, &[("features", &x)])?;
    let preds: Vec<_> = out["output"]
        .data()
        .chunks(3 * NUM_JOINTS)
        .map(|row| decode_pose(row, side))
        .collect();
    Ok(ProbeReport {
        metrics: evaluate_poses(&preds, data, &eval_idx, false)?,
        final_train_loss: last,
        train_count: n_train,
        eval_count: n_eval,
    })
}
