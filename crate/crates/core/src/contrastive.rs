//! Contrastive objectives over batches of `2N` projections, where rows `2k`
//! and `2k + 1` are the two views of source image `k`.
//!
//! `nt_xent` is the normalized-temperature cross entropy over cosine
//! similarities, averaged over all `2N` anchors. `peclr_loss` first maps every
//! view back through the inverse of its own geometric augmentation in latent
//! space (rotation about the centroid and range-proportional translation,
//! scale dropped) and then applies `nt_xent`.

use std::collections::BTreeMap;

use crate::augment::TransformSpec;
use crate::error::{Error, Result};
use crate::geometry::{invert_in_latent_with, latent_inverse_map, LatentProjection, TranslationMode};
use crate::ndiff::{Graph, NodeId, ParamSet, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub projections: Vec<LatentProjection>,
    pub specs: Vec<TransformSpec>,
    pub temperature: f64,
    /// Image side `L`, px.
    pub image_side: f64,
    pub translation_mode: TranslationMode,
}

impl ContrastiveBatch {
    /// Batch with identity transforms and default temperature.
    pub fn from_projections(projections: Vec<LatentProjection>) -> Self {
        let n = projections.len();
        ContrastiveBatch {
            projections,
            specs: vec![TransformSpec::identity(); n],
            temperature: DEFAULT_TEMPERATURE,
            image_side: 1.0,
            translation_mode: TranslationMode::Normalized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        let n = self.projections.len();
        if n < 2 || n % 2 != 0 {
            return Err(Error::invalid(format!("contrastive batch needs an even count >= 2, got {n}")));
        }
        if self.specs.len() != n {
            return Err(Error::invalid(format!("{n} projections but {} transform specs", self.specs.len())));
        }
        let d = self.projections[0].as_flat().len();
        if self.projections.iter().any(|p| p.as_flat().len() != d) {
            return Err(Error::shape("projections in a batch must share a dimension"));
        }
        if !(self.image_side > 0.0) {
            return Err(Error::invalid("image side must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.projections[0].as_flat().len()
    }

    /// Row-major `(2N, 2m)` matrix of the projections.
    pub fn matrix(&self) -> Tensor {
        let rows = self.projections.len();
        let data = self.projections.iter().flat_map(|p| p.as_flat().iter().copied()).collect();
        Tensor::new(vec![rows, self.dim()], data).expect("validated sizes")
    }

    /// `(2N, 6)` per-view inverse maps for [`Graph::point_affine`].
    pub fn inverse_maps(&self) -> Tensor {
        inverse_maps(&self.specs, self.image_side, self.translation_mode)
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn inverse_maps(specs: &[TransformSpec], image_side: f64, mode: TranslationMode) -> Tensor {
    let data = specs
        .iter()
        .flat_map(|s| latent_inverse_map(&s.geometric, image_side, mode))
        .collect();
    Tensor::new(vec![specs.len(), 6], data).expect("six values per spec")
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn positive_of(a: usize) -> usize {
    a ^ 1
}

/// Appends NT-Xent over the rows of `z` (shape `(2N, d)`) and returns the
/// scalar loss node.
///
/// Each anchor's term is evaluated as `log Σ_{k≠a} exp(s_ak - s_ap)`, which
/// equals the usual `-log(exp(s_ap) / Σ_{k≠a} exp(s_ak))` and is exact when
/// all similarities coincide.
pub fn nt_xent_node(g: &mut Graph, z: NodeId, temperature: f64) -> Result<NodeId> {
    check_temperature(temperature)?;
    let shape = g.shape_of(z).to_vec();
    if shape.len() != 2 || shape[0] < 2 || shape[0] % 2 != 0 {
        return Err(Error::shape(format!("nt_xent expects (2N, d), got {shape:?}")));
    }
    let rows = shape[0];
    let mut pos = vec![0.0; rows * rows];
    let mut off_diag = vec![1.0; rows * rows];
    for a in 0..rows {
        pos[a * rows + positive_of(a)] = 1.0;
        off_diag[a * rows + a] = 0.0;
    }
    let pos = g.constant(Tensor::new(vec![rows, rows], pos)?);
    let off_diag = g.constant(Tensor::new(vec![rows, rows], off_diag)?);
    let ones = g.constant(Tensor::full(&[rows, rows], 1.0));

    let zn = g.l2_normalize(z)?;
    let sim = g.matmul(zn, zn, false, true)?;
    let s = g.scale(sim, 1.0 / temperature)?;
    // Row a of `s_pos` repeats s_ap in every column.
    let picked = g.mul(s, pos)?;
    let s_pos = g.matmul(picked, ones, false, false)?;
    let shifted = g.sub(s, s_pos)?;
    let e = g.exp(shifted)?;
    let masked = g.mul(e, off_diag)?;
    let denom = g.sum(masked, Some(1))?;
    let per_anchor = g.log(denom)?;
    g.mean(per_anchor, None)
}

/// Appends the latent inversion and NT-Xent. `maps` is a `(2N, 6)` node
/// holding [`inverse_maps`]; the coordinate range used for normalized
/// translation is a constant for differentiation.
pub fn peclr_node(
    g: &mut Graph,
    z: NodeId,
    maps: NodeId,
    temperature: f64,
    mode: TranslationMode,
) -> Result<NodeId> {
    let inverted = g.point_affine(z, maps, mode == TranslationMode::Normalized)?;
    nt_xent_node(g, inverted, temperature)
}

#[derive(Clone, Debug)]
pub struct LossWithGrad {
    pub loss: f64,
    /// `d loss / d z`, one row per projection.
    pub grad: Vec<Vec<f64>>,
}

fn evaluate(batch: &ContrastiveBatch, equivariant: bool) -> Result<LossWithGrad> {
    batch.validate()?;
    let z_val = batch.matrix();
    let mut g = Graph::new();
    let z = g.input_with_grad("z", z_val.shape())?;
    let loss = if equivariant {
        let maps = g.input("maps", &[batch.projections.len(), 6])?;
        peclr_node(&mut g, z, maps, batch.temperature, batch.translation_mode)?
    } else {
        nt_xent_node(&mut g, z, batch.temperature)?
    };
    g.mark_output("loss", loss)?;
    let maps_val = batch.inverse_maps();
    let mut inputs: Vec<(&str, &Tensor)> = vec![("z", &z_val)];
    if equivariant {
        inputs.push(("maps", &maps_val));
    }
    let out = g.forward(&ParamSet::new(), &inputs)?;
    let grads = g.backward(&[("loss", &Tensor::scalar(1.0))])?;
    let dz = &grads.inputs["z"];
    Ok(LossWithGrad {
        loss: out["loss"].item(),
        grad: dz.data().chunks(batch.dim()).map(<[f64]>::to_vec).collect(),
    })
}

pub fn nt_xent(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(evaluate(batch, false)?.loss)
}

pub fn nt_xent_with_grad(batch: &ContrastiveBatch) -> Result<LossWithGrad> {
    evaluate(batch, false)
}

pub fn peclr_loss(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(evaluate(batch, true)?.loss)
}

pub fn peclr_loss_with_grad(batch: &ContrastiveBatch) -> Result<LossWithGrad> {
    evaluate(batch, true)
}

/// Scalar double-loop NT-Xent, written independently of the graph version
/// for use as a test oracle.
pub fn nt_xent_bruteforce(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let rows = batch.projections.len();
    let mut sims = BTreeMap::new();
    for i in 0..rows {
        for k in 0..rows {
            let s = cosine_sim(batch.projections[i].as_flat(), batch.projections[k].as_flat())?;
            sims.insert((i, k), s / batch.temperature);
        }
    }
    let mut total = 0.0;
    for a in 0..rows {
        let numerator = sims[&(a, positive_of(a))].exp();
        let mut denominator = 0.0;
        for k in 0..rows {
            if k != a {
                denominator += sims[&(a, k)].exp();
            }
        }
        total += -(numerator / denominator).ln();
    }
    Ok(total / rows as f64)
}

/// Brute-force equivariant loss: explicit per-view latent inversion followed
/// by [`nt_xent_bruteforce`].
pub fn peclr_bruteforce(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let inverted = batch
        .projections
        .iter()
        .zip(&batch.specs)
        .map(|(z, s)| invert_in_latent_with(&s.geometric, z, batch.image_side, batch.translation_mode))
        .collect::<Result<Vec<_>>>()?;
    nt_xent_bruteforce(&ContrastiveBatch {
        projections: inverted,
        ..batch.clone()
    })
}
