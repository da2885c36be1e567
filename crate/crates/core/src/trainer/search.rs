use serde::{Deserialize, Serialize};

use super::probe::{probe, ProbeConfig, ProbeReport};
use super::pretrain::{pretrain, PretrainConfig};
use crate::augment::Component;
use crate::error::{Error, Result};
use crate::synthhand::Dataset;

pub const MAX_CANDIDATES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionResult {
    pub components: Vec<Component>,
    pub probe: ProbeReport,
    pub final_loss: f64,
}

impl CompositionResult {
    /// Component names joined with `+`.
    pub fn key(&self) -> String {
        composition_key(&self.components)
    }
}

pub fn composition_key(components: &[Component]) -> String {
    components.iter().map(|c| c.name()).collect::<Vec<_>>().join("+")
}

/// Every non-empty subset of `candidates`, in bitmask order.
pub fn subsets(candidates: &[Component]) -> Vec<Vec<Component>> {
    (1u32..(1 << candidates.len()))
        .map(|mask| {
            candidates
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &c)| c)
                .collect()
        })
        .collect()
}

/// Pretrains once per non-empty subset of `candidates` (only that subset
/// enabled), probes each frozen encoder on `probe_data`, and ranks by probe
/// 3D EPE, ties broken by key.
pub fn composition_search(
    candidates: &[Component],
    base: &PretrainConfig,
    probe_cfg: &ProbeConfig,
    datasets: &[&Dataset],
    probe_data: &Dataset,
) -> Result<Vec<CompositionResult>> {
    if candidates.is_empty() || candidates.len() > MAX_CANDIDATES {
        return Err(Error::invalid(format!(
            "composition search takes 1 to {MAX_CANDIDATES} candidates, got {}",
            candidates.len()
        )));
    }
    let mut uniq = candidates.to_vec();
    uniq.sort();
    uniq.dedup();
    if uniq.len() != candidates.len() {
        return Err(Error::invalid("composition candidates must be distinct"));
    }
    let mut results = Vec::new();
    for subset in subsets(candidates) {
        let mut cfg = base.clone();
        cfg.augment.set_components(&subset);
        let run = pretrain(&cfg, datasets)?;
        let report = probe(&run.checkpoint.model, probe_data, probe_cfg)?;
        results.push(CompositionResult {
            components: subset,
            probe: report,
            final_loss: run.trace.last().map_or(f64::NAN, |r| r.loss),
        });
    }
    results.sort_by(|a, b| {
        a.probe
            .metrics
            .epe
            .total_cmp(&b.probe.metrics.epe)
            .then_with(|| a.key().cmp(&b.key()))
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_enumerate_all_combinations() {
        let c = [Component::Scale, Component::Rotation, Component::Translation, Component::ColorJitter];
        let s = subsets(&c);
        assert_eq!(s.len(), 15);
        assert!(s.contains(&c.to_vec()));
        assert_eq!(subsets(&[Component::Blur]), vec![vec![Component::Blur]]);
        assert_eq!(composition_key(&c), "scale+rotation+translation+color_jitter");
    }
}
