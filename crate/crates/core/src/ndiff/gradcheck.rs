use rand::seq::index::sample;

use super::graph::Graph;
use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Check at most this many randomly chosen coordinates of each parameter
    /// tensor; `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max (|analytic - numeric| - noise) / max(1e-8, |numeric|)` over checked
    /// coordinates, where `noise` is the rounding bound of the difference quotient.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step evaluations crossed a relu kink.
    pub skipped: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn scalar_sum(outputs: &std::collections::BTreeMap<String, Tensor>, name: &str) -> Result<f64> {
    outputs
        .get(name)
        .map(|t| t.data().iter().sum())
        .ok_or_else(|| Error::shape(format!("unknown output `{name}`")))
}

/// Compares reverse-mode parameter gradients of `sum(output)` against central
/// finite differences.
pub fn grad_check(
    graph: &mut Graph,
    params: &ParamSet,
    inputs: &[(&str, &Tensor)],
    output: &str,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if opts.step <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let outs = graph.forward(params, inputs)?;
    let out_shape = outs
        .get(output)
        .ok_or_else(|| Error::shape(format!("unknown output `{output}`")))?
        .shape()
        .to_vec();
    let base_pattern = graph.relu_pattern();
    let ones = Tensor::full(&out_shape, 1.0);
    let analytic = graph.backward(&[(output, &ones)])?.params;

    let mut rng = rng::stream(opts.seed, "grad_check", 0);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let names: Vec<String> = analytic.names().cloned().collect();
    for name in names {
        let n = analytic.get(&name).expect("present").len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let original = work.get(&name).expect("present").data()[idx];
            work.get_mut(&name).expect("present").data_mut()[idx] = original + opts.step;
            let plus = scalar_sum(&graph.forward(&work, inputs)?, output)?;
            let plus_kink = graph.relu_pattern() != base_pattern;
            work.get_mut(&name).expect("present").data_mut()[idx] = original - opts.step;
            let minus = scalar_sum(&graph.forward(&work, inputs)?, output)?;
            let minus_kink = graph.relu_pattern() != base_pattern;
            work.get_mut(&name).expect("present").data_mut()[idx] = original;
            if plus_kink || minus_kink {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(&name).expect("present").data()[idx];
            // Differences below the rounding noise of the difference quotient
            // carry no signal; an exactly cancelling gradient would otherwise
            // report roundoff as relative error.
            let noise = 8.0 * f64::EPSILON * plus.abs().max(minus.abs()) / opts.step;
            let err = ((a - numeric).abs() - noise).max(0.0) / numeric.abs().max(1e-8);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst = Some((name.clone(), idx));
                }
            }
        }
    }
    // Leave the graph holding activations for the unperturbed parameters.
    graph.forward(params, inputs)?;
    Ok(report)
}
