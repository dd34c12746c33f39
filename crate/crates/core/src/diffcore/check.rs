use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::DiffError;

/// Gradient magnitude below which errors are measured against this floor.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Coordinates actually compared.
    pub checked: usize,
    /// Coordinates rejected because a hinge changed state within `±eps`.
    pub skipped_kinks: usize,
    /// `(analytic, numeric)` at the coordinate with the largest error.
    pub worst: Option<(f64, f64)>,
}

fn relu_states(graph: &Graph, params: &[Tensor]) -> Result<Vec<bool>, DiffError> {
    let ev = graph.forward(params)?;
    let mut out = Vec::new();
    for id in graph.relu_inputs() {
        out.extend(ev.value(id).data().iter().map(|&v| v > 0.0));
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `output` against central differences
/// on `trials` randomly chosen parameter coordinates.
///
/// Coordinates whose perturbation moves any `max(x, 0)` input across zero
/// are resampled. Relative error uses `max(|analytic|, |numeric|, 1e-6)`: at
/// `eps = 1e-5` the central difference of an O(1) loss carries roundoff of
/// about 1e-11, so smaller gradients cannot be compared relatively.
pub fn finite_diff_check(
    graph: &Graph,
    output: NodeId,
    params: &[Tensor],
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<FiniteDiffReport, DiffError> {
    let ev = graph.forward(params)?;
    let grads = ev.backward(output)?;
    drop(ev);

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for pid in graph.param_ids() {
        for k in 0..params[pid.0].numel() {
            coords.push((pid.0, k));
        }
    }
    let mut report = FiniteDiffReport { max_rel_error: 0.0, checked: 0, skipped_kinks: 0, worst: None };
    if coords.is_empty() {
        return Ok(report);
    }

    let base_states = relu_states(graph, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let max_attempts = trials.saturating_mul(20).max(trials);
    let mut attempts = 0;
    while report.checked < trials && attempts < max_attempts {
        attempts += 1;
        let (p, k) = coords[rng.random_range(0..coords.len())];
        let orig = work[p].data()[k];

        work[p].data_mut()[k] = orig + epsilon;
        let plus_states = relu_states(graph, &work)?;
        let f_plus = graph.forward(&work)?.value(output).item();
        work[p].data_mut()[k] = orig - epsilon;
        let minus_states = relu_states(graph, &work)?;
        let f_minus = graph.forward(&work)?.value(output).item();
        work[p].data_mut()[k] = orig;

        let near_kink =
            base_states.iter().zip(&plus_states).zip(&minus_states).any(|((b, pl), mi)| b != pl || b != mi);
        if near_kink {
            report.skipped_kinks += 1;
            continue;
        }

        let numeric = (f_plus - f_minus) / (2.0 * epsilon);
        let analytic = grads.get(super::ParamId(p)).map_or(0.0, |g| g.data()[k]);
        let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((analytic, numeric));
        }
        report.checked += 1;
    }
    Ok(report)
}
