//! Knockoff statistics, the FDR threshold, and layer-wise critical-neuron
//! discovery.

mod discover;
mod stats;

pub use discover::{
    discover_matrix, neucept_discover, DiscoverConfig, DiscoveryReport, LayerFailure, MatrixSelection,
    SelectionResult,
};
pub use stats::{
    lambda_max, lasso_cd, statistic_lasso, statistic_marginal, KnockoffStatistics, LassoFit, LassoParams,
    Statistic, StatisticKind,
};

use crate::error::{Error, Result};
use crate::trace::ActivationTrace;

/// Knockoff+ threshold: the smallest `t > 0` among `{|W_j| : W_j != 0}` with
///
/// ```text
/// (1 + #{j : W_j <= -t}) / #{j : W_j >= t} <= q
/// ```
///
/// or `+inf` when no candidate qualifies.
pub fn knockoff_threshold(w: &[f64], q: f64) -> f64 {
    knockoff_threshold_with_offset(w, q, 1)
}

/// Threshold with a configurable numerator offset: 1 is knockoff+ (the
/// default everywhere), 0 is the original, less conservative knockoff rule
/// that controls a modified FDR only.
pub fn knockoff_threshold_with_offset(w: &[f64], q: f64, offset: u32) -> f64 {
    let mut pos: Vec<f64> = w.iter().copied().filter(|&v| v > 0.0).collect();
    let mut neg: Vec<f64> = w.iter().filter(|&&v| v < 0.0).map(|v| -v).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let count_at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v < t);
    for t in candidates {
        let selected = count_at_least(&pos, t);
        if selected == 0 {
            break;
        }
        let false_est = offset as f64 + count_at_least(&neg, t) as f64;
        if false_est / selected as f64 <= q {
            return t;
        }
    }
    f64::INFINITY
}

/// `{j : W_j >= tau}`.
pub fn select(w: &[f64], tau: f64) -> Vec<usize> {
    w.iter()
        .enumerate()
        .filter(|(_, &v)| v >= tau)
        .map(|(j, _)| j)
        .collect()
}

/// Activation-magnitude baseline: the `k` neurons with the largest mean
/// activation over in-scope samples, ties to the lower index. The result is
/// ordered by rank.
pub fn baseline_activation_select(
    trace: &ActivationTrace,
    layer_id: &str,
    k: usize,
    all_samples: bool,
) -> Result<Vec<usize>> {
    let layer = trace.layer(layer_id)?;
    if k > layer.neuron_count() {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds the {} neurons of layer '{layer_id}'",
            layer.neuron_count()
        )));
    }
    let rows = trace.scope_rows(all_samples);
    if rows.is_empty() {
        return Err(Error::Data("no samples in scope".into()));
    }
    let means: Vec<f64> = (0..layer.neuron_count())
        .map(|j| rows.iter().map(|&i| layer.data()[(i, j)]).sum::<f64>() / rows.len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}
