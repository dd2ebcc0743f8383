//! Layer-wise critical-neuron discovery: for each requested layer,
//! independently, standardize the in-scope activations, fit a Gaussian
//! knockoff model, and run the knockoff filter `repetitions` times against
//! the response logit. Selection frequency across repetitions is both the
//! aggregation rule and the neuron importance score.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::stats::{Statistic, StatisticKind};
use super::{knockoff_threshold_with_offset, select};
use crate::error::{Error, Result};
use crate::io::inf_as_null;
use crate::knockoffs::{build_knockoff_model, estimate_moments, sample_knockoffs, solve_equi_s, DEFAULT_SHRINKAGE};
use crate::rng::{derive_seed, str_id};
use crate::trace::{standardize_matrix, ActivationTrace};

fn default_repetitions() -> usize {
    50
}
fn default_keep_fraction() -> f64 {
    0.5
}
fn default_shrinkage() -> f64 {
    DEFAULT_SHRINKAGE
}
fn default_offset() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverConfig {
    /// Nominal FDR per requested layer (`1 - precision`); a single value
    /// applies to every layer.
    pub q: Vec<f64>,
    #[serde(default)]
    pub statistic: Statistic,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_keep_fraction")]
    pub keep_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_shrinkage")]
    pub shrinkage: f64,
    /// Use every sample instead of only the class-masked ones.
    #[serde(default)]
    pub all_samples: bool,
    /// Threshold numerator offset; 1 is knockoff+.
    #[serde(default = "default_offset")]
    pub offset: u32,
}

impl DiscoverConfig {
    pub fn new(q: f64, seed: u64) -> Self {
        Self {
            q: vec![q],
            statistic: Statistic::default(),
            repetitions: default_repetitions(),
            keep_fraction: default_keep_fraction(),
            seed,
            shrinkage: DEFAULT_SHRINKAGE,
            all_samples: false,
            offset: 1,
        }
    }

    fn q_for(&self, position: usize) -> f64 {
        if self.q.len() == 1 {
            self.q[0]
        } else {
            self.q[position]
        }
    }

    fn validate(&self, layers: usize) -> Result<()> {
        if self.q.len() != 1 && self.q.len() != layers {
            return Err(Error::Config(format!(
                "{} q values for {layers} layers",
                self.q.len()
            )));
        }
        if let Some(q) = self.q.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return Err(Error::Config(format!("q = {q} outside (0, 1)")));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction {} outside (0, 1]",
                self.keep_fraction
            )));
        }
        Ok(())
    }
}

/// Outcome of the repeated knockoff filter on one matrix, indices in the
/// matrix's own column numbering.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSelection {
    pub taus: Vec<f64>,
    pub frequency: Vec<f64>,
    pub selected: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Run the repeated knockoff filter on a raw matrix against response `y`.
/// Repetition `r` samples knockoffs with seed `derive(cfg.seed, [stream, r])`.
pub fn discover_matrix(
    x: &DMatrix<f64>,
    y: &[f64],
    q: f64,
    cfg: &DiscoverConfig,
    stream: u64,
) -> Result<MatrixSelection> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} activation rows vs {} responses",
            x.nrows(),
            y.len()
        )));
    }
    let view = standardize_matrix(x)?;
    let p_all = x.ncols();
    let reps = cfg.repetitions;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
    if yc.iter().all(|&v| v == 0.0) {
        return Err(Error::Data("response has zero variance".into()));
    }
    let mut counts = vec![0usize; p_all];
    let mut taus = Vec::with_capacity(reps);
    if view.retained.is_empty() {
        taus.resize(reps, f64::INFINITY);
    } else {
        let moments = estimate_moments(&view.data, cfg.shrinkage)?;
        let s = solve_equi_s(&moments.sigma)?;
        let model = build_knockoff_model(moments, s)?;
        for r in 0..reps {
            let xk = sample_knockoffs(&model, &view.data, derive_seed(cfg.seed, &[stream, r as u64]))?;
            let stats = cfg.statistic.compute(&view.data, &xk, &yc)?;
            let tau = knockoff_threshold_with_offset(&stats.w, q, cfg.offset);
            for j in select(&stats.w, tau) {
                counts[view.retained[j]] += 1;
            }
            taus.push(tau);
        }
    }
    let frequency: Vec<f64> = counts.iter().map(|&c| c as f64 / reps as f64).collect();
    let selected = (0..p_all)
        .filter(|&j| frequency[j] >= cfg.keep_fraction)
        .collect();
    Ok(MatrixSelection {
        taus,
        frequency,
        selected,
        dropped: view.dropped,
    })
}

/// Selection outcome for one layer. Indices are original neuron indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub layer_id: String,
    pub q: f64,
    pub statistic: StatisticKind,
    pub neuron_count: usize,
    /// Threshold of each repetition; `null` in JSON means `+inf`.
    #[serde(with = "inf_as_null")]
    pub taus: Vec<f64>,
    pub frequency: Vec<f64>,
    pub selected: Vec<usize>,
    pub dropped: Vec<usize>,
}

impl SelectionResult {
    /// Threshold of the first repetition.
    pub fn tau(&self) -> f64 {
        self.taus.first().copied().unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFailure {
    pub layer_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub results: Vec<SelectionResult>,
    pub failures: Vec<LayerFailure>,
}

/// Discover critical neurons at each listed layer. Layers are processed
/// independently; a layer whose computation fails is reported in
/// `failures` and the others proceed. Randomness is keyed by layer id, so
/// reordering `layer_ids` only reorders the output.
pub fn neucept_discover(
    trace: &ActivationTrace,
    layer_ids: &[String],
    cfg: &DiscoverConfig,
) -> Result<DiscoveryReport> {
    cfg.validate(layer_ids.len())?;
    for id in layer_ids {
        trace.layer(id)?;
    }
    let rows = trace.scope_rows(cfg.all_samples);
    let y: Vec<f64> = rows.iter().map(|&i| trace.response()[i]).collect();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (pos, id) in layer_ids.iter().enumerate() {
        let layer = trace.layer(id)?;
        let q = cfg.q_for(pos);
        match discover_matrix(&layer.rows(&rows), &y, q, cfg, str_id(id)) {
            Ok(sel) => results.push(SelectionResult {
                layer_id: id.clone(),
                q,
                statistic: cfg.statistic.kind(),
                neuron_count: layer.neuron_count(),
                taus: sel.taus,
                frequency: sel.frequency,
                selected: sel.selected,
                dropped: sel.dropped,
            }),
            Err(e) => {
                log::warn!("discovery failed on layer '{id}': {e}");
                failures.push(LayerFailure {
                    layer_id: id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(DiscoveryReport { results, failures })
}
