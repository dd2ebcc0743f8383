//! Clusters' entropy, CE sweeps over `K`, and the noise-ablation protocol.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::mechanism::{cluster, ClusterMethod};
use crate::rng::{self, derive_seed};
use crate::selection::{baseline_activation_select, neucept_discover, DiscoverConfig, SelectionResult};
use crate::synthetic::{accuracy, forward, SyntheticSpec};
use crate::trace::ActivationTrace;

/// Empirical conditional entropy `H(y | c)` in bits.
pub fn clusters_entropy<C: Ord + Copy, Y: Ord + Copy>(c: &[C], y: &[Y]) -> Result<f64> {
    if c.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} cluster labels for {} prior labels",
            c.len(),
            y.len()
        )));
    }
    if c.is_empty() {
        return Err(Error::InvalidInput("clusters' entropy needs at least one sample".into()));
    }
    let mut joint: BTreeMap<(C, Y), usize> = BTreeMap::new();
    let mut marginal: BTreeMap<C, usize> = BTreeMap::new();
    for (&ci, &yi) in c.iter().zip(y) {
        *joint.entry((ci, yi)).or_default() += 1;
        *marginal.entry(ci).or_default() += 1;
    }
    let n = c.len() as f64;
    let h = joint
        .iter()
        .map(|(&(ci, _), &count)| {
            let nc = marginal[&ci] as f64;
            count as f64 / n * (nc / count as f64).log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Empirical entropy in bits.
pub fn entropy<Y: Ord + Copy>(y: &[Y]) -> Result<f64> {
    clusters_entropy(&vec![0u8; y.len()], y)
}

/// Neurons of one layer used as clustering input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNeurons {
    pub layer_id: String,
    pub neurons: Vec<usize>,
}

impl From<&SelectionResult> for LayerNeurons {
    fn from(s: &SelectionResult) -> Self {
        Self {
            layer_id: s.layer_id.clone(),
            neurons: s.selected.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeCurve {
    pub k_values: Vec<usize>,
    pub ce_bits: Vec<f64>,
    pub method: ClusterMethod,
    pub selector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub k_values: Vec<usize>,
    pub method: ClusterMethod,
    pub seed: u64,
    #[serde(default)]
    pub all_samples: bool,
}

/// In-scope activations of the given neurons, concatenated across layers.
pub fn gather(trace: &ActivationTrace, neurons: &[LayerNeurons], all_samples: bool) -> Result<DMatrix<f64>> {
    let rows = trace.scope_rows(all_samples);
    let mut blocks = Vec::new();
    for set in neurons {
        let layer = trace.layer(&set.layer_id)?;
        if let Some(&bad) = set.neurons.iter().find(|&&j| j >= layer.neuron_count()) {
            return Err(Error::DimensionMismatch(format!(
                "neuron {bad} out of range for layer '{}'",
                set.layer_id
            )));
        }
        blocks.push(layer.select(&rows, &set.neurons));
    }
    let width = blocks.iter().map(|b| b.ncols()).sum();
    let mut v = DMatrix::zeros(rows.len(), width);
    let mut col = 0;
    for b in blocks {
        v.columns_mut(col, b.ncols()).copy_from(&b);
        col += b.ncols();
    }
    Ok(v)
}

/// For each `k`, cluster the in-scope activations of `neurons` and score
/// the clustering against the prior labels. An empty neuron set carries no
/// information and yields the constant clustering.
pub fn ce_curve(
    trace: &ActivationTrace,
    neurons: &[LayerNeurons],
    cfg: &CurveConfig,
    selector: &str,
) -> Result<CeCurve> {
    if cfg.k_values.is_empty() {
        return Err(Error::Config("k range is empty".into()));
    }
    let prior = trace
        .prior_labels()
        .ok_or_else(|| Error::Data("trace has no prior labels".into()))?;
    let rows = trace.scope_rows(cfg.all_samples);
    let y: Vec<i64> = rows.iter().map(|&i| prior[i]).collect();
    let v = gather(trace, neurons, cfg.all_samples)?;
    let ce_bits = cfg
        .k_values
        .iter()
        .map(|&k| {
            if v.ncols() == 0 {
                if k == 0 || k > v.nrows() {
                    return Err(Error::InvalidInput(format!("k = {k} outside 1..={}", v.nrows())));
                }
                return entropy(&y);
            }
            let a = cluster(&v, k, cfg.method, derive_seed(cfg.seed, &[k as u64]))?;
            clusters_entropy(&a.labels, &y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CeCurve {
        k_values: cfg.k_values.clone(),
        ce_bits,
        method: cfg.method,
        selector: selector.to_string(),
    })
}

/// How the clustering input neurons are chosen on each trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    /// Knockoff discovery at the listed layers.
    Neucept { layers: Vec<String>, discover: DiscoverConfig },
    /// Top-`k` mean activation per listed layer.
    Activation { layers: Vec<String>, k: usize },
    /// A fixed neuron set, identical on both traces.
    Fixed { neurons: Vec<LayerNeurons> },
}

impl Selector {
    pub fn name(&self) -> &'static str {
        match self {
            Selector::Neucept { .. } => "neucept",
            Selector::Activation { .. } => "activation",
            Selector::Fixed { .. } => "fixed",
        }
    }

    pub fn select(&self, trace: &ActivationTrace) -> Result<Vec<LayerNeurons>> {
        match self {
            Selector::Neucept { layers, discover } => {
                let report = neucept_discover(trace, layers, discover)?;
                if let Some(f) = report.failures.first() {
                    return Err(Error::Data(format!("discovery failed on layer '{}': {}", f.layer_id, f.error)));
                }
                Ok(report.results.iter().map(LayerNeurons::from).collect())
            }
            Selector::Activation { layers, k } => layers
                .iter()
                .map(|id| {
                    let mut neurons = baseline_activation_select(trace, id, *k, discover_scope(self))?;
                    neurons.sort_unstable();
                    Ok(LayerNeurons {
                        layer_id: id.clone(),
                        neurons,
                    })
                })
                .collect(),
            Selector::Fixed { neurons } => Ok(neurons.clone()),
        }
    }
}

fn discover_scope(s: &Selector) -> bool {
    match s {
        Selector::Neucept { discover, .. } => discover.all_samples,
        _ => false,
    }
}

/// `CE_a(k) - CE_b(k)`, with selection and clustering run independently on
/// each trace.
pub fn ce_difference(
    trace_a: &ActivationTrace,
    trace_b: &ActivationTrace,
    selector: &Selector,
    cfg: &CurveConfig,
) -> Result<Vec<f64>> {
    let alphabet = |t: &ActivationTrace| -> Result<Vec<i64>> {
        let mut a = t
            .prior_labels()
            .ok_or_else(|| Error::Data("trace has no prior labels".into()))?
            .to_vec();
        a.sort_unstable();
        a.dedup();
        Ok(a)
    };
    if alphabet(trace_a)? != alphabet(trace_b)? {
        return Err(Error::Data("traces have different prior label alphabets".into()));
    }
    let a = ce_curve(trace_a, &selector.select(trace_a)?, cfg, selector.name())?;
    let b = ce_curve(trace_b, &selector.select(trace_b)?, cfg, selector.name())?;
    Ok(a.ce_bits.iter().zip(&b.ce_bits).map(|(x, y)| x - y).collect())
}

/// Per-neuron additive noise for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub base: Vec<f64>,
    pub scores: Vec<f64>,
    pub gamma: f64,
    pub level: f64,
    pub noise: Vec<f64>,
}

/// `delta_i ~ U[0,1)` from `seed` alone, weights `delta_i 2^(-gamma s_i)`,
/// rescaled so that `mean(noise) = level * reference_scale`. The base
/// vector depends only on `seed` and the length, never on the scores.
pub fn noise_schedule(
    scores: &[f64],
    gamma: f64,
    level: f64,
    reference_scale: f64,
    seed: u64,
) -> Result<NoiseSchedule> {
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidInput(format!("score {s} outside [0, 1]")));
    }
    if !(gamma >= 0.0) || !(level >= 0.0) || !(reference_scale >= 0.0) {
        return Err(Error::InvalidInput(
            "gamma, level and reference scale must be nonnegative".into(),
        ));
    }
    let mut r = rng::rng_from(seed);
    let base: Vec<f64> = scores.iter().map(|_| r.random::<f64>()).collect();
    let weights: Vec<f64> = base
        .iter()
        .zip(scores)
        .map(|(d, s)| d * (-gamma * s).exp2())
        .collect();
    let total: f64 = weights.iter().sum();
    let target = level * reference_scale * scores.len() as f64;
    let noise = if total > 0.0 && target > 0.0 {
        weights.iter().map(|w| w * target / total).collect()
    } else {
        vec![0.0; scores.len()]
    };
    Ok(NoiseSchedule {
        base,
        scores: scores.to_vec(),
        gamma,
        level,
        noise,
    })
}

/// One schedule per sample, seeded by `(seed, sample index)`.
pub fn noise_batch(
    scores: &[f64],
    gamma: f64,
    level: f64,
    reference_scale: f64,
    seed: u64,
    samples: usize,
) -> Result<Vec<NoiseSchedule>> {
    (0..samples)
        .map(|i| noise_schedule(scores, gamma, level, reference_scale, derive_seed(seed, &[i as u64])))
        .collect()
}

/// Mean absolute activation of a layer over the given rows.
pub fn activation_scale(z: &DMatrix<f64>, rows: &[usize]) -> f64 {
    if rows.is_empty() || z.ncols() == 0 {
        return 0.0;
    }
    let total: f64 = rows.iter().map(|&i| z.row(i).iter().map(|v| v.abs()).sum::<f64>()).sum();
    total / (rows.len() * z.ncols()) as f64
}

/// Accuracy after adding noise to one layer's post-activation values. A
/// single schedule applies to every sample; otherwise one per sample.
pub fn ablation_run(
    spec: &SyntheticSpec,
    inputs: &DMatrix<f64>,
    layer_id: &str,
    schedules: &[NoiseSchedule],
    labels: &[i64],
) -> Result<f64> {
    let layer = spec.layer_index(layer_id)?;
    let width = spec.layer_widths[layer];
    let n = inputs.nrows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{} labels for {n} samples", labels.len())));
    }
    if schedules.len() != 1 && schedules.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} noise schedules for {n} samples",
            schedules.len()
        )));
    }
    if let Some(s) = schedules.iter().find(|s| s.noise.len() != width) {
        return Err(Error::DimensionMismatch(format!(
            "noise has {} entries, layer '{layer_id}' has {width} neurons",
            s.noise.len()
        )));
    }
    let noise = DMatrix::from_fn(schedules.len(), width, |i, j| schedules[i].noise[j]);
    let pass = forward(spec, inputs, Some((layer, &noise)))?;
    Ok(accuracy(&pass.predictions, labels))
}

/// Indicator scores: 1 on `protected`, 0 elsewhere.
pub fn protection_scores(width: usize, protected: &[usize]) -> Vec<f64> {
    let mut s = vec![0.0; width];
    protected.iter().for_each(|&j| s[j] = 1.0);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub selector: String,
    pub level: f64,
    pub gamma: f64,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub layer_id: String,
    pub levels: Vec<f64>,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Accuracy for every (selector, level, gamma, seed). All selectors share
/// the base noise of a given seed and sample.
pub fn ablation_grid(
    spec: &SyntheticSpec,
    inputs: &DMatrix<f64>,
    labels: &[i64],
    grid: &AblationGrid,
    scores: &[(String, Vec<f64>)],
) -> Result<Vec<AblationRow>> {
    let layer = spec.layer_index(&grid.layer_id)?;
    let clean = forward(spec, inputs, None)?;
    let rows: Vec<usize> = (0..inputs.nrows()).collect();
    let scale = activation_scale(&clean.activations[layer], &rows);
    let mut out = Vec::new();
    for (name, s) in scores {
        for &level in &grid.levels {
            for &gamma in &grid.gammas {
                for &seed in &grid.seeds {
                    let batch = noise_batch(s, gamma, level, scale, seed, inputs.nrows())?;
                    out.push(AblationRow {
                        selector: name.clone(),
                        level,
                        gamma,
                        seed,
                        accuracy: ablation_run(spec, inputs, &grid.layer_id, &batch, labels)?,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeRow {
    pub selector: String,
    pub method: ClusterMethod,
    pub k: usize,
    pub ce_bits: f64,
}

impl CeCurve {
    pub fn rows(&self) -> Vec<CeRow> {
        self.k_values
            .iter()
            .zip(&self.ce_bits)
            .map(|(&k, &ce)| CeRow {
                selector: self.selector.clone(),
                method: self.method,
                k,
                ce_bits: ce,
            })
            .collect()
    }
}

/// Serialize rows as CSV with a header, written atomically.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("csv buffer: {e}")))?;
    atomic_write(path, &bytes)
}
