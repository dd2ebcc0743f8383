//! Mechanism learning: compress critical neurons into representatives and
//! cluster samples into `K` mechanisms.

pub mod gmm;
pub mod hierarchy;
pub mod kmeans;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use gmm::{gmm_em, gmm_fit, DiagonalGmm};
pub use hierarchy::Linkage;
pub use kmeans::{kmeans, kmeans_with, KMeansParams};

use crate::error::{Error, Result};
use crate::io::matrix_rows;
use crate::linalg::correlation;
use crate::selection::SelectionResult;
use crate::trace::ActivationTrace;
use hierarchy::merge_to;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    #[serde(rename = "kmeans")]
    KMeans,
    Gmm,
    Agglomerative,
}

impl std::str::FromStr for ClusterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" | "k_means" | "km" => Ok(Self::KMeans),
            "gmm" | "gm" => Ok(Self::Gmm),
            "agglomerative" | "ac" => Ok(Self::Agglomerative),
            other => Err(Error::Config(format!("unknown clustering method '{other}'"))),
        }
    }
}

impl std::fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::KMeans => "kmeans",
            Self::Gmm => "gmm",
            Self::Agglomerative => "agglomerative",
        })
    }
}

/// Cluster labels plus each method's native sample embedding `e`:
/// distances to centers (k-means), responsibilities (GMM), or one-hot
/// labels (agglomerative).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismAssignment {
    pub labels: Vec<usize>,
    #[serde(with = "matrix_rows")]
    pub e: DMatrix<f64>,
    pub k: usize,
    pub method: ClusterMethod,
    /// Inertia for k-means and Ward, log-likelihood for GMM.
    pub fit_score: f64,
    /// Inertia per Lloyd iteration or log-likelihood per EM step.
    pub history: Vec<f64>,
}

impl MechanismAssignment {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

pub(crate) fn check_k(v: &DMatrix<f64>, k: usize) -> Result<()> {
    if k == 0 || k > v.nrows() {
        return Err(Error::InvalidInput(format!(
            "k = {k} must be in 1..={} (sample count)",
            v.nrows()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite value in clustering input".into()));
    }
    Ok(())
}

fn within_sum_of_squares(v: &DMatrix<f64>, labels: &[usize], k: usize) -> f64 {
    let dim = v.ncols();
    let mut sums = DMatrix::<f64>::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for d in 0..dim {
            sums[(l, d)] += v[(i, d)];
        }
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            (0..dim)
                .map(|d| {
                    let t = v[(i, d)] - sums[(l, d)] / counts[l] as f64;
                    t * t
                })
                .sum::<f64>()
        })
        .sum()
}

/// Ward-linkage agglomerative clustering of samples. Seed-free; ties merge
/// the lowest-index pair first and labels are numbered by smallest member.
pub fn agglomerative_cluster(v: &DMatrix<f64>, k: usize) -> Result<MechanismAssignment> {
    check_k(v, k)?;
    let n = v.nrows();
    let mut cost = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let sq: f64 = (0..v.ncols()).map(|d| (v[(i, d)] - v[(j, d)]).powi(2)).sum();
            cost[(i, j)] = 0.5 * sq;
            cost[(j, i)] = 0.5 * sq;
        }
    }
    let labels = merge_to(cost, k, Linkage::Ward);
    let e = DMatrix::from_fn(n, k, |i, c| (labels[i] == c) as u8 as f64);
    let fit_score = within_sum_of_squares(v, &labels, k);
    Ok(MechanismAssignment {
        labels,
        e,
        k,
        method: ClusterMethod::Agglomerative,
        fit_score,
        history: vec![fit_score],
    })
}

/// Cluster with default parameters for the chosen method.
pub fn cluster(v: &DMatrix<f64>, k: usize, method: ClusterMethod, seed: u64) -> Result<MechanismAssignment> {
    match method {
        ClusterMethod::KMeans => kmeans(v, k, seed, kmeans::DEFAULT_MAX_ITER),
        ClusterMethod::Gmm => gmm_em(v, k, seed, gmm::DEFAULT_MAX_ITER, gmm::DEFAULT_REG),
        ClusterMethod::Agglomerative => agglomerative_cluster(v, k),
    }
}

/// Columns of a critical-activation matrix grouped by correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGroups {
    /// Column indices per group, groups ordered by smallest member.
    pub groups: Vec<Vec<usize>>,
    /// One column per group: the unweighted mean of its members.
    pub v: DMatrix<f64>,
}

/// Average-linkage clustering of columns under `1 - |corr|`, cut to exactly
/// `min(max_reps, columns)` groups, each represented by its mean column.
pub fn feature_agglomerate(x: &DMatrix<f64>, max_reps: usize) -> Result<FeatureGroups> {
    if max_reps == 0 {
        return Err(Error::InvalidInput("representative limit must be >= 1".into()));
    }
    let p = x.ncols();
    let target = max_reps.min(p);
    let labels = if target == p {
        (0..p).collect()
    } else {
        let mut dist = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in (i + 1)..p {
                let d = 1.0 - correlation(x.column(i).as_slice(), x.column(j).as_slice()).abs();
                dist[(i, j)] = d;
                dist[(j, i)] = d;
            }
        }
        merge_to(dist, target, Linkage::Average)
    };
    let mut groups = vec![Vec::new(); target];
    for (j, &l) in labels.iter().enumerate() {
        groups[l].push(j);
    }
    let v = DMatrix::from_fn(x.nrows(), target, |i, g| {
        groups[g].iter().map(|&j| x[(i, j)]).sum::<f64>() / groups[g].len() as f64
    });
    Ok(FeatureGroups { groups, v })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeGroup {
    pub layer_id: String,
    /// Original neuron indices.
    pub neurons: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub groups: Vec<RepresentativeGroup>,
    /// In-scope samples x representatives, column order matches `groups`.
    #[serde(with = "matrix_rows")]
    pub v: DMatrix<f64>,
    pub limits: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub k: usize,
    pub method: ClusterMethod,
    pub seed: u64,
    /// Per-layer representative limits; `None` skips agglomeration.
    #[serde(default)]
    pub limits: Option<Vec<usize>>,
    #[serde(default)]
    pub all_samples: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnOutput {
    pub representatives: RepresentativeSet,
    pub assignment: MechanismAssignment,
}

/// Build the representative matrix from per-layer critical neurons:
/// agglomerated per layer when limits are given, raw otherwise, then
/// concatenated across layers.
pub fn representatives(
    trace: &ActivationTrace,
    selections: &[SelectionResult],
    limits: Option<&[usize]>,
    all_samples: bool,
) -> Result<RepresentativeSet> {
    if selections.is_empty() {
        return Err(Error::InvalidInput("no layer selections given".into()));
    }
    if let Some(l) = limits {
        if l.len() != selections.len() {
            return Err(Error::Config(format!(
                "{} representative limits for {} layers",
                l.len(),
                selections.len()
            )));
        }
    }
    let rows = trace.scope_rows(all_samples);
    let mut groups = Vec::new();
    let mut blocks = Vec::new();
    for (pos, sel) in selections.iter().enumerate() {
        if sel.selected.is_empty() {
            continue;
        }
        let layer = trace.layer(&sel.layer_id)?;
        if let Some(&bad) = sel.selected.iter().find(|&&j| j >= layer.neuron_count()) {
            return Err(Error::DimensionMismatch(format!(
                "neuron {bad} out of range for layer '{}'",
                sel.layer_id
            )));
        }
        let x = layer.select(&rows, &sel.selected);
        match limits {
            Some(l) => {
                let fg = feature_agglomerate(&x, l[pos])?;
                for g in fg.groups {
                    groups.push(RepresentativeGroup {
                        layer_id: sel.layer_id.clone(),
                        neurons: g.iter().map(|&c| sel.selected[c]).collect(),
                    });
                }
                blocks.push(fg.v);
            }
            None => {
                for &j in &sel.selected {
                    groups.push(RepresentativeGroup {
                        layer_id: sel.layer_id.clone(),
                        neurons: vec![j],
                    });
                }
                blocks.push(x);
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::Data("empty critical set at every layer".into()));
    }
    let mut v = DMatrix::zeros(rows.len(), groups.len());
    let mut col = 0;
    for b in blocks {
        v.columns_mut(col, b.ncols()).copy_from(&b);
        col += b.ncols();
    }
    Ok(RepresentativeSet {
        groups,
        v,
        limits: limits.map(<[usize]>::to_vec),
    })
}

/// Representatives of the critical neurons, then `K`-way clustering.
pub fn neucept_learn(
    trace: &ActivationTrace,
    selections: &[SelectionResult],
    cfg: &LearnConfig,
) -> Result<LearnOutput> {
    let reps = representatives(trace, selections, cfg.limits.as_deref(), cfg.all_samples)?;
    let assignment = cluster(&reps.v, cfg.k, cfg.method, cfg.seed)?;
    Ok(LearnOutput {
        representatives: reps,
        assignment,
    })
}
