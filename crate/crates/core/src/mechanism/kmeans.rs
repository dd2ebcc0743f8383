use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_k, ClusterMethod, MechanismAssignment};
use crate::error::Result;
use crate::rng::{derive_seed, rng_from};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_N_INIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: DEFAULT_MAX_ITER,
            n_init: DEFAULT_N_INIT,
        }
    }
}

fn sq_dist(v: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    (0..v.ncols())
        .map(|d| {
            let t = v[(i, d)] - centers[(c, d)];
            t * t
        })
        .sum()
}

fn plus_plus_init(v: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = v.nrows();
    let mut centers = DMatrix::zeros(k, v.ncols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&v.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(v, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from(&v.row(pick));
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(v, i, &centers, c));
        }
    }
    centers
}

struct LloydRun {
    labels: Vec<usize>,
    centers: DMatrix<f64>,
    history: Vec<f64>,
}

/// Nearest center for every row, ties to the lower center index.
fn assign(v: &DMatrix<f64>, centers: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    (0..v.nrows())
        .map(|i| {
            (0..centers.nrows())
                .map(|c| (c, sq_dist(v, i, centers, c)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        })
        .unzip()
}

fn lloyd(v: &DMatrix<f64>, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> LloydRun {
    let (n, dim) = v.shape();
    let mut centers = plus_plus_init(v, k, rng);
    let mut history = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for _ in 0..max_iter.max(1) {
        let (new_labels, dists) = assign(v, &centers);
        history.push(dists.iter().sum());
        let fixpoint = new_labels == labels;
        labels = new_labels;
        if fixpoint {
            break;
        }
        let mut sums = DMatrix::<f64>::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for d in 0..dim {
                sums[(labels[i], d)] += v[(i, d)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centers[(c, d)] = sums[(c, d)] / counts[c] as f64;
                }
            }
        }
        // empty clusters jump to the point farthest from its own center
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = (0..n)
                .map(|i| (i, sq_dist(v, i, &centers, labels[i])))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0;
            centers.row_mut(c).copy_from(&v.row(far));
        }
    }
    LloydRun {
        labels,
        centers,
        history,
    }
}

/// k-means with k-means++ seeding and `DEFAULT_N_INIT` restarts.
pub fn kmeans(v: &DMatrix<f64>, k: usize, seed: u64, max_iter: usize) -> Result<MechanismAssignment> {
    kmeans_with(
        v,
        &KMeansParams {
            max_iter,
            ..KMeansParams::new(k, seed)
        },
    )
}

/// Like [`kmeans`] but also returns the winning centers (`k x dim`).
pub fn kmeans_with(v: &DMatrix<f64>, params: &KMeansParams) -> Result<MechanismAssignment> {
    kmeans_centers(v, params).map(|(a, _)| a)
}

pub fn kmeans_centers(v: &DMatrix<f64>, params: &KMeansParams) -> Result<(MechanismAssignment, DMatrix<f64>)> {
    let k = params.k;
    check_k(v, k)?;
    let mut best: Option<LloydRun> = None;
    for run in 0..params.n_init.max(1) {
        let mut rng = rng_from(derive_seed(params.seed, &[run as u64]));
        let r = lloyd(v, k, params.max_iter, &mut rng);
        let better = best
            .as_ref()
            .map_or(true, |b| r.history.last() < b.history.last());
        if better {
            best = Some(r);
        }
    }
    let best = best.expect("at least one run");
    let e = DMatrix::from_fn(v.nrows(), k, |i, c| sq_dist(v, i, &best.centers, c).sqrt());
    let fit_score = *best.history.last().unwrap_or(&0.0);
    Ok((
        MechanismAssignment {
            labels: best.labels,
            e,
            k,
            method: ClusterMethod::KMeans,
            fit_score,
            history: best.history,
        },
        best.centers,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::clusters_entropy;

    fn two_blobs() -> DMatrix<f64> {
        DMatrix::from_fn(10, 2, |i, _| if i < 5 { 0.0 } else { 10.0 })
    }

    #[test]
    fn separates_two_blobs() {
        let a = kmeans(&two_blobs(), 2, 1, 100).unwrap();
        assert_eq!(a.labels[..5].iter().collect::<std::collections::BTreeSet<_>>().len(), 1);
        assert_ne!(a.labels[0], a.labels[9]);
        let truth: Vec<i64> = (0..10).map(|i| (i >= 5) as i64).collect();
        assert_eq!(clusters_entropy(&a.labels, &truth).unwrap(), 0.0);
        assert_eq!(a.fit_score, 0.0);
    }

    #[test]
    fn single_cluster_center_is_mean() {
        let v = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 6.0]);
        let (a, centers) = kmeans_centers(&v, &KMeansParams::new(1, 0)).unwrap();
        assert!(a.labels.iter().all(|&l| l == 0));
        assert_eq!(centers[(0, 0)], 3.0);
    }

    #[test]
    fn k_equal_n_has_zero_inertia() {
        let v = DMatrix::from_fn(6, 2, |i, j| (i * 3 + j * j) as f64);
        let a = kmeans(&v, 6, 4, 100).unwrap();
        assert_eq!(a.fit_score, 0.0);
        assert!(kmeans(&v, 7, 4, 100).is_err());
    }

    #[test]
    fn inertia_never_increases_and_ends_at_fixpoint() {
        let mut r = rng_from(5);
        let v = DMatrix::from_fn(200, 3, |i, _| (i % 4) as f64 * 2.0 + r.random::<f64>() * 3.0);
        for seed in 0..5 {
            let p = KMeansParams {
                n_init: 1,
                ..KMeansParams::new(4, seed)
            };
            let (a, centers) = kmeans_centers(&v, &p).unwrap();
            for w in a.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].abs());
            }
            let (labels, _) = assign(&v, &centers);
            assert_eq!(labels, a.labels);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut r = rng_from(6);
        let v = DMatrix::from_fn(80, 2, |_, _| r.random::<f64>());
        assert_eq!(kmeans(&v, 3, 9, 50).unwrap(), kmeans(&v, 3, 9, 50).unwrap());
    }
}
