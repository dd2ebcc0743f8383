//! Bottom-up hierarchical merging with Lance-Williams updates.
//!
//! Each active cluster caches its nearest neighbour. Both supported
//! linkages are reducible, so after a merge only rows whose cached
//! neighbour was one of the merged pair need a full rescan.
//!
//! Tie rule: among equal merge costs the pair with the smallest lower
//! index merges first, then the smallest upper index. A merged cluster
//! keeps the lower of the two indices.

use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linkage {
    /// Unweighted average of pairwise distances.
    Average,
    /// Ward's minimum increase of within-cluster sum of squares; the input
    /// must hold the singleton merge costs `||x_i - x_j||^2 / 2`.
    Ward,
}

/// Merge until `target` clusters remain. Returns, per item, a cluster label
/// in `0..target`, numbered by each cluster's smallest member.
pub fn merge_to(dist: DMatrix<f64>, target: usize, linkage: Linkage) -> Vec<usize> {
    let n = dist.nrows();
    let target = target.clamp(1.min(n), n);
    let mut d = dist;
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut parent: Vec<usize> = (0..n).collect();
    let mut nn = vec![usize::MAX; n];
    let mut nn_d = vec![f64::INFINITY; n];

    let rescan = |i: usize, d: &DMatrix<f64>, active: &[bool], nn: &mut [usize], nn_d: &mut [f64]| {
        nn[i] = usize::MAX;
        nn_d[i] = f64::INFINITY;
        for j in 0..d.nrows() {
            if j != i && active[j] && d[(i, j)] < nn_d[i] {
                nn_d[i] = d[(i, j)];
                nn[i] = j;
            }
        }
    };
    for i in 0..n {
        rescan(i, &d, &active, &mut nn, &mut nn_d);
    }

    let mut clusters = n;
    while clusters > target {
        // smallest cost, then smallest lower index, then smallest upper index
        let mut best: Option<(f64, usize, usize)> = None;
        for i in (0..n).filter(|&i| active[i] && nn[i] != usize::MAX) {
            let (a, b) = (i.min(nn[i]), i.max(nn[i]));
            let cand = (nn_d[i], a, b);
            let better = match best {
                None => true,
                Some(cur) => {
                    cand.0 < cur.0 || (cand.0 == cur.0 && (cand.1, cand.2) < (cur.1, cur.2))
                }
            };
            if better {
                best = Some(cand);
            }
        }
        let Some((dij, i, j)) = best else { break };

        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in (0..n).filter(|&k| active[k] && k != i && k != j) {
            let nk = size[k] as f64;
            let v = match linkage {
                Linkage::Average => (ni * d[(i, k)] + nj * d[(j, k)]) / (ni + nj),
                Linkage::Ward => {
                    ((ni + nk) * d[(i, k)] + (nj + nk) * d[(j, k)] - nk * dij) / (ni + nj + nk)
                }
            };
            d[(i, k)] = v;
            d[(k, i)] = v;
        }
        active[j] = false;
        size[i] += size[j];
        parent[j] = i;
        clusters -= 1;

        for k in (0..n).filter(|&k| active[k]) {
            if k == i || nn[k] == i || nn[k] == j {
                rescan(k, &d, &active, &mut nn, &mut nn_d);
            } else if d[(k, i)] < nn_d[k] || (d[(k, i)] == nn_d[k] && i < nn[k]) {
                nn_d[k] = d[(k, i)];
                nn[k] = i;
            }
        }
    }

    let root = |mut x: usize| {
        while parent[x] != x {
            x = parent[x];
        }
        x
    };
    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
        .map(|x| {
            let r = root(x);
            if label_of_root[r] == usize::MAX {
                label_of_root[r] = next;
                next += 1;
            }
            label_of_root[r]
        })
        .collect()
}
