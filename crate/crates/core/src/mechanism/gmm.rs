use nalgebra::DMatrix;

use super::kmeans::{kmeans_centers, KMeansParams};
use super::{check_k, ClusterMethod, MechanismAssignment};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_REG: f64 = 1e-6;
const REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGmm {
    pub weights: Vec<f64>,
    /// `k x dim`.
    pub means: DMatrix<f64>,
    /// `k x dim`.
    pub variances: DMatrix<f64>,
}

impl DiagonalGmm {
    fn log_component(&self, v: &DMatrix<f64>, i: usize, c: usize) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut acc = self.weights[c].ln();
        for d in 0..v.ncols() {
            let var = self.variances[(c, d)];
            let t = v[(i, d)] - self.means[(c, d)];
            acc -= 0.5 * (ln_2pi + var.ln() + t * t / var);
        }
        acc
    }

    /// Responsibilities (`n x k`) and total log-likelihood.
    pub fn e_step(&self, v: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
        let k = self.weights.len();
        let mut resp = DMatrix::zeros(v.nrows(), k);
        let mut ll = 0.0;
        for i in 0..v.nrows() {
            let logs: Vec<f64> = (0..k).map(|c| self.log_component(v, i, c)).collect();
            let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            ll += lse;
            for c in 0..k {
                resp[(i, c)] = (logs[c] - lse).exp();
            }
        }
        (resp, ll)
    }

    fn m_step(&mut self, v: &DMatrix<f64>, resp: &DMatrix<f64>, reg: f64) {
        let (n, dim) = v.shape();
        for c in 0..self.weights.len() {
            let nk: f64 = resp.column(c).sum();
            if nk <= 1e-12 {
                continue;
            }
            self.weights[c] = nk / n as f64;
            for d in 0..dim {
                let mean = (0..n).map(|i| resp[(i, c)] * v[(i, d)]).sum::<f64>() / nk;
                let var = (0..n)
                    .map(|i| {
                        let t = v[(i, d)] - mean;
                        resp[(i, c)] * t * t
                    })
                    .sum::<f64>()
                    / nk;
                self.means[(c, d)] = mean;
                self.variances[(c, d)] = var + reg;
            }
        }
    }
}

fn init_from_labels(v: &DMatrix<f64>, labels: &[usize], centers: DMatrix<f64>, reg: f64) -> DiagonalGmm {
    let (n, dim) = v.shape();
    let k = centers.nrows();
    let global_var: Vec<f64> = (0..dim)
        .map(|d| {
            let m = v.column(d).mean();
            v.column(d).iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64
        })
        .collect();
    let mut counts = vec![0usize; k];
    let mut variances = DMatrix::zeros(k, dim);
    for i in 0..n {
        counts[labels[i]] += 1;
        for d in 0..dim {
            let t = v[(i, d)] - centers[(labels[i], d)];
            variances[(labels[i], d)] += t * t;
        }
    }
    for c in 0..k {
        for d in 0..dim {
            let var = if counts[c] > 0 {
                variances[(c, d)] / counts[c] as f64
            } else {
                0.0
            };
            variances[(c, d)] = if var > 0.0 { var } else { global_var[d] } + reg;
        }
    }
    DiagonalGmm {
        weights: counts.iter().map(|&c| (c.max(1)) as f64 / n as f64).collect(),
        means: centers,
        variances,
    }
}

/// Diagonal-covariance Gaussian mixture fitted by EM, initialised from a
/// k-means run with the same seed. `reg` is added to every variance in each
/// M-step. `history` holds the log-likelihood after each E-step.
pub fn gmm_em(v: &DMatrix<f64>, k: usize, seed: u64, max_iter: usize, reg: f64) -> Result<MechanismAssignment> {
    gmm_fit(v, k, seed, max_iter, reg).map(|(a, _)| a)
}

pub fn gmm_fit(
    v: &DMatrix<f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
    reg: f64,
) -> Result<(MechanismAssignment, DiagonalGmm)> {
    check_k(v, k)?;
    let (init, centers) = kmeans_centers(v, &KMeansParams::new(k, seed))?;
    let mut model = init_from_labels(v, &init.labels, centers, reg);
    let mut history = Vec::new();
    let mut resp;
    loop {
        let (r, ll) = model.e_step(v);
        if !ll.is_finite() || r.iter().any(|x| x.is_nan()) {
            return Err(Error::Numerical(
                "degenerate mixture likelihood (non-finite responsibilities)".into(),
            ));
        }
        resp = r;
        let done = history
            .last()
            .is_some_and(|&prev: &f64| (ll - prev).abs() <= REL_TOL * ll.abs().max(1.0));
        history.push(ll);
        if done || history.len() > max_iter {
            break;
        }
        model.m_step(v, &resp, reg);
    }
    let labels = (0..v.nrows())
        .map(|i| {
            (0..k)
                .fold((0, f64::NEG_INFINITY), |best, c| {
                    if resp[(i, c)] > best.1 {
                        (c, resp[(i, c)])
                    } else {
                        best
                    }
                })
                .0
        })
        .collect();
    let fit_score = *history.last().unwrap();
    Ok((
        MechanismAssignment {
            labels,
            e: resp,
            k,
            method: ClusterMethod::Gmm,
            fit_score,
            history,
        },
        model,
    ))
}
