//! Knockoff importance statistics `W_j = U_j - U~_j`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::correlation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    MarginalCorr,
    LassoCd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoParams {
    /// Explicit penalty; when absent `lambda_ratio * lambda_max` is used.
    #[serde(default)]
    pub lambda: Option<f64>,
    pub lambda_ratio: f64,
    pub max_sweeps: usize,
    /// Stop once the largest coefficient change in a sweep is below this.
    pub tol: f64,
}

impl Default for LassoParams {
    fn default() -> Self {
        Self {
            lambda: None,
            lambda_ratio: 0.25,
            max_sweeps: 1000,
            tol: 1e-7,
        }
    }
}

/// Which importance measure feeds `W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Statistic {
    MarginalCorr,
    LassoCd(LassoParams),
}

impl Default for Statistic {
    fn default() -> Self {
        Statistic::MarginalCorr
    }
}

impl Statistic {
    pub fn kind(&self) -> StatisticKind {
        match self {
            Statistic::MarginalCorr => StatisticKind::MarginalCorr,
            Statistic::LassoCd(_) => StatisticKind::LassoCd,
        }
    }

    pub fn compute(&self, x: &DMatrix<f64>, xk: &DMatrix<f64>, y: &[f64]) -> Result<KnockoffStatistics> {
        match self {
            Statistic::MarginalCorr => statistic_marginal(x, xk, y),
            Statistic::LassoCd(params) => statistic_lasso(x, xk, y, params),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnockoffStatistics {
    pub w: Vec<f64>,
    pub method: StatisticKind,
    pub u: Vec<f64>,
    pub u_tilde: Vec<f64>,
    /// False when the lasso hit its sweep limit; the best iterate is kept.
    pub converged: bool,
}

impl KnockoffStatistics {
    fn from_importances(u: Vec<f64>, u_tilde: Vec<f64>, method: StatisticKind, converged: bool) -> Self {
        let w = u.iter().zip(&u_tilde).map(|(a, b)| a - b).collect();
        Self {
            w,
            method,
            u,
            u_tilde,
            converged,
        }
    }
}

fn check_shapes(x: &DMatrix<f64>, xk: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.shape() != xk.shape() || x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "x {:?}, knockoffs {:?}, response {}",
            x.shape(),
            xk.shape(),
            y.len()
        )));
    }
    Ok(())
}

fn check_response(y: &[f64]) -> Result<()> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if !(ss > 0.0) {
        return Err(Error::Data("response has zero variance".into()));
    }
    Ok(())
}

/// `U_j = |corr(x_j, y)|`, `U~_j = |corr(x~_j, y)|`.
pub fn statistic_marginal(x: &DMatrix<f64>, xk: &DMatrix<f64>, y: &[f64]) -> Result<KnockoffStatistics> {
    check_shapes(x, xk, y)?;
    check_response(y)?;
    let imp = |m: &DMatrix<f64>| -> Vec<f64> {
        m.column_iter()
            .map(|c| correlation(c.as_slice(), y).abs())
            .collect()
    };
    Ok(KnockoffStatistics::from_importances(
        imp(x),
        imp(xk),
        StatisticKind::MarginalCorr,
        true,
    ))
}

/// Lasso coefficient difference on the augmented design `[x, x~]`.
pub fn statistic_lasso(
    x: &DMatrix<f64>,
    xk: &DMatrix<f64>,
    y: &[f64],
    params: &LassoParams,
) -> Result<KnockoffStatistics> {
    check_shapes(x, xk, y)?;
    check_response(y)?;
    let (n, p) = x.shape();
    let mut design = DMatrix::zeros(n, 2 * p);
    design.columns_mut(0, p).copy_from(x);
    design.columns_mut(p, p).copy_from(xk);
    let mean = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - mean));
    let lambda = params
        .lambda
        .unwrap_or_else(|| params.lambda_ratio * lambda_max(&design, &yc));
    let fit = lasso_cd(&design, &yc, lambda, params.max_sweeps, params.tol)?;
    if !fit.converged {
        log::warn!(
            "lasso did not converge in {} sweeps (lambda {lambda:.4e})",
            params.max_sweeps
        );
    }
    let u = (0..p).map(|j| fit.beta[j].abs()).collect();
    let ut = (0..p).map(|j| fit.beta[j + p].abs()).collect();
    Ok(KnockoffStatistics::from_importances(
        u,
        ut,
        StatisticKind::LassoCd,
        fit.converged,
    ))
}

/// Smallest penalty with an all-zero solution: `max_j |a_j' y| / n`.
pub fn lambda_max(a: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n = a.nrows() as f64;
    a.column_iter()
        .map(|c| c.dot(y).abs() / n)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub beta: DVector<f64>,
    pub lambda: f64,
    pub sweeps: usize,
    pub converged: bool,
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for `(1/2n) ||y - A b||^2 + lambda ||b||_1`
/// (no intercept; center `y` first).
pub fn lasso_cd(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    max_sweeps: usize,
    tol: f64,
) -> Result<LassoFit> {
    let (n, m) = a.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows, response {}",
            y.len()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lasso penalty {lambda} must be >= 0")));
    }
    let nf = n as f64;
    let col_sq: Vec<f64> = a.column_iter().map(|c| c.norm_squared() / nf).collect();
    let mut beta = DVector::zeros(m);
    let mut resid = y.clone();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut max_delta: f64 = 0.0;
        for j in 0..m {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = a.column(j);
            let old = beta[j];
            let rho = col.dot(&resid) / nf + col_sq[j] * old;
            let new = soft_threshold(rho, lambda) / col_sq[j];
            let delta: f64 = new - old;
            if delta != 0.0 {
                resid.axpy(-delta, &col, 1.0);
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < tol {
            converged = true;
            break;
        }
    }
    Ok(LassoFit {
        beta,
        lambda,
        sweeps,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    
    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::rng_from(seed);
        DMatrix::from_fn(n, p, |_, _| crate::rng::std_normal(&mut r))
    }

    #[test]
    fn identical_knockoffs_give_zero_w() {
        let x = gaussian(50, 4, 1);
        let y: Vec<f64> = x.column(0).iter().map(|v| v * 2.0 + 0.1).collect();
        let st = statistic_marginal(&x, &x, &y).unwrap();
        assert!(st.w.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn marginal_detects_copied_column() {
        let n = 5000;
        let x = gaussian(n, 5, 2);
        let xk = gaussian(n, 5, 3);
        let y: Vec<f64> = x.column(0).iter().copied().collect();
        let st = statistic_marginal(&x, &xk, &y).unwrap();
        assert!(st.w[0] > 0.95);
        for &w in &st.w[1..] {
            assert!(w.abs() < 0.06);
        }
    }

    #[test]
    fn zero_variance_response_is_error() {
        let x = gaussian(10, 2, 4);
        assert!(statistic_marginal(&x, &x, &[1.0; 10]).is_err());
        assert!(statistic_lasso(&x, &x, &[1.0; 10], &LassoParams::default()).is_err());
    }

    #[test]
    fn lasso_matches_soft_threshold_on_orthonormal_design() {
        let n = 64;
        let qr = gaussian(n, 6, 5).qr();
        let a = qr.q() * (n as f64).sqrt();
        let mut r = rng::rng_from(6);
        let y = DVector::from_fn(n, |_, _| crate::rng::std_normal(&mut r));
        let lambda = 0.15;
        let fit = lasso_cd(&a, &y, lambda, 1000, 1e-12).unwrap();
        for j in 0..6 {
            let closed = soft_threshold(a.column(j).dot(&y) / n as f64, lambda);
            assert!((fit.beta[j] - closed).abs() < 1e-6);
        }
    }

    #[test]
    fn lasso_zero_above_lambda_max() {
        let x = gaussian(80, 3, 7);
        let xk = gaussian(80, 3, 8);
        let y: Vec<f64> = x.column(1).iter().map(|v| v + 0.5).collect();
        let mut design = DMatrix::zeros(80, 6);
        design.columns_mut(0, 3).copy_from(&x);
        design.columns_mut(3, 3).copy_from(&xk);
        let mean = y.iter().sum::<f64>() / 80.0;
        let yc = DVector::from_iterator(80, y.iter().map(|v| v - mean));
        let lmax = lambda_max(&design, &yc);
        let params = LassoParams {
            lambda: Some(lmax),
            ..Default::default()
        };
        let st = statistic_lasso(&x, &xk, &y, &params).unwrap();
        assert!(st.w.iter().all(|&w| w == 0.0));
        assert!(st.u.iter().chain(&st.u_tilde).all(|&u| u == 0.0));
    }

    #[test]
    fn lasso_reports_non_convergence() {
        let x = gaussian(40, 3, 9);
        let y: Vec<f64> = x.column(0).iter().copied().collect();
        let params = LassoParams {
            lambda: Some(1e-4),
            max_sweeps: 1,
            tol: 1e-15,
            ..Default::default()
        };
        let st = statistic_lasso(&x, &gaussian(40, 3, 10), &y, &params).unwrap();
        assert!(!st.converged);
        assert!(st.w.iter().all(|w| w.is_finite()));
    }
}
