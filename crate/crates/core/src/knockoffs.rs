//! Second-order (Gaussian) Model-X knockoffs.
//!
//! Given moments (mu, Sigma) and a diagonal `s`, a knockoff row is drawn from
//!
//! ```text
//! x~ | x  ~  N( x - diag(s) Sigma^-1 (x - mu),  2 diag(s) - diag(s) Sigma^-1 diag(s) )
//! ```
//!
//! which makes the joint covariance of (x, x~) equal to
//! `[[Sigma, Sigma - D], [Sigma - D, Sigma]]` with `D = diag(s)`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{column_means, min_eigenvalue, psd_cholesky, sample_covariance, spd_inverse, symmetrize};
use crate::rng;

pub const DEFAULT_SHRINKAGE: f64 = 0.1;
const SHRINKAGE_STEP: f64 = 0.1;
const MIN_EIGENVALUE: f64 = 1e-6;
/// Relative pivot band treated as zero when factoring `2D - D Sigma^-1 D`,
/// which is singular at the equicorrelated diagonal.
const COND_COV_TOL: f64 = 1e-6;
/// Rows sharing one RNG stream when sampling knockoffs.
pub const ROW_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Shrinkage actually applied, after any escalation.
    pub shrinkage_alpha: f64,
}

/// Mean and shrunk covariance `(1 - alpha) S + alpha I`.
///
/// `alpha` is raised in steps of 0.1 until the smallest eigenvalue of the
/// result is at least 1e-6.
pub fn estimate_moments(x: &DMatrix<f64>, alpha: f64) -> Result<MomentEstimate> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("shrinkage {alpha} outside [0, 1]")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in moment estimation input".into()));
    }
    let s = sample_covariance(x)?;
    let p = s.nrows();
    let mut step = 0u32;
    loop {
        let a = (alpha + SHRINKAGE_STEP * step as f64).min(1.0);
        let mut sigma = s.scale(1.0 - a);
        for i in 0..p {
            sigma[(i, i)] += a;
        }
        if a >= 1.0 || min_eigenvalue(&sigma) >= MIN_EIGENVALUE {
            if a > alpha {
                log::info!("covariance shrinkage raised from {alpha} to {a}");
            }
            return Ok(MomentEstimate {
                mu: column_means(x),
                sigma,
                shrinkage_alpha: a,
            });
        }
        step += 1;
    }
}

/// Equicorrelated knockoff diagonal: `s_j = min(2 lambda_min(C), 1) * Sigma_jj`
/// with `C` the correlation matrix of `Sigma`, shrunk by a factor `1 - eps`
/// while `2 Sigma - diag(s)` fails to be positive semidefinite.
pub fn solve_equi_s(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = sigma.nrows();
    if sigma.ncols() != p {
        return Err(Error::DimensionMismatch("covariance is not square".into()));
    }
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let diag: Vec<f64> = (0..p).map(|i| sigma[(i, i)]).collect();
    if diag.iter().any(|&d| d <= 0.0) {
        return Err(Error::Numerical("covariance has a non-positive diagonal".into()));
    }
    let mut corr = DMatrix::from_fn(p, p, |i, j| sigma[(i, j)] / (diag[i] * diag[j]).sqrt());
    symmetrize(&mut corr);
    let lambda = min_eigenvalue(&corr);
    if lambda <= 0.0 {
        return Err(Error::Numerical(format!(
            "covariance is not positive definite (min eigenvalue {lambda:.3e})"
        )));
    }
    let level = (2.0 * lambda).min(1.0);
    let mut s = DVector::from_iterator(p, diag.iter().map(|d| level * d));
    let mut eps = 1e-12;
    while !joint_is_psd(sigma, &s) {
        if eps > 1e-2 {
            return Err(Error::Numerical("could not find a PSD knockoff diagonal".into()));
        }
        s *= 1.0 - eps;
        eps *= 10.0;
    }
    Ok(s)
}

/// The joint covariance is PSD iff `diag(s) >= 0` and `2 Sigma - diag(s)` is PSD.
fn joint_is_psd(sigma: &DMatrix<f64>, s: &DVector<f64>) -> bool {
    let mut m = sigma.scale(2.0);
    for i in 0..s.len() {
        m[(i, i)] -= s[i];
    }
    s.iter().all(|&v| v >= 0.0) && min_eigenvalue(&m) >= 0.0
}

/// Joint covariance of (x, x~) implied by the model, for diagnostics.
pub fn joint_covariance(sigma: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let p = sigma.nrows();
    let mut g = DMatrix::zeros(2 * p, 2 * p);
    let mut off = sigma.clone();
    for i in 0..p {
        off[(i, i)] -= s[i];
    }
    g.view_mut((0, 0), (p, p)).copy_from(sigma);
    g.view_mut((p, p), (p, p)).copy_from(sigma);
    g.view_mut((0, p), (p, p)).copy_from(&off);
    g.view_mut((p, 0), (p, p)).copy_from(&off);
    g
}

#[derive(Debug, Clone)]
pub struct KnockoffModel {
    pub moments: MomentEstimate,
    pub s: DVector<f64>,
    /// `diag(s) Sigma^-1`.
    pub cond_mean_mult: DMatrix<f64>,
    /// Lower Cholesky factor of `2 diag(s) - diag(s) Sigma^-1 diag(s)`.
    pub cond_cov_chol: DMatrix<f64>,
}

pub fn build_knockoff_model(moments: MomentEstimate, s: DVector<f64>) -> Result<KnockoffModel> {
    let p = moments.sigma.nrows();
    if s.len() != p || moments.mu.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "knockoff diagonal has length {}, covariance is {p}x{p}",
            s.len()
        )));
    }
    if s.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput("knockoff diagonal must be finite and nonnegative".into()));
    }
    let sigma_inv = spd_inverse(&moments.sigma)?;
    let mult = DMatrix::from_fn(p, p, |i, j| s[i] * sigma_inv[(i, j)]);
    let mut cond_cov = DMatrix::from_fn(p, p, |i, j| -mult[(i, j)] * s[j]);
    for i in 0..p {
        cond_cov[(i, i)] += 2.0 * s[i];
    }
    symmetrize(&mut cond_cov);
    let chol = psd_cholesky(&cond_cov, COND_COV_TOL).map_err(|e| {
        Error::Numerical(format!("conditional knockoff covariance: {e}"))
    })?;
    Ok(KnockoffModel {
        moments,
        s,
        cond_mean_mult: mult,
        cond_cov_chol: chol,
    })
}

impl KnockoffModel {
    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn dump(&self) -> ModelDump {
        ModelDump {
            mu: self.moments.mu.iter().copied().collect(),
            sigma: self.moments.sigma.row_iter().map(|r| r.iter().copied().collect()).collect(),
            s: self.s.iter().copied().collect(),
            shrinkage_alpha: self.moments.shrinkage_alpha,
        }
    }
}

/// Debug view of a model's moments and diagonal.
#[derive(Debug, Serialize)]
pub struct ModelDump {
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    pub shrinkage_alpha: f64,
}

/// Draw one knockoff row per input row. Rows are split into blocks of
/// [`ROW_BLOCK`]; block `b` draws from stream `(seed, b)`.
pub fn sample_knockoffs(model: &KnockoffModel, x: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>> {
    let (n, p) = x.shape();
    if p != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "input has {p} columns, knockoff model has {}",
            model.dim()
        )));
    }
    let mut centered = x.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-model.moments.mu[j]);
    }
    let mut z = DMatrix::<f64>::zeros(n, p);
    for block in 0..n.div_ceil(ROW_BLOCK) {
        let mut rng = rng::stream(seed, &[block as u64]);
        for i in (block * ROW_BLOCK)..((block + 1) * ROW_BLOCK).min(n) {
            for j in 0..p {
                z[(i, j)] = StandardNormal.sample(&mut rng);
            }
        }
    }
    let mut out = x - centered * model.cond_mean_mult.transpose();
    out += z * model.cond_cov_chol.transpose();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;

    fn mvn(sigma: &DMatrix<f64>, n: usize, seed: u64) -> DMatrix<f64> {
        let l = sigma.clone().cholesky().unwrap().l();
        let mut r = rng::rng_from(seed);
        let z = DMatrix::from_fn(n, sigma.nrows(), |_, _| crate::rng::std_normal(&mut r));
        z * l.transpose()
    }

    fn exact_moments(sigma: DMatrix<f64>) -> MomentEstimate {
        MomentEstimate {
            mu: DVector::zeros(sigma.nrows()),
            sigma,
            shrinkage_alpha: 0.0,
        }
    }

    #[test]
    fn full_shrinkage_is_identity() {
        let x = mvn(&DMatrix::identity(3, 3), 40, 1);
        let m = estimate_moments(&x, 1.0).unwrap();
        assert_eq!(m.sigma, DMatrix::identity(3, 3));
    }

    #[test]
    fn collinear_pair_eigenvalue_bound() {
        let x = DMatrix::from_fn(30, 2, |i, _| (i as f64 * 0.37).sin());
        let z = crate::trace::standardize_matrix(&x).unwrap().data;
        let m = estimate_moments(&z, 0.1).unwrap();
        assert!(min_eigenvalue(&m.sigma) >= 0.1 - 1e-12);
        assert_eq!(m.shrinkage_alpha, 0.1);
    }

    #[test]
    fn singular_covariance_raises_shrinkage() {
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
        let m = estimate_moments(&x, 0.0).unwrap();
        assert!(m.shrinkage_alpha > 0.0);
        assert!(min_eigenvalue(&m.sigma) >= MIN_EIGENVALUE);
        let bad = DMatrix::from_row_slice(2, 1, &[0.0, f64::NAN]);
        assert!(estimate_moments(&bad, 0.1).is_err());
    }

    #[test]
    fn equi_s_examples() {
        let s = solve_equi_s(&DMatrix::identity(4, 4)).unwrap();
        assert_abs_diff_eq!(s, DVector::from_element(4, 1.0), epsilon = 1e-12);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.75, 0.75, 1.0]);
        let s = solve_equi_s(&sigma).unwrap();
        assert_abs_diff_eq!(s, DVector::from_element(2, 0.5), epsilon = 1e-9);
        let g = joint_covariance(&DMatrix::identity(2, 2), &DVector::from_element(2, 1.0));
        assert!(min_eigenvalue(&g) >= 0.0);
        assert!(solve_equi_s(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn zero_diagonal_reproduces_input() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let model = build_knockoff_model(exact_moments(sigma.clone()), DVector::zeros(2)).unwrap();
        assert_eq!(model.cond_mean_mult, DMatrix::zeros(2, 2));
        assert_eq!(model.cond_cov_chol, DMatrix::zeros(2, 2));
        let x = mvn(&sigma, 10, 3);
        assert_eq!(sample_knockoffs(&model, &x, 9).unwrap(), x);
    }

    #[test]
    fn identity_model_is_independent_noise() {
        let model =
            build_knockoff_model(exact_moments(DMatrix::identity(3, 3)), DVector::from_element(3, 1.0)).unwrap();
        // mean multiplier I and conditional covariance I: x~ = mu + z
        assert_abs_diff_eq!(model.cond_mean_mult, DMatrix::identity(3, 3), epsilon = 1e-12);
        assert_abs_diff_eq!(model.cond_cov_chol, DMatrix::identity(3, 3), epsilon = 1e-12);

        let n = 20_000;
        let x = mvn(&DMatrix::identity(3, 3), n, 5);
        let xk = sample_knockoffs(&model, &x, 11).unwrap();
        for j in 0..3 {
            let a: Vec<f64> = x.column(j).iter().copied().collect();
            let b: Vec<f64> = xk.column(j).iter().copied().collect();
            assert!(crate::linalg::correlation(&a, &b).abs() <= 0.03);
        }
    }

    #[test]
    fn correlated_pair_factors() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.75, 0.75, 1.0]);
        let s = solve_equi_s(&sigma).unwrap();
        let model = build_knockoff_model(exact_moments(sigma.clone()), s.clone()).unwrap();
        assert!(model.cond_cov_chol.iter().all(|v| v.is_finite()));
        let g = joint_covariance(&sigma, &s);
        assert!(min_eigenvalue(&g) >= -1e-8);
    }

    #[test]
    fn sampling_is_deterministic_and_checks_dims() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        let s = solve_equi_s(&sigma).unwrap();
        let model = build_knockoff_model(exact_moments(sigma.clone()), s).unwrap();
        let x = mvn(&sigma, 700, 2);
        let a = sample_knockoffs(&model, &x, 77).unwrap();
        let b = sample_knockoffs(&model, &x, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_knockoffs(&model, &x, 78).unwrap());
        assert!(sample_knockoffs(&model, &DMatrix::zeros(3, 3), 1).is_err());
    }

    #[test]
    fn second_order_exchangeability() {
        let p = 4;
        let sigma = DMatrix::from_fn(p, p, |i, j| 0.5f64.powi((i as i32 - j as i32).abs()));
        let s = solve_equi_s(&sigma).unwrap();
        let model = build_knockoff_model(exact_moments(sigma.clone()), s.clone()).unwrap();
        let n = 40_000;
        let x = mvn(&sigma, n, 21);
        let xk = sample_knockoffs(&model, &x, 22).unwrap();
        let tol = 5.0 / (n as f64).sqrt();
        let cov = |a: &DMatrix<f64>, b: &DMatrix<f64>, i: usize, j: usize| {
            a.column(i).dot(&b.column(j)) / (n - 1) as f64
        };
        for i in 0..p {
            for j in 0..p {
                assert!((cov(&xk, &xk, i, j) - sigma[(i, j)]).abs() <= tol);
                let target = sigma[(i, j)] - if i == j { s[i] } else { 0.0 };
                assert!((cov(&x, &xk, i, j) - target).abs() <= tol);
            }
        }
    }
}
