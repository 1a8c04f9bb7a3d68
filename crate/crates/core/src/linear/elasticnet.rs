//! Elastic net by cyclic coordinate descent in covariance form.
//!
//! Minimises `½‖y − b − Xβ‖² + λ₁‖β‖₁ + (λ₂/2)‖β‖²` with an unpenalised
//! intercept `b`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ols::center;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetSettings {
    /// stop once no coefficient moves more than this in a sweep ...
    pub coef_tol: f64,
    /// ... and the stationarity conditions hold to this tolerance
    pub kkt_tol: f64,
    pub max_sweeps: usize,
}

impl Default for ElasticNetSettings {
    fn default() -> Self {
        ElasticNetSettings {
            coef_tol: 1e-6,
            kkt_tol: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetFit {
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// objective after each sweep, starting from β = 0
    pub objective_history: Vec<f64>,
}

impl ElasticNetFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        (x * DVector::from_column_slice(&self.coef)).add_scalar(self.intercept)
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Objective value with the intercept profiled out (centred data).
pub fn elasticnet_objective(xc: &DMatrix<f64>, yc: &DVector<f64>, beta: &DVector<f64>, l1: f64, l2: f64) -> f64 {
    let r = yc - xc * beta;
    0.5 * r.norm_squared() + l1 * beta.lp_norm(1) + 0.5 * l2 * beta.norm_squared()
}

/// Largest violation of the stationarity conditions at `coef`:
/// `|xⱼᵀr| ≤ λ₁` for zero coefficients and
/// `xⱼᵀr = λ₁ sign(βⱼ) + λ₂βⱼ` otherwise.
pub fn kkt_violation(x: &DMatrix<f64>, y: &DVector<f64>, fit: &ElasticNetFit) -> f64 {
    let (_, xc) = center(x);
    let yc = y.add_scalar(-y.mean());
    let beta = DVector::from_column_slice(&fit.coef);
    let r = &yc - &xc * &beta;
    let g = xc.transpose() * r;
    let mut worst = 0.0f64;
    for (j, b) in beta.iter().enumerate() {
        let v = if *b == 0.0 {
            (g[j].abs() - fit.lambda1).max(0.0)
        } else {
            (g[j] - fit.lambda1 * b.signum() - fit.lambda2 * b).abs()
        };
        worst = worst.max(v);
    }
    worst
}

pub fn elasticnet_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda1: f64,
    lambda2: f64,
    settings: &ElasticNetSettings,
) -> Result<ElasticNetFit> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(Error::Dimension(format!("x has {n} rows, y has {}", y.len())));
    }
    if n == 0 {
        return Err(Error::InsufficientData("elastic net needs rows".into()));
    }
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::Config("elastic-net penalties must be >= 0".into()));
    }
    let (xm, xc) = center(x);
    let ym = y.mean();
    let yc = y.add_scalar(-ym);
    // covariance updates: g = Xᵀr is kept in step with β through the Gram matrix
    let gram = xc.tr_mul(&xc);
    let xty = xc.tr_mul(&yc);
    let yy = yc.norm_squared();
    let objective = |beta: &DVector<f64>, g: &DVector<f64>| {
        // ‖r‖² = yᵀy − 2βᵀXᵀy + βᵀXᵀXβ and XᵀXβ = Xᵀy − g
        let rss = yy - 2.0 * beta.dot(&xty) + beta.dot(&(&xty - g));
        0.5 * rss.max(0.0) + lambda1 * beta.lp_norm(1) + 0.5 * lambda2 * beta.norm_squared()
    };

    let mut beta = DVector::<f64>::zeros(p);
    let mut g = xty.clone();
    let mut history = vec![0.5 * yy];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < settings.max_sweeps {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for j in 0..p {
            let denom = gram[(j, j)] + lambda2;
            if denom <= 0.0 {
                continue;
            }
            let old = beta[j];
            let rho = g[j] + gram[(j, j)] * old;
            let new = soft_threshold(rho, lambda1) / denom;
            if new != old {
                g.axpy(old - new, &gram.column(j), 1.0);
                beta[j] = new;
                max_change = max_change.max((new - old).abs());
            }
        }
        history.push(objective(&beta, &g));
        if max_change < settings.coef_tol {
            g = &xty - &gram * &beta;
            let kkt = beta
                .iter()
                .enumerate()
                .map(|(j, b)| {
                    if *b == 0.0 {
                        (g[j].abs() - lambda1).max(0.0)
                    } else {
                        (g[j] - lambda1 * b.signum() - lambda2 * b).abs()
                    }
                })
                .fold(0.0f64, f64::max);
            if kkt <= settings.kkt_tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!("elastic net did not converge in {} sweeps", settings.max_sweeps);
    }
    let intercept = ym - xm.dot(&beta);
    Ok(ElasticNetFit {
        coef: beta.as_slice().to_vec(),
        intercept,
        lambda1,
        lambda2,
        sweeps,
        converged,
        objective_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::ols_fit;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let beta = DVector::from_fn(p, |j, _| if j < 3 { 2.0 - j as f64 } else { 0.0 });
        let y = &x * beta + DVector::from_fn(n, |_, _| 0.1 * (rng.random::<f64>() - 0.5));
        (x, y)
    }

    #[test]
    fn no_penalty_matches_ols() {
        let (x, y) = problem(60, 5, 1);
        let en = elasticnet_fit(&x, &y, 0.0, 0.0, &ElasticNetSettings::default()).unwrap();
        let ols = ols_fit(&x, &y).unwrap();
        for (a, b) in en.coef.iter().zip(&ols.coef) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((en.intercept - ols.intercept).abs() < 1e-6);
    }

    #[test]
    fn full_shrinkage_threshold() {
        let (x, y) = problem(40, 6, 2);
        let (_, xc) = center(&x);
        let yc = y.add_scalar(-y.mean());
        let lmax = (xc.transpose() * yc).amax();
        let en = elasticnet_fit(&x, &y, lmax, 0.3, &ElasticNetSettings::default()).unwrap();
        assert!(en.coef.iter().all(|c| *c == 0.0));
        assert!((en.intercept - y.mean()).abs() < 1e-12);
        let en = elasticnet_fit(&x, &y, 0.99 * lmax, 0.0, &ElasticNetSettings::default()).unwrap();
        assert!(en.coef.iter().any(|c| *c != 0.0));
    }

    #[test]
    fn univariate_soft_threshold_closed_form() {
        // standardised single covariate, worked by hand: β = S(xᵀy, λ₁) / xᵀx
        let x = DMatrix::from_column_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
        let y = DVector::from_vec(vec![-2.0, 0.5, 0.0, 3.5]);
        let xty: f64 = x.column(0).dot(&y.add_scalar(-y.mean()));
        let xtx: f64 = x.column(0).norm_squared();
        for l1 in [0.0, 1.0, 4.0, 9.0, 20.0] {
            let en = elasticnet_fit(&x, &y, l1, 0.0, &ElasticNetSettings::default()).unwrap();
            let expect = xty.signum() * (xty.abs() - l1).max(0.0) / xtx;
            assert!((en.coef[0] - expect).abs() < 1e-12, "l1 {l1}");
        }
    }

    #[test]
    fn path_shrinks_l1_norm() {
        let (x, y) = problem(80, 8, 3);
        let mut last = f64::INFINITY;
        for l1 in crate::linear::log_grid(1e-3, 1e2, 9) {
            let en = elasticnet_fit(&x, &y, l1, 0.1, &ElasticNetSettings::default()).unwrap();
            let norm: f64 = en.coef.iter().map(|c| c.abs()).sum();
            assert!(norm <= last + 1e-9);
            last = norm;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn kkt_and_monotone_objective(seed in 0u64..10_000, l1 in 0.0f64..5.0, l2 in 0.0f64..5.0) {
            let (x, y) = problem(50, 10, seed);
            let en = elasticnet_fit(&x, &y, l1, l2, &ElasticNetSettings::default()).unwrap();
            prop_assert!(en.converged);
            prop_assert!(kkt_violation(&x, &y, &en) <= 1e-6);
            for w in en.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
            }
        }
    }
}
