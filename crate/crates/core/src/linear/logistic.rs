//! Logistic occurrence classifiers.
//!
//! Both fits minimise the mean log-loss plus a tiny ridge on the weights
//! (never on the intercept). The L1 variant adds `λ₁‖w‖₁` and is solved by
//! proximal Newton with coordinate-descent inner solves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticSettings {
    pub ridge: f64,
    /// stop when the gradient (or KKT residual for L1) ∞-norm drops below this
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticSettings {
    fn default() -> Self {
        LogisticSettings {
            ridge: 1e-6,
            grad_tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub lambda1: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᶻ)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl LogisticModel {
    pub fn decision(&self, x: &DMatrix<f64>) -> DVector<f64> {
        (x * DVector::from_column_slice(&self.coef)).add_scalar(self.intercept)
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.decision(x).map(sigmoid)
    }
}

struct Problem<'a> {
    x: &'a DMatrix<f64>,
    y: DVector<f64>,
    ridge: f64,
    lambda1: f64,
}

impl Problem<'_> {
    fn n(&self) -> f64 {
        self.x.nrows() as f64
    }

    fn scores(&self, w: &DVector<f64>, b: f64) -> DVector<f64> {
        (self.x * w).add_scalar(b)
    }

    fn objective(&self, w: &DVector<f64>, b: f64) -> f64 {
        let z = self.scores(w, b);
        let loss: f64 = z.iter().zip(self.y.iter()).map(|(z, y)| softplus(*z) - y * z).sum();
        loss / self.n() + 0.5 * self.ridge * w.norm_squared() + self.lambda1 * w.lp_norm(1)
    }

    /// Gradient of the smooth part and the per-row curvature `p(1 − p)`.
    fn gradient(&self, w: &DVector<f64>, b: f64) -> (DVector<f64>, f64, DVector<f64>) {
        let p = self.scores(w, b).map(sigmoid);
        let r = &p - &self.y;
        let gw = self.x.tr_mul(&r) / self.n() + w * self.ridge;
        let gb = r.sum() / self.n();
        let s = p.map(|p| p * (1.0 - p));
        (gw, gb, s)
    }
}

fn check_inputs(x: &DMatrix<f64>, labels: &[bool]) -> Result<DVector<f64>> {
    if x.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "x has {} rows, {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    let wet = labels.iter().filter(|l| **l).count();
    if wet == 0 || wet == labels.len() {
        return Err(Error::InsufficientData("logistic fit needs both classes".into()));
    }
    Ok(DVector::from_iterator(
        labels.len(),
        labels.iter().map(|l| f64::from(u8::from(*l))),
    ))
}

fn prior_logit(y: &DVector<f64>) -> f64 {
    let p = y.mean();
    (p / (1.0 - p)).ln()
}

/// `[X 1]ᵀ diag(s) [X 1] / n` plus the ridge on the weight block; the
/// intercept occupies the last slot.
fn weighted_hessian(x: &DMatrix<f64>, s: &DVector<f64>, ridge: f64) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let mut xs = DMatrix::zeros(n, d + 1);
    for i in 0..n {
        let r = s[i].sqrt();
        for j in 0..d {
            xs[(i, j)] = x[(i, j)] * r;
        }
        xs[(i, d)] = r;
    }
    let mut h = xs.tr_mul(&xs) / n as f64;
    for j in 0..d {
        h[(j, j)] += ridge;
    }
    h
}

/// Ridge-stabilised maximum-likelihood logistic regression by damped Newton.
pub fn logistic_fit(x: &DMatrix<f64>, labels: &[bool], settings: &LogisticSettings) -> Result<LogisticModel> {
    let y = check_inputs(x, labels)?;
    let d = x.ncols();
    let prob = Problem {
        x,
        y,
        ridge: settings.ridge,
        lambda1: 0.0,
    };
    let mut w = DVector::zeros(d);
    let mut b = prior_logit(&prob.y);
    let mut f = prob.objective(&w, b);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        let (gw, gb, s) = prob.gradient(&w, b);
        if gw.amax().max(gb.abs()) < settings.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut h = weighted_hessian(x, &s, settings.ridge);
        h[(d, d)] += 1e-12;
        let mut g = DVector::zeros(d + 1);
        g.rows_mut(0, d).copy_from(&gw);
        g[d] = gb;
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone(),
        };
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let wn = &w - step.rows(0, d) * t;
            let bn = b - t * step[d];
            let fnew = prob.objective(&wn, bn);
            if fnew <= f - 1e-4 * t * slope {
                w = wn;
                b = bn;
                f = fnew;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no further decrease representable in floating point
            let (gw, gb, _) = prob.gradient(&w, b);
            converged = gw.amax().max(gb.abs()) < settings.grad_tol;
            break;
        }
    }
    if !converged {
        log::warn!("logistic regression stopped after {iterations} Newton steps without meeting tolerance");
    }
    Ok(LogisticModel {
        coef: w.as_slice().to_vec(),
        intercept: b,
        lambda1: 0.0,
        iterations,
        converged,
    })
}

/// Largest violation of the optimality conditions of the L1 problem.
fn kkt_residual(gw: &DVector<f64>, gb: f64, w: &DVector<f64>, lambda1: f64) -> f64 {
    let mut worst = gb.abs();
    for (g, wj) in gw.iter().zip(w.iter()) {
        let v = if *wj == 0.0 {
            (g.abs() - lambda1).max(0.0)
        } else {
            (g + lambda1 * wj.signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// L1-penalised logistic regression (mean log-loss + λ₁‖w‖₁).
pub fn l1_logistic_fit(
    x: &DMatrix<f64>,
    labels: &[bool],
    lambda1: f64,
    settings: &LogisticSettings,
) -> Result<LogisticModel> {
    if lambda1.is_nan() || lambda1 < 0.0 {
        return Err(Error::Config("lambda1 must be >= 0".into()));
    }
    let y = check_inputs(x, labels)?;
    let d = x.ncols();
    let prob = Problem {
        x,
        y,
        ridge: settings.ridge,
        lambda1,
    };
    let mut w = DVector::<f64>::zeros(d);
    let mut b = prior_logit(&prob.y);
    let mut f = prob.objective(&w, b);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        let (gw, gb, s) = prob.gradient(&w, b);
        if kkt_residual(&gw, gb, &w, lambda1) < settings.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let s = s.map(|v| v.max(1e-10));
        let h = weighted_hessian(x, &s, settings.ridge);

        // coordinate descent on the local quadratic model; `hq = H [dw; db]`
        let mut dw = DVector::<f64>::zeros(d);
        let mut db = 0.0;
        let mut hq = DVector::<f64>::zeros(d + 1);
        for _ in 0..1000 {
            let mut max_change = 0.0f64;
            for j in 0..d {
                let hjj = h[(j, j)];
                let a = hq[j] - hjj * dw[j];
                let z = hjj * w[j] - gw[j] - a;
                let v = if z > lambda1 {
                    (z - lambda1) / hjj
                } else if z < -lambda1 {
                    (z + lambda1) / hjj
                } else {
                    0.0
                };
                let new_d = v - w[j];
                let delta = new_d - dw[j];
                if delta != 0.0 {
                    hq.axpy(delta, &h.column(j), 1.0);
                    dw[j] = new_d;
                    max_change = max_change.max(delta.abs() * hjj.sqrt());
                }
            }
            let hb = h[(d, d)];
            let new_db = db - (gb + hq[d]) / hb;
            let delta = new_db - db;
            if delta != 0.0 {
                hq.axpy(delta, &h.column(d), 1.0);
                db = new_db;
                max_change = max_change.max(delta.abs() * hb.sqrt());
            }
            if max_change < 1e-12 {
                break;
            }
        }

        let wplus = &w + &dw;
        let decrease = gw.dot(&dw) + gb * db + lambda1 * (wplus.lp_norm(1) - w.lp_norm(1));
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let wn = &w + &dw * t;
            let bn = b + t * db;
            let fnew = prob.objective(&wn, bn);
            if fnew <= f + 1e-4 * t * decrease.min(0.0) {
                accepted = true;
                w = wn;
                b = bn;
                f = fnew;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            let (gw, gb, _) = prob.gradient(&w, b);
            converged = kkt_residual(&gw, gb, &w, lambda1) < settings.grad_tol;
            break;
        }
    }
    if !converged {
        log::warn!("L1-logistic regression stopped after {iterations} steps without meeting tolerance");
    }
    Ok(LogisticModel {
        coef: w.as_slice().to_vec(),
        intercept: b,
        lambda1,
        iterations,
        converged,
    })
}

/// Optimality residual of a fitted L1 model on its training data.
pub fn l1_logistic_kkt(x: &DMatrix<f64>, labels: &[bool], model: &LogisticModel, ridge: f64) -> Result<f64> {
    let y = check_inputs(x, labels)?;
    let prob = Problem {
        x,
        y,
        ridge,
        lambda1: model.lambda1,
    };
    let w = DVector::from_column_slice(&model.coef);
    let (gw, gb, _) = prob.gradient(&w, model.intercept);
    Ok(kkt_residual(&gw, gb, &w, model.lambda1))
}

/// Mean log-loss of probabilities against labels, with probabilities clamped
/// away from 0 and 1.
pub fn log_loss(prob: &DVector<f64>, labels: &[bool]) -> f64 {
    let eps = 1e-15;
    let total: f64 = prob
        .iter()
        .zip(labels)
        .map(|(p, l)| {
            let p = p.clamp(eps, 1.0 - eps);
            if *l {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let labels = (0..n)
            .map(|i| {
                let z = 1.5 * x[(i, 0)] - x[(i, 1 % d)] + 0.2;
                rng.random::<f64>() < sigmoid(z)
            })
            .collect();
        (x, labels)
    }

    #[test]
    fn separable_toy_set_is_classified_perfectly() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let labels = [false, false, false, true, true, true];
        let m = logistic_fit(&x, &labels, &LogisticSettings::default()).unwrap();
        let p = m.predict_proba(&x);
        for (pi, l) in p.iter().zip(labels) {
            assert_eq!(*pi >= 0.5, l);
        }
    }

    #[test]
    fn uninformative_features_give_the_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 2000;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() - 0.5);
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.3).collect();
        let prior = labels.iter().filter(|l| **l).count() as f64 / n as f64;
        let m = logistic_fit(&x, &labels, &LogisticSettings::default()).unwrap();
        let p = m.predict_proba(&x);
        assert!(p.iter().all(|pi| (pi - prior).abs() < 0.02));
    }

    #[test]
    fn flipping_data_complements_probabilities() {
        let (x, labels) = noisy(300, 3, 9);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = logistic_fit(&x, &labels, &LogisticSettings::default()).unwrap();
        let b = logistic_fit(&(-&x), &flipped, &LogisticSettings::default()).unwrap();
        let pa = a.predict_proba(&x);
        let pb = b.predict_proba(&(-&x));
        for (u, v) in pa.iter().zip(pb.iter()) {
            assert!((u + v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let x = DMatrix::from_element(4, 1, 1.0);
        assert!(matches!(
            logistic_fit(&x, &[true; 4], &LogisticSettings::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn gradient_vanishes_at_solution() {
        let (x, labels) = noisy(400, 4, 2);
        let m = logistic_fit(&x, &labels, &LogisticSettings::default()).unwrap();
        assert!(m.converged);
        let y = check_inputs(&x, &labels).unwrap();
        let prob = Problem {
            x: &x,
            y,
            ridge: 1e-6,
            lambda1: 0.0,
        };
        let (gw, gb, _) = prob.gradient(&DVector::from_column_slice(&m.coef), m.intercept);
        assert!(gw.amax() < 1e-6 && gb.abs() < 1e-6);
    }

    #[test]
    fn l1_without_penalty_matches_newton() {
        let (x, labels) = noisy(400, 5, 3);
        let a = logistic_fit(&x, &labels, &LogisticSettings::default()).unwrap();
        let b = l1_logistic_fit(&x, &labels, 0.0, &LogisticSettings::default()).unwrap();
        for (u, v) in a.coef.iter().zip(&b.coef) {
            assert!((u - v).abs() < 1e-4);
        }
        assert!((a.intercept - b.intercept).abs() < 1e-4);
    }

    #[test]
    fn large_penalty_leaves_intercept_only() {
        let (x, labels) = noisy(300, 4, 4);
        let m = l1_logistic_fit(&x, &labels, 10.0, &LogisticSettings::default()).unwrap();
        assert!(m.coef.iter().all(|c| *c == 0.0));
        let prior = labels.iter().filter(|l| **l).count() as f64 / 300.0;
        assert!((sigmoid(m.intercept) - prior).abs() < 1e-6);
    }

    #[test]
    fn l1_recovers_sparse_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, d) = (400, 20);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let labels: Vec<bool> = (0..n).map(|i| 2.0 * x[(i, 3)] - 1.5 * x[(i, 11)] > 0.0).collect();
        let m = l1_logistic_fit(&x, &labels, 0.01, &LogisticSettings::default()).unwrap();
        assert!(m.coef[3] > 0.0 && m.coef[11] < 0.0);
        assert!(l1_logistic_kkt(&x, &labels, &m, 1e-6).unwrap() <= 1e-4);
    }

    #[test]
    fn log_loss_of_perfect_prediction_is_small() {
        let p = DVector::from_vec(vec![1.0, 0.0]);
        assert!(log_loss(&p, &[true, false]) < 1e-12);
        let half = DVector::from_vec(vec![0.5, 0.5]);
        assert!((log_loss(&half, &[true, false]) - 2f64.ln()).abs() < 1e-15);
    }
}
