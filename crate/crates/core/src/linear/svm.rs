//! Linear support vector regression and classification.
//!
//! Both primal problems are quadratic programs in `(w, b)` plus one slack
//! per margin constraint, with the bias left unpenalised. They are solved
//! by a primal-dual interior-point method (Mehrotra predictor-corrector);
//! each iteration reduces to a `(d+1) × (d+1)` positive definite system, so
//! the cost is linear in the number of samples.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::logistic::sigmoid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmSettings {
    pub c: f64,
    /// half-width of the insensitive tube (regression only)
    pub epsilon: f64,
    /// target complementarity gap and residual size
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmSettings {
    fn default() -> Self {
        SvmSettings {
            c: 1.0,
            epsilon: 0.1,
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub c: f64,
    pub epsilon: f64,
    pub converged: bool,
}

impl LinearSvm {
    pub fn decision(&self, x: &DMatrix<f64>) -> DVector<f64> {
        (x * DVector::from_column_slice(&self.coef)).add_scalar(self.intercept)
    }

    /// Rain probability for the classifier: the logistic transform of the
    /// decision value, so `P ≥ 0.5` exactly when the SVC votes wet.
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.decision(x).map(sigmoid)
    }
}

/// `C Σ max(0, |y − Xw − b| − ε) + ½‖w‖²`
pub fn svr_objective(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, b: f64, c: f64, eps: f64) -> f64 {
    let r = y - (x * w).add_scalar(b);
    c * r.iter().map(|r| (r.abs() - eps).max(0.0)).sum::<f64>() + 0.5 * w.norm_squared()
}

/// `C Σ max(0, 1 − yᵢ(xᵢw + b)) + ½‖w‖²` with `yᵢ ∈ {−1, +1}`
pub fn svc_objective(x: &DMatrix<f64>, labels: &[bool], w: &DVector<f64>, b: f64, c: f64) -> f64 {
    let f = (x * w).add_scalar(b);
    let hinge: f64 = f.iter().zip(labels).map(|(f, l)| (1.0 - sign(*l) * f).max(0.0)).sum();
    c * hinge + 0.5 * w.norm_squared()
}

fn sign(l: bool) -> f64 {
    if l {
        1.0
    } else {
        -1.0
    }
}

/// `min ½‖w‖² + C Σξⱼ` subject to `sⱼ(x_{iⱼ}·w + b) + ξⱼ ≥ tⱼ`, `ξ ≥ 0`.
struct MarginQp<'a> {
    x: &'a DMatrix<f64>,
    /// sample of each constraint
    rows: Vec<usize>,
    signs: Vec<f64>,
    targets: Vec<f64>,
    c: f64,
}

struct QpSolution {
    w: DVector<f64>,
    b: f64,
    converged: bool,
}

/// Largest step in `(0, 1]` keeping `x + step·dx` positive, damped.
fn max_step(x: &[f64], dx: &[f64]) -> f64 {
    let mut step = 1.0f64;
    for (v, d) in x.iter().zip(dx) {
        if *d < 0.0 {
            step = step.min(-v / d);
        }
    }
    step
}

impl MarginQp<'_> {
    /// `A z` for `z = (w, b)`.
    fn apply(&self, w: &DVector<f64>, b: f64) -> Vec<f64> {
        let u = self.x * w;
        self.rows
            .iter()
            .zip(&self.signs)
            .map(|(&i, s)| s * (u[i] + b))
            .collect()
    }

    /// `Aᵀ v`, split into the weight and bias parts.
    fn apply_t(&self, v: &[f64]) -> (DVector<f64>, f64) {
        let mut per_row = DVector::zeros(self.x.nrows());
        for ((&i, s), v) in self.rows.iter().zip(&self.signs).zip(v) {
            per_row[i] += s * v;
        }
        (self.x.tr_mul(&per_row), per_row.sum())
    }

    /// `P + Aᵀ diag(ω) A` with `P = diag(1, …, 1, 0)`.
    fn normal_matrix(&self, omega: &[f64]) -> DMatrix<f64> {
        let (n, d) = self.x.shape();
        let mut per_row = vec![0.0; n];
        for (&i, o) in self.rows.iter().zip(omega) {
            per_row[i] += o;
        }
        let xa = DMatrix::from_fn(n, d + 1, |i, j| if j < d { self.x[(i, j)] } else { 1.0 });
        let scaled = DMatrix::from_fn(n, d + 1, |i, j| xa[(i, j)] * per_row[i]);
        let mut m = xa.tr_mul(&scaled);
        for j in 0..d {
            m[(j, j)] += 1.0;
        }
        m
    }

    fn solve(&self, tol: f64, max_iter: usize) -> QpSolution {
        let d = self.x.ncols();
        let m = self.rows.len();
        let c = self.c;
        let mut w = DVector::<f64>::zeros(d);
        let mut b = 0.0;
        let mut xi = vec![1.0; m];
        let mut v = vec![1.0; m];
        let mut alpha = vec![0.5 * c; m];
        let mut lam = vec![0.5 * c; m];
        let scale = 1.0 + self.targets.iter().fold(0.0f64, |a, t| a.max(t.abs()));
        let mut converged = false;
        for _ in 0..max_iter {
            let az = self.apply(&w, b);
            let (atw, atb) = self.apply_t(&alpha);
            let r1w = &w - &atw;
            let r1b = -atb;
            let r2: Vec<f64> = (0..m).map(|j| c - alpha[j] - lam[j]).collect();
            let r3: Vec<f64> = (0..m).map(|j| az[j] + xi[j] - self.targets[j] - v[j]).collect();
            let mu = (0..m).map(|j| v[j] * alpha[j] + xi[j] * lam[j]).sum::<f64>() / (2 * m) as f64;
            let resid = r1w
                .amax()
                .max(r1b.abs())
                .max(r2.iter().fold(0.0f64, |a, r| a.max(r.abs())))
                .max(r3.iter().fold(0.0f64, |a, r| a.max(r.abs())));
            if mu <= tol * c.max(1.0) && resid <= tol * scale {
                converged = true;
                break;
            }
            let dm: Vec<f64> = (0..m).map(|j| xi[j] / lam[j] + v[j] / alpha[j]).collect();
            let omega: Vec<f64> = dm.iter().map(|x| 1.0 / x).collect();
            let Some(chol) = self.normal_matrix(&omega).cholesky() else {
                break;
            };
            // one Newton direction for given complementarity targets
            let direction = |rv: &[f64], rx: &[f64]| {
                let h: Vec<f64> = (0..m)
                    .map(|j| -r3[j] - (rx[j] - xi[j] * r2[j]) / lam[j] + rv[j] / alpha[j])
                    .collect();
                let hd: Vec<f64> = (0..m).map(|j| h[j] * omega[j]).collect();
                let (tw, tb) = self.apply_t(&hd);
                let mut rhs = DVector::zeros(d + 1);
                rhs.rows_mut(0, d).copy_from(&(tw - &r1w));
                rhs[d] = tb - r1b;
                let dz = chol.solve(&rhs);
                let dw = dz.rows(0, d).into_owned();
                let db = dz[d];
                let adz = self.apply(&dw, db);
                let da: Vec<f64> = (0..m).map(|j| (h[j] - adz[j]) * omega[j]).collect();
                let dxi: Vec<f64> = (0..m)
                    .map(|j| (rx[j] - xi[j] * r2[j] + xi[j] * da[j]) / lam[j])
                    .collect();
                let dl: Vec<f64> = (0..m).map(|j| r2[j] - da[j]).collect();
                let dv: Vec<f64> = (0..m).map(|j| (rv[j] - v[j] * da[j]) / alpha[j]).collect();
                (dw, db, dxi, da, dl, dv)
            };
            let step_of = |dxi: &[f64], da: &[f64], dl: &[f64], dv: &[f64]| {
                max_step(&xi, dxi)
                    .min(max_step(&alpha, da))
                    .min(max_step(&lam, dl))
                    .min(max_step(&v, dv))
            };
            // predictor
            let rv0: Vec<f64> = (0..m).map(|j| -v[j] * alpha[j]).collect();
            let rx0: Vec<f64> = (0..m).map(|j| -xi[j] * lam[j]).collect();
            let (_, _, pxi, pa, pl, pv) = direction(&rv0, &rx0);
            let sa = step_of(&pxi, &pa, &pl, &pv);
            let mu_aff = (0..m)
                .map(|j| (v[j] + sa * pv[j]) * (alpha[j] + sa * pa[j]) + (xi[j] + sa * pxi[j]) * (lam[j] + sa * pl[j]))
                .sum::<f64>()
                / (2 * m) as f64;
            let sigma = (mu_aff / mu).powi(3).min(1.0);
            // corrector
            let rv: Vec<f64> = (0..m).map(|j| sigma * mu - v[j] * alpha[j] - pv[j] * pa[j]).collect();
            let rx: Vec<f64> = (0..m).map(|j| sigma * mu - xi[j] * lam[j] - pxi[j] * pl[j]).collect();
            let (dw, db, dxi, da, dl, dv) = direction(&rv, &rx);
            let step = (0.995 * step_of(&dxi, &da, &dl, &dv)).min(1.0);
            w.axpy(step, &dw, 1.0);
            b += step * db;
            for j in 0..m {
                xi[j] += step * dxi[j];
                alpha[j] += step * da[j];
                lam[j] += step * dl[j];
                v[j] += step * dv[j];
            }
        }
        QpSolution { w, b, converged }
    }
}

fn check_settings(s: &SvmSettings) -> Result<()> {
    if s.c > 0.0 && s.epsilon >= 0.0 && s.tol > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid SVM settings {s:?}")))
    }
}

/// Linear ε-insensitive support vector regression.
pub fn svr_fit(x: &DMatrix<f64>, y: &DVector<f64>, settings: &SvmSettings) -> Result<LinearSvm> {
    check_settings(settings)?;
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!("x has {} rows, y has {}", x.nrows(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::InsufficientData("svr needs rows".into()));
    }
    let (n, c, eps) = (y.len(), settings.c, settings.epsilon);
    // f(xᵢ) ≥ yᵢ − ε − ξᵢ and −f(xᵢ) ≥ −yᵢ − ε − ξᵢ*
    let qp = MarginQp {
        x,
        rows: (0..n).chain(0..n).collect(),
        signs: (0..2 * n).map(|j| if j < n { 1.0 } else { -1.0 }).collect(),
        targets: (0..2 * n)
            .map(|j| if j < n { y[j] - eps } else { -y[j - n] - eps })
            .collect(),
        c,
    };
    let sol = qp.solve(settings.tol, settings.max_iter);
    if !sol.converged {
        log::warn!("svr interior point hit the iteration limit");
    }
    Ok(LinearSvm {
        coef: sol.w.as_slice().to_vec(),
        intercept: sol.b,
        c,
        epsilon: eps,
        converged: sol.converged,
    })
}

/// Linear hinge-loss support vector classifier.
pub fn svc_fit(x: &DMatrix<f64>, labels: &[bool], settings: &SvmSettings) -> Result<LinearSvm> {
    check_settings(settings)?;
    if x.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "x has {} rows, {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|l| **l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::InsufficientData("svc needs both classes".into()));
    }
    let c = settings.c;
    let qp = MarginQp {
        x,
        rows: (0..labels.len()).collect(),
        signs: labels.iter().map(|l| sign(*l)).collect(),
        targets: vec![1.0; labels.len()],
        c,
    };
    let sol = qp.solve(settings.tol, settings.max_iter);
    if !sol.converged {
        log::warn!("svc interior point hit the iteration limit");
    }
    Ok(LinearSvm {
        coef: sol.w.as_slice().to_vec(),
        intercept: sol.b,
        c,
        epsilon: 0.0,
        converged: sol.converged,
    })
}
