//! Multi-task sparse structure learning.
//!
//! Jointly estimates task weights `W` (`d × K`) and a sparse task precision
//! matrix `Ω` (`K × K`) by alternating minimisation of
//!
//! ```text
//! loss(W) − (K/2) log|Ω| + Tr(WΩWᵀ) + λ‖Ω‖₁ + γ‖W‖₁
//! ```
//!
//! where the loss is the summed squared error or the summed logistic loss.
//! Intercepts are never penalised or coupled.

mod omega;
mod wstep;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::WeightMatrix;
use crate::preprocess::matrix_serde;

use wstep::{logistic_loss, logistic_w_step, squared_w_step, SquaredProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// initial ADMM penalty
    pub rho: f64,
    pub primal_tol: f64,
    pub dual_tol: f64,
    pub max_admm_iter: usize,
    /// relative objective change that ends the alternation
    pub outer_tol: f64,
    pub max_outer_iter: usize,
    /// proximal-Newton steps allowed in a logistic weight step
    pub max_newton_iter: usize,
    /// rebalance ρ when one residual dominates the other tenfold
    pub adaptive_rho: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            rho: 1.0,
            primal_tol: 1e-4,
            dual_tol: 1e-4,
            max_admm_iter: 500,
            outer_tol: 1e-5,
            max_outer_iter: 50,
            max_newton_iter: 100,
            adaptive_rho: true,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho > 0.0
            && self.primal_tol > 0.0
            && self.dual_tol > 0.0
            && self.max_admm_iter > 0
            && self.outer_tol > 0.0
            && self.max_outer_iter > 0
            && self.max_newton_iter > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solver settings {self:?}")))
        }
    }
}

/// Convergence summary of one inner solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// final ADMM penalty
    pub rho: f64,
}

/// Symmetric positive-definite task precision matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionMatrix {
    #[serde(with = "matrix_serde")]
    pub omega: DMatrix<f64>,
}

impl PrecisionMatrix {
    pub fn identity(k: usize) -> Self {
        PrecisionMatrix {
            omega: DMatrix::identity(k, k),
        }
    }

    /// Checks symmetry (within 1e-10) and positive definiteness.
    pub fn new(omega: DMatrix<f64>) -> Result<Self> {
        if !omega.is_square() {
            return Err(Error::Dimension(format!("precision matrix is {:?}", omega.shape())));
        }
        let asym = (&omega - omega.transpose()).amax();
        if asym > 1e-10 {
            return Err(Error::InvalidInput(format!("precision matrix asymmetric by {asym:e}")));
        }
        if Self::min_eigenvalue_of(&omega) <= 0.0 {
            return Err(Error::NotPositiveDefinite("precision matrix".into()));
        }
        Ok(PrecisionMatrix { omega })
    }

    pub(crate) fn new_unchecked(omega: DMatrix<f64>) -> Self {
        PrecisionMatrix { omega }
    }

    pub(crate) fn min_eigenvalue_of(m: &DMatrix<f64>) -> f64 {
        if m.is_empty() {
            return f64::INFINITY;
        }
        SymmetricEigen::new(omega::symmetrize(m)).eigenvalues.min()
    }

    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        Self::min_eigenvalue_of(&self.omega)
    }

    pub fn log_det(&self) -> Result<f64> {
        let chol = self
            .omega
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("precision matrix".into()))?;
        Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MsslLoss {
    Squared,
    Logistic,
}

fn l1(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// Regularisation and coupling terms shared by every loss.
fn penalty(w: &DMatrix<f64>, omega: &PrecisionMatrix, lambda: f64, gamma: f64) -> Result<f64> {
    let k = omega.dim() as f64;
    Ok(-0.5 * k * omega.log_det()? + (w * &omega.omega).dot(w) + lambda * l1(&omega.omega) + gamma * l1(w))
}

/// `½Σₖ‖XWₖ − Yₖ‖² − (K/2) log|Ω| + Tr(WΩWᵀ) + λ‖Ω‖₁ + γ‖W‖₁`, with both
/// L1 norms taken over every entry (the diagonal of `Ω` included).
pub fn mssl_objective(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    w: &DMatrix<f64>,
    omega: &PrecisionMatrix,
    lambda: f64,
    gamma: f64,
) -> Result<f64> {
    check_shapes(x, y, w, omega)?;
    Ok(0.5 * (x * w - y).norm_squared() + penalty(w, omega, lambda, gamma)?)
}

fn check_shapes(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &DMatrix<f64>, omega: &PrecisionMatrix) -> Result<()> {
    if x.nrows() != y.nrows() || w.shape() != (x.ncols(), y.ncols()) || omega.dim() != y.ncols() {
        return Err(Error::Dimension(format!(
            "x {:?}, y {:?}, w {:?}, omega {}",
            x.shape(),
            y.shape(),
            w.shape(),
            omega.dim()
        )));
    }
    Ok(())
}

/// Weight step for squared loss and fixed `Ω`, without intercepts:
/// `min_W ½‖XW − Y‖² + Tr(WΩWᵀ) + γ‖W‖₁`.
pub fn w_step(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    omega: &PrecisionMatrix,
    gamma: f64,
    settings: &SolverSettings,
) -> Result<(WeightMatrix, StepInfo)> {
    settings.validate()?;
    let start = DMatrix::zeros(x.ncols(), y.ncols());
    check_shapes(x, y, &start, omega)?;
    let p = SquaredProblem::raw(x, y);
    let (w, info) = squared_w_step(&p, &omega.omega, gamma, settings, &start)?;
    Ok((
        WeightMatrix {
            weights: w,
            intercepts: DVector::zeros(y.ncols()),
        },
        info,
    ))
}

/// Precision step for fixed `W`: `min_Ω Tr(WᵀWΩ) − (K/2) log|Ω| + λ‖Ω‖₁`,
/// started from the identity.
pub fn omega_step(w: &DMatrix<f64>, lambda: f64, settings: &SolverSettings) -> Result<(PrecisionMatrix, StepInfo)> {
    settings.validate()?;
    omega::omega_admm(w, lambda, settings, &DMatrix::identity(w.ncols(), w.ncols()))
}

/// One outer iteration of the alternation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iteration: usize,
    /// objective after both half-steps
    pub objective: f64,
    pub w_step: StepInfo,
    pub omega_step: StepInfo,
    /// a half-step that would have raised the objective is discarded
    pub w_accepted: bool,
    pub omega_accepted: bool,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsslFit {
    pub weights: WeightMatrix,
    pub omega: PrecisionMatrix,
    pub lambda: f64,
    pub gamma: f64,
    pub loss: MsslLoss,
    pub settings: SolverSettings,
    /// objective at `W = 0`, `Ω = I`
    pub initial_objective: f64,
    pub log: Vec<OuterRecord>,
    pub converged: bool,
}

impl MsslFit {
    /// Task outputs: linear scores for squared loss, probabilities for
    /// logistic loss.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let z = self.weights.predict(x)?;
        Ok(match self.loss {
            MsslLoss::Squared => z,
            MsslLoss::Logistic => z.map(crate::linear::logistic::sigmoid),
        })
    }

    pub fn objectives(&self) -> Vec<f64> {
        std::iter::once(self.initial_objective)
            .chain(self.log.iter().map(|r| r.objective))
            .collect()
    }
}

/// The loss-specific half of the alternation.
trait WeightProblem {
    fn loss(&self, w: &DMatrix<f64>, b: &DVector<f64>) -> f64;
    fn step(
        &self,
        omega: &DMatrix<f64>,
        gamma: f64,
        settings: &SolverSettings,
        w: &DMatrix<f64>,
        b: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DVector<f64>, StepInfo)>;
}

impl WeightProblem for SquaredProblem {
    fn loss(&self, w: &DMatrix<f64>, _b: &DVector<f64>) -> f64 {
        SquaredProblem::loss(self, w)
    }

    fn step(
        &self,
        omega: &DMatrix<f64>,
        gamma: f64,
        settings: &SolverSettings,
        w: &DMatrix<f64>,
        b: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DVector<f64>, StepInfo)> {
        let (w, info) = squared_w_step(self, omega, gamma, settings, w)?;
        Ok((w, b.clone(), info))
    }
}

struct LogisticProblem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DMatrix<f64>,
}

impl WeightProblem for LogisticProblem<'_> {
    fn loss(&self, w: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
        logistic_loss(self.x, self.y, w, b)
    }

    fn step(
        &self,
        omega: &DMatrix<f64>,
        gamma: f64,
        settings: &SolverSettings,
        w: &DMatrix<f64>,
        b: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DVector<f64>, StepInfo)> {
        logistic_w_step(self.x, self.y, omega, gamma, settings, (w, b))
    }
}

struct Alternation {
    w: DMatrix<f64>,
    b: DVector<f64>,
    omega: PrecisionMatrix,
    initial: f64,
    log: Vec<OuterRecord>,
    converged: bool,
}

fn alternate(
    prob: &dyn WeightProblem,
    d: usize,
    b0: DVector<f64>,
    lambda: f64,
    gamma: f64,
    settings: &SolverSettings,
) -> Result<Alternation> {
    settings.validate()?;
    if !(lambda >= 0.0 && gamma >= 0.0) {
        return Err(Error::Config("lambda and gamma must be >= 0".into()));
    }
    let k = b0.len();
    let objective = |w: &DMatrix<f64>, b: &DVector<f64>, o: &PrecisionMatrix| -> Result<f64> {
        Ok(prob.loss(w, b) + penalty(w, o, lambda, gamma)?)
    };
    let mut w = DMatrix::zeros(d, k);
    let mut b = b0;
    let mut om = PrecisionMatrix::identity(k);
    let initial = objective(&w, &b, &om)?;
    let mut f = initial;
    let mut log = Vec::new();
    let mut converged = false;
    for it in 1..=settings.max_outer_iter {
        let f_prev = f;
        let (wn, bn, winfo) = prob.step(&om.omega, gamma, settings, &w, &b)?;
        let fw = objective(&wn, &bn, &om)?;
        let w_accepted = fw.is_finite() && fw <= f;
        if w_accepted {
            w = wn;
            b = bn;
            f = fw;
        }
        let (on, oinfo) = omega::omega_admm(&w, lambda, settings, &om.omega)?;
        let fo = if on.min_eigenvalue() > 0.0 {
            objective(&w, &b, &on).unwrap_or(f64::INFINITY)
        } else {
            f64::INFINITY
        };
        let omega_accepted = fo.is_finite() && fo <= f;
        if omega_accepted {
            om = on;
            f = fo;
        }
        let min_eig = om.min_eigenvalue();
        log::debug!("mssl outer {it}: objective {f:.6e}, min eig(Ω) {min_eig:.3e}");
        log.push(OuterRecord {
            iteration: it,
            objective: f,
            w_step: winfo,
            omega_step: oinfo,
            w_accepted,
            omega_accepted,
            min_eigenvalue: min_eig,
        });
        if (f_prev - f).abs() <= settings.outer_tol * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "mssl alternation stopped after {} outer iterations",
            settings.max_outer_iter
        );
    }
    Ok(Alternation {
        w,
        b,
        omega: om,
        initial,
        log,
        converged,
    })
}

/// Fits every task on every row of `x`. For logistic loss `y` must hold 0/1.
pub fn mssl_fit(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    gamma: f64,
    settings: &SolverSettings,
    loss: MsslLoss,
) -> Result<MsslFit> {
    let (n, d) = x.shape();
    let k = y.ncols();
    if y.nrows() != n || k == 0 || n < 2 {
        return Err(Error::Dimension(format!("x {:?}, y {:?}", x.shape(), y.shape())));
    }
    let (alt, intercepts) = match loss {
        MsslLoss::Squared => {
            let p = SquaredProblem::centred(x, y);
            let alt = alternate(&p, d, DVector::zeros(k), lambda, gamma, settings)?;
            let b = p.intercepts(&alt.w);
            (alt, b)
        }
        MsslLoss::Logistic => {
            if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::InvalidInput("logistic targets must be 0 or 1".into()));
            }
            let mut b0 = DVector::zeros(k);
            for (t, col) in y.column_iter().enumerate() {
                let p = col.mean();
                if p == 0.0 || p == 1.0 {
                    return Err(Error::InsufficientData(format!("task {t} has a single class")));
                }
                b0[t] = (p / (1.0 - p)).ln();
            }
            let alt = alternate(&LogisticProblem { x, y }, d, b0, lambda, gamma, settings)?;
            let b = alt.b.clone();
            (alt, b)
        }
    };
    Ok(MsslFit {
        weights: WeightMatrix {
            weights: alt.w,
            intercepts,
        },
        omega: alt.omega,
        lambda,
        gamma,
        loss,
        settings: *settings,
        initial_objective: alt.initial,
        log: alt.log,
        converged: alt.converged,
    })
}

/// Squared-loss fit where task `k` is trained only on `rows[k]`, e.g. the
/// wet days at that location.
pub fn mssl_fit_rows(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    rows: &[Vec<usize>],
    lambda: f64,
    gamma: f64,
    settings: &SolverSettings,
) -> Result<MsslFit> {
    if y.nrows() != x.nrows() {
        return Err(Error::Dimension(format!("x {:?}, y {:?}", x.shape(), y.shape())));
    }
    let p = SquaredProblem::per_task(x, y, rows)?;
    let alt = alternate(&p, x.ncols(), DVector::zeros(y.ncols()), lambda, gamma, settings)?;
    let intercepts = p.intercepts(&alt.w);
    Ok(MsslFit {
        weights: WeightMatrix {
            weights: alt.w,
            intercepts,
        },
        omega: alt.omega,
        lambda,
        gamma,
        loss: MsslLoss::Squared,
        settings: *settings,
        initial_objective: alt.initial,
        log: alt.log,
        converged: alt.converged,
    })
}
