//! Weight step: `min_W loss(W) + Tr(WΩWᵀ) + γ‖W‖₁` for fixed `Ω`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use super::{SolverSettings, StepInfo};
use crate::error::{Error, Result};
use crate::linear::logistic::sigmoid;

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

enum Gram {
    /// one Gram matrix for every task, kept as its eigendecomposition
    Shared {
        vecs: DMatrix<f64>,
        vals: DVector<f64>,
        g: DMatrix<f64>,
    },
    /// a Gram matrix per task (tasks observed on different rows)
    PerTask(Vec<DMatrix<f64>>),
}

/// Squared loss `½ Σₖ ‖X̃ₖwₖ − ỹₖ‖²` reduced to sufficient statistics of the
/// centred data: `Gₖ = X̃ₖᵀX̃ₖ`, `cₖ = X̃ₖᵀỹₖ`, `‖ỹₖ‖²`, plus the means used
/// to recover intercepts.
pub(crate) struct SquaredProblem {
    gram: Gram,
    c: DMatrix<f64>,
    yy: DVector<f64>,
    pub x_means: DMatrix<f64>,
    pub y_means: DVector<f64>,
}

fn shared_gram(g: DMatrix<f64>) -> Gram {
    let eig = SymmetricEigen::new(g.clone());
    Gram::Shared {
        vecs: eig.eigenvectors,
        vals: eig.eigenvalues,
        g,
    }
}

impl SquaredProblem {
    /// Every task on every row, no centring (the literal weight-step problem).
    pub fn raw(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Self {
        let (d, k) = (x.ncols(), y.ncols());
        SquaredProblem {
            gram: shared_gram(x.tr_mul(x)),
            c: x.tr_mul(y),
            yy: DVector::from_iterator(k, y.column_iter().map(|c| c.norm_squared())),
            x_means: DMatrix::zeros(d, k),
            y_means: DVector::zeros(k),
        }
    }

    /// Every task on every row; data centred so intercepts drop out.
    pub fn centred(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Self {
        let (d, k) = (x.ncols(), y.ncols());
        let xm = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
        let ym = DVector::from_iterator(k, y.column_iter().map(|c| c.mean()));
        let mut xc = x.clone();
        for (j, mut col) in xc.column_iter_mut().enumerate() {
            col.add_scalar_mut(-xm[j]);
        }
        let mut yc = y.clone();
        for (j, mut col) in yc.column_iter_mut().enumerate() {
            col.add_scalar_mut(-ym[j]);
        }
        let mut p = Self::raw(&xc, &yc);
        p.x_means = DMatrix::from_fn(d, k, |j, _| xm[j]);
        p.y_means = ym;
        p
    }

    /// Task `k` only sees the rows listed in `rows[k]`; each task is centred
    /// on its own rows.
    pub fn per_task(x: &DMatrix<f64>, y: &DMatrix<f64>, rows: &[Vec<usize>]) -> Result<Self> {
        let (d, k) = (x.ncols(), y.ncols());
        if rows.len() != k {
            return Err(Error::Dimension(format!("{} row sets for {k} tasks", rows.len())));
        }
        let mut grams = Vec::with_capacity(k);
        let mut c = DMatrix::zeros(d, k);
        let mut yy = DVector::zeros(k);
        let mut x_means = DMatrix::zeros(d, k);
        let mut y_means = DVector::zeros(k);
        for (t, r) in rows.iter().enumerate() {
            if r.len() < 2 {
                return Err(Error::InsufficientData(format!("task {t} has {} rows", r.len())));
            }
            let mut xs = x.select_rows(r);
            let mut ys = DVector::from_iterator(r.len(), r.iter().map(|&i| y[(i, t)]));
            for j in 0..d {
                let m = xs.column(j).mean();
                xs.column_mut(j).add_scalar_mut(-m);
                x_means[(j, t)] = m;
            }
            let ym = ys.mean();
            ys.add_scalar_mut(-ym);
            y_means[t] = ym;
            c.set_column(t, &xs.tr_mul(&ys));
            yy[t] = ys.norm_squared();
            grams.push(xs.tr_mul(&xs));
        }
        Ok(SquaredProblem {
            gram: Gram::PerTask(grams),
            c,
            yy,
            x_means,
            y_means,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.c.ncols()
    }

    pub fn loss(&self, w: &DMatrix<f64>) -> f64 {
        let gw = match &self.gram {
            Gram::Shared { g, .. } => g * w,
            Gram::PerTask(gs) => {
                let mut out = DMatrix::zeros(w.nrows(), w.ncols());
                for (k, g) in gs.iter().enumerate() {
                    out.set_column(k, &(g * w.column(k)));
                }
                out
            }
        };
        0.5 * (w.dot(&gw) - 2.0 * w.dot(&self.c) + self.yy.sum())
    }

    pub fn intercepts(&self, w: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(self.n_tasks(), |k, _| {
            self.y_means[k] - self.x_means.column(k).dot(&w.column(k))
        })
    }
}

/// Solver for `Gₖwₖ + 2(WΩ)ₖ + ρwₖ = Rₖ` for every task at once.
enum Quadratic<'a> {
    Shared {
        vecs: &'a DMatrix<f64>,
        vals: &'a DVector<f64>,
        ovecs: DMatrix<f64>,
        ovals: DVector<f64>,
    },
    PerTask {
        grams: &'a [DMatrix<f64>],
        omega: &'a DMatrix<f64>,
        cached: Option<(f64, Cholesky<f64, Dyn>)>,
    },
}

impl<'a> Quadratic<'a> {
    fn new(p: &'a SquaredProblem, omega: &'a DMatrix<f64>) -> Self {
        match &p.gram {
            Gram::Shared { vecs, vals, .. } => {
                let e = SymmetricEigen::new(omega.clone());
                Quadratic::Shared {
                    vecs,
                    vals,
                    ovecs: e.eigenvectors,
                    ovals: e.eigenvalues,
                }
            }
            Gram::PerTask(grams) => Quadratic::PerTask {
                grams,
                omega,
                cached: None,
            },
        }
    }

    fn solve(&mut self, rho: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Quadratic::Shared {
                vecs,
                vals,
                ovecs,
                ovals,
            } => {
                let mut t = vecs.tr_mul(rhs) * &*ovecs;
                for k in 0..t.ncols() {
                    for j in 0..t.nrows() {
                        t[(j, k)] /= vals[j].max(0.0) + 2.0 * ovals[k] + rho;
                    }
                }
                Ok(&**vecs * t * ovecs.transpose())
            }
            Quadratic::PerTask { grams, omega, cached } => {
                let (d, k) = (rhs.nrows(), rhs.ncols());
                if cached.as_ref().map(|(r, _)| *r != rho).unwrap_or(true) {
                    let mut a = DMatrix::zeros(d * k, d * k);
                    for t in 0..k {
                        a.view_mut((t * d, t * d), (d, d)).copy_from(&grams[t]);
                        for s in 0..k {
                            for j in 0..d {
                                a[(t * d + j, s * d + j)] += 2.0 * omega[(t, s)];
                            }
                        }
                        for j in 0..d {
                            a[(t * d + j, t * d + j)] += rho;
                        }
                    }
                    let chol = a
                        .cholesky()
                        .ok_or_else(|| Error::NotPositiveDefinite("weight-step system".into()))?;
                    *cached = Some((rho, chol));
                }
                let chol = &cached.as_ref().expect("factor cached above").1;
                let b = DVector::from_column_slice(rhs.as_slice());
                let x = chol.solve(&b);
                Ok(DMatrix::from_column_slice(d, k, x.as_slice()))
            }
        }
    }
}

/// ADMM on the split `W = Z` with `Z` carrying the L1 term; `γ = 0` is
/// solved directly. The returned weights are `Z`, so they hold exact zeros.
pub(crate) fn squared_w_step(
    p: &SquaredProblem,
    omega: &DMatrix<f64>,
    gamma: f64,
    settings: &SolverSettings,
    start: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, StepInfo)> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::Config("gamma must be >= 0".into()));
    }
    let mut quad = Quadratic::new(p, omega);
    if gamma == 0.0 {
        let w = quad.solve(0.0, &p.c)?;
        return Ok((
            w,
            StepInfo {
                converged: true,
                ..Default::default()
            },
        ));
    }
    let mut rho = settings.rho;
    let mut z = start.clone();
    let mut u = DMatrix::<f64>::zeros(z.nrows(), z.ncols());
    let mut info = StepInfo::default();
    for it in 1..=settings.max_admm_iter {
        let rhs = &p.c + (&z - &u) * rho;
        let w = quad.solve(rho, &rhs)?;
        let t = gamma / rho;
        let z_old = std::mem::replace(&mut z, (&w + &u).map(|v| soft(v, t)));
        u += &w - &z;
        let r = (&w - &z).norm();
        let d = rho * (&z - &z_old).norm();
        info = StepInfo {
            iterations: it,
            converged: false,
            primal_residual: r,
            dual_residual: d,
            rho,
        };
        if r < settings.primal_tol && d * rho.recip().max(1.0) < settings.dual_tol {
            info.converged = true;
            break;
        }
        if settings.adaptive_rho {
            if r > 10.0 * d {
                rho *= 2.0;
                u /= 2.0;
            } else if d > 10.0 * r {
                rho /= 2.0;
                u *= 2.0;
            }
        }
    }
    Ok((z, info))
}

/// Summed logistic loss over every task and row.
pub(crate) fn logistic_loss(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    let mut z = x * w;
    let mut total = 0.0;
    for k in 0..z.ncols() {
        for i in 0..z.nrows() {
            let zi = z[(i, k)] + b[k];
            z[(i, k)] = zi;
            total += zi.max(0.0) + (-zi.abs()).exp().ln_1p() - y[(i, k)] * zi;
        }
    }
    total
}

fn smooth_objective(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    omega: &DMatrix<f64>,
) -> f64 {
    logistic_loss(x, y, w, b) + (w * omega).dot(w)
}

/// Proximal Newton for the logistic weight step. Each outer step minimises
/// the local quadratic model plus `γ‖W‖₁` by coordinate descent, using the
/// per-task Hessian blocks of `[X 1]` and the `2Ω ⊗ I` coupling, then
/// backtracks on the true objective.
pub(crate) fn logistic_w_step(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    gamma: f64,
    settings: &SolverSettings,
    start: (&DMatrix<f64>, &DVector<f64>),
) -> Result<(DMatrix<f64>, DVector<f64>, StepInfo)> {
    let (n, d) = x.shape();
    let k = y.ncols();
    let mut w = start.0.clone();
    let mut b = start.1.clone();
    let l1 = |w: &DMatrix<f64>| gamma * w.iter().map(|v| v.abs()).sum::<f64>();
    let mut f = smooth_objective(x, y, &w, &b, omega) + l1(&w);
    let mut info = StepInfo::default();
    let tol = settings.primal_tol;
    for it in 1..=settings.max_newton_iter {
        let z = x * &w;
        let mut r = DMatrix::zeros(n, k);
        let mut s = DMatrix::zeros(n, k);
        for t in 0..k {
            for i in 0..n {
                let p = sigmoid(z[(i, t)] + b[t]);
                r[(i, t)] = p - y[(i, t)];
                s[(i, t)] = (p * (1.0 - p)).max(1e-10);
            }
        }
        let g = x.tr_mul(&r) + (&w * omega) * 2.0;
        let gb = DVector::from_iterator(k, r.column_iter().map(|c| c.sum()));
        let mut kkt = gb.amax();
        for (gi, wi) in g.iter().zip(w.iter()) {
            let v = if *wi == 0.0 {
                (gi.abs() - gamma).max(0.0)
            } else {
                (gi + gamma * wi.signum()).abs()
            };
            kkt = kkt.max(v);
        }
        info.primal_residual = kkt;
        if kkt < tol {
            info.converged = true;
            break;
        }
        info.iterations = it;

        // Hessian blocks of [X 1] weighted by each task's curvature
        let hs: Vec<DMatrix<f64>> = (0..k)
            .map(|t| {
                let mut xs = DMatrix::zeros(n, d + 1);
                for i in 0..n {
                    let sq = s[(i, t)].sqrt();
                    for j in 0..d {
                        xs[(i, j)] = x[(i, j)] * sq;
                    }
                    xs[(i, d)] = sq;
                }
                xs.tr_mul(&xs)
            })
            .collect();
        let mut delta = DMatrix::<f64>::zeros(d + 1, k);
        for _ in 0..500 {
            let mut max_change = 0.0f64;
            for t in 0..k {
                let h = &hs[t];
                for j in 0..=d {
                    let mut hv = h.row(j).transpose().dot(&delta.column(t));
                    let mut hjj = h[(j, j)];
                    if j < d {
                        for l in 0..k {
                            hv += 2.0 * omega[(t, l)] * delta[(j, l)];
                        }
                        hjj += 2.0 * omega[(t, t)];
                    }
                    let old = delta[(j, t)];
                    let new = if j < d {
                        let a = g[(j, t)] + hv - hjj * old;
                        soft(hjj * w[(j, t)] - a, gamma) / hjj - w[(j, t)]
                    } else {
                        let a = gb[t] + hv - hjj * old;
                        -a / hjj
                    };
                    if new != old {
                        delta[(j, t)] = new;
                        max_change = max_change.max((new - old).abs() * hjj.sqrt());
                    }
                }
            }
            if max_change < 1e-10 {
                break;
            }
        }
        let dw = delta.rows(0, d).into_owned();
        let db = delta.row(d).transpose();
        let w_plus = &w + &dw;
        let decrease = g.dot(&dw) + gb.dot(&db) + l1(&w_plus) - l1(&w);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let wn = &w + &dw * step;
            let bn = &b + &db * step;
            let fnew = smooth_objective(x, y, &wn, &bn, omega) + l1(&wn);
            if fnew <= f + 1e-4 * step * decrease.min(0.0) {
                w = wn;
                b = bn;
                f = fnew;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((w, b, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, k: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() * 3.0);
        (x, y)
    }

    #[test]
    fn shared_and_per_task_solvers_agree() {
        let (x, y) = random(40, 4, 3, 1);
        let omega = DMatrix::from_row_slice(3, 3, &[2.0, -0.5, 0.0, -0.5, 1.5, 0.3, 0.0, 0.3, 1.0]);
        let shared = SquaredProblem::centred(&x, &y);
        let all: Vec<Vec<usize>> = vec![(0..40).collect(); 3];
        let per = SquaredProblem::per_task(&x, &y, &all).unwrap();
        let s = SolverSettings {
            primal_tol: 1e-10,
            dual_tol: 1e-10,
            max_admm_iter: 5000,
            ..Default::default()
        };
        let w0 = DMatrix::zeros(4, 3);
        let (a, _) = squared_w_step(&shared, &omega, 0.7, &s, &w0).unwrap();
        let (b, _) = squared_w_step(&per, &omega, 0.7, &s, &w0).unwrap();
        assert!((a - b).amax() < 1e-8);
        assert!((shared.loss(&w0) - per.loss(&w0)).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_direct_residuals() {
        let (x, y) = random(30, 3, 2, 2);
        let p = SquaredProblem::raw(&x, &y);
        let w = DMatrix::from_row_slice(3, 2, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        let direct = 0.5 * (&x * &w - &y).norm_squared();
        assert!((p.loss(&w) - direct).abs() < 1e-9);
    }

    #[test]
    fn logistic_step_satisfies_optimality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d, k) = (200, 5, 3);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = DMatrix::from_fn(n, k, |i, t| {
            let z = 2.0 * x[(i, t % d)] - x[(i, 4)];
            f64::from(u8::from(rng.random::<f64>() < sigmoid(z)))
        });
        let omega = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let s = SolverSettings::default();
        let (w, b, info) =
            logistic_w_step(&x, &y, &omega, 2.0, &s, (&DMatrix::zeros(d, k), &DVector::zeros(k))).unwrap();
        assert!(info.converged, "{info:?}");
        let base = smooth_objective(&x, &y, &w, &b, &omega) + 2.0 * w.iter().map(|v| v.abs()).sum::<f64>();
        // small perturbations never improve the objective
        for j in 0..d {
            for t in 0..k {
                for e in [-1e-4, 1e-4] {
                    let mut wp = w.clone();
                    wp[(j, t)] += e;
                    let f = smooth_objective(&x, &y, &wp, &b, &omega) + 2.0 * wp.iter().map(|v| v.abs()).sum::<f64>();
                    assert!(f >= base - 1e-9);
                }
            }
        }
    }
}
