use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub intercept: f64,
    /// the design was rank deficient and the minimum-norm solution was used
    pub rank_deficient: bool,
}

impl OlsFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let coef = DVector::from_column_slice(&self.coef);
        (x * coef).add_scalar(self.intercept)
    }
}

/// Column means of `x` and the centred copy.
pub(crate) fn center(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let means = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.mean()));
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (means, xc)
}

/// Least squares with an intercept, solved by Householder QR of the centred
/// design. Rank-deficient designs fall back to the SVD minimum-norm solution.
pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(Error::Dimension(format!("x has {n} rows, y has {}", y.len())));
    }
    if n == 0 {
        return Err(Error::InsufficientData("ols needs at least one row".into()));
    }
    let (xm, xc) = center(x);
    let ym = y.mean();
    let yc = y.add_scalar(-ym);

    let mut coef = None;
    if n > p && p > 0 {
        let qr = xc.clone().qr();
        let r = qr.r();
        let rmax = r.diagonal().amax();
        let full_rank = r
            .diagonal()
            .iter()
            .all(|d| d.abs() > 1e-10 * rmax.max(f64::MIN_POSITIVE));
        if full_rank {
            let qty = qr.q().transpose() * &yc;
            coef = r.solve_upper_triangular(&qty);
        }
    }
    let rank_deficient = coef.is_none() && p > 0;
    let coef = match coef {
        Some(c) => c,
        None if p == 0 => DVector::zeros(0),
        None => {
            log::warn!("ols: design is rank deficient, using the minimum-norm solution");
            let svd = xc.clone().svd(true, true);
            let tol = 1e-10 * svd.singular_values.max() * (n.max(p) as f64);
            svd.solve(&yc, tol).map_err(|e| Error::InvalidInput(e.to_string()))?
        }
    };
    let intercept = ym - xm.dot(&coef);
    Ok(OlsFit {
        coef: coef.as_slice().to_vec(),
        intercept,
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_line() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 6.0, 8.0]);
        let f = ols_fit(&x, &y).unwrap();
        assert!((f.coef[0] - 2.0).abs() < 1e-12);
        assert!(f.intercept.abs() < 1e-12);
    }

    #[test]
    fn orthogonal_target_gives_zero() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0, -1.0, -1.0]);
        let f = ols_fit(&x, &y).unwrap();
        assert!(f.coef[0].abs() < 1e-12);
    }

    #[test]
    fn matches_normal_equations_and_residuals_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(50, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = DVector::from_fn(50, |_, _| rng.random::<f64>());
        let f = ols_fit(&x, &y).unwrap();

        // independent oracle: normal equations on [1 | x] via Cholesky
        let mut xa = DMatrix::from_element(50, 4, 1.0);
        xa.view_mut((0, 1), (50, 3)).copy_from(&x);
        let beta = (xa.transpose() * &xa).cholesky().unwrap().solve(&(xa.transpose() * &y));
        assert!((beta[0] - f.intercept).abs() < 1e-8);
        for j in 0..3 {
            assert!((beta[j + 1] - f.coef[j]).abs() < 1e-8);
        }
        let resid = &y - f.predict(&x);
        assert!((xa.transpose() * resid).amax() < 1e-8);
    }

    #[test]
    fn rank_deficient_uses_min_norm() {
        let x = DMatrix::from_fn(6, 2, |i, _| i as f64);
        let y = DVector::from_fn(6, |i, _| 2.0 * i as f64);
        let f = ols_fit(&x, &y).unwrap();
        assert!(f.rank_deficient);
        assert!((f.coef[0] - 1.0).abs() < 1e-8 && (f.coef[1] - 1.0).abs() < 1e-8);
    }
}
