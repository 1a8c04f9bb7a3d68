//! The occurrence × amount (ASD) model family and its solvers.

pub mod asd;
pub mod cv;
pub mod elasticnet;
pub mod logistic;
pub mod ols;
pub mod svm;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use asd::{
    asd_fit, asd_predict, fit_classifier, fit_regressor, gate, wet_labels, AsdModel, Classifier, ClassifierKind,
    FeatureKind, FeatureMap, Regressor, RegressorKind, MIN_WET_DAYS,
};
pub use cv::{contiguous_folds, grid_search_cv, rmse, Fold, SearchResult};
pub use elasticnet::{elasticnet_fit, elasticnet_objective, kkt_violation, ElasticNetFit, ElasticNetSettings};
pub use logistic::{l1_logistic_fit, l1_logistic_kkt, log_loss, logistic_fit, LogisticModel, LogisticSettings};
pub use ols::{ols_fit, OlsFit};
pub use svm::{svc_fit, svc_objective, svr_fit, svr_objective, LinearSvm, SvmSettings};

/// Coefficients for `K` tasks over `d` covariates plus one intercept per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "WeightMatrixRepr", try_from = "WeightMatrixRepr")]
pub struct WeightMatrix {
    pub weights: DMatrix<f64>,
    pub intercepts: DVector<f64>,
}

impl WeightMatrix {
    pub fn zeros(d: usize, k: usize) -> Self {
        WeightMatrix {
            weights: DMatrix::zeros(d, k),
            intercepts: DVector::zeros(k),
        }
    }

    pub fn from_column(coef: DVector<f64>, intercept: f64) -> Self {
        let d = coef.len();
        WeightMatrix {
            weights: DMatrix::from_column_slice(d, 1, coef.as_slice()),
            intercepts: DVector::from_element(1, intercept),
        }
    }

    pub fn n_features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_tasks(&self) -> usize {
        self.weights.ncols()
    }

    /// `X W + 1 bᵀ`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.n_features() {
            return Err(Error::Dimension(format!(
                "design has {} columns, weights expect {}",
                x.ncols(),
                self.n_features()
            )));
        }
        let mut out = x * &self.weights;
        for (mut col, b) in out.column_iter_mut().zip(self.intercepts.iter()) {
            col.add_scalar_mut(*b);
        }
        Ok(out)
    }

    /// Nonzero pattern of the weights (intercepts excluded).
    pub fn support(&self) -> Vec<bool> {
        self.weights.iter().map(|w| *w != 0.0).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.intercepts.iter()).all(|v| v.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct WeightMatrixRepr {
    n_features: usize,
    n_tasks: usize,
    /// column-major, one task after another
    weights: Vec<f64>,
    intercepts: Vec<f64>,
}

impl From<WeightMatrix> for WeightMatrixRepr {
    fn from(w: WeightMatrix) -> Self {
        WeightMatrixRepr {
            n_features: w.weights.nrows(),
            n_tasks: w.weights.ncols(),
            weights: w.weights.as_slice().to_vec(),
            intercepts: w.intercepts.as_slice().to_vec(),
        }
    }
}

impl TryFrom<WeightMatrixRepr> for WeightMatrix {
    type Error = String;

    fn try_from(r: WeightMatrixRepr) -> std::result::Result<Self, String> {
        if r.weights.len() != r.n_features * r.n_tasks || r.intercepts.len() != r.n_tasks {
            return Err("weight matrix shape does not match its data".into());
        }
        Ok(WeightMatrix {
            weights: DMatrix::from_column_slice(r.n_features, r.n_tasks, &r.weights),
            intercepts: DVector::from_vec(r.intercepts),
        })
    }
}

/// Regularisation and decision constants shared by the model family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// L1 penalty of the elastic net, per sample
    pub lambda1: f64,
    /// L2 penalty of the elastic net, per sample
    pub lambda2: f64,
    /// L1 penalty of the L1-logistic occurrence classifier
    pub clf_lambda1: f64,
    /// SVM box constraint.
    pub c: f64,
    /// SVR insensitivity tube half-width.
    pub epsilon: f64,
    /// MSSL precision-matrix sparsity.
    pub lambda: f64,
    /// MSSL weight sparsity.
    pub gamma: f64,
    pub rain_threshold: f64,
    /// mm/day at or above which a day counts as wet
    pub wet_cutoff: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda1: 0.0,
            lambda2: 0.0,
            clf_lambda1: 0.0,
            c: 1.0,
            epsilon: 0.1,
            lambda: 0.1,
            gamma: 0.1,
            rain_threshold: 0.5,
            wet_cutoff: 1.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0
            && self.lambda2 >= 0.0
            && self.clf_lambda1 >= 0.0
            && self.c > 0.0
            && self.epsilon >= 0.0
            && self.lambda >= 0.0
            && self.gamma >= 0.0
            && (0.0..=1.0).contains(&self.rain_threshold)
            && self.wet_cutoff >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("hyperparameters out of range: {self:?}")))
        }
    }

    /// Total regularisation, used to break cross-validation ties toward the
    /// more strongly regularised grid point.
    pub fn strength(&self) -> f64 {
        self.lambda1 + self.lambda2 + self.clf_lambda1 + self.lambda + self.gamma + 1.0 / self.c
    }
}

/// `n` points spaced evenly in log10 between `lo` and `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_matrix_json_round_trip() {
        let w = WeightMatrix {
            weights: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]),
            intercepts: DVector::from_vec(vec![0.1, 0.2, 0.3]),
        };
        let s = serde_json::to_string(&w).unwrap();
        let back: WeightMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-3, 1e1, 7);
        assert_eq!(g.len(), 7);
        assert!((g[0] - 1e-3).abs() < 1e-15);
        assert!((g[6] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn hyper_validation() {
        assert!(HyperParams::default().validate().is_ok());
        let bad = HyperParams {
            c: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
