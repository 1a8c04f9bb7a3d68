//! Occurrence × amount downscaling models.
//!
//! A day is dry when the classifier's rain probability falls below the
//! threshold; otherwise the amount regressor's output (floored at zero) is the
//! prediction. Both stages see the same feature map.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::elasticnet::{elasticnet_fit, ElasticNetFit, ElasticNetSettings};
use super::logistic::{l1_logistic_fit, logistic_fit, LogisticModel, LogisticSettings};
use super::ols::{ols_fit, OlsFit};
use super::svm::{svc_fit, svr_fit, LinearSvm, SvmSettings};
use super::HyperParams;
use crate::error::{Error, Result};
use crate::grid::Season;
use crate::preprocess::{
    pca_fit, pca_transform, standardize_apply, standardize_fit, PcaBasis, PcaConfig, Standardizer,
};

/// Fewest observed wet days a model will be trained on.
pub const MIN_WET_DAYS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Logistic,
    L1Logistic,
    Svc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressorKind {
    Ols,
    ElasticNet,
    Svr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Standardize,
    Pca(PcaConfig),
}

/// Fitted feature pipeline applied to raw design rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMap {
    Standardize(Standardizer),
    Pca(PcaBasis),
}

impl FeatureMap {
    pub fn fit(kind: FeatureKind, x: &DMatrix<f64>) -> Result<Self> {
        Ok(match kind {
            FeatureKind::Standardize => FeatureMap::Standardize(standardize_fit(x)?),
            FeatureKind::Pca(cfg) => FeatureMap::Pca(pca_fit(x, cfg)?),
        })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            FeatureMap::Standardize(s) => standardize_apply(x, s),
            FeatureMap::Pca(b) => pca_transform(x, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classifier {
    Logistic(LogisticModel),
    Svc(LinearSvm),
}

impl Classifier {
    pub fn rain_probability(&self, f: &DMatrix<f64>) -> DVector<f64> {
        match self {
            Classifier::Logistic(m) => m.predict_proba(f),
            Classifier::Svc(m) => m.predict_proba(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regressor {
    Ols(OlsFit),
    ElasticNet(ElasticNetFit),
    Svr(LinearSvm),
    /// coefficients supplied from elsewhere, e.g. one column of a multi-task fit
    Linear {
        coef: Vec<f64>,
        intercept: f64,
    },
}

impl Regressor {
    pub fn amount(&self, f: &DMatrix<f64>) -> DVector<f64> {
        match self {
            Regressor::Ols(m) => m.predict(f),
            Regressor::ElasticNet(m) => m.predict(f),
            Regressor::Svr(m) => m.decision(f),
            Regressor::Linear { coef, intercept } => (f * DVector::from_column_slice(coef)).add_scalar(*intercept),
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        match self {
            Regressor::Ols(m) => &m.coef,
            Regressor::ElasticNet(m) => &m.coef,
            Regressor::Svr(m) => &m.coef,
            Regressor::Linear { coef, .. } => coef,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsdModel {
    pub features: FeatureMap,
    pub classifier: Classifier,
    pub regressor: Regressor,
    pub hyper: HyperParams,
    pub season: Option<Season>,
}

impl AsdModel {
    pub fn rain_probability(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let f = self.features.apply(x)?;
        Ok(self.classifier.rain_probability(&f))
    }
}

/// Wet-day labels under the cutoff (mm/day).
pub fn wet_labels(y: &DVector<f64>, cutoff: f64) -> Vec<bool> {
    y.iter().map(|v| *v >= cutoff).collect()
}

pub fn fit_classifier(
    kind: ClassifierKind,
    f: &DMatrix<f64>,
    labels: &[bool],
    hyper: &HyperParams,
) -> Result<Classifier> {
    let ls = LogisticSettings::default();
    Ok(match kind {
        ClassifierKind::Logistic => Classifier::Logistic(logistic_fit(f, labels, &ls)?),
        ClassifierKind::L1Logistic => Classifier::Logistic(l1_logistic_fit(f, labels, hyper.clf_lambda1, &ls)?),
        ClassifierKind::Svc => Classifier::Svc(svc_fit(
            f,
            labels,
            &SvmSettings {
                c: hyper.c,
                ..Default::default()
            },
        )?),
    })
}

/// Fits the amount regressor. Elastic-net penalties in `hyper` are per
/// sample and scaled by the number of rows here.
pub fn fit_regressor(
    kind: RegressorKind,
    f: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &HyperParams,
) -> Result<Regressor> {
    Ok(match kind {
        RegressorKind::Ols => Regressor::Ols(ols_fit(f, y)?),
        RegressorKind::ElasticNet => {
            let n = f.nrows() as f64;
            Regressor::ElasticNet(elasticnet_fit(
                f,
                y,
                hyper.lambda1 * n,
                hyper.lambda2 * n,
                &ElasticNetSettings::default(),
            )?)
        }
        RegressorKind::Svr => Regressor::Svr(svr_fit(
            f,
            y,
            &SvmSettings {
                c: hyper.c,
                epsilon: hyper.epsilon,
                ..Default::default()
            },
        )?),
    })
}

/// Fits the feature map on all rows, the classifier on wet/dry labels and
/// the regressor on the observed wet days only.
pub fn asd_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    features: FeatureKind,
    classifier: ClassifierKind,
    regressor: RegressorKind,
    hyper: &HyperParams,
) -> Result<AsdModel> {
    hyper.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!("x has {} rows, y has {}", x.nrows(), y.len())));
    }
    let labels = wet_labels(y, hyper.wet_cutoff);
    let wet: Vec<usize> = (0..y.len()).filter(|&i| labels[i]).collect();
    if wet.len() < MIN_WET_DAYS {
        return Err(Error::InsufficientData(format!(
            "{} wet days in training, need at least {MIN_WET_DAYS}",
            wet.len()
        )));
    }
    let map = FeatureMap::fit(features, x)?;
    let f = map.apply(x)?;
    let clf = fit_classifier(classifier, &f, &labels, hyper)?;
    let fw = f.select_rows(&wet);
    let yw = DVector::from_iterator(wet.len(), wet.iter().map(|&i| y[i]));
    let reg = fit_regressor(regressor, &fw, &yw, hyper)?;
    Ok(AsdModel {
        features: map,
        classifier: clf,
        regressor: reg,
        hyper: *hyper,
        season: None,
    })
}

/// Combines a rain probability and an amount into a precipitation value.
pub fn gate(p_rain: f64, amount: f64, threshold: f64) -> f64 {
    if p_rain < threshold {
        0.0
    } else {
        amount.max(0.0)
    }
}

pub fn asd_predict(model: &AsdModel, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let f = model.features.apply(x)?;
    let p = model.classifier.rain_probability(&f);
    let a = model.regressor.amount(&f);
    Ok(DVector::from_iterator(
        p.len(),
        p.iter()
            .zip(a.iter())
            .map(|(p, a)| gate(*p, *a, model.hyper.rain_threshold)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = DVector::from_fn(n, |i, _| {
            let z = 2.0 * x[(i, 0)] + rng.random::<f64>() - 0.5;
            if z > 0.0 {
                3.0 + 4.0 * x[(i, 1)].abs() + z
            } else {
                0.2 * rng.random::<f64>()
            }
        });
        (x, y)
    }

    #[test]
    fn gate_follows_threshold() {
        assert_eq!(gate(0.3, 5.0, 0.5), 0.0);
        assert_eq!(gate(0.7, 5.0, 0.5), 5.0);
        assert_eq!(gate(0.7, -1.0, 0.5), 0.0);
        assert_eq!(gate(0.5, 2.0, 0.5), 2.0);
    }

    #[test]
    fn refuses_too_few_wet_days() {
        let x = DMatrix::from_fn(50, 2, |i, j| (i + j) as f64);
        let mut y = DVector::zeros(50);
        for i in 0..9 {
            y[i * 5] = 3.0;
        }
        let err = asd_fit(
            &x,
            &y,
            FeatureKind::Standardize,
            ClassifierKind::Logistic,
            RegressorKind::Ols,
            &HyperParams::default(),
        );
        assert!(matches!(err, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn dry_fraction_matches_classifier() {
        let (x, y) = data(400, 1);
        for (feat, clf, reg) in [
            (
                FeatureKind::Pca(PcaConfig::default()),
                ClassifierKind::Logistic,
                RegressorKind::Ols,
            ),
            (
                FeatureKind::Pca(PcaConfig::default()),
                ClassifierKind::Svc,
                RegressorKind::Svr,
            ),
            (
                FeatureKind::Standardize,
                ClassifierKind::L1Logistic,
                RegressorKind::ElasticNet,
            ),
        ] {
            let hyper = HyperParams {
                lambda1: 0.01,
                lambda2: 0.01,
                clf_lambda1: 0.001,
                ..Default::default()
            };
            let m = asd_fit(&x, &y, feat, clf, reg, &hyper).unwrap();
            let pred = asd_predict(&m, &x).unwrap();
            let p = m.rain_probability(&x).unwrap();
            assert!(pred.iter().all(|v| *v >= 0.0));
            let below = p.iter().filter(|p| **p < 0.5).count();
            let zero_by_gate = p
                .iter()
                .zip(pred.iter())
                .filter(|(p, _)| **p < 0.5)
                .all(|(_, v)| *v == 0.0);
            assert!(zero_by_gate);
            let dry = pred.iter().filter(|v| **v == 0.0).count();
            // amounts trained on wet days are far above zero, so no extra clipping
            assert_eq!(dry, below, "{clf:?}");
            let acc = p
                .iter()
                .zip(y.iter())
                .filter(|(p, y)| (**p >= 0.5) == (**y >= 1.0))
                .count() as f64
                / 400.0;
            assert!(acc > 0.85, "{clf:?} accuracy {acc}");
        }
    }

    #[test]
    fn model_serialises() {
        let (x, y) = data(200, 2);
        let m = asd_fit(
            &x,
            &y,
            FeatureKind::Pca(PcaConfig::default()),
            ClassifierKind::Logistic,
            RegressorKind::Ols,
            &HyperParams::default(),
        )
        .unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: AsdModel = serde_json::from_str(&s).unwrap();
        assert_eq!(asd_predict(&m, &x).unwrap(), asd_predict(&back, &x).unwrap());
    }
}
