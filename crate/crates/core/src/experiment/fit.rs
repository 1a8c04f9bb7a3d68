//! Per-season fitting and prediction for every method.
//!
//! All fits see only the training-period stacks; row indices below are
//! positions inside those stacks.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::audit::LeakageAudit;
use super::config::{ExperimentConfig, Method};
use super::dataset::Dataset;
use crate::bcsd::{bcsd_downscale, bcsd_fit, bcsd_mssl_fit, bcsd_mssl_predict, BcsdModel, BcsdMsslModel};
use crate::cnn::{cnn_asd_fit, cnn_asd_predict, stack_inputs, CnnAsdModel};
use crate::error::{Error, Result};
use crate::grid::{doy_slot, GridStack, Season};
use crate::linear::{
    asd_predict, contiguous_folds, fit_classifier, fit_regressor, gate, grid_search_cv, log_loss, rmse, wet_labels,
    AsdModel, ClassifierKind, FeatureKind, FeatureMap, Fold, HyperParams, RegressorKind, MIN_WET_DAYS,
};
use crate::mssl::{mssl_fit, mssl_fit_rows, MsslFit, MsslLoss};
use crate::preprocess::{
    build_design_matrix, standardize_apply, standardize_fit, BoundingBox, Standardizer, TargetMatrix,
};

/// The stacks of one period with the derived matrices every method shares.
pub(crate) struct Period {
    pub data: Dataset,
    pub dates: Vec<NaiveDate>,
    /// covariate design, `time × d`
    pub x: DMatrix<f64>,
}

impl Period {
    pub fn new(full: &Dataset, first: i32, last: i32) -> Result<Self> {
        let data = Dataset {
            covariates: full
                .covariates
                .iter()
                .map(|c| c.year_range(first, last))
                .collect::<Result<_>>()?,
            fine_obs: full.fine_obs.year_range(first, last)?,
            model_precip: full.model_precip.year_range(first, last)?,
            truth: None,
        };
        let design = build_design_matrix(&data.covariates, &BoundingBox::everything())?;
        Ok(Period {
            dates: data.fine_obs.dates(),
            x: design.x,
            data,
        })
    }

    pub fn season_rows(&self, season: Season) -> Vec<usize> {
        (0..self.dates.len())
            .filter(|&t| Season::of(self.dates[t]) == season)
            .collect()
    }

    fn dates_of(&self, rows: &[usize]) -> Vec<NaiveDate> {
        rows.iter().map(|&r| self.dates[r]).collect()
    }

    /// BCSD output for the given days at every fine cell, `rows × cells`.
    fn bcsd_rows(&self, model: &BcsdModel, rows: &[usize], cells: &[usize]) -> Result<DMatrix<f64>> {
        let obs = &self.data.fine_obs;
        let mut out = DMatrix::zeros(rows.len(), cells.len());
        for (i, &t) in rows.iter().enumerate() {
            let day = self.data.model_precip.time_range(t, t + 1)?;
            let fine = bcsd_downscale(&day, &model.maps, &model.factors, obs.lats(), obs.lons())?;
            let tc = fine.as_time_by_cell();
            for (k, &c) in cells.iter().enumerate() {
                out[(i, k)] = f64::from(tc[[0, c]]);
            }
        }
        Ok(out)
    }
}

/// Day-of-year slots that fall in a season.
pub fn season_slots(season: Season) -> Vec<u32> {
    let start = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    let mut slots: Vec<u32> = start
        .iter_days()
        .take(366)
        .filter(|d| Season::of(*d) == season)
        .map(doy_slot)
        .collect();
    slots.dedup();
    slots
}

/// One location's occurrence × amount model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationModel {
    pub cell: usize,
    /// hyperparameters the classifier was fitted with
    pub classifier_hyper: HyperParams,
    pub model: AsdModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SeasonModel {
    Bcsd {
        bcsd: BcsdModel,
    },
    Asd {
        locations: Vec<LocationModel>,
    },
    Mssl {
        features: Standardizer,
        occurrence: MsslFit,
        amount: MsslFit,
        hyper: HyperParams,
    },
    BcsdMssl {
        bcsd: BcsdModel,
        error: BcsdMsslModel,
    },
    /// network parameters live in the bundle file named here
    Cnn {
        bundle: String,
        #[serde(skip)]
        model: Option<Box<CnnAsdModel>>,
    },
}

/// One persisted seasonal model and the fine cells it predicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonFile {
    pub method: Method,
    pub season: Season,
    /// lat-major fine-grid cells, in model output order
    pub cells: Vec<usize>,
    pub model: SeasonModel,
}

/// Grid-search outcome for one model stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub stage: String,
    pub cell: Option<usize>,
    pub chosen: HyperParams,
    /// mean validation score per grid point; empty when the grid had one point
    pub cv_scores: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonLog {
    pub season: Season,
    pub train_days: usize,
    pub selections: Vec<Selection>,
    /// `false` when an iterative solver hit its iteration cap
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver_converged: Option<bool>,
    /// final full-data training loss per network
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub final_loss: BTreeMap<String, f64>,
}

impl SeasonLog {
    fn new(season: Season, train_days: usize) -> Self {
        SeasonLog {
            season,
            train_days,
            selections: Vec::new(),
            solver_converged: None,
            final_loss: BTreeMap::new(),
        }
    }
}

fn selection(stage: &str, cell: Option<usize>, chosen: HyperParams, scores: &[f64]) -> Selection {
    let cv_scores = if scores.len() > 1 {
        scores.iter().map(|s| s.is_finite().then_some(*s)).collect()
    } else {
        Vec::new()
    };
    Selection {
        stage: stage.into(),
        cell,
        chosen,
        cv_scores,
    }
}

/// Shared, read-only inputs of the training stage.
pub(crate) struct TrainContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub period: &'a Period,
    pub targets: &'a TargetMatrix,
    pub audit: &'a LeakageAudit,
    /// all-slot BCSD fit on the whole training period
    pub bcsd: Option<&'a BcsdModel>,
    /// network inputs, `time × channel × lat × lon`
    pub images: Option<&'a Array4<f64>>,
}

pub(crate) fn fit_bcsd_all(period: &Period, window: u32, audit: &LeakageAudit) -> Result<BcsdModel> {
    audit.check("all", "bcsd-pools", &period.dates)?;
    bcsd_fit(&period.data.model_precip, &period.data.fine_obs, window)
}

pub(crate) fn network_inputs(covariates: &[GridStack]) -> Result<Array4<f64>> {
    stack_inputs(covariates)
}

fn fold_position(folds: &[Fold], fold: &Fold) -> usize {
    folds
        .iter()
        .position(|f| f.valid.first() == fold.valid.first())
        .unwrap_or(0)
}

fn dvec(m: &DMatrix<f64>, k: usize) -> DVector<f64> {
    DVector::from_iterator(m.nrows(), m.column(k).iter().copied())
}

fn select(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&r| v[r]))
}

fn pick<T: Copy>(v: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().map(|&r| v[r]).collect()
}

/// Scores of a failed fit that every grid point shares; a constant keeps
/// the ranking decided by the other folds.
const UNINFORMATIVE: f64 = 0.0;

fn single_class(labels: &[bool]) -> bool {
    labels.iter().all(|l| *l) || labels.iter().all(|l| !*l)
}

fn kinds(method: Method, cfg: &ExperimentConfig) -> (FeatureKind, ClassifierKind, RegressorKind) {
    match method {
        Method::PcaOls => (FeatureKind::Pca(cfg.pca), ClassifierKind::Logistic, RegressorKind::Ols),
        Method::PcaSvr => (FeatureKind::Pca(cfg.pca), ClassifierKind::Svc, RegressorKind::Svr),
        _ => (
            FeatureKind::Standardize,
            ClassifierKind::L1Logistic,
            RegressorKind::ElasticNet,
        ),
    }
}

impl TrainContext<'_> {
    pub fn fit_season(&self, method: Method, season: Season) -> Result<(SeasonFile, SeasonLog)> {
        let rows = self.period.season_rows(season);
        if rows.len() < self.cfg.cv_folds.max(2) {
            return Err(Error::InsufficientData(format!(
                "{} training days in {}",
                rows.len(),
                season.label()
            )));
        }
        let scope = season.label();
        self.audit.check(scope, "train-rows", &self.period.dates_of(&rows))?;
        let mut log = SeasonLog::new(season, rows.len());
        let model = match method {
            Method::Bcsd => SeasonModel::Bcsd {
                bcsd: self.bcsd_model()?.restrict(&season_slots(season))?,
            },
            Method::PcaOls | Method::PcaSvr | Method::Elnet => self.fit_asd(method, season, &rows, &mut log)?,
            Method::Mssl => self.fit_mssl(season, &rows, &mut log)?,
            Method::BcsdMssl => self.fit_bcsd_mssl(season, &rows, &mut log)?,
            Method::Cnn => self.fit_cnn(season, &rows, &mut log)?,
        };
        let file = SeasonFile {
            method,
            season,
            cells: self.targets.cells.clone(),
            model,
        };
        Ok((file, log))
    }

    fn bcsd_model(&self) -> Result<&BcsdModel> {
        self.bcsd
            .ok_or_else(|| Error::MissingModel("training-period BCSD fit".into()))
    }

    fn folds(&self, n: usize) -> Result<Vec<Fold>> {
        contiguous_folds(n, self.cfg.cv_folds)
    }

    fn fit_asd(&self, method: Method, season: Season, rows: &[usize], log: &mut SeasonLog) -> Result<SeasonModel> {
        let scope = season.label();
        let (feat, clf_kind, reg_kind) = kinds(method, self.cfg);
        let base = self.cfg.base_hyper();
        let clf_points = self.cfg.grid.classifier_points(method, &base);
        let reg_points = self.cfg.grid.regressor_points(method, &base);
        let x = self.period.x.select_rows(rows);
        let y = self.targets.y.select_rows(rows);
        let dates = self.period.dates_of(rows);
        let folds = self.folds(rows.len())?;
        // fold feature maps are fitted on fold training rows only
        let fold_features: Vec<(DMatrix<f64>, DMatrix<f64>)> = if clf_points.len() > 1 || reg_points.len() > 1 {
            folds
                .iter()
                .map(|f| {
                    let train_dates = pick(&dates, &f.train);
                    self.audit.check(scope, "cv-fold", &train_dates)?;
                    self.audit.check(scope, "feature-map", &train_dates)?;
                    let map = FeatureMap::fit(feat, &x.select_rows(&f.train))?;
                    Ok((
                        map.apply(&x.select_rows(&f.train))?,
                        map.apply(&x.select_rows(&f.valid))?,
                    ))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        self.audit.check(scope, "feature-map", &dates)?;
        let map = FeatureMap::fit(feat, &x)?;
        let f = map.apply(&x)?;
        let cutoff = self.cfg.wet_cutoff;

        let fitted: Vec<(LocationModel, Vec<Selection>)> = (0..y.ncols())
            .into_par_iter()
            .map(|k| {
                let cell = self.targets.cells[k];
                let yk = dvec(&y, k);
                let labels = wet_labels(&yk, cutoff);
                let clf = grid_search_cv(&clf_points, &folds, HyperParams::strength, |p, fold| {
                    let (ftr, fva) = &fold_features[fold_position(&folds, fold)];
                    let ltr = pick(&labels, &fold.train);
                    if single_class(&ltr) {
                        return Ok(UNINFORMATIVE);
                    }
                    let c = fit_classifier(clf_kind, ftr, &ltr, p)?;
                    Ok(log_loss(&c.rain_probability(fva), &pick(&labels, &fold.valid)))
                })?;
                let reg = grid_search_cv(&reg_points, &folds, HyperParams::strength, |p, fold| {
                    let (ftr, fva) = &fold_features[fold_position(&folds, fold)];
                    let wet_tr: Vec<usize> = (0..fold.train.len()).filter(|&i| labels[fold.train[i]]).collect();
                    let wet_va: Vec<usize> = (0..fold.valid.len()).filter(|&i| labels[fold.valid[i]]).collect();
                    if wet_tr.len() < MIN_WET_DAYS || wet_va.is_empty() {
                        return Ok(UNINFORMATIVE);
                    }
                    let ytr = select(&select(&yk, &fold.train), &wet_tr);
                    let r = fit_regressor(reg_kind, &ftr.select_rows(&wet_tr), &ytr, p)?;
                    let pred = r.amount(&fva.select_rows(&wet_va));
                    let obs = select(&select(&yk, &fold.valid), &wet_va);
                    Ok(rmse(pred.as_slice(), obs.as_slice()))
                })?;
                let wet: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
                if wet.len() < MIN_WET_DAYS {
                    return Err(Error::InsufficientData(format!(
                        "cell {cell} has {} wet training days in {}, need {MIN_WET_DAYS}",
                        wet.len(),
                        season.label()
                    )));
                }
                let classifier = fit_classifier(clf_kind, &f, &labels, &clf.best)?;
                let regressor = fit_regressor(reg_kind, &f.select_rows(&wet), &select(&yk, &wet), &reg.best)?;
                let model = AsdModel {
                    features: map.clone(),
                    classifier,
                    regressor,
                    hyper: reg.best,
                    season: Some(season),
                };
                let sel = vec![
                    selection("classifier", Some(cell), clf.best, &clf.scores),
                    selection("regressor", Some(cell), reg.best, &reg.scores),
                ];
                Ok((
                    LocationModel {
                        cell,
                        classifier_hyper: clf.best,
                        model,
                    },
                    sel,
                ))
            })
            .collect::<Result<_>>()?;
        let mut locations = Vec::with_capacity(fitted.len());
        for (loc, sel) in fitted {
            locations.push(loc);
            log.selections.extend(sel);
        }
        Ok(SeasonModel::Asd { locations })
    }

    fn fit_mssl(&self, season: Season, rows: &[usize], log: &mut SeasonLog) -> Result<SeasonModel> {
        let scope = season.label();
        let settings = &self.cfg.solver;
        let cutoff = self.cfg.wet_cutoff;
        let x = self.period.x.select_rows(rows);
        let y = self.targets.y.select_rows(rows);
        let dates = self.period.dates_of(rows);
        let wet_rows = |sub: &[usize]| -> Vec<Vec<usize>> {
            (0..y.ncols())
                .map(|k| (0..sub.len()).filter(|&i| y[(sub[i], k)] >= cutoff).collect())
                .collect()
        };
        let mean_len = |r: &[Vec<usize>]| r.iter().map(Vec::len).sum::<usize>() as f64 / r.len().max(1) as f64;
        let points = self.cfg.grid.regressor_points(Method::Mssl, &self.cfg.base_hyper());
        let folds = self.folds(rows.len())?;
        let search = grid_search_cv(&points, &folds, HyperParams::strength, |p, fold| {
            self.audit.check(scope, "cv-fold", &pick(&dates, &fold.train))?;
            let xtr = x.select_rows(&fold.train);
            let s = standardize_fit(&xtr)?;
            let wr = wet_rows(&fold.train);
            let fit = mssl_fit_rows(
                &standardize_apply(&xtr, &s)?,
                &y.select_rows(&fold.train),
                &wr,
                p.lambda,
                p.gamma * mean_len(&wr),
                settings,
            )?;
            let pred = fit.predict(&standardize_apply(&x.select_rows(&fold.valid), &s)?)?;
            let (mut pv, mut ov) = (Vec::new(), Vec::new());
            for (i, &r) in fold.valid.iter().enumerate() {
                for k in 0..y.ncols() {
                    if y[(r, k)] >= cutoff {
                        pv.push(pred[(i, k)]);
                        ov.push(y[(r, k)]);
                    }
                }
            }
            Ok(if pv.is_empty() { UNINFORMATIVE } else { rmse(&pv, &ov) })
        })?;
        let hyper = search.best;
        self.audit.check(scope, "feature-map", &dates)?;
        let features = standardize_fit(&x)?;
        let xs = standardize_apply(&x, &features)?;
        let labels = y.map(|v| f64::from(v >= cutoff));
        let n = rows.len() as f64;
        let occurrence = mssl_fit(
            &xs,
            &labels,
            hyper.lambda,
            hyper.gamma * n,
            settings,
            MsslLoss::Logistic,
        )?;
        let all: Vec<usize> = (0..rows.len()).collect();
        let wr = wet_rows(&all);
        if let Some(k) = wr.iter().position(|r| r.len() < MIN_WET_DAYS) {
            return Err(Error::InsufficientData(format!(
                "cell {} has {} wet training days in {}, need {MIN_WET_DAYS}",
                self.targets.cells[k],
                wr[k].len(),
                season.label()
            )));
        }
        let amount = mssl_fit_rows(&xs, &y, &wr, hyper.lambda, hyper.gamma * mean_len(&wr), settings)?;
        log.solver_converged = Some(occurrence.converged && amount.converged);
        log.selections.push(selection("mssl", None, hyper, &search.scores));
        Ok(SeasonModel::Mssl {
            features,
            occurrence,
            amount,
            hyper,
        })
    }

    fn fit_bcsd_mssl(&self, season: Season, rows: &[usize], log: &mut SeasonLog) -> Result<SeasonModel> {
        let scope = season.label();
        let settings = &self.cfg.solver;
        let full = self.bcsd_model()?;
        let cells = &self.targets.cells;
        let b = self.period.bcsd_rows(full, rows, cells)?;
        let o = self.targets.y.select_rows(rows);
        let x = self.period.x.select_rows(rows);
        let dates = self.period.dates_of(rows);
        let points = self.cfg.grid.regressor_points(Method::BcsdMssl, &self.cfg.base_hyper());
        let folds = self.folds(rows.len())?;
        let search = grid_search_cv(&points, &folds, HyperParams::strength, |p, fold| {
            self.audit.check(scope, "cv-fold", &pick(&dates, &fold.train))?;
            let m = bcsd_mssl_fit(
                &b.select_rows(&fold.train),
                &o.select_rows(&fold.train),
                &x.select_rows(&fold.train),
                p,
                settings,
            )?;
            let pred = bcsd_mssl_predict(&b.select_rows(&fold.valid), &x.select_rows(&fold.valid), &m)?;
            let obs = o.select_rows(&fold.valid);
            Ok(rmse(pred.as_slice(), obs.as_slice()))
        })?;
        self.audit.check(scope, "error-model", &dates)?;
        let error = bcsd_mssl_fit(&b, &o, &x, &search.best, settings)?;
        log.solver_converged = Some(error.mssl.converged);
        log.selections
            .push(selection("error-model", None, search.best, &search.scores));
        Ok(SeasonModel::BcsdMssl {
            bcsd: full.restrict(&season_slots(season))?,
            error,
        })
    }

    fn fit_cnn(&self, season: Season, rows: &[usize], log: &mut SeasonLog) -> Result<SeasonModel> {
        let images = self
            .images
            .ok_or_else(|| Error::MissingModel("network inputs".into()))?;
        self.audit
            .check(season.label(), "network", &self.period.dates_of(rows))?;
        let x = images.select(Axis(0), rows);
        let y = self.targets.y.select_rows(rows);
        let mut settings = self.cfg.cnn_settings();
        let offset = Season::ALL.iter().position(|s| *s == season).unwrap_or(0) as u64;
        settings.seed = settings.seed.wrapping_add(16 * offset);
        let model = cnn_asd_fit(&x, &y, &self.cfg.base_hyper(), &settings)?;
        for (name, curve) in [
            ("classifier", &model.classifier_curve),
            ("regressor", &model.regressor_curve),
        ] {
            if let Some(last) = curve.last() {
                log.final_loss.insert(name.into(), *last);
            }
        }
        Ok(SeasonModel::Cnn {
            bundle: format!("{}.cnn.json", season.label()),
            model: Some(Box::new(model)),
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Predictions for the given rows of a period, `rows × file.cells`.
pub(crate) fn predict_season(
    file: &SeasonFile,
    period: &Period,
    rows: &[usize],
    images: Option<&Array4<f64>>,
    rain_threshold: f64,
) -> Result<DMatrix<f64>> {
    let k = file.cells.len();
    if rows.is_empty() {
        return Ok(DMatrix::zeros(0, k));
    }
    let x = || period.x.select_rows(rows);
    match &file.model {
        SeasonModel::Bcsd { bcsd } => period.bcsd_rows(bcsd, rows, &file.cells),
        SeasonModel::Asd { locations } => {
            if locations.len() != k {
                return Err(Error::Dimension(format!(
                    "{} location models for {k} cells",
                    locations.len()
                )));
            }
            let xr = x();
            let mut out = DMatrix::zeros(rows.len(), k);
            for (j, loc) in locations.iter().enumerate() {
                out.set_column(j, &asd_predict(&loc.model, &xr)?);
            }
            Ok(out)
        }
        SeasonModel::Mssl {
            features,
            occurrence,
            amount,
            ..
        } => {
            let xs = standardize_apply(&x(), features)?;
            let logits = occurrence.predict(&xs)?;
            let a = amount.predict(&xs)?;
            Ok(logits.zip_map(&a, |z, a| gate(sigmoid(z), a, rain_threshold)))
        }
        SeasonModel::BcsdMssl { bcsd, error } => {
            let b = period.bcsd_rows(bcsd, rows, &file.cells)?;
            bcsd_mssl_predict(&b, &x(), error)
        }
        SeasonModel::Cnn { model, .. } => {
            let model = model
                .as_deref()
                .ok_or_else(|| Error::MissingModel("network parameters not loaded".into()))?;
            let images = images.ok_or_else(|| Error::MissingModel("network inputs".into()))?;
            cnn_asd_predict(model, &images.select(Axis(0), rows))
        }
    }
}
