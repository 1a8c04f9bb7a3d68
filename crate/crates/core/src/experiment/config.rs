//! Experiment configuration (JSON).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::cnn::TrainSettings;
use crate::error::{Error, Result};
use crate::grid::SynthConfig;
use crate::linear::{log_grid, HyperParams};
use crate::mssl::SolverSettings;
use crate::preprocess::PcaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "bcsd")]
    Bcsd,
    #[serde(rename = "pcaols")]
    PcaOls,
    #[serde(rename = "pcasvr")]
    PcaSvr,
    #[serde(rename = "elnet")]
    Elnet,
    #[serde(rename = "mssl")]
    Mssl,
    #[serde(rename = "bcsd-mssl")]
    BcsdMssl,
    #[serde(rename = "cnn")]
    Cnn,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Bcsd,
        Method::PcaOls,
        Method::PcaSvr,
        Method::Elnet,
        Method::Mssl,
        Method::BcsdMssl,
        Method::Cnn,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Bcsd => "bcsd",
            Method::PcaOls => "pcaols",
            Method::PcaSvr => "pcasvr",
            Method::Elnet => "elnet",
            Method::Mssl => "mssl",
            Method::BcsdMssl => "bcsd-mssl",
            Method::Cnn => "cnn",
        }
    }

    pub fn uses_bcsd(self) -> bool {
        matches!(self, Method::Bcsd | Method::BcsdMssl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.label()).collect();
                Error::Config(format!("unknown method '{s}' (expected one of {})", known.join(", ")))
            })
    }
}

/// Inclusive range of calendar years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearRange {
    pub first: i32,
    pub last: i32,
}

impl YearRange {
    pub fn new(first: i32, last: i32) -> Self {
        YearRange { first, last }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        (self.first..=self.last).contains(&date.year())
    }

    pub fn overlaps(&self, other: &YearRange) -> bool {
        self.first <= other.last && other.first <= self.last
    }
}

impl fmt::Display for YearRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.first, self.last)
    }
}

/// Candidate values searched by cross-validation. Each method searches only
/// the parameters it uses; a single value skips the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub clf_lambda1: Vec<f64>,
    pub c: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            lambda1: log_grid(1e-3, 1e1, 7),
            lambda2: log_grid(1e-3, 1e1, 7),
            clf_lambda1: log_grid(1e-3, 1e-1, 3),
            c: vec![1.0],
            epsilon: vec![0.1],
            lambda: vec![0.1],
            gamma: vec![0.01],
        }
    }
}

impl HyperGrid {
    fn validate(&self) -> Result<()> {
        let axes = [
            ("lambda1", &self.lambda1),
            ("lambda2", &self.lambda2),
            ("clf_lambda1", &self.clf_lambda1),
            ("c", &self.c),
            ("epsilon", &self.epsilon),
            ("lambda", &self.lambda),
            ("gamma", &self.gamma),
        ];
        for (name, v) in axes {
            if v.is_empty() {
                return Err(Error::Config(format!("grid '{name}' is empty")));
            }
        }
        Ok(())
    }

    /// Occurrence-classifier candidates around `base`.
    pub fn classifier_points(&self, method: Method, base: &HyperParams) -> Vec<HyperParams> {
        match method {
            Method::Elnet => self
                .clf_lambda1
                .iter()
                .map(|&v| HyperParams {
                    clf_lambda1: v,
                    ..*base
                })
                .collect(),
            Method::PcaSvr => self.c.iter().map(|&c| HyperParams { c, ..*base }).collect(),
            _ => vec![*base],
        }
    }

    /// Amount-regressor candidates around `base`.
    pub fn regressor_points(&self, method: Method, base: &HyperParams) -> Vec<HyperParams> {
        let mut out = Vec::new();
        match method {
            Method::Elnet => {
                for &l1 in &self.lambda1 {
                    for &l2 in &self.lambda2 {
                        out.push(HyperParams {
                            lambda1: l1,
                            lambda2: l2,
                            ..*base
                        });
                    }
                }
            }
            Method::PcaSvr => {
                for &c in &self.c {
                    for &epsilon in &self.epsilon {
                        out.push(HyperParams { c, epsilon, ..*base });
                    }
                }
            }
            Method::Mssl | Method::BcsdMssl => {
                for &lambda in &self.lambda {
                    for &gamma in &self.gamma {
                        out.push(HyperParams { lambda, gamma, ..*base });
                    }
                }
            }
            _ => out.push(*base),
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// dataset directory; defaults to `<out_dir>/data`
    pub data_dir: Option<PathBuf>,
    /// generator settings used by `synth`; its seed is replaced by `seed`
    pub synth: SynthConfig,
    pub method: Method,
    pub train_years: YearRange,
    pub test_years: YearRange,
    pub grid: HyperGrid,
    pub cv_folds: usize,
    pub pca: PcaConfig,
    /// day-of-year pooling half-width for BCSD
    pub bcsd_window: u32,
    pub solver: SolverSettings,
    /// network training; its seed is replaced by `seed`
    pub cnn: TrainSettings,
    pub rain_threshold: f64,
    pub wet_cutoff: f64,
    pub skill_bin_width: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: None,
            synth: SynthConfig::default(),
            method: Method::Elnet,
            train_years: YearRange::new(1995, 2008),
            test_years: YearRange::new(2009, 2014),
            grid: HyperGrid::default(),
            cv_folds: 5,
            pca: PcaConfig::default(),
            bcsd_window: 15,
            solver: SolverSettings::default(),
            cnn: TrainSettings::default(),
            rain_threshold: 0.5,
            wet_cutoff: 1.0,
            skill_bin_width: 1.0,
            seed: 42,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        for r in [&self.train_years, &self.test_years] {
            if r.first > r.last {
                return Err(Error::Config(format!("year range {r} is reversed")));
            }
        }
        if self.train_years.overlaps(&self.test_years) {
            return Err(Error::Config(format!(
                "train years {} and test years {} overlap",
                self.train_years, self.test_years
            )));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be >= 2".into()));
        }
        if self.skill_bin_width.is_nan() || self.skill_bin_width <= 0.0 {
            return Err(Error::Config("skill_bin_width must be positive".into()));
        }
        self.grid.validate()?;
        self.synth_config().validate()?;
        self.solver.validate()?;
        self.cnn.validate()?;
        self.base_hyper().validate()
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn cnn_settings(&self) -> TrainSettings {
        TrainSettings {
            seed: self.seed,
            ..self.cnn.clone()
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn models_dir(&self, method: Method) -> PathBuf {
        self.out_dir.join("models").join(method.label())
    }

    pub fn projection_path(&self, method: Method) -> PathBuf {
        self.out_dir
            .join("projections")
            .join(format!("{}.json", method.label()))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    /// Fixed hyperparameters: the first value of every grid axis plus the
    /// gating thresholds.
    pub fn base_hyper(&self) -> HyperParams {
        HyperParams {
            lambda1: self.grid.lambda1[0],
            lambda2: self.grid.lambda2[0],
            clf_lambda1: self.grid.clf_lambda1[0],
            c: self.grid.c[0],
            epsilon: self.grid.epsilon[0],
            lambda: self.grid.lambda[0],
            gamma: self.grid.gamma[0],
            rain_threshold: self.rain_threshold,
            wet_cutoff: self.wet_cutoff,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.label()));
        }
        assert!(matches!("krige".parse::<Method>(), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_are_valid_and_disjoint() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid.lambda1.len(), 7);
        let bad = ExperimentConfig {
            test_years: YearRange::new(2005, 2010),
            ..c.clone()
        };
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.synth.fine_lat = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"method": "bcsd-mssl", "seed": 7}"#).unwrap();
        assert_eq!(c.method, Method::BcsdMssl);
        assert_eq!(c.synth_config().seed, 7);
        assert_eq!(c.test_years, YearRange::new(2009, 2014));
    }

    #[test]
    fn grid_points_per_method() {
        let c = ExperimentConfig::default();
        let base = c.base_hyper();
        assert_eq!(c.grid.regressor_points(Method::Elnet, &base).len(), 49);
        assert_eq!(c.grid.regressor_points(Method::PcaOls, &base).len(), 1);
        assert_eq!(c.grid.classifier_points(Method::Elnet, &base).len(), 3);
    }
}
