//! Occurrence × amount downscaling with two networks.

use nalgebra::DMatrix;
use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::{forward, train, CnnParams, CnnSpec, Head, Loss, Mode, TrainSettings};
use crate::error::{Error, Result};
use crate::grid::GridStack;
use crate::linear::{gate, HyperParams, MIN_WET_DAYS};

/// Stacks aligned covariate grids into `(time, channel, lat, lon)`.
pub fn stack_inputs(covariates: &[GridStack]) -> Result<Array4<f64>> {
    let first = covariates
        .first()
        .ok_or_else(|| Error::InvalidInput("no covariate stacks".into()))?;
    for s in &covariates[1..] {
        first.check_time_aligned(s)?;
        first.check_grid_aligned(s)?;
    }
    let (h, w) = first.shape();
    let mut out = Array4::zeros((first.n_times(), covariates.len(), h, w));
    for (c, s) in covariates.iter().enumerate() {
        if s.values().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput(format!(
                "covariate {} has missing cells",
                s.variable()
            )));
        }
        out.index_axis_mut(Axis(1), c).assign(&s.values().mapv(f64::from));
    }
    Ok(out)
}

/// Per-channel standardization of network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl ChannelNorm {
    pub fn fit(x: &Array4<f64>) -> Result<Self> {
        if x.dim().0 == 0 {
            return Err(Error::InsufficientData("no samples to normalize".into()));
        }
        let mut means = Vec::new();
        let mut scales = Vec::new();
        for ch in x.axis_iter(Axis(1)) {
            let m = ch.mean().unwrap_or(0.0);
            let v = ch.mapv(|a| (a - m).powi(2)).mean().unwrap_or(0.0);
            means.push(m);
            scales.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Ok(ChannelNorm { means, scales })
    }

    pub fn apply(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        if x.dim().1 != self.means.len() {
            return Err(Error::Dimension(format!(
                "{} channels, normalizer has {}",
                x.dim().1,
                self.means.len()
            )));
        }
        let mut out = x.clone();
        for (c, mut ch) in out.axis_iter_mut(Axis(1)).enumerate() {
            ch.mapv_inplace(|a| (a - self.means[c]) / self.scales[c]);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnAsdModel {
    pub norm: ChannelNorm,
    pub classifier_spec: CnnSpec,
    pub regressor_spec: CnnSpec,
    pub classifier: CnnParams,
    pub regressor: CnnParams,
    pub hyper: HyperParams,
    pub classifier_curve: Vec<f64>,
    pub regressor_curve: Vec<f64>,
}

/// Trains a sigmoid occurrence network on wet labels and a linear amount
/// network on wet days only (masked squared error). `y` is `time × K`.
pub fn cnn_asd_fit(
    x: &Array4<f64>,
    y: &DMatrix<f64>,
    hyper: &HyperParams,
    settings: &TrainSettings,
) -> Result<CnnAsdModel> {
    hyper.validate()?;
    let (n, c, h, w) = x.dim();
    if y.nrows() != n {
        return Err(Error::Dimension(format!(
            "{n} input samples, {} target rows",
            y.nrows()
        )));
    }
    let k = y.ncols();
    let labels = Array2::from_shape_fn((n, k), |(t, j)| f64::from(y[(t, j)] >= hyper.wet_cutoff));
    let wet = labels.sum() as usize;
    if wet < MIN_WET_DAYS {
        return Err(Error::InsufficientData(format!(
            "{wet} wet location-days, need {MIN_WET_DAYS}"
        )));
    }
    let targets = Array2::from_shape_fn((n, k), |(t, j)| y[(t, j)]);
    let norm = ChannelNorm::fit(x)?;
    let xn = norm.apply(x)?;
    let classifier_spec = CnnSpec::new(h, w, c, k, Head::Sigmoid);
    let regressor_spec = CnnSpec::new(h, w, c, k, Head::Linear);
    let clf = train(&classifier_spec, &xn, &labels, None, settings, Loss::LogLoss)?;
    let reg_settings = TrainSettings {
        seed: settings.seed.wrapping_add(1),
        ..settings.clone()
    };
    let reg = train(&regressor_spec, &xn, &targets, Some(&labels), &reg_settings, Loss::Mse)?;
    Ok(CnnAsdModel {
        norm,
        classifier_spec,
        regressor_spec,
        classifier: clf.params,
        regressor: reg.params,
        hyper: *hyper,
        classifier_curve: clf.loss_curve,
        regressor_curve: reg.loss_curve,
    })
}

/// Gated predictions, `time × K`.
pub fn cnn_asd_predict(model: &CnnAsdModel, x: &Array4<f64>) -> Result<DMatrix<f64>> {
    let xn = model.norm.apply(x)?;
    let (p, _) = forward(&model.classifier_spec, &model.classifier, &xn, Mode::Inference)?;
    let (a, _) = forward(&model.regressor_spec, &model.regressor, &xn, Mode::Inference)?;
    let (n, k) = p.dim();
    Ok(DMatrix::from_fn(n, k, |t, j| {
        gate(p[[t, j]], a[[t, j]], model.hyper.rain_threshold)
    }))
}
