//! Bias correction and spatial disaggregation.
//!
//! Coarse model precipitation is quantile-mapped onto the observed
//! distribution for its day of year, bilinearly interpolated to the fine
//! grid, and multiplied by a day-of-year climatology ratio. The optional
//! error-correction stage fits a multi-task model to the residual errors of
//! that output and subtracts its predictions.

mod quantile;
mod scaling;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bilinear_interpolate, upscale_block_mean, GridStack};
use crate::linear::HyperParams;
use crate::mssl::{mssl_fit, MsslFit, MsslLoss, SolverSettings};
use crate::preprocess::{standardize_apply, standardize_fit, Standardizer};

pub use quantile::{
    all_slots, apply_bias_correction, fit_quantile_maps, fit_quantile_maps_for, ks_distance, min_pool_len, QuantileMap,
    QuantileMapSet,
};
pub use scaling::{apply_scaling, fit_scaling_factors, ScalingFactorSet, EPS_CLIM};

/// Pooling half-width in days.
pub const DEFAULT_WINDOW: u32 = 15;

fn same_coords(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
}

/// Brings fine observations onto the model grid: block means when the grids
/// nest exactly, bilinear interpolation otherwise.
pub fn remap_to_model_grid(obs_fine: &GridStack, model: &GridStack) -> Result<GridStack> {
    let (fl, fo) = obs_fine.shape();
    let (ml, mo) = model.shape();
    if fl % ml == 0 && fo % mo == 0 {
        let up = upscale_block_mean(obs_fine, fl / ml, fo / mo)?;
        if same_coords(up.lats(), model.lats()) && same_coords(up.lons(), model.lons()) {
            let s = GridStack::new(
                up.values().clone(),
                model.lats().to_vec(),
                model.lons().to_vec(),
                up.start_date(),
                up.units(),
            )?;
            return Ok(s.with_descriptor(obs_fine.variable(), obs_fine.level()));
        }
    }
    bilinear_interpolate(obs_fine, model.lats(), model.lons())
}

/// Fitted BCSD maps and factors, optionally restricted to some slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcsdModel {
    pub maps: QuantileMapSet,
    pub factors: ScalingFactorSet,
}

impl BcsdModel {
    /// Keeps only the listed day-of-year slots.
    pub fn restrict(&self, slots: &[u32]) -> Result<BcsdModel> {
        let mut keep: Vec<u32> = slots.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let (mc, fc) = (self.maps.n_cells(), self.factors.n_cells());
        let mut maps = Vec::with_capacity(keep.len() * mc);
        let mut factors = Vec::with_capacity(keep.len() * fc);
        for &s in &keep {
            let pm = self
                .maps
                .slot_position(s)
                .ok_or_else(|| Error::MissingModel(format!("slot {s} not fitted")))?;
            let pf = self
                .factors
                .slot_position(s)
                .ok_or_else(|| Error::MissingModel(format!("slot {s} not fitted")))?;
            maps.extend_from_slice(&self.maps.maps[pm * mc..(pm + 1) * mc]);
            factors.extend_from_slice(&self.factors.factors[pf * fc..(pf + 1) * fc]);
        }
        Ok(BcsdModel {
            maps: QuantileMapSet {
                slots: keep.clone(),
                maps,
                ..self.maps.clone()
            },
            factors: ScalingFactorSet {
                slots: keep,
                factors,
                ..self.factors.clone()
            },
        })
    }
}

/// Fits quantile maps on the model grid and scaling factors on the fine
/// grid, for every day-of-year slot, from aligned training stacks.
pub fn bcsd_fit(model_train: &GridStack, obs_fine_train: &GridStack, window: u32) -> Result<BcsdModel> {
    model_train.check_time_aligned(obs_fine_train)?;
    let obs_c = remap_to_model_grid(obs_fine_train, model_train)?;
    let maps = fit_quantile_maps(model_train, &obs_c, window)?;
    let corrected = apply_bias_correction(model_train, &maps)?;
    let factors = fit_scaling_factors(obs_fine_train, &corrected, window, &all_slots())?;
    Ok(BcsdModel { maps, factors })
}

/// Bias-correct, interpolate to the fine grid and rescale.
pub fn bcsd_downscale(
    model: &GridStack,
    maps: &QuantileMapSet,
    factors: &ScalingFactorSet,
    fine_lats: &[f64],
    fine_lons: &[f64],
) -> Result<GridStack> {
    let corrected = apply_bias_correction(model, maps)?;
    let interp = bilinear_interpolate(&corrected, fine_lats, fine_lons)?;
    apply_scaling(&interp, factors)
}

/// Error model of the correction stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcsdMsslModel {
    pub features: Standardizer,
    pub mssl: MsslFit,
}

/// Fits the multi-task error model `bcsd − obs ≈ f(covariates)`.
///
/// `bcsd` and `obs` are `time × K` at the target locations and `x` holds
/// the matching covariate rows. `hyper.gamma` is per sample and scaled by
/// the row count; `hyper.lambda` is used as given.
pub fn bcsd_mssl_fit(
    bcsd: &DMatrix<f64>,
    obs: &DMatrix<f64>,
    x: &DMatrix<f64>,
    hyper: &HyperParams,
    settings: &SolverSettings,
) -> Result<BcsdMsslModel> {
    if bcsd.shape() != obs.shape() || x.nrows() != bcsd.nrows() {
        return Err(Error::Dimension(format!(
            "bcsd {:?}, obs {:?}, covariates {:?}",
            bcsd.shape(),
            obs.shape(),
            x.shape()
        )));
    }
    if bcsd.iter().chain(obs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("error targets must be finite".into()));
    }
    let errors = bcsd - obs;
    let features = standardize_fit(x)?;
    let xs = standardize_apply(x, &features)?;
    let n = x.nrows() as f64;
    let mssl = mssl_fit(&xs, &errors, hyper.lambda, hyper.gamma * n, settings, MsslLoss::Squared)?;
    Ok(BcsdMsslModel { features, mssl })
}

/// `bcsd − predicted error`, clipped at zero.
pub fn bcsd_mssl_predict(bcsd: &DMatrix<f64>, x: &DMatrix<f64>, model: &BcsdMsslModel) -> Result<DMatrix<f64>> {
    let xs = standardize_apply(x, &model.features)?;
    let err = model.mssl.predict(&xs)?;
    if err.shape() != bcsd.shape() {
        return Err(Error::Dimension(format!(
            "bcsd {:?}, predicted errors {:?}",
            bcsd.shape(),
            err.shape()
        )));
    }
    Ok(bcsd.zip_map(&err, |b, e| (b - e).max(0.0)))
}
