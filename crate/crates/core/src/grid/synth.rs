//! Synthetic paired coarse/fine climate data with known generating weights.
//!
//! Covariates are smooth, spatially correlated anomaly fields with a seasonal
//! cycle. Fine-grid precipitation at each location is
//! `occurrence × amount`, where occurrence is Bernoulli with a logistic link on
//! a sparse linear score of the covariates and amount is a sparse linear (or
//! log-linear) predictor plus Gaussian noise, clipped at zero. A coarse
//! "model" precipitation field, biased and drizzly, stands in for reanalysis
//! precipitation.

use std::f64::consts::PI;

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{doy_slot, upscale_block_mean, GridStack, PRECIP_UNITS};
use crate::error::{Error, Result};
use crate::linear::WeightMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmountLink {
    /// amount = intercept + x·w + noise
    Linear,
    /// amount = exp(intercept + x·w) + noise
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub start_year: i32,
    pub years: u32,
    /// covariate grid
    pub coarse_lat: usize,
    pub coarse_lon: usize,
    /// observation grid; each fine cell is one downscaling location
    pub fine_lat: usize,
    pub fine_lon: usize,
    /// block factor from the fine grid to the model-precipitation grid
    pub precip_factor: usize,
    pub n_variables: usize,
    pub n_levels: usize,
    /// fraction of covariates with nonzero generating weight
    pub sparsity: f64,
    /// amount noise sd in mm/day
    pub noise_sd: f64,
    pub wet_prob: f64,
    pub amount_link: AmountLink,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            start_year: 1995,
            years: 20,
            coarse_lat: 5,
            coarse_lon: 5,
            fine_lat: 3,
            fine_lon: 3,
            precip_factor: 3,
            n_variables: 2,
            n_levels: 1,
            sparsity: 0.1,
            noise_sd: 0.5,
            wet_prob: 0.6,
            amount_link: AmountLink::Exponential,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.coarse_lat > 0
            && self.coarse_lon > 0
            && self.fine_lat > 0
            && self.fine_lon > 0
            && self.precip_factor > 0;
        if !dims_ok {
            return Err(Error::Config("grid sizes must be positive".into()));
        }
        if !self.fine_lat.is_multiple_of(self.precip_factor) || !self.fine_lon.is_multiple_of(self.precip_factor) {
            return Err(Error::Config(format!(
                "fine grid {}x{} is not a multiple of the precipitation block factor {}",
                self.fine_lat, self.fine_lon, self.precip_factor
            )));
        }
        if self.years == 0 || self.n_variables == 0 || self.n_levels == 0 {
            return Err(Error::Config("years, variables and levels must be >= 1".into()));
        }
        if self.noise_sd.is_nan() || self.noise_sd < 0.0 {
            return Err(Error::Config("noise sd must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.wet_prob) || !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::Config("wet_prob and sparsity must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_covariates(&self) -> usize {
        self.n_variables * self.n_levels * self.coarse_lat * self.coarse_lon
    }

    pub fn n_locations(&self) -> usize {
        self.fine_lat * self.fine_lon
    }

    pub fn fine_coords(&self) -> (Vec<f64>, Vec<f64>) {
        let lats = (0..self.fine_lat).map(|i| 41.0 + 0.25 * i as f64).collect();
        let lons = (0..self.fine_lon).map(|j| 285.0 + 0.25 * j as f64).collect();
        (lats, lons)
    }

    fn coarse_coords(&self) -> (Vec<f64>, Vec<f64>) {
        let (fl, fo) = self.fine_coords();
        let clat = fl.iter().sum::<f64>() / fl.len() as f64;
        let clon = fo.iter().sum::<f64>() / fo.len() as f64;
        let axis = |center: f64, n: usize| -> Vec<f64> {
            (0..n).map(|i| center + (i as f64 - (n as f64 - 1.0) / 2.0)).collect()
        };
        (axis(clat, self.coarse_lat), axis(clon, self.coarse_lon))
    }
}

/// Generating weights: amount and occurrence scores per location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthWeights {
    pub amount: WeightMatrix,
    pub occurrence: WeightMatrix,
    pub amount_link: AmountLink,
    /// occurrence forced on every day (wet_prob = 1) or never (wet_prob = 0)
    pub occurrence_fixed: Option<bool>,
}

impl TruthWeights {
    /// Noise-free amount for one design row and location.
    pub fn amount(&self, x: &[f64], k: usize) -> f64 {
        let w = self.amount.weights.column(k);
        let s = self.amount.intercepts[k] + x.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>();
        match self.amount_link {
            AmountLink::Linear => s,
            AmountLink::Exponential => s.exp(),
        }
    }

    /// Occurrence probability for one design row and location.
    pub fn wet_probability(&self, x: &[f64], k: usize) -> f64 {
        if let Some(fixed) = self.occurrence_fixed {
            return if fixed { 1.0 } else { 0.0 };
        }
        let w = self.occurrence.weights.column(k);
        let s = self.occurrence.intercepts[k] + x.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>();
        1.0 / (1.0 + (-s).exp())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// one stack per (variable, level), variable-major
    pub covariates: Vec<GridStack>,
    pub fine_obs: GridStack,
    /// coarse, biased precipitation standing in for reanalysis output
    pub model_precip: GridStack,
    pub truth: TruthWeights,
}

const SMOOTH_MODES: usize = 3;
const AR_COEF: f64 = 0.6;

/// Stationary AR(1) series with unit marginal variance.
fn ar1(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let innov = (1.0 - AR_COEF * AR_COEF).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut x: f64 = rng.sample(StandardNormal);
    for _ in 0..n {
        out.push(x);
        let e: f64 = rng.sample(StandardNormal);
        x = AR_COEF * x + innov * e;
    }
    out
}

/// Generate a dataset. Identical configs give identical output.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = NaiveDate::from_ymd_opt(cfg.start_year, 1, 1)
        .ok_or_else(|| Error::Config(format!("bad start year {}", cfg.start_year)))?;
    let end = NaiveDate::from_ymd_opt(cfg.start_year + cfg.years as i32, 1, 1)
        .ok_or_else(|| Error::Config("end year overflows".into()))?;
    let n_days = (end - start).num_days() as usize;
    let dates: Vec<NaiveDate> = (0..n_days).map(|t| start + chrono::Duration::days(t as i64)).collect();

    let (clats, clons) = cfg.coarse_coords();
    let (nlat, nlon) = (cfg.coarse_lat, cfg.coarse_lon);
    let n_cells = nlat * nlon;

    // covariate fields
    let mut covariates = Vec::with_capacity(cfg.n_variables * cfg.n_levels);
    for v in 0..cfg.n_variables {
        for l in 0..cfg.n_levels {
            let amp: f64 = 0.5 + 0.5 * rng.random::<f64>();
            let phase: f64 = 2.0 * PI * rng.random::<f64>();
            let modes: Vec<Vec<f64>> = (0..SMOOTH_MODES)
                .map(|_| {
                    let kx: f64 = 0.3 + 0.6 * rng.random::<f64>();
                    let ky: f64 = 0.3 + 0.6 * rng.random::<f64>();
                    let ph: f64 = 2.0 * PI * rng.random::<f64>();
                    let mut m: Vec<f64> = (0..n_cells)
                        .map(|c| ((c / nlon) as f64 * kx + (c % nlon) as f64 * ky + ph).cos())
                        .collect();
                    let norm = (m.iter().map(|x| x * x).sum::<f64>() / n_cells as f64).sqrt();
                    m.iter_mut().for_each(|x| *x /= norm.max(1e-12));
                    m
                })
                .collect();
            let mode_series: Vec<Vec<f64>> = (0..SMOOTH_MODES).map(|_| ar1(&mut rng, n_days)).collect();
            let local: Vec<Vec<f64>> = (0..n_cells).map(|_| ar1(&mut rng, n_days)).collect();
            let smooth_share = 0.35f64;
            let mode_scale = (smooth_share / SMOOTH_MODES as f64).sqrt();
            let local_scale = (1.0 - smooth_share).sqrt();
            let values = Array3::from_shape_fn((n_days, nlat, nlon), |(t, i, j)| {
                let c = i * nlon + j;
                let doy = doy_slot(dates[t]) as f64;
                let seasonal = amp * (2.0 * PI * doy / 366.0 + phase).sin();
                let smooth: f64 = (0..SMOOTH_MODES).map(|m| modes[m][c] * mode_series[m][t]).sum::<f64>() * mode_scale;
                (seasonal + smooth + local_scale * local[c][t]) as f32
            });
            let stack = GridStack::new(values, clats.clone(), clons.clone(), start, "std")?
                .with_descriptor(format!("var{v}"), format!("lev{l}"));
            covariates.push(stack);
        }
    }

    // design rows straight from the f32 fields so the truth reproduces exactly
    let d = cfg.n_covariates();
    let mut x = DMatrix::<f64>::zeros(n_days, d);
    for (s, stack) in covariates.iter().enumerate() {
        let vals = stack.values();
        for t in 0..n_days {
            for c in 0..n_cells {
                x[(t, s * n_cells + c)] = vals[[t, c / nlon, c % nlon]] as f64;
            }
        }
    }
    // columns are mean-centred by construction apart from the seasonal cycle;
    // centre the score so the intercept sets the typical amount
    let col_means: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();

    let k_tasks = cfg.n_locations();
    let n_active = ((cfg.sparsity * d as f64).round() as usize).clamp(1, d);
    let mut active: Vec<usize> = (0..d).collect();
    // partial Fisher–Yates for the shared support
    for i in 0..n_active {
        let j = rng.random_range(i..d);
        active.swap(i, j);
    }
    let mut active = active[..n_active].to_vec();
    active.sort_unstable();

    let mut amount = WeightMatrix::zeros(d, k_tasks);
    let mut occurrence = WeightMatrix::zeros(d, k_tasks);
    let base: Vec<(f64, f64)> = active
        .iter()
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (sign, 0.8 + 1.2 * rng.random::<f64>())
        })
        .collect();
    let (scale, mean_amount) = match cfg.amount_link {
        AmountLink::Linear => (1.0, 10.0f64),
        AmountLink::Exponential => (0.12, 5.0f64.ln()),
    };
    for k in 0..k_tasks {
        let mut offset = 0.0;
        for (a, &j) in active.iter().enumerate() {
            let (sign, mag) = base[a];
            let jitter = 1.0 + 0.2 * (rng.random::<f64>() - 0.5);
            let w = sign * mag * jitter * scale;
            amount.weights[(j, k)] = w;
            occurrence.weights[(j, k)] = 0.5 * sign * mag * jitter;
            offset += w * col_means[j];
        }
        amount.intercepts[k] = mean_amount - offset;
    }

    let occurrence_fixed = if cfg.wet_prob >= 1.0 {
        Some(true)
    } else if cfg.wet_prob <= 0.0 {
        Some(false)
    } else {
        None
    };
    // calibrate occurrence intercepts so the mean probability equals wet_prob
    if occurrence_fixed.is_none() {
        for k in 0..k_tasks {
            let scores: Vec<f64> = (0..n_days)
                .map(|t| (0..d).map(|j| x[(t, j)] * occurrence.weights[(j, k)]).sum::<f64>())
                .collect();
            let mean_p = |b: f64| scores.iter().map(|s| 1.0 / (1.0 + (-(b + s)).exp())).sum::<f64>() / n_days as f64;
            let (mut lo, mut hi) = (-50.0, 50.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mean_p(mid) < cfg.wet_prob {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            occurrence.intercepts[k] = 0.5 * (lo + hi);
        }
    }
    let truth = TruthWeights {
        amount,
        occurrence,
        amount_link: cfg.amount_link,
        occurrence_fixed,
    };

    let (flats, flons) = cfg.fine_coords();
    let mut obs = Array3::<f32>::zeros((n_days, cfg.fine_lat, cfg.fine_lon));
    let mut row = vec![0.0; d];
    for t in 0..n_days {
        for (j, r) in row.iter_mut().enumerate() {
            *r = x[(t, j)];
        }
        for k in 0..k_tasks {
            let p = truth.wet_probability(&row, k);
            let wet = match occurrence_fixed {
                Some(f) => f,
                None => rng.random::<f64>() < p,
            };
            let noise: f64 = if cfg.noise_sd > 0.0 {
                cfg.noise_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let value = if wet {
                (truth.amount(&row, k) + noise).max(0.0)
            } else {
                0.0
            };
            obs[[t, k / cfg.fine_lon, k % cfg.fine_lon]] = value as f32;
        }
    }
    let fine_obs = GridStack::new(obs, flats, flons, start, PRECIP_UNITS)?.with_descriptor("precip", "surface");

    // coarse model precipitation: amplified, compressed and drizzly
    let obs_coarse = upscale_block_mean(&fine_obs, cfg.precip_factor, cfg.precip_factor)?;
    let mut model = obs_coarse.values().clone();
    for v in model.iter_mut() {
        let drizzle = if rng.random::<f64>() < 0.35 {
            0.6 * rng.random::<f64>()
        } else {
            0.0
        };
        *v = (1.3 * (*v as f64).powf(0.85) + drizzle) as f32;
    }
    let model_precip = obs_coarse
        .with_values(model)?
        .with_descriptor("model_precip", "surface");

    debug_assert!(dates.last().map(|d| d.year()) == Some(cfg.start_year + cfg.years as i32 - 1));
    Ok(SynthDataset {
        covariates,
        fine_obs,
        model_precip,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            years: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a.fine_obs, b.fine_obs);
        assert_eq!(a.covariates, b.covariates);
        assert_eq!(a.model_precip, b.model_precip);
        assert_eq!(a.truth, b.truth);
        let c = synth_generate(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.fine_obs, c.fine_obs);
    }

    #[test]
    fn noiseless_always_wet_is_reconstructable() {
        for link in [AmountLink::Linear, AmountLink::Exponential] {
            let cfg = SynthConfig {
                noise_sd: 0.0,
                wet_prob: 1.0,
                amount_link: link,
                ..small()
            };
            let ds = synth_generate(&cfg).unwrap();
            let n_cells = cfg.coarse_lat * cfg.coarse_lon;
            for t in (0..ds.fine_obs.n_times()).step_by(37) {
                let row: Vec<f64> = ds
                    .covariates
                    .iter()
                    .flat_map(|s| {
                        (0..n_cells).map(move |c| s.values()[[t, c / cfg.coarse_lon, c % cfg.coarse_lon]] as f64)
                    })
                    .collect();
                for k in 0..cfg.n_locations() {
                    let expect = ds.truth.amount(&row, k).max(0.0) as f32;
                    let got = ds.fine_obs.values()[[t, k / cfg.fine_lon, k % cfg.fine_lon]];
                    assert_eq!(got, expect);
                }
            }
        }
    }

    #[test]
    fn wet_fraction_matches_configuration() {
        let cfg = SynthConfig::default();
        let ds = synth_generate(&cfg).unwrap();
        let vals = ds.fine_obs.values();
        let wet = vals.iter().filter(|v| **v >= 1.0).count() as f64 / vals.len() as f64;
        assert!((wet - cfg.wet_prob).abs() <= 0.05, "wet fraction {wet}");
    }

    #[test]
    fn truth_is_sparse_and_shared() {
        let cfg = small();
        let ds = synth_generate(&cfg).unwrap();
        let d = cfg.n_covariates();
        let nnz_first: usize = (0..d).filter(|&j| ds.truth.amount.weights[(j, 0)] != 0.0).count();
        assert_eq!(nnz_first, 5);
        for k in 1..cfg.n_locations() {
            for j in 0..d {
                assert_eq!(
                    ds.truth.amount.weights[(j, 0)] != 0.0,
                    ds.truth.amount.weights[(j, k)] != 0.0
                );
            }
        }
    }

    #[test]
    fn model_precip_is_coarse_and_nonnegative() {
        let ds = synth_generate(&small()).unwrap();
        assert_eq!(ds.model_precip.shape(), (1, 1));
        assert!(ds.model_precip.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn invalid_ratio_rejected() {
        let cfg = SynthConfig { fine_lat: 4, ..small() };
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
    }
}
