//! Empirical quantile mapping per day-of-year slot and coarse cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{doy_slot, pool_indices, GridStack, DOY_SLOTS};

/// Paired sorted quantiles of the model and observed pools, both at plotting
/// positions `i / (m + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileMap {
    pub model: Vec<f64>,
    pub obs: Vec<f64>,
}

/// Value of a sorted sample at plotting position `p`, interpolating linearly
/// between order statistics and clamping beyond the ends.
fn quantile_at(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    let pos = p * (m + 1) as f64 - 1.0;
    if pos <= 0.0 {
        return sorted[0];
    }
    if pos >= (m - 1) as f64 {
        return sorted[m - 1];
    }
    let lo = pos.floor() as usize;
    let f = pos - lo as f64;
    sorted[lo] + f * (sorted[lo + 1] - sorted[lo])
}

fn at_fractional(v: &[f64], pos: f64) -> f64 {
    let lo = pos.floor() as usize;
    let f = pos - lo as f64;
    if f == 0.0 || lo + 1 >= v.len() {
        v[lo]
    } else {
        v[lo] + f * (v[lo + 1] - v[lo])
    }
}

impl QuantileMap {
    /// Builds a map from two pools (missing values already removed). Pools of
    /// different length are both resampled to the shorter length.
    pub fn from_pools(mut model: Vec<f64>, mut obs: Vec<f64>) -> Self {
        model.sort_by(f64::total_cmp);
        obs.sort_by(f64::total_cmp);
        if model.len() != obs.len() && !model.is_empty() && !obs.is_empty() {
            let m = model.len().min(obs.len());
            let resample =
                |s: &[f64]| -> Vec<f64> { (1..=m).map(|i| quantile_at(s, i as f64 / (m + 1) as f64)).collect() };
            model = resample(&model);
            obs = resample(&obs);
        }
        QuantileMap { model, obs }
    }

    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model.is_empty()
    }

    /// Maps a model value onto the observed distribution. Inside the pool
    /// range the value's position among the model order statistics (mid-rank
    /// for ties) is looked up in the observed ones; beyond it the correction
    /// at the nearest tail is added. Not clipped.
    pub fn apply(&self, v: f64) -> f64 {
        let m = self.model.len();
        if m == 0 || v.is_nan() {
            return f64::NAN;
        }
        if v < self.model[0] {
            return v + (self.obs[0] - self.model[0]);
        }
        if v > self.model[m - 1] {
            return v + (self.obs[m - 1] - self.model[m - 1]);
        }
        let a = self.model.partition_point(|x| *x < v);
        let b = self.model.partition_point(|x| *x <= v);
        if b > a {
            return at_fractional(&self.obs, (a + b - 1) as f64 / 2.0);
        }
        let j = a - 1;
        let f = (v - self.model[j]) / (self.model[a] - self.model[j]);
        self.obs[j] + f * (self.obs[a] - self.obs[j])
    }
}

/// Quantile maps for a set of day-of-year slots over a coarse grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileMapSet {
    pub window: u32,
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
    /// covered slots, ascending
    pub slots: Vec<u32>,
    /// slot-major, then cells lat-major
    pub maps: Vec<QuantileMap>,
}

impl QuantileMapSet {
    pub fn n_cells(&self) -> usize {
        self.lats.len() * self.lons.len()
    }

    pub fn slot_position(&self, slot: u32) -> Option<usize> {
        self.slots.binary_search(&slot).ok()
    }

    pub fn map(&self, slot: u32, cell: usize) -> Option<&QuantileMap> {
        self.slot_position(slot).map(|p| &self.maps[p * self.n_cells() + cell])
    }
}

/// Smallest pool accepted for a window: `2·window` (pools around Feb 29 lose
/// that day in common years), and at least one sample.
pub fn min_pool_len(window: u32) -> usize {
    (2 * window as usize).max(1)
}

/// All 366 slots.
pub fn all_slots() -> Vec<u32> {
    (1..=DOY_SLOTS).collect()
}

/// Fits maps for every slot from model and (already remapped) observed
/// precipitation on the same coarse grid and dates.
pub fn fit_quantile_maps(model: &GridStack, obs: &GridStack, window: u32) -> Result<QuantileMapSet> {
    fit_quantile_maps_for(model, obs, window, &all_slots())
}

/// As [`fit_quantile_maps`] for a subset of slots. Pools pair model and
/// observed values day by day; a day missing in either is skipped. Cells
/// whose observations are entirely missing get an empty map.
pub fn fit_quantile_maps_for(model: &GridStack, obs: &GridStack, window: u32, slots: &[u32]) -> Result<QuantileMapSet> {
    model.check_grid_aligned(obs)?;
    model.check_time_aligned(obs)?;
    let mut slots = slots.to_vec();
    slots.sort_unstable();
    slots.dedup();
    if slots.iter().any(|s| !(1..=DOY_SLOTS).contains(s)) {
        return Err(Error::InvalidInput("day-of-year slot outside 1..=366".into()));
    }
    let dates = model.dates();
    let (nlat, nlon) = model.shape();
    let mv = model.values();
    let ov = obs.values();
    let min_len = min_pool_len(window);
    let mut maps = Vec::with_capacity(slots.len() * nlat * nlon);
    for &slot in &slots {
        let idx = pool_indices(&dates, slot, window);
        for i in 0..nlat {
            for j in 0..nlon {
                let (mut mp, mut op) = (Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len()));
                for &t in &idx {
                    let (a, b) = (mv[[t, i, j]], ov[[t, i, j]]);
                    if !a.is_nan() && !b.is_nan() {
                        mp.push(a as f64);
                        op.push(b as f64);
                    }
                }
                let all_obs_missing = idx.iter().all(|&t| ov[[t, i, j]].is_nan());
                if mp.len() < min_len && !all_obs_missing {
                    return Err(Error::InsufficientData(format!(
                        "slot {slot} cell ({i}, {j}) pools {} values, need {min_len}",
                        mp.len()
                    )));
                }
                maps.push(QuantileMap::from_pools(mp, op));
            }
        }
    }
    Ok(QuantileMapSet {
        window,
        lats: model.lats().to_vec(),
        lons: model.lons().to_vec(),
        slots,
        maps,
    })
}

/// Replaces every model value by its quantile-mapped counterpart, clipped at
/// zero. Missing values stay missing.
pub fn apply_bias_correction(model: &GridStack, maps: &QuantileMapSet) -> Result<GridStack> {
    if model.lats() != maps.lats.as_slice() || model.lons() != maps.lons.as_slice() {
        return Err(Error::Dimension("quantile maps were fitted on a different grid".into()));
    }
    let (nlat, nlon) = model.shape();
    let n_cells = nlat * nlon;
    let mut out = model.values().clone();
    for (t, date) in model.dates().into_iter().enumerate() {
        let slot = doy_slot(date);
        let p = maps
            .slot_position(slot)
            .ok_or_else(|| Error::MissingModel(format!("no quantile map for day-of-year slot {slot} ({date})")))?;
        for c in 0..n_cells {
            let (i, j) = (c / nlon, c % nlon);
            let v = out[[t, i, j]];
            if v.is_nan() {
                continue;
            }
            out[[t, i, j]] = maps.maps[p * n_cells + c].apply(v as f64).max(0.0) as f32;
        }
    }
    model.with_values(out)
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
