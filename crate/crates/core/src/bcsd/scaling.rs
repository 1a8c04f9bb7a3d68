//! Day-of-year climatology scaling factors on the fine grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bilinear_interpolate, doy_slot, pool_indices, GridStack};

/// Floor on the interpolated climatology, mm/day.
pub const EPS_CLIM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFactorSet {
    pub window: u32,
    pub eps_clim: f64,
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
    pub slots: Vec<u32>,
    /// slot-major, then fine cells lat-major
    pub factors: Vec<f64>,
}

impl ScalingFactorSet {
    pub fn n_cells(&self) -> usize {
        self.lats.len() * self.lons.len()
    }

    pub fn slot_position(&self, slot: u32) -> Option<usize> {
        self.slots.binary_search(&slot).ok()
    }

    pub fn factor(&self, slot: u32, cell: usize) -> Option<f64> {
        self.slot_position(slot)
            .map(|p| self.factors[p * self.n_cells() + cell])
    }
}

/// Mean of the non-missing pooled values.
fn pooled_mean(stack: &GridStack, idx: &[usize], i: usize, j: usize) -> Option<f64> {
    let v = stack.values();
    let (mut s, mut n) = (0.0, 0usize);
    for &t in idx {
        let x = v[[t, i, j]];
        if !x.is_nan() {
            s += x as f64;
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// `factor = obs climatology ÷ max(interpolated corrected climatology, ε)`,
/// both climatologies pooled over `±window` days. A fine cell with no
/// observations gets factor 1.
pub fn fit_scaling_factors(
    obs_fine: &GridStack,
    corrected_coarse: &GridStack,
    window: u32,
    slots: &[u32],
) -> Result<ScalingFactorSet> {
    obs_fine.check_time_aligned(corrected_coarse)?;
    let interp = bilinear_interpolate(corrected_coarse, obs_fine.lats(), obs_fine.lons())?;
    let dates = obs_fine.dates();
    let (nlat, nlon) = obs_fine.shape();
    let mut slots = slots.to_vec();
    slots.sort_unstable();
    slots.dedup();
    let mut factors = Vec::with_capacity(slots.len() * nlat * nlon);
    for &slot in &slots {
        let idx = pool_indices(&dates, slot, window);
        if idx.is_empty() {
            return Err(Error::InsufficientData(format!("no training days near slot {slot}")));
        }
        for i in 0..nlat {
            for j in 0..nlon {
                let f = match (pooled_mean(obs_fine, &idx, i, j), pooled_mean(&interp, &idx, i, j)) {
                    (Some(o), Some(m)) => o / m.max(EPS_CLIM),
                    _ => 1.0,
                };
                factors.push(f);
            }
        }
    }
    Ok(ScalingFactorSet {
        window,
        eps_clim: EPS_CLIM,
        lats: obs_fine.lats().to_vec(),
        lons: obs_fine.lons().to_vec(),
        slots,
        factors,
    })
}

/// Multiplies a fine-grid stack by the factor of each day's slot.
pub fn apply_scaling(interp: &GridStack, factors: &ScalingFactorSet) -> Result<GridStack> {
    if interp.lats() != factors.lats.as_slice() || interp.lons() != factors.lons.as_slice() {
        return Err(Error::Dimension(
            "scaling factors were fitted on a different grid".into(),
        ));
    }
    let n_cells = factors.n_cells();
    let nlon = factors.lons.len();
    let mut out = interp.values().clone();
    for (t, date) in interp.dates().into_iter().enumerate() {
        let slot = doy_slot(date);
        let p = factors
            .slot_position(slot)
            .ok_or_else(|| Error::MissingModel(format!("no scaling factor for slot {slot} ({date})")))?;
        for c in 0..n_cells {
            let cell = &mut out[[t, c / nlon, c % nlon]];
            if !cell.is_nan() {
                *cell = (*cell as f64 * factors.factors[p * n_cells + c]).max(0.0) as f32;
            }
        }
    }
    interp.with_values(out)
}
