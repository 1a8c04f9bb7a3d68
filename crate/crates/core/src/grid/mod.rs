//! Daily gridded fields and their on-disk format.
//!
//! A [`GridStack`] is a `time × lat × lon` cube of `f32` values with strictly
//! monotone coordinate vectors and a gap-free daily calendar. Missing cells are
//! NaN. Stacks whose units are `mm/day` are treated as precipitation and must
//! be non-negative wherever they are not missing.

pub mod calendar;
mod gsf;
pub mod interp;
pub mod synth;

use chrono::{Duration, NaiveDate};
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

pub use calendar::{day_of_year_pool, doy_slot, pool_indices, season_split, Season, SeasonMask, DOY_SLOTS};
pub(crate) use gsf::{decode_f32, encode_f32};
pub use gsf::{load_grid_csv, load_grid_stack, payload_name, save_grid_csv, save_grid_stack, GsfMetadata};
pub use interp::{bilinear_interpolate, upscale_block_mean};
pub use synth::{synth_generate, AmountLink, SynthConfig, SynthDataset, TruthWeights};

/// Units label that marks a stack as precipitation.
pub const PRECIP_UNITS: &str = "mm/day";

#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    values: Array3<f32>,
    lats: Vec<f64>,
    lons: Vec<f64>,
    start: NaiveDate,
    units: String,
    variable: String,
    level: String,
}

impl GridStack {
    /// Build a stack, checking every invariant.
    pub fn new(
        values: Array3<f32>,
        lats: Vec<f64>,
        lons: Vec<f64>,
        start: NaiveDate,
        units: impl Into<String>,
    ) -> Result<Self> {
        let stack = GridStack {
            values,
            lats,
            lons,
            start,
            units: units.into(),
            variable: String::new(),
            level: String::new(),
        };
        stack.validate()?;
        Ok(stack)
    }

    /// Attach a variable name and level label (used as design-matrix provenance).
    pub fn with_descriptor(mut self, variable: impl Into<String>, level: impl Into<String>) -> Self {
        self.variable = variable.into();
        self.level = level.into();
        self
    }

    fn validate(&self) -> Result<()> {
        let (t, nlat, nlon) = self.values.dim();
        if nlat != self.lats.len() || nlon != self.lons.len() {
            return Err(Error::Dimension(format!(
                "values are {t}x{nlat}x{nlon} but coordinates are {}x{}",
                self.lats.len(),
                self.lons.len()
            )));
        }
        if t == 0 || nlat == 0 || nlon == 0 {
            return Err(Error::Dimension("stack has an empty axis".into()));
        }
        check_monotone("lats", &self.lats)?;
        check_monotone("lons", &self.lons)?;
        if self.is_precip() {
            if let Some(v) = self.values.iter().find(|v| !v.is_nan() && **v < 0.0) {
                return Err(Error::InvalidStack(format!("negative precipitation value {v}")));
            }
        }
        // the calendar is implied by start + daily step, so it can only fail on overflow
        self.start
            .checked_add_signed(Duration::days(t as i64 - 1))
            .ok_or_else(|| Error::InvalidStack("calendar overflows".into()))?;
        Ok(())
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }

    pub fn start_date(&self) -> NaiveDate {
        self.start
    }

    pub fn units(&self) -> &str {
        &self.units
    }

    pub fn variable(&self) -> &str {
        &self.variable
    }

    pub fn level(&self) -> &str {
        &self.level
    }

    pub fn is_precip(&self) -> bool {
        self.units == PRECIP_UNITS
    }

    pub fn n_times(&self) -> usize {
        self.values.dim().0
    }

    /// `(nlat, nlon)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.lats.len(), self.lons.len())
    }

    pub fn n_cells(&self) -> usize {
        self.lats.len() * self.lons.len()
    }

    pub fn date(&self, t: usize) -> NaiveDate {
        self.start + Duration::days(t as i64)
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.n_times()).map(|t| self.date(t)).collect()
    }

    pub fn end_date(&self) -> NaiveDate {
        self.date(self.n_times() - 1)
    }

    pub fn slice_time(&self, t: usize) -> ArrayView2<'_, f32> {
        self.values.index_axis(Axis(0), t)
    }

    /// Values of one cell over time (cells are numbered lat-major).
    pub fn cell_series(&self, cell: usize) -> Vec<f32> {
        let nlon = self.lons.len();
        let (i, j) = (cell / nlon, cell % nlon);
        self.values.slice(ndarray::s![.., i, j]).to_vec()
    }

    /// `time × cell` matrix view of the values, cells lat-major.
    pub fn as_time_by_cell(&self) -> Array2<f32> {
        let (t, nlat, nlon) = self.values.dim();
        self.values
            .to_shape((t, nlat * nlon))
            .expect("contiguous reshape")
            .to_owned()
    }

    /// A stack with the same coordinates, units and descriptor but new values.
    pub fn with_values(&self, values: Array3<f32>) -> Result<Self> {
        let stack = GridStack {
            values,
            lats: self.lats.clone(),
            lons: self.lons.clone(),
            start: self.start,
            units: self.units.clone(),
            variable: self.variable.clone(),
            level: self.level.clone(),
        };
        stack.validate()?;
        Ok(stack)
    }

    /// Contiguous sub-range of days `[t0, t1)`.
    pub fn time_range(&self, t0: usize, t1: usize) -> Result<Self> {
        if t0 >= t1 || t1 > self.n_times() {
            return Err(Error::InvalidInput(format!(
                "time range {t0}..{t1} outside 0..{}",
                self.n_times()
            )));
        }
        let values = self.values.slice(ndarray::s![t0..t1, .., ..]).to_owned();
        Ok(GridStack {
            values,
            lats: self.lats.clone(),
            lons: self.lons.clone(),
            start: self.date(t0),
            units: self.units.clone(),
            variable: self.variable.clone(),
            level: self.level.clone(),
        })
    }

    /// Sub-stack covering whole calendar years `first..=last`.
    pub fn year_range(&self, first: i32, last: i32) -> Result<Self> {
        let dates = self.dates();
        let t0 = dates.iter().position(|d| chrono::Datelike::year(d) >= first);
        let t1 = dates.iter().rposition(|d| chrono::Datelike::year(d) <= last);
        match (t0, t1) {
            (Some(a), Some(b)) if a <= b => self.time_range(a, b + 1),
            _ => Err(Error::InvalidInput(format!("no days in years {first}..={last}"))),
        }
    }

    /// Check that two stacks share the time axis.
    pub fn check_time_aligned(&self, other: &GridStack) -> Result<()> {
        if self.start != other.start || self.n_times() != other.n_times() {
            return Err(Error::Misaligned(format!(
                "{} days from {} vs {} days from {}",
                self.n_times(),
                self.start,
                other.n_times(),
                other.start
            )));
        }
        Ok(())
    }

    /// Check that two stacks share the spatial grid.
    pub fn check_grid_aligned(&self, other: &GridStack) -> Result<()> {
        if self.lats != other.lats || self.lons != other.lons {
            return Err(Error::Misaligned("spatial grids differ".into()));
        }
        Ok(())
    }
}

fn check_monotone(name: &str, coords: &[f64]) -> Result<()> {
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonMonotone(format!("{name} contains non-finite values")));
    }
    if coords.len() < 2 {
        return Ok(());
    }
    let increasing = coords.windows(2).all(|w| w[1] > w[0]);
    let decreasing = coords.windows(2).all(|w| w[1] < w[0]);
    if increasing || decreasing {
        Ok(())
    } else {
        Err(Error::NonMonotone(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn rejects_negative_precip() {
        let v = Array3::from_elem((1, 1, 1), -1.0f32);
        let err = GridStack::new(v, vec![0.0], vec![0.0], d(2000, 1, 1), PRECIP_UNITS);
        assert!(matches!(err, Err(Error::InvalidStack(_))));
    }

    #[test]
    fn negative_allowed_for_covariates() {
        let v = Array3::from_elem((1, 1, 1), -1.0f32);
        assert!(GridStack::new(v, vec![0.0], vec![0.0], d(2000, 1, 1), "K").is_ok());
    }

    #[test]
    fn rejects_non_monotone() {
        let v = Array3::zeros((1, 3, 1));
        let err = GridStack::new(v, vec![0.0, 2.0, 1.0], vec![0.0], d(2000, 1, 1), "K");
        assert!(matches!(err, Err(Error::NonMonotone(_))));
    }

    #[test]
    fn year_range_selects_whole_years() {
        let v = Array3::zeros((366 + 365, 1, 1));
        let s = GridStack::new(v, vec![0.0], vec![0.0], d(2000, 1, 1), "K").unwrap();
        let y = s.year_range(2001, 2001).unwrap();
        assert_eq!(y.n_times(), 365);
        assert_eq!(y.start_date(), d(2001, 1, 1));
    }
}
