//! Precipitation extreme indices: CWD, R20, RX5day and SDII.

use std::collections::BTreeMap;

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use super::metrics::{days_in_month, pearson, skill_score};
use crate::error::{Error, Result};
use crate::grid::GridStack;

/// Wet-day threshold of CWD and SDII, mm/day.
pub const WET_DAY_MM: f64 = 1.0;
/// Heavy-precipitation threshold of R20, mm/day.
pub const HEAVY_MM: f64 = 20.0;
/// RX5day window length, days.
pub const RX_WINDOW: usize = 5;

fn non_empty(series: &[f64]) -> Result<()> {
    if series.is_empty() {
        Err(Error::InsufficientData("empty series".into()))
    } else {
        Ok(())
    }
}

/// Longest run of days with at least 1 mm.
pub fn cwd(series: &[f64]) -> Result<u32> {
    non_empty(series)?;
    let (mut best, mut run) = (0, 0);
    for v in series {
        if *v >= WET_DAY_MM {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    Ok(best)
}

/// Number of days with at least 20 mm.
pub fn r20(series: &[f64]) -> Result<u32> {
    non_empty(series)?;
    Ok(series.iter().filter(|v| **v >= HEAVY_MM).count() as u32)
}

/// Largest 5-day running total; the whole-series total when it is shorter
/// than the window.
pub fn rx5day(series: &[f64]) -> Result<f64> {
    non_empty(series)?;
    if series.len() < RX_WINDOW {
        return Ok(series.iter().sum());
    }
    Ok(series
        .windows(RX_WINDOW)
        .map(|w| w.iter().sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Period total divided by the number of days with at least 1 mm; `None`
/// without wet days.
pub fn sdii(series: &[f64]) -> Result<Option<f64>> {
    non_empty(series)?;
    let wet = series.iter().filter(|v| **v >= WET_DAY_MM).count();
    Ok((wet > 0).then(|| series.iter().sum::<f64>() / wet as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Index {
    #[serde(rename = "CWD")]
    Cwd,
    #[serde(rename = "R20")]
    R20,
    #[serde(rename = "RX5day")]
    Rx5day,
    #[serde(rename = "SDII")]
    Sdii,
}

impl Index {
    pub const ALL: [Index; 4] = [Index::Cwd, Index::R20, Index::Rx5day, Index::Sdii];

    pub fn label(self) -> &'static str {
        match self {
            Index::Cwd => "CWD",
            Index::R20 => "R20",
            Index::Rx5day => "RX5day",
            Index::Sdii => "SDII",
        }
    }
}

/// One index value for one location and year (and month for RX5day).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub index: Index,
    pub cell: usize,
    pub year: i32,
    pub month: Option<u32>,
    pub observed: Option<f64>,
    pub projected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub index: Index,
    /// `None` when either side has zero variance
    pub pearson: Option<f64>,
    pub skill: f64,
    /// pairs with both values present
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClimdexReport {
    pub records: Vec<IndexRecord>,
    pub summary: Vec<IndexSummary>,
}

fn index_value(index: Index, s: &[f64]) -> Result<Option<f64>> {
    Ok(match index {
        Index::Cwd => Some(cwd(s)? as f64),
        Index::R20 => Some(r20(s)? as f64),
        Index::Rx5day => Some(rx5day(s)?),
        Index::Sdii => sdii(s)?,
    })
}

/// Index values per location and complete year (per complete month for
/// RX5day) on both stacks, with correlation and skill pooled over all
/// location-periods.
pub fn climdex_compare(pred: &GridStack, obs: &GridStack, bin_width: f64) -> Result<ClimdexReport> {
    pred.check_grid_aligned(obs)?;
    pred.check_time_aligned(obs)?;
    let dates = pred.dates();
    let mut years: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (t, d) in dates.iter().enumerate() {
        years.entry(d.year()).or_default().push(t);
    }
    years.retain(|y, idx| idx.len() == (1..=12).map(|m| days_in_month(*y, m) as usize).sum::<usize>());
    if years.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} complete years, need 2",
            years.len()
        )));
    }
    let mut records = Vec::new();
    for cell in 0..pred.n_cells() {
        let ps: Vec<f64> = pred.cell_series(cell).into_iter().map(f64::from).collect();
        let os: Vec<f64> = obs.cell_series(cell).into_iter().map(f64::from).collect();
        if os.iter().chain(&ps).any(|v| v.is_nan()) {
            continue;
        }
        for (&year, idx) in &years {
            let py: Vec<f64> = idx.iter().map(|&t| ps[t]).collect();
            let oy: Vec<f64> = idx.iter().map(|&t| os[t]).collect();
            for index in [Index::Cwd, Index::R20, Index::Sdii] {
                records.push(IndexRecord {
                    index,
                    cell,
                    year,
                    month: None,
                    observed: index_value(index, &oy)?,
                    projected: index_value(index, &py)?,
                });
            }
            for month in 1..=12 {
                let sel: Vec<usize> = idx.iter().copied().filter(|&t| dates[t].month() == month).collect();
                let pm: Vec<f64> = sel.iter().map(|&t| ps[t]).collect();
                let om: Vec<f64> = sel.iter().map(|&t| os[t]).collect();
                records.push(IndexRecord {
                    index: Index::Rx5day,
                    cell,
                    year,
                    month: Some(month),
                    observed: Some(rx5day(&om)?),
                    projected: Some(rx5day(&pm)?),
                });
            }
        }
    }
    records.sort_by_key(|a| (a.index, a.cell, a.year, a.month));
    let mut summary = Vec::new();
    for index in Index::ALL {
        let (p, o): (Vec<f64>, Vec<f64>) = records
            .iter()
            .filter(|r| r.index == index)
            .filter_map(|r| Some((r.projected?, r.observed?)))
            .unzip();
        let skill = if p.is_empty() {
            0.0
        } else {
            skill_score(&p, &o, bin_width)?
        };
        if p.is_empty() {
            log::warn!("{}: no location-periods with both values", index.label());
        }
        summary.push(IndexSummary {
            index,
            pearson: pearson(&p, &o),
            skill,
            n: p.len(),
        });
    }
    Ok(ClimdexReport { records, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn hand_examples() {
        assert_eq!(cwd(&[0.0, 2.0, 3.0, 4.0, 0.5, 1.0]).unwrap(), 3);
        assert_eq!(r20(&[25.0, 19.0, 20.0, 3.0]).unwrap(), 2);
        assert_eq!(rx5day(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), 20.0);
        let mut s = vec![0.0; 355];
        s.extend([10.0; 10]);
        assert_eq!(sdii(&s).unwrap(), Some(10.0));
        assert_eq!(sdii(&[0.0, 0.5]).unwrap(), None);
        assert!(cwd(&[]).is_err());
    }

    fn stack(years: i32, f: impl Fn(usize, usize) -> f32) -> GridStack {
        let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
        let end = NaiveDate::from_ymd_opt(2001 + years, 1, 1).unwrap();
        let n = (end - start).num_days() as usize;
        let arr = Array3::from_shape_fn((n, 1, 2), |(t, _, j)| f(t, j));
        GridStack::new(arr, vec![0.0], vec![0.0, 1.0], start, "mm/day").unwrap()
    }

    #[test]
    fn identical_stacks_score_perfectly() {
        let s = stack(3, |t, j| {
            ((t * 7 + j * 3) % 23) as f32 + if t % 97 == j { 25.0 } else { 0.0 }
        });
        let r = climdex_compare(&s, &s, 1.0).unwrap();
        for x in &r.summary {
            assert_eq!(x.skill, 1.0, "{:?}", x.index);
            assert!((x.pearson.unwrap() - 1.0).abs() < 1e-12, "{:?}", x.index);
        }
        assert_eq!(
            r.records.iter().filter(|x| x.index == Index::Rx5day).count(),
            2 * 3 * 12
        );
    }

    #[test]
    fn constant_prediction_has_missing_correlation() {
        let obs = stack(2, |t, j| ((t + j) % 5) as f32 * if t < 400 { 1.0 } else { 2.0 });
        let pred = stack(2, |_, _| 3.0);
        let r = climdex_compare(&pred, &obs, 1.0).unwrap();
        assert!(r.summary.iter().all(|x| x.pearson.is_none()));
    }

    #[test]
    fn hand_built_two_locations_three_years() {
        // location 0 wet on the first k days of each year, location 1 dry
        let wet_days = [3usize, 5, 2];
        let obs = stack(3, |t, j| {
            let (year, day) = if t < 365 {
                (0, t)
            } else if t < 730 {
                (1, t - 365)
            } else {
                (2, t - 730)
            };
            if j == 0 && day < wet_days[year] {
                21.0
            } else {
                0.0
            }
        });
        let r = climdex_compare(&obs, &obs, 1.0).unwrap();
        let cwd0: Vec<f64> = r
            .records
            .iter()
            .filter(|x| x.index == Index::Cwd && x.cell == 0)
            .map(|x| x.observed.unwrap())
            .collect();
        assert_eq!(cwd0, vec![3.0, 5.0, 2.0]);
        let r20: Vec<f64> = r
            .records
            .iter()
            .filter(|x| x.index == Index::R20)
            .map(|x| x.observed.unwrap())
            .collect();
        assert_eq!(r20, vec![3.0, 5.0, 2.0, 0.0, 0.0, 0.0]);
        let sdii = r.records.iter().filter(|x| x.index == Index::Sdii);
        assert_eq!(sdii.filter(|x| x.observed.is_none()).count(), 3);
        let jan: Vec<f64> = r
            .records
            .iter()
            .filter(|x| x.index == Index::Rx5day && x.cell == 0 && x.month == Some(1))
            .map(|x| x.observed.unwrap())
            .collect();
        assert_eq!(jan, vec![63.0, 105.0, 42.0]);
        let s = r.summary.iter().find(|x| x.index == Index::Cwd).unwrap();
        assert_eq!(s.n, 6);
    }

    proptest! {
        #[test]
        fn index_bounds(s in prop::collection::vec(0.0f64..40.0, 1..120)) {
            prop_assert!(cwd(&s).unwrap() as usize <= s.len());
            let max = s.iter().copied().fold(0.0, f64::max);
            prop_assert!(rx5day(&s).unwrap() >= max);
            if let Some(v) = sdii(&s).unwrap() {
                prop_assert!(v >= 0.0);
            }
        }
    }
}
