//! Day-of-year slots, seasonal masks and ±window pooling.

use std::fmt;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::GridStack;

/// Number of day-of-year slots; Feb 29 always occupies slot 60.
pub const DOY_SLOTS: u32 = 366;

/// Day-of-year slot in `1..=366` using a leap-year layout, so a given
/// month/day always maps to the same slot.
pub fn doy_slot(date: NaiveDate) -> u32 {
    NaiveDate::from_ymd_opt(2000, date.month(), date.day())
        .expect("every month/day exists in a leap year")
        .ordinal()
}

/// Circular distance between two slots on the 366-slot year.
pub fn slot_distance(a: u32, b: u32) -> u32 {
    let diff = a.abs_diff(b);
    diff.min(DOY_SLOTS - diff)
}

/// Time indices whose slot lies within `±window` of `doy`, wrapping across
/// the year boundary.
pub fn pool_indices(dates: &[NaiveDate], doy: u32, window: u32) -> Vec<usize> {
    dates
        .iter()
        .enumerate()
        .filter(|(_, d)| slot_distance(doy_slot(**d), doy) <= window)
        .map(|(i, _)| i)
        .collect()
}

/// Per-cell pooled samples for one day-of-year slot. Missing values are
/// skipped, so counts only differ between cells when data are missing.
pub fn day_of_year_pool(stack: &GridStack, doy: u32, window: u32) -> Vec<Vec<f32>> {
    assert!((1..=DOY_SLOTS).contains(&doy), "doy {doy} outside 1..=366");
    let idx = pool_indices(&stack.dates(), doy, window);
    let (nlat, nlon) = stack.shape();
    let values = stack.values();
    let mut out = Vec::with_capacity(nlat * nlon);
    for i in 0..nlat {
        for j in 0..nlon {
            out.push(idx.iter().map(|&t| values[[t, i, j]]).filter(|v| !v.is_nan()).collect());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Season {
    #[serde(rename = "DJF")]
    Djf,
    #[serde(rename = "MAM")]
    Mam,
    #[serde(rename = "JJA")]
    Jja,
    #[serde(rename = "SON")]
    Son,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Djf, Season::Mam, Season::Jja, Season::Son];

    pub fn of(date: NaiveDate) -> Season {
        match date.month() {
            12 | 1 | 2 => Season::Djf,
            3..=5 => Season::Mam,
            6..=8 => Season::Jja,
            _ => Season::Son,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Season::Djf => "DJF",
            Season::Mam => "MAM",
            Season::Jja => "JJA",
            Season::Son => "SON",
        }
    }

    pub fn parse(s: &str) -> Option<Season> {
        Season::ALL.into_iter().find(|x| x.label().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeasonMask {
    pub season: Season,
    pub mask: Vec<bool>,
}

impl SeasonMask {
    pub fn indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Month-based seasonal masks (DJF, MAM, JJA, SON) over a date axis.
pub fn season_split(dates: &[NaiveDate]) -> [SeasonMask; 4] {
    Season::ALL.map(|season| SeasonMask {
        season,
        mask: dates.iter().map(|d| Season::of(*d) == season).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use ndarray::Array3;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
        (0..n).map(|i| start + Duration::days(i as i64)).collect()
    }

    // Count by explicit enumeration of the calendar rather than slot arithmetic.
    fn brute_pool_count(dates: &[NaiveDate], doy: u32, window: u32) -> usize {
        let mut count = 0;
        for date in dates {
            let mut hit = false;
            for off in -(window as i64)..=(window as i64) {
                let mut s = doy as i64 + off;
                if s < 1 {
                    s += 366;
                }
                if s > 366 {
                    s -= 366;
                }
                if s as u32 == doy_slot(*date) {
                    hit = true;
                }
            }
            if hit {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn leap_day_is_slot_60() {
        assert_eq!(doy_slot(d(2004, 2, 29)), 60);
        assert_eq!(doy_slot(d(2003, 3, 1)), 61);
        assert_eq!(doy_slot(d(2004, 3, 1)), 61);
        assert_eq!(doy_slot(d(2003, 12, 31)), 366);
    }

    #[test]
    fn pool_wraps_year_boundary() {
        let dates = days(d(2001, 1, 1), 365);
        let idx = pool_indices(&dates, 1, 15);
        assert_eq!(idx.len(), 31);
        assert_eq!(brute_pool_count(&dates, 1, 15), 31);
        // wrapped tail reaches back into late December
        assert!(idx.contains(&(364 - 14)));
    }

    #[test]
    fn pool_two_years_mid_summer() {
        let dates = days(d(2001, 1, 1), 730);
        assert_eq!(pool_indices(&dates, 183, 15).len(), 62);
        assert_eq!(brute_pool_count(&dates, 183, 15), 62);
    }

    #[test]
    fn window_zero_is_single_calendar_day() {
        let dates = days(d(2001, 1, 1), 730);
        let idx = pool_indices(&dates, 100, 0);
        assert_eq!(idx.len(), 2);
        assert!(idx.iter().all(|&i| doy_slot(dates[i]) == 100));
    }

    #[test]
    fn pool_counts_match_enumeration_everywhere() {
        let dates = days(d(2003, 6, 1), 1000);
        for doy in [1, 45, 60, 61, 75, 200, 366] {
            for w in [0, 3, 15] {
                assert_eq!(
                    pool_indices(&dates, doy, w).len(),
                    brute_pool_count(&dates, doy, w),
                    "doy {doy} window {w}"
                );
            }
        }
    }

    #[test]
    fn per_cell_pool_counts_constant() {
        let v = Array3::from_shape_fn((365, 2, 3), |(t, i, j)| (t + i + j) as f32);
        let s = GridStack::new(v, vec![0.0, 1.0], vec![0.0, 1.0, 2.0], d(2001, 1, 1), "K").unwrap();
        let pools = day_of_year_pool(&s, 1, 15);
        assert_eq!(pools.len(), 6);
        assert!(pools.iter().all(|p| p.len() == 31));
    }

    #[test]
    fn seasons() {
        assert_eq!(Season::of(d(2001, 1, 15)), Season::Djf);
        assert_eq!(Season::of(d(2001, 7, 1)), Season::Jja);
        assert_eq!(Season::of(d(2001, 12, 1)), Season::Djf);
        assert_eq!(Season::parse("son"), Some(Season::Son));
    }

    #[test]
    fn masks_partition_axis() {
        let dates = days(d(1999, 11, 3), 800);
        let masks = season_split(&dates);
        for t in 0..dates.len() {
            assert_eq!(masks.iter().filter(|m| m.mask[t]).count(), 1);
        }
    }
}
