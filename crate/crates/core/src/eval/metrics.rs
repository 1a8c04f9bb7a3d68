//! Paired-series metrics and temporal aggregation.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default histogram bin width of the skill score, mm/day.
pub const SKILL_BIN_WIDTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyMetrics {
    pub bias: f64,
    pub rmse: f64,
    /// `None` when either series has zero variance
    pub pearson: Option<f64>,
    pub skill: f64,
}

fn check_pair(pred: &[f64], obs: &[f64], min_len: usize) -> Result<()> {
    if pred.len() != obs.len() {
        return Err(Error::Misaligned(format!(
            "{} predictions, {} observations",
            pred.len(),
            obs.len()
        )));
    }
    if pred.len() < min_len {
        return Err(Error::InsufficientData(format!(
            "{} values, need {min_len}",
            pred.len()
        )));
    }
    if pred.iter().chain(obs).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("series contain non-finite values".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation; `None` for a zero-variance series.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn bias(pred: &[f64], obs: &[f64]) -> f64 {
    mean(pred) - mean(obs)
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum();
    (s / pred.len() as f64).sqrt()
}

/// Histogram overlap of two samples: the sum over bins of the smaller
/// relative frequency. Bins have width `bin_width` and start at the smallest
/// value of either sample.
pub fn skill_score(a: &[f64], b: &[f64], bin_width: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData(
            "skill score needs two non-empty samples".into(),
        ));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::InvalidInput(format!("bin width {bin_width} must be positive")));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("samples contain non-finite values".into()));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let mut bins: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for v in a {
        bins.entry(((v - lo) / bin_width).floor() as u64).or_default().0 += 1;
    }
    for v in b {
        bins.entry(((v - lo) / bin_width).floor() as u64).or_default().1 += 1;
    }
    // min(ca/na, cb/nb) summed exactly as min(ca·nb, cb·na) / (na·nb)
    let (na, nb) = (a.len() as u128, b.len() as u128);
    let overlap: u128 = bins
        .values()
        .map(|&(ca, cb)| (ca as u128 * nb).min(cb as u128 * na))
        .sum();
    Ok(overlap as f64 / (na * nb) as f64)
}

/// Bias, RMSE, correlation and skill of one location's daily series.
pub fn daily_metrics(pred: &[f64], obs: &[f64], bin_width: f64) -> Result<DailyMetrics> {
    check_pair(pred, obs, 2)?;
    Ok(DailyMetrics {
        bias: bias(pred, obs),
        rmse: rmse(pred, obs),
        pearson: pearson(pred, obs),
        skill: skill_score(pred, obs, bin_width)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Monthly,
    Annual,
}

impl Scale {
    pub fn label(self) -> &'static str {
        match self {
            Scale::Monthly => "monthly",
            Scale::Annual => "annual",
        }
    }
}

/// A calendar month or year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Period {
    pub year: i32,
    pub month: Option<u32>,
}

pub(crate) fn days_in_month(year: i32, month: u32) -> u32 {
    let first = NaiveDate::from_ymd_opt(year, month, 1).expect("valid month");
    let next = if month == 12 {
        NaiveDate::from_ymd_opt(year + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(year, month + 1, 1)
    }
    .expect("valid month");
    (next - first).num_days() as u32
}

/// Totals per complete month or year. Units with a missing day or a
/// non-finite value are dropped with a warning. Annual totals are the sums
/// of their twelve monthly totals.
pub fn aggregate(dates: &[NaiveDate], series: &[f64], scale: Scale) -> Result<Vec<(Period, f64)>> {
    if dates.len() != series.len() {
        return Err(Error::Misaligned(format!(
            "{} dates, {} values",
            dates.len(),
            series.len()
        )));
    }
    let mut months: BTreeMap<(i32, u32), (u32, f64, bool)> = BTreeMap::new();
    for (d, v) in dates.iter().zip(series) {
        let e = months.entry((d.year(), d.month())).or_insert((0, 0.0, true));
        e.0 += 1;
        e.1 += v;
        e.2 &= v.is_finite();
    }
    let mut complete = BTreeMap::new();
    for ((y, m), (count, total, finite)) in months {
        if finite && count == days_in_month(y, m) {
            complete.insert((y, m), total);
        } else {
            log::warn!("dropping incomplete month {y}-{m:02} ({count} days)");
        }
    }
    match scale {
        Scale::Monthly => Ok(complete
            .into_iter()
            .map(|((y, m), t)| {
                (
                    Period {
                        year: y,
                        month: Some(m),
                    },
                    t,
                )
            })
            .collect()),
        Scale::Annual => {
            let mut years: BTreeMap<i32, (u32, f64)> = BTreeMap::new();
            for ((y, _), t) in complete {
                let e = years.entry(y).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += t;
            }
            Ok(years
                .into_iter()
                .filter(|(y, (n, _))| {
                    let full = *n == 12;
                    if !full {
                        log::warn!("dropping incomplete year {y}");
                    }
                    full
                })
                .map(|(y, (_, t))| (Period { year: y, month: None }, t))
                .collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledMetrics {
    pub rmse: f64,
    pub skill: f64,
    pub pearson: Option<f64>,
    /// number of pooled (location, unit) pairs
    pub n: usize,
}

/// Aggregates every location and pools all (location, unit) pairs.
/// `pred` and `obs` are per-location daily series over `dates`.
pub fn large_scale_metrics(
    dates: &[NaiveDate],
    pred: &[Vec<f64>],
    obs: &[Vec<f64>],
    scale: Scale,
    bin_width: f64,
) -> Result<PooledMetrics> {
    if pred.len() != obs.len() {
        return Err(Error::Misaligned(format!(
            "{} predicted and {} observed locations",
            pred.len(),
            obs.len()
        )));
    }
    let (mut p, mut o) = (Vec::new(), Vec::new());
    for (ps, os) in pred.iter().zip(obs) {
        let pa = aggregate(dates, ps, scale)?;
        let oa = aggregate(dates, os, scale)?;
        let om: BTreeMap<Period, f64> = oa.into_iter().collect();
        for (k, v) in pa {
            if let Some(ov) = om.get(&k) {
                p.push(v);
                o.push(*ov);
            }
        }
    }
    if p.is_empty() {
        return Err(Error::InsufficientData(format!("no complete {} units", scale.label())));
    }
    Ok(PooledMetrics {
        rmse: rmse(&p, &o),
        skill: skill_score(&p, &o, bin_width)?,
        pearson: pearson(&p, &o),
        n: p.len(),
    })
}
