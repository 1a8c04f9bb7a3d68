//! Evaluation of projections against observations: daily metrics per
//! location, pooled monthly and annual metrics, extreme indices, report
//! files and cross-method comparison.

mod climdex;
mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{season_split, GridStack};

pub use climdex::{
    climdex_compare, cwd, r20, rx5day, sdii, ClimdexReport, Index, IndexRecord, IndexSummary, HEAVY_MM, RX_WINDOW,
    WET_DAY_MM,
};
pub use metrics::{
    aggregate, bias, daily_metrics, large_scale_metrics, pearson, rmse, skill_score, DailyMetrics, Period,
    PooledMetrics, Scale, SKILL_BIN_WIDTH,
};

/// Season label of the all-days rows.
pub const ALL_SEASONS: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationRow {
    /// `daily`, `monthly` or `annual`
    pub scale: String,
    /// `all` or a season label; always `all` above daily scale
    pub season: String,
    pub cell: usize,
    pub lat: f64,
    pub lon: f64,
    pub bias: f64,
    pub rmse: f64,
    pub pearson: Option<f64>,
    pub skill: f64,
}

/// Daily metrics averaged over locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMeanRow {
    pub season: String,
    pub bias: f64,
    pub rmse: f64,
    /// mean over locations with a defined correlation
    pub pearson: Option<f64>,
    pub skill: f64,
    pub locations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRow {
    pub scale: Scale,
    pub metrics: PooledMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub bin_width: f64,
    pub locations: Vec<LocationRow>,
    pub daily: Vec<SpatialMeanRow>,
    pub pooled: Vec<PooledRow>,
}

#[allow(clippy::too_many_arguments)]
fn location_rows(
    cell: usize,
    lat: f64,
    lon: f64,
    p: &[f64],
    o: &[f64],
    dates: &[chrono::NaiveDate],
    seasons: &[(String, Vec<usize>)],
    bin_width: f64,
) -> Result<Vec<LocationRow>> {
    let mut rows = Vec::new();
    let row = |scale: &str, season: &str, m: DailyMetrics| LocationRow {
        scale: scale.into(),
        season: season.into(),
        cell,
        lat,
        lon,
        bias: m.bias,
        rmse: m.rmse,
        pearson: m.pearson,
        skill: m.skill,
    };
    for (label, idx) in seasons {
        if idx.len() < 2 {
            continue;
        }
        let ps: Vec<f64> = idx.iter().map(|&t| p[t]).collect();
        let os: Vec<f64> = idx.iter().map(|&t| o[t]).collect();
        rows.push(row("daily", label, daily_metrics(&ps, &os, bin_width)?));
    }
    for scale in [Scale::Monthly, Scale::Annual] {
        let pa = aggregate(dates, p, scale)?;
        let oa = aggregate(dates, o, scale)?;
        if pa.len() >= 2 && pa.len() == oa.len() {
            let pv: Vec<f64> = pa.iter().map(|x| x.1).collect();
            let ov: Vec<f64> = oa.iter().map(|x| x.1).collect();
            rows.push(row(scale.label(), ALL_SEASONS, daily_metrics(&pv, &ov, bin_width)?));
        }
    }
    Ok(rows)
}

/// Metrics of a projection against aligned observations. Cells missing in
/// either stack are skipped.
pub fn evaluate(method: &str, pred: &GridStack, obs: &GridStack, bin_width: f64) -> Result<EvalReport> {
    pred.check_grid_aligned(obs)?;
    pred.check_time_aligned(obs)?;
    let dates = pred.dates();
    let mut seasons: Vec<(String, Vec<usize>)> = vec![(ALL_SEASONS.into(), (0..dates.len()).collect())];
    seasons.extend(
        season_split(&dates)
            .iter()
            .map(|m| (m.season.label().to_string(), m.indices())),
    );
    let nlon = pred.shape().1;
    let series: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..pred.n_cells())
        .map(|c| {
            let p: Vec<f64> = pred.cell_series(c).into_iter().map(f64::from).collect();
            let o: Vec<f64> = obs.cell_series(c).into_iter().map(f64::from).collect();
            (c, p, o)
        })
        .filter(|(_, p, o)| p.iter().chain(o).all(|v| !v.is_nan()))
        .collect();
    if series.is_empty() {
        return Err(Error::AllMissing);
    }
    let per_cell: Vec<Vec<LocationRow>> = series
        .par_iter()
        .map(|(c, p, o)| {
            let (lat, lon) = (pred.lats()[c / nlon], pred.lons()[c % nlon]);
            location_rows(*c, lat, lon, p, o, &dates, &seasons, bin_width)
        })
        .collect::<Result<_>>()?;
    let locations: Vec<LocationRow> = per_cell.into_iter().flatten().collect();
    let mut daily = Vec::new();
    for (label, _) in &seasons {
        let rows: Vec<&LocationRow> = locations
            .iter()
            .filter(|r| r.scale == "daily" && &r.season == label)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let corr: Vec<f64> = rows.iter().filter_map(|r| r.pearson).collect();
        daily.push(SpatialMeanRow {
            season: label.clone(),
            bias: rows.iter().map(|r| r.bias).sum::<f64>() / n,
            rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / n,
            pearson: (!corr.is_empty()).then(|| corr.iter().sum::<f64>() / corr.len() as f64),
            skill: rows.iter().map(|r| r.skill).sum::<f64>() / n,
            locations: rows.len(),
        });
    }
    let ps: Vec<Vec<f64>> = series.iter().map(|s| s.1.clone()).collect();
    let os: Vec<Vec<f64>> = series.iter().map(|s| s.2.clone()).collect();
    let mut pooled = Vec::new();
    for scale in [Scale::Monthly, Scale::Annual] {
        match large_scale_metrics(&dates, &ps, &os, scale, bin_width) {
            Ok(metrics) => pooled.push(PooledRow { scale, metrics }),
            Err(Error::InsufficientData(msg)) => log::warn!("{msg}"),
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        method: method.into(),
        bin_width,
        locations,
        daily,
        pooled,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| GAP.to_string(), |x| x.to_string())
}

/// Marker written for a missing value.
pub const GAP: &str = "NA";

/// One row per location and metric, then spatial means and pooled rows.
pub fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "scale", "season", "cell", "lat", "lon", "metric", "value"])?;
    for r in &report.locations {
        let metrics = [
            ("bias", Some(r.bias)),
            ("rmse", Some(r.rmse)),
            ("pearson", r.pearson),
            ("skill", Some(r.skill)),
        ];
        for (name, v) in metrics {
            w.write_record([
                report.method.as_str(),
                &r.scale,
                &r.season,
                &r.cell.to_string(),
                &r.lat.to_string(),
                &r.lon.to_string(),
                name,
                &fmt_opt(v),
            ])?;
        }
    }
    for r in &report.daily {
        let metrics = [
            ("bias", Some(r.bias)),
            ("rmse", Some(r.rmse)),
            ("pearson", r.pearson),
            ("skill", Some(r.skill)),
        ];
        for (name, v) in metrics {
            w.write_record([
                report.method.as_str(),
                "daily",
                &r.season,
                "mean",
                "",
                "",
                name,
                &fmt_opt(v),
            ])?;
        }
    }
    for r in &report.pooled {
        let m = &r.metrics;
        for (name, v) in [("rmse", Some(m.rmse)), ("pearson", m.pearson), ("skill", Some(m.skill))] {
            w.write_record([
                report.method.as_str(),
                r.scale.label(),
                ALL_SEASONS,
                "pooled",
                "",
                "",
                name,
                &fmt_opt(v),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One row per index, location and period.
pub fn write_climdex_csv(method: &str, report: &ClimdexReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "index", "cell", "year", "month", "observed", "projected"])?;
    for r in &report.records {
        w.write_record([
            method,
            r.index.label(),
            &r.cell.to_string(),
            &r.year.to_string(),
            &r.month.map_or_else(String::new, |m| m.to_string()),
            &fmt_opt(r.observed),
            &fmt_opt(r.projected),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Version tag of [`Summary`].
pub const SUMMARY_SCHEMA: u32 = 1;

type MetricTable = BTreeMap<String, BTreeMap<String, Option<f64>>>;

/// Headline numbers of one method, keyed table → scope → metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub method: String,
    pub tables: BTreeMap<String, MetricTable>,
}

pub fn summarize(report: &EvalReport, climdex: &ClimdexReport) -> Summary {
    let mut tables: BTreeMap<String, MetricTable> = BTreeMap::new();
    let daily = tables.entry("daily".into()).or_default();
    for r in &report.daily {
        daily.insert(
            r.season.clone(),
            BTreeMap::from([
                ("bias".into(), Some(r.bias)),
                ("rmse".into(), Some(r.rmse)),
                ("pearson".into(), r.pearson),
                ("skill".into(), Some(r.skill)),
            ]),
        );
    }
    let large = tables.entry("large_scale".into()).or_default();
    for r in &report.pooled {
        large.insert(
            r.scale.label().into(),
            BTreeMap::from([
                ("rmse".into(), Some(r.metrics.rmse)),
                ("pearson".into(), r.metrics.pearson),
                ("skill".into(), Some(r.metrics.skill)),
            ]),
        );
    }
    let cd = tables.entry("climdex".into()).or_default();
    for s in &climdex.summary {
        cd.insert(
            s.index.label().into(),
            BTreeMap::from([
                ("pearson".into(), s.pearson),
                ("skill".into(), (s.n > 0).then_some(s.skill)),
            ]),
        );
    }
    Summary {
        schema: SUMMARY_SCHEMA,
        method: report.method.clone(),
        tables,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub table: String,
    pub scope: String,
    pub metric: String,
    pub method: String,
    pub value: Option<f64>,
    /// 1 is best; `None` for a gap
    pub rank: Option<usize>,
}

/// Rank key: smaller is better.
fn badness(metric: &str, v: f64) -> f64 {
    match metric {
        "bias" => v.abs(),
        "rmse" => v,
        _ => -v,
    }
}

/// Merges summaries into one long table keyed by (table, scope, metric,
/// method). Keys missing from a summary appear as gaps.
pub fn compare_summaries(summaries: &[Summary]) -> Result<Vec<CompareRow>> {
    if summaries.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "{} summaries; comparison needs 2",
            summaries.len()
        )));
    }
    let mut methods = BTreeSet::new();
    for s in summaries {
        if s.schema != SUMMARY_SCHEMA {
            return Err(Error::Schema(format!(
                "{} has schema {}, expected {SUMMARY_SCHEMA}",
                s.method, s.schema
            )));
        }
        if !methods.insert(s.method.as_str()) {
            return Err(Error::Schema(format!("method {} appears twice", s.method)));
        }
    }
    let mut keys = BTreeSet::new();
    for s in summaries {
        for (t, scopes) in &s.tables {
            for (sc, metrics) in scopes {
                for m in metrics.keys() {
                    keys.insert((t.clone(), sc.clone(), m.clone()));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (t, sc, m) in keys {
        let values: Vec<Option<f64>> = summaries
            .iter()
            .map(|s| {
                s.tables
                    .get(&t)
                    .and_then(|x| x.get(&sc))
                    .and_then(|x| x.get(&m))
                    .copied()
                    .flatten()
            })
            .collect();
        for (s, v) in summaries.iter().zip(&values) {
            let rank = v.map(|x| {
                1 + values
                    .iter()
                    .flatten()
                    .filter(|y| badness(&m, **y) < badness(&m, x))
                    .count()
            });
            rows.push(CompareRow {
                table: t.clone(),
                scope: sc.clone(),
                metric: m.clone(),
                method: s.method.clone(),
                value: *v,
                rank,
            });
        }
    }
    Ok(rows)
}

pub fn write_compare_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["table", "scope", "metric", "method", "value", "rank"])?;
    for r in rows {
        w.write_record([
            r.table.as_str(),
            &r.scope,
            &r.metric,
            &r.method,
            &fmt_opt(r.value),
            &r.rank.map_or_else(|| GAP.to_string(), |x| x.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
