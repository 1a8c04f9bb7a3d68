//! Experiment orchestration: dataset generation, seasonal training,
//! downscaling of the test years, evaluation and cross-method comparison.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! data/                     dataset manifest and stacks (unless data_dir is set)
//! models/<method>/<SEASON>.json, train_log.json, audit.json
//! projections/<method>.json (+ payload), <method>_provenance.csv
//! reports/<method>_eval.csv, <method>_climdex.csv, <method>_summary.json, compare.csv
//! ```

mod audit;
mod config;
mod dataset;
mod fit;

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    climdex_compare, compare_summaries, evaluate, summarize, write_climdex_csv, write_compare_csv, write_eval_csv,
    Summary,
};
use crate::grid::{load_grid_stack, save_grid_stack, synth_generate, GridStack, Season, PRECIP_UNITS};
use crate::persist::{load_cnn_model, load_json, save_cnn_model, save_json};
use crate::preprocess::TargetMatrix;

pub use audit::{AuditEntry, AuditReport, LeakageAudit};
pub use config::{ExperimentConfig, HyperGrid, Method, YearRange};
pub use dataset::{Dataset, MANIFEST};
pub use fit::{season_slots, LocationModel, SeasonFile, SeasonLog, SeasonModel, Selection};

use fit::{fit_bcsd_all, network_inputs, predict_season, Period, TrainContext};

pub const TRAIN_LOG: &str = "train_log.json";
pub const AUDIT_FILE: &str = "audit.json";
pub const COMPARE_FILE: &str = "compare.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub method: Method,
    pub train_years: YearRange,
    pub seasons: Vec<SeasonLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub models_dir: PathBuf,
    pub log: TrainLog,
    pub audit: AuditReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownscaleOutcome {
    pub projection: PathBuf,
    pub provenance: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOutcome {
    pub eval_csv: PathBuf,
    pub climdex_csv: PathBuf,
    pub summary: PathBuf,
}

pub fn season_model_path(dir: &Path, season: Season) -> PathBuf {
    dir.join(format!("{}.json", season.label()))
}

pub fn provenance_path(cfg: &ExperimentConfig, method: Method) -> PathBuf {
    cfg.out_dir
        .join("projections")
        .join(format!("{}_provenance.csv", method.label()))
}

pub fn summary_path(cfg: &ExperimentConfig, method: Method) -> PathBuf {
    cfg.reports_dir().join(format!("{}_summary.json", method.label()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates the synthetic dataset into the data directory.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let data: Dataset = synth_generate(&cfg.synth_config())?.into();
    let dir = cfg.data_dir();
    data.save(&dir)?;
    log::info!("wrote synthetic dataset to {}", dir.display());
    Ok(dir)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::load(&cfg.data_dir())
}

/// Fits one model per season for `cfg.method` on the training years.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let method = cfg.method;
    let data = load_dataset(cfg)?;
    let period = Period::new(&data, cfg.train_years.first, cfg.train_years.last)?;
    let targets = TargetMatrix::from_stack(&period.data.fine_obs)?;
    let audit = LeakageAudit::new(cfg.test_years);
    let bcsd = if method.uses_bcsd() {
        Some(fit_bcsd_all(&period, cfg.bcsd_window, &audit)?)
    } else {
        None
    };
    let images = if method == Method::Cnn {
        Some(network_inputs(&period.data.covariates)?)
    } else {
        None
    };
    let ctx = TrainContext {
        cfg,
        period: &period,
        targets: &targets,
        audit: &audit,
        bcsd: bcsd.as_ref(),
        images: images.as_ref(),
    };
    log::info!("training {method} on {} ({} days)", cfg.train_years, period.dates.len());
    let fitted: Vec<(SeasonFile, SeasonLog)> = Season::ALL
        .par_iter()
        .map(|s| ctx.fit_season(method, *s))
        .collect::<Result<_>>()?;

    let dir = cfg.models_dir(method);
    create_dir(&dir)?;
    let mut seasons = Vec::with_capacity(fitted.len());
    for (file, slog) in fitted {
        if let SeasonModel::Cnn {
            bundle,
            model: Some(model),
        } = &file.model
        {
            save_cnn_model(model, &dir.join(bundle))?;
        }
        save_json(&file, &season_model_path(&dir, file.season))?;
        seasons.push(slog);
    }
    let log = TrainLog {
        method,
        train_years: cfg.train_years,
        seasons,
    };
    save_json(&log, &dir.join(TRAIN_LOG))?;
    let audit = audit.report();
    save_json(&audit, &dir.join(AUDIT_FILE))?;
    Ok(TrainOutcome {
        models_dir: dir,
        log,
        audit,
    })
}

/// Reads a persisted seasonal model, including network parameters.
pub fn load_season_model(dir: &Path, season: Season) -> Result<SeasonFile> {
    let path = season_model_path(dir, season);
    if !path.exists() {
        return Err(Error::MissingModel(format!(
            "{} model at {}",
            season.label(),
            path.display()
        )));
    }
    let mut file: SeasonFile = load_json(&path)?;
    if file.season != season {
        return Err(Error::Schema(format!(
            "{} holds a {} model",
            path.display(),
            file.season.label()
        )));
    }
    if let SeasonModel::Cnn { bundle, model } = &mut file.model {
        *model = Some(Box::new(load_cnn_model(&dir.join(&*bundle))?));
    }
    Ok(file)
}

/// Projects the test years with the trained seasonal models. Each day is
/// handled by the model of its season; cells without a model are NaN.
pub fn cmd_downscale(cfg: &ExperimentConfig) -> Result<DownscaleOutcome> {
    cfg.validate()?;
    let method = cfg.method;
    let data = load_dataset(cfg)?;
    let period = Period::new(&data, cfg.test_years.first, cfg.test_years.last)?;
    let dir = cfg.models_dir(method);
    let images = if method == Method::Cnn {
        Some(network_inputs(&period.data.covariates)?)
    } else {
        None
    };
    let obs = &period.data.fine_obs;
    let (h, w) = obs.shape();
    let mut out = Array3::from_elem((period.dates.len(), h, w), f32::NAN);
    let mut provenance: Vec<(usize, Season, PathBuf)> = Vec::with_capacity(period.dates.len());
    for season in Season::ALL {
        let rows = period.season_rows(season);
        if rows.is_empty() {
            continue;
        }
        let file = load_season_model(&dir, season)?;
        if file.method != method {
            return Err(Error::Config(format!(
                "{} holds {} models, expected {method}",
                dir.display(),
                file.method
            )));
        }
        let pred = predict_season(&file, &period, &rows, images.as_ref(), cfg.rain_threshold)?;
        let model_path = season_model_path(&dir, season);
        for (i, &t) in rows.iter().enumerate() {
            for (j, &c) in file.cells.iter().enumerate() {
                out[[t, c / w, c % w]] = pred[(i, j)].max(0.0) as f32;
            }
            provenance.push((t, season, model_path.clone()));
        }
    }
    provenance.sort_by_key(|p| p.0);
    let stack = GridStack::new(
        out,
        obs.lats().to_vec(),
        obs.lons().to_vec(),
        obs.start_date(),
        PRECIP_UNITS,
    )?
    .with_descriptor(obs.variable(), obs.level());
    let projection = cfg.projection_path(method);
    save_grid_stack(&stack, &projection)?;

    let prov_path = provenance_path(cfg, method);
    let mut wtr = csv::Writer::from_path(&prov_path)?;
    wtr.write_record(["date", "season", "model"])?;
    for (t, season, path) in &provenance {
        let rel = path.strip_prefix(&cfg.out_dir).unwrap_or(path);
        wtr.write_record([
            period.dates[*t].to_string(),
            season.label().to_string(),
            rel.display().to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io(&prov_path, e))?;
    log::info!("wrote {} projected days to {}", provenance.len(), projection.display());
    Ok(DownscaleOutcome {
        projection,
        provenance: prov_path,
    })
}

/// Scores a projection stack against the observations of the same days.
pub fn evaluate_projection(
    cfg: &ExperimentConfig,
    method: Method,
    pred: &GridStack,
    obs: &GridStack,
) -> Result<EvaluateOutcome> {
    let report = evaluate(method.label(), pred, obs, cfg.skill_bin_width)?;
    let climdex = climdex_compare(pred, obs, cfg.skill_bin_width)?;
    let dir = cfg.reports_dir();
    create_dir(&dir)?;
    let out = EvaluateOutcome {
        eval_csv: dir.join(format!("{}_eval.csv", method.label())),
        climdex_csv: dir.join(format!("{}_climdex.csv", method.label())),
        summary: summary_path(cfg, method),
    };
    write_eval_csv(&report, &out.eval_csv)?;
    write_climdex_csv(method.label(), &climdex, &out.climdex_csv)?;
    save_json(&summarize(&report, &climdex), &out.summary)?;
    Ok(out)
}

/// Evaluates the saved projection of `cfg.method` over the test years.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<EvaluateOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let obs = data.fine_obs.year_range(cfg.test_years.first, cfg.test_years.last)?;
    let pred = load_grid_stack(&cfg.projection_path(cfg.method))?;
    evaluate_projection(cfg, cfg.method, &pred, &obs)
}

/// Merges the summaries of the given methods into one ranked table.
pub fn cmd_compare(cfg: &ExperimentConfig, methods: &[Method]) -> Result<PathBuf> {
    let summaries = methods
        .iter()
        .map(|m| load_json::<Summary>(&summary_path(cfg, *m)))
        .collect::<Result<Vec<_>>>()?;
    let rows = compare_summaries(&summaries)?;
    let dir = cfg.reports_dir();
    create_dir(&dir)?;
    let path = dir.join(COMPARE_FILE);
    write_compare_csv(&rows, &path)?;
    Ok(path)
}

/// Methods that already have an evaluation summary, in canonical order.
pub fn evaluated_methods(cfg: &ExperimentConfig) -> Vec<Method> {
    Method::ALL
        .into_iter()
        .filter(|m| summary_path(cfg, *m).exists())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub compare: PathBuf,
    pub audits: Vec<(Method, AuditReport)>,
}

/// Synthesizes data, then trains, downscales and evaluates every method and
/// writes the comparison table.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    cmd_synth(cfg)?;
    let mut audits = Vec::with_capacity(Method::ALL.len());
    for method in Method::ALL {
        let c = ExperimentConfig { method, ..cfg.clone() };
        let trained = cmd_train(&c)?;
        cmd_downscale(&c)?;
        cmd_evaluate(&c)?;
        audits.push((method, trained.audit));
    }
    let compare = cmd_compare(cfg, &Method::ALL)?;
    Ok(PipelineOutcome { compare, audits })
}
