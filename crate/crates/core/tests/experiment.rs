use std::path::Path;

use downscale::experiment::{
    cmd_compare, cmd_downscale, cmd_evaluate, cmd_synth, cmd_train, load_season_model, ExperimentConfig, HyperGrid,
    Method, SeasonModel, YearRange,
};
use downscale::grid::{load_grid_stack, synth_generate, Season, SynthConfig};
use downscale::Error;

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        synth: SynthConfig {
            years: 5,
            ..Default::default()
        },
        train_years: YearRange::new(1995, 1997),
        test_years: YearRange::new(1998, 1999),
        out_dir: out.to_path_buf(),
        cv_folds: 3,
        ..Default::default()
    };
    cfg.grid = HyperGrid {
        lambda1: vec![1e-3, 1e-1],
        lambda2: vec![1e-2],
        clf_lambda1: vec![1e-3],
        ..HyperGrid::default()
    };
    cfg.cnn.epochs = 3;
    cfg
}

#[test]
fn every_method_trains_downscales_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    cmd_synth(&cfg).unwrap();
    for method in Method::ALL {
        let c = ExperimentConfig { method, ..cfg.clone() };
        let trained = cmd_train(&c).unwrap();
        assert_eq!(trained.audit.test_dates, 0, "{method}");
        assert!(trained.audit.dates_checked > 0);
        for season in Season::ALL {
            assert!(trained.models_dir.join(format!("{}.json", season.label())).exists());
        }
        let out = cmd_downscale(&c).unwrap();
        let stack = load_grid_stack(&out.projection).unwrap();
        assert_eq!(stack.n_times(), 730);
        assert!(stack.values().iter().all(|v| *v >= 0.0), "{method}");
        cmd_evaluate(&c).unwrap();
    }
    let compare = cmd_compare(&cfg, &Method::ALL).unwrap();
    let text = std::fs::read_to_string(compare).unwrap();
    let rmse_rows = text.lines().filter(|l| l.starts_with("daily,all,rmse,")).count();
    assert_eq!(rmse_rows, 7);
}

#[test]
fn provenance_maps_july_to_summer_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        method: Method::Bcsd,
        ..small_config(dir.path())
    };
    cmd_synth(&cfg).unwrap();
    let trained = cmd_train(&cfg).unwrap();
    let bcsd = load_season_model(&trained.models_dir, Season::Djf).unwrap();
    assert!(matches!(bcsd.model, SeasonModel::Bcsd { .. }));
    let out = cmd_downscale(&cfg).unwrap();
    let prov = std::fs::read_to_string(out.provenance).unwrap();
    let july = prov.lines().find(|l| l.starts_with("1998-07-15")).unwrap();
    assert!(july.contains(",JJA,") && july.ends_with("JJA.json"), "{july}");
    assert_eq!(prov.lines().count(), 731);
}

#[test]
fn missing_season_model_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        method: Method::PcaOls,
        ..small_config(dir.path())
    };
    cmd_synth(&cfg).unwrap();
    let trained = cmd_train(&cfg).unwrap();
    std::fs::remove_file(trained.models_dir.join("SON.json")).unwrap();
    assert!(matches!(cmd_downscale(&cfg), Err(Error::MissingModel(_))));
}

#[test]
fn perfect_projection_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = synth_generate(&cfg.synth_config()).unwrap();
    let obs = data.fine_obs.year_range(1997, 1998).unwrap();
    let out = downscale::experiment::evaluate_projection(&cfg, Method::Elnet, &obs, &obs).unwrap();
    let summary = std::fs::read_to_string(out.summary).unwrap();
    let s: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(s["tables"]["daily"]["all"]["rmse"], 0.0);
    assert_eq!(s["tables"]["daily"]["all"]["skill"], 1.0);
    assert_eq!(s["tables"]["large_scale"]["annual"]["skill"], 1.0);
}

#[test]
fn invalid_grid_ratio_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.synth.fine_lat = 4;
    assert!(matches!(cmd_synth(&cfg), Err(Error::Config(_))));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_synth(&small_config(a.path())).unwrap();
    cmd_synth(&small_config(b.path())).unwrap();
    for name in ["fine_obs.f32", "model_precip.f32", "covariate_00.f32", "dataset.json"] {
        let x = std::fs::read(a.path().join("data").join(name)).unwrap();
        let y = std::fs::read(b.path().join("data").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}
