//! A dataset directory: covariate stacks, fine observations, coarse model
//! precipitation and, for synthetic data, the generating weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{load_grid_stack, save_grid_stack, GridStack, SynthDataset, TruthWeights};
use crate::persist::{load_json, save_json};

pub const MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    covariates: Vec<String>,
    fine_obs: String,
    model_precip: String,
    truth: Option<TruthWeights>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub covariates: Vec<GridStack>,
    pub fine_obs: GridStack,
    pub model_precip: GridStack,
    pub truth: Option<TruthWeights>,
}

impl From<SynthDataset> for Dataset {
    fn from(s: SynthDataset) -> Self {
        Dataset {
            covariates: s.covariates,
            fine_obs: s.fine_obs,
            model_precip: s.model_precip,
            truth: Some(s.truth),
        }
    }
}

impl Dataset {
    /// All stacks must share one daily calendar.
    pub fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::InvalidInput("dataset has no covariates".into()));
        }
        for c in &self.covariates {
            c.check_time_aligned(&self.fine_obs)?;
        }
        self.model_precip.check_time_aligned(&self.fine_obs)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut covariates = Vec::with_capacity(self.covariates.len());
        for (i, c) in self.covariates.iter().enumerate() {
            let name = format!("covariate_{i:02}.json");
            save_grid_stack(c, &dir.join(&name))?;
            covariates.push(name);
        }
        save_grid_stack(&self.fine_obs, &dir.join("fine_obs.json"))?;
        save_grid_stack(&self.model_precip, &dir.join("model_precip.json"))?;
        let m = Manifest {
            covariates,
            fine_obs: "fine_obs.json".into(),
            model_precip: "model_precip.json".into(),
            truth: self.truth.clone(),
        };
        save_json(&m, &dir.join(MANIFEST))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = load_json(&dir.join(MANIFEST))?;
        let covariates = m
            .covariates
            .iter()
            .map(|n| load_grid_stack(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        let d = Dataset {
            covariates,
            fine_obs: load_grid_stack(&dir.join(&m.fine_obs))?,
            model_precip: load_grid_stack(&dir.join(&m.model_precip))?,
            truth: m.truth,
        };
        d.validate()?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{synth_generate, SynthConfig};

    #[test]
    fn round_trip_is_exact() {
        let cfg = SynthConfig {
            years: 1,
            ..Default::default()
        };
        let d: Dataset = synth_generate(&cfg).unwrap().into();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.covariates, d.covariates);
        assert_eq!(back.fine_obs, d.fine_obs);
        assert_eq!(back.model_precip, d.model_precip);
        assert_eq!(back.truth, d.truth);
    }
}
