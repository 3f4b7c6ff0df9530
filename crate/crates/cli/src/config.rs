use std::fs;
use std::path::{Path, PathBuf};

use lidsn::data::{load_epochs, synth_generate, EpochSet, Protocol, SynthSpec};
use lidsn::model::ModelConfig;
use lidsn::training::{Preprocessing, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Path(PathBuf),
    Synth(SynthSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSpec::default())
    }
}

/// Everything one `train` invocation needs. Input extents of the model
/// section are replaced by those of the data when training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    /// Seed of the synthetic generator; unused for file data.
    pub data_seed: u64,
    pub protocol: Protocol,
    pub preprocessing: Preprocessing,
    pub output: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::default(),
            data_seed: 0,
            protocol: Protocol::Co,
            preprocessing: Preprocessing::default(),
            output: PathBuf::from("runs"),
            seeds: vec![0],
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seeds must not be empty".into()));
        }
        if let DataSource::Synth(spec) = &self.data {
            spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serialises") + "\n"
    }

    pub fn load_data(&self) -> Result<EpochSet, CliError> {
        Ok(match &self.data {
            DataSource::Path(p) => load_epochs(p)?,
            DataSource::Synth(spec) => synth_generate(spec, self.data_seed)?,
        })
    }
}
