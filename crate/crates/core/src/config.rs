//! The run configuration file: TOML with one table per concern. Every key
//! is optional and unknown keys are rejected.
//!
//! ```toml
//! seed = 0
//! out = "run"
//!
//! [dataset]
//! bundle = "run/bundle"   # prepared bundle read by train, detect and search
//! train = "raw/train.csv" # raw inputs read by prepare
//! test = "raw/test.csv"
//! labels = "raw/labels.csv"
//! normalize_eps = 1e-8
//! rolling_stats_window = 0
//!
//! [synthetic]             # used by prepare when no raw inputs are given
//! train_len = 2000
//!
//! [scoring]
//! mode = "pot"
//!
//! [train]
//! epochs = 20
//!
//! [nas]
//! population = 20
//!
//! [inference]
//! batch_windows = 256
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SynthSpec;
use crate::detect::InferenceConfig;
use crate::error::{Error, Result};
use crate::nas::SearchConfig;
use crate::scoring::ThresholdSettings;
use crate::training::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Directory holding `train.csv`, `test.csv` and `labels.csv`.
    pub bundle: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub normalize_eps: f64,
    /// Window of the rolling mean and deviation channels appended at
    /// preparation; 0 appends none.
    pub rolling_stats_window: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            bundle: None,
            train: None,
            test: None,
            labels: None,
            normalize_eps: 1e-8,
            rolling_stats_window: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Seeds model initialization, training order and the search.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub synthetic: SynthSpec,
    pub scoring: ThresholdSettings,
    pub train: TrainConfig,
    pub nas: SearchConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            out: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            synthetic: SynthSpec::default(),
            scoring: ThresholdSettings::default(),
            train: TrainConfig::default(),
            nas: SearchConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                source_name: source_name.to_string(),
                line,
                message: e.message().to_string(),
            }
        })?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{source_name}: unsupported schema_version {}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// The training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.nas.validate()?;
        if !(self.dataset.normalize_eps > 0.0) {
            return Err(Error::Config("dataset.normalize_eps must be positive".into()));
        }
        if self.inference.batch_windows == 0 || self.inference.max_iters == 0 {
            return Err(Error::Config("inference.batch_windows and max_iters must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
