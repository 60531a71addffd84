//! TOML run configuration. Unknown keys are rejected; absent keys take the
//! defaults below.

use std::path::{Path, PathBuf};

use ctqwformer::model::ModelConfig;
use ctqwformer::trainer::TrainConfig;
use ctqwformer::Error;
use serde::{Deserialize, Serialize};

pub const DATA_ROOT_ENV: &str = "CTQW_DATA_ROOT";
pub const DEFAULT_DATA_ROOT: &str = "data";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory holding one sub-directory per TU dataset.
    pub root: Option<PathBuf>,
    pub name: String,
    /// Append the log-scaled degree feature (the standard protocol).
    pub degree_features: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            root: None,
            name: "MUTAG".into(),
            degree_features: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub time_steps: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub use_qwgt: bool,
    pub use_qwgr: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 2);
        ModelSection {
            layers: m.layers,
            time_steps: m.time_steps,
            hidden: m.hidden,
            heads: m.heads,
            dropout: m.dropout,
            use_qwgt: m.use_qwgt,
            use_qwgr: m.use_qwgr,
        }
    }
}

impl ModelSection {
    /// Model configuration with class count and feature width still to be
    /// filled in from the dataset.
    pub fn to_model_config(&self, feature_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            time_steps: self.time_steps,
            hidden: self.hidden,
            heads: self.heads,
            dropout: self.dropout,
            num_classes,
            feature_dim,
            use_qwgt: self.use_qwgt,
            use_qwgr: self.use_qwgr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "results".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

/// Mirror of [`TrainConfig`] with per-field defaults for partial files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub folds: usize,
    pub val_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            patience: t.patience,
            seed: t.seed,
            folds: t.folds,
            val_fraction: t.val_fraction,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            patience: self.patience,
            seed: self.seed,
            folds: self.folds,
            val_fraction: self.val_fraction,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Dataset root by precedence: flag, config file, environment, default.
    pub fn resolve_root(&mut self, flag: Option<PathBuf>) {
        let root = flag
            .or_else(|| self.dataset.root.clone())
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_ROOT));
        self.dataset.root = Some(root);
    }

    pub fn root(&self) -> PathBuf {
        self.dataset.root.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_ROOT))
    }
}
