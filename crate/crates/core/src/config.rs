//! Declarative run configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use protospoof_dsp::FrontendConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};
use crate::loss::LossConfig;
use crate::net::NetConfig;
use crate::scoring::{Distance, TdcfParams};
use crate::seeds;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub distance: Distance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Feature cache directory; no caching when unset.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream. The `seed` fields of the `net` and
    /// `train` sections are derived from it and overwritten.
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub tdcf: TdcfParams,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.net.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.tdcf.validate()
    }

    /// Copy with the per-module seeds derived from the root seed.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        let mut c = self.clone();
        c.net.seed = seeds::derive(self.seed, "net");
        c.train.seed = seeds::derive(self.seed, "train");
        Ok(c)
    }
}
