//! The run configuration: one TOML file with a table per module.
//!
//! ```toml
//! seed = 1
//!
//! [colored]
//! ssl_pairs = 4096
//!
//! [colored.rlvm]
//! epochs = 40
//!
//! [oracle]
//! mc_samples = 1000000
//!
//! [sweep]
//! param = "alpha"
//! values = [0.001, 0.01, 0.1, 1.0, 10.0]
//! ```
//!
//! `seed` is required. It replaces the `seed` of every section, so one
//! number fixes a whole run. Unknown keys are rejected.

use std::path::Path;

use pidssl::experiment::{ColoredExperiment, SweepParam};
use pidssl::oracle::OracleConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub colored: ColoredExperiment,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            param: SweepParam::Alpha,
            values: vec![0.001, 0.01, 0.1, 1.0, 10.0],
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.set_seed(cfg.seed);
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.colored.seed = seed;
        self.oracle.seed = seed;
    }

    fn validate(&self, origin: &Path) -> CliResult<()> {
        let wrap = |section: &str, e: pidssl::Error| CliError::Config {
            path: origin.to_path_buf(),
            message: format!("[{section}] {e}"),
        };
        self.colored.validate().map_err(|e| wrap("colored", e))?;
        self.oracle.validate().map_err(|e| wrap("oracle", e))?;
        if self.sweep.values.is_empty() {
            return Err(CliError::Config {
                path: origin.to_path_buf(),
                message: "[sweep] values must not be empty".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required_and_propagates() {
        let err =
            RunConfig::parse("[colored]\nssl_pairs = 512\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let cfg = RunConfig::parse("seed = 7\n", Path::new("x.toml")).unwrap();
        assert_eq!((cfg.colored.seed, cfg.oracle.seed), (7, 7));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("seed = 1\n[colored]\nsl_pairs = 3\n", Path::new("x.toml"))
            .unwrap_err();
        assert!(err.to_string().contains("sl_pairs"), "{err}");
    }
}
