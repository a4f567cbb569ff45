//! Run configuration: one TOML file, every section optional, unknown keys
//! rejected. Flags override file values; the resolved result is written
//! beside the outputs.

use std::path::{Path, PathBuf};

use anyhow::Context;
use cogail_core::demos::DatasetSpec;
use cogail_core::env::{FetchQuest, Layout};
use cogail_core::expert::DEFAULT_NOISE;
use cogail_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const RESOLVED_NAME: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Training demonstrations.
    pub demos: Option<PathBuf>,
    /// Seeds swept by multi-seed evaluation.
    pub seeds: Vec<u64>,
    pub layout: Layout,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            demos: None,
            seeds: vec![300, 400, 500],
            layout: Layout::default(),
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            serve: ServeSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n: usize,
    /// Relative strategy weights, normalised on use.
    pub dist: [f64; 4],
    pub seed: u64,
    pub noise: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n: 60,
            dist: [25.0; 4],
            seed: 0,
            noise: DEFAULT_NOISE,
        }
    }
}

impl DatasetSection {
    pub fn spec(&self) -> anyhow::Result<DatasetSpec> {
        let mut spec = DatasetSpec::from_weights(self.n, self.dist, self.seed).map_err(usage)?;
        spec.noise = self.noise;
        spec.validate().map_err(usage)?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub codes: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            codes: cogail_core::eval::DEFAULT_CODES,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub host: String,
    /// Newline-delimited JSON over TCP.
    pub port: u16,
    /// WebSocket listener (one JSON message per text frame); 0 disables.
    pub ws_port: u16,
    pub tick_hz: f64,
    pub rounds: usize,
    /// Environment seed of round `r` is `round_seed + r`.
    pub round_seed: u64,
    pub record_dir: Option<PathBuf>,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 7878,
            ws_port: 0,
            tick_hz: 20.0,
            rounds: 20,
            round_seed: 10_000,
            record_dir: None,
        }
    }
}

pub fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    anyhow::Error::new(UsageError(e.to_string()))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        FetchQuest::new(self.layout.clone()).map_err(usage)?;
        self.dataset.spec()?;
        self.train.validate().map_err(usage)?;
        if self.eval.codes == 0 {
            return Err(usage("eval.codes must be positive"));
        }
        if !(self.serve.tick_hz > 0.0) || self.serve.rounds == 0 {
            return Err(usage("serve.tick_hz and serve.rounds must be positive"));
        }
        Ok(())
    }

    pub fn env(&self) -> anyhow::Result<FetchQuest> {
        FetchQuest::new(self.layout.clone()).map_err(usage)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Parses `17,17,33,33`.
pub fn parse_dist(s: &str) -> Result<[f64; 4], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 4]>::try_from(parts).map_err(|v| format!("expected 4 weights, got {}", v.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig =
            toml::from_str("seeds = [1]\n[train]\nmode = \"magail\"\nepisodes = 3\n[train.ppo]\nclip = 0.1\n").unwrap();
        assert_eq!(c.seeds, vec![1]);
        assert_eq!(c.train.episodes, 3);
        assert_eq!(c.train.ppo.clip, 0.1);
        assert_eq!(c.train.ppo.gamma, 0.99);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlambda3 = 1.0").is_err());
        assert!(toml::from_str::<RunConfig>("[train.ppo]\nbuffer = 1").is_err());
    }

    #[test]
    fn dist_parsing() {
        assert_eq!(parse_dist("17,17,33,33").unwrap(), [17.0, 17.0, 33.0, 33.0]);
        assert!(parse_dist("1,2,3").is_err());
        assert!(parse_dist("a,b,c,d").is_err());
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let mut c = RunConfig::default();
        c.dataset.dist = [0.0; 4];
        let e = c.validate().unwrap_err();
        assert!(e.is::<UsageError>());
    }
}
