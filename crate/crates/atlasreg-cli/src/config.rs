//! The run configuration document: one JSON file holding all four config
//! sections plus a schema version. Unknown keys are rejected so sweeps stay
//! auditable; the fully resolved config is echoed into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use atlasreg::experiment::{desk_preset, paper_preset, PresetBundle, TrainConfig};
use atlasreg::losses::LossConfig;
use atlasreg::network::NetworkConfig;
use atlasreg::synthgen::SynthConfig;
use atlasreg::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let PresetBundle {
            synth,
            network,
            train,
            loss,
        } = match preset {
            Preset::Desk => desk_preset(),
            Preset::Paper => paper_preset(),
        };
        RunConfig {
            schema_version: SCHEMA_VERSION,
            synth,
            network,
            train,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.synth.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// Resolves the effective config: explicit file if given, else the preset.
/// A seed override applies to both generation and training.
pub fn resolve(
    config_path: Option<&Path>,
    preset: Option<Preset>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = match config_path {
        Some(p) => atlasreg::io::read_json::<RunConfig>(p)?,
        None => RunConfig::from_preset(preset.unwrap_or(Preset::Desk)),
    };
    if let Some(s) = seed {
        cfg.synth.base_seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Default data root: $ATLASREG_DATA_DIR or ./data.
pub fn data_root() -> PathBuf {
    std::env::var_os("ATLASREG_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    atlasreg::io::write_json(&dir.join("config.json"), cfg)
}
