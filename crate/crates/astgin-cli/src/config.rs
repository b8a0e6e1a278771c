//! Run configuration: a JSON file with strict (unknown-key-rejecting)
//! parsing plus command-line overrides.

use anyhow::{bail, Context, Result};
use astgin::synth::SynthConfig;
use astgin::trainer::{Ablation, ArchConfig, SplitKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Gaussian kernel bandwidth; defaults to the distance standard deviation.
    pub sigma: Option<f64>,
    /// Distance cutoff; defaults to the 95th percentile of distances.
    pub kappa: Option<f64>,
    /// Road-distance matrix override file (square CSV with id header).
    pub distance_matrix: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Processed dataset directory (output of `astgin ingest`).
    pub data_dir: Option<PathBuf>,
    /// Default output directory; `--out` overrides.
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub graph: GraphConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            out_dir: None,
            train: TrainConfig::default(),
            arch: ArchConfig::default(),
            graph: GraphConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| anyhow::Error::new(ConfigError(e.to_string())))
            .with_context(|| format!("invalid config file {}", path.display()))?;
        Ok(cfg)
    }

    /// Hash of the effective (post-override) configuration.
    pub fn sha256(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Configuration/validation failure (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Shared CLI overrides applied on top of the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Model variant: full, no_attributes, no_gcn, poi_only, weather_only.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Forecast horizon in minutes (30, 60, 90, or 120).
    #[arg(long)]
    pub horizon: Option<u32>,
    /// Random seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Processed dataset directory override.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Chronological (leakage-free) split instead of the random default.
    #[arg(long)]
    pub split_chronological: bool,
}

pub fn parse_ablation(name: &str) -> Result<Ablation> {
    Ok(match name {
        "full" => Ablation::Full,
        "no_attributes" => Ablation::NoAttributes,
        "no_gcn" => Ablation::NoGcn,
        "poi_only" => Ablation::PoiOnly,
        "weather_only" => Ablation::WeatherOnly,
        other => bail!(ConfigError(format!(
            "unknown ablation `{other}`; valid: full, no_attributes, no_gcn, poi_only, weather_only"
        ))),
    })
}

pub fn horizon_minutes_to_steps(minutes: u32) -> Result<usize> {
    match minutes {
        30 => Ok(1),
        60 => Ok(2),
        90 => Ok(3),
        120 => Ok(4),
        other => bail!(ConfigError(format!(
            "horizon must be 30, 60, 90, or 120 minutes, got {other}"
        ))),
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(a) = &self.ablation {
            cfg.train.ablation = parse_ablation(a)?;
        }
        if let Some(h) = self.horizon {
            cfg.train.horizon_steps = horizon_minutes_to_steps(h)?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.data_dir = Some(d.clone());
        }
        if self.split_chronological {
            cfg.train.split = SplitKind::Chronological;
        }
        Ok(())
    }
}
