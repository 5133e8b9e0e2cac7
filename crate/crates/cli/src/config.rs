use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use songdemand_core::bayes::McmcConfig;
use songdemand_core::clustering::{KMeansConfig, DEFAULT_K};
use songdemand_core::envelope::{ChangepointConfig, PartiteConfig};

use crate::error::{AppError, AppResult};

/// Settings read from `--config`; every field may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub mcmc: McmcConfig,
    pub changepoints: ChangepointConfig,
    pub partite: PartiteConfig,
    pub kmeans: KMeansConfig,
    pub clusters: usize,
    pub quantiles: Vec<f64>,
    /// Coverage of control-chart bands.
    pub band_level: f64,
    pub social_cap: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            mcmc: McmcConfig::default(),
            changepoints: ChangepointConfig { min_phase_weeks: 2, ..ChangepointConfig::default() },
            partite: PartiteConfig::default(),
            kmeans: KMeansConfig::default(),
            clusters: DEFAULT_K,
            quantiles: vec![0.05, 0.5, 0.95],
            band_level: 0.9,
            social_cap: 1.0,
        }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> AppResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let raw = std::fs::read(path)
            .map_err(|e| AppError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let config: AppConfig = serde_json::from_slice(&raw)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> AppResult<()> {
        self.mcmc.validate()?;
        if self.clusters == 0 {
            return Err(AppError::Validation("clusters must be positive".into()));
        }
        if self.quantiles.is_empty() || self.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(AppError::Validation("quantiles must lie in (0, 1)".into()));
        }
        if !(self.band_level > 0.0 && self.band_level < 1.0) {
            return Err(AppError::Validation("band_level must lie in (0, 1)".into()));
        }
        if !(self.social_cap >= 0.0) {
            return Err(AppError::Validation("social_cap must be non-negative".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    sha256_hex(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
