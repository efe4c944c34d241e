use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, RunConfig};
use crate::confidence::{
    self, ConfidenceHeatmap, ConfidenceResult, ConfidenceSettings, SurrogateDomainMap,
};
use crate::error::{Error, Result};
use crate::fastgp::{FastGpModel, FitDiagnostics, ModelFile, PeriodicKernel};

/// File format tag of a persisted surrogate.
pub const BUNDLE_FORMAT: &str = "porous-gp/surrogate";
pub const BUNDLE_VERSION: u32 = 1;

/// How the noise variance was initialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProvenance {
    /// Calibration level matching the training `(s, d)`.
    pub level: usize,
    pub rmse_bound: f64,
    pub noise_init: f64,
    pub calibration_hash: String,
}

#[derive(Serialize, Deserialize)]
struct BundleFile {
    format: String,
    version: u32,
    config_hash: String,
    config: RunConfig,
    noise: NoiseProvenance,
    model: ModelFile,
}

/// A fitted surrogate with everything needed to answer confidence queries.
#[derive(Clone, Debug)]
pub struct SurrogateModel {
    pub config: RunConfig,
    pub config_hash: String,
    pub noise: NoiseProvenance,
    pub model: FastGpModel,
}

/// Summary served by the model-info endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub config_hash: String,
    pub n: usize,
    pub s: usize,
    pub d: usize,
    pub injection_rate: f64,
    pub zeta: f64,
    pub zeta_init: f64,
    pub rmse_bound: f64,
    pub kernel: PeriodicKernel,
    pub diagnostics: FitDiagnostics,
    pub observed_min: f64,
    pub observed_max: f64,
    pub confidence: ConfidenceSettings,
}

impl SurrogateModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let file = BundleFile {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            config_hash: self.config_hash.clone(),
            config: self.config.canonical(),
            noise: self.noise.clone(),
            model: self.model.to_file(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file: BundleFile = serde_json::from_slice(bytes)?;
        if file.format != BUNDLE_FORMAT {
            return Err(Error::Format(format!(
                "not a surrogate model file (format {:?})",
                file.format
            )));
        }
        if file.version != BUNDLE_VERSION {
            return Err(Error::Format(format!(
                "surrogate file version {} is not supported",
                file.version
            )));
        }
        file.config.validate()?;
        let model = FastGpModel::from_file(file.model)?;
        if model.dim() != file.config.s + 1 || model.len() != file.config.n {
            return Err(Error::Format("model size does not match its configuration".into()));
        }
        Ok(Self {
            config: file.config,
            config_hash: file.config_hash,
            noise: file.noise,
            model,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::Format(format!("model file {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Warning text when `config` differs from the one the model was fit with.
    pub fn config_mismatch(&self, config: &RunConfig) -> Option<String> {
        hash_mismatch("model", &self.config_hash, &config.hash())
    }

    pub fn domain_map(&self) -> SurrogateDomainMap {
        SurrogateDomainMap::new(self.config.wells.injection_rate, self.config.s)
            .expect("validated configuration")
    }

    pub fn injection_rate(&self) -> f64 {
        self.config.wells.injection_rate
    }

    pub fn settings(&self) -> ConfidenceSettings {
        self.config.confidence
    }

    pub fn info(&self) -> ModelInfo {
        let y = self.model.observations();
        ModelInfo {
            config_hash: self.config_hash.clone(),
            n: self.config.n,
            s: self.config.s,
            d: self.config.d,
            injection_rate: self.injection_rate(),
            zeta: self.model.noise(),
            zeta_init: self.noise.noise_init,
            rmse_bound: self.noise.rmse_bound,
            kernel: self.model.kernel().clone(),
            diagnostics: self.model.diagnostics().clone(),
            observed_min: y.iter().cloned().fold(f64::INFINITY, f64::min),
            observed_max: y.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            confidence: self.settings(),
        }
    }

    pub fn confidence(&self, r: f64, h: f64) -> Result<ConfidenceResult> {
        confidence::expected_confidence(&self.model, &self.domain_map(), r, h, &self.settings())
    }

    pub fn rate_grid(&self, points: usize) -> Vec<f64> {
        confidence::default_rate_grid(self.injection_rate(), points)
    }

    pub fn threshold_grid(&self, points: usize) -> Result<Vec<f64>> {
        confidence::default_threshold_grid(&self.model, points)
    }

    pub fn curve(&self, h: f64, rates: &[f64]) -> Result<Vec<ConfidenceResult>> {
        confidence::confidence_curve(&self.model, &self.domain_map(), rates, h, &self.settings())
    }

    pub fn heatmap(&self, rates: &[f64], thresholds: &[f64]) -> Result<ConfidenceHeatmap> {
        confidence::confidence_heatmap(
            &self.model,
            &self.domain_map(),
            rates,
            thresholds,
            &self.settings(),
        )
    }

    pub fn min_rate(&self, h: f64, target: f64, rates: &[f64]) -> Result<Option<f64>> {
        confidence::min_rate_for_confidence(
            &self.model,
            &self.domain_map(),
            h,
            target,
            rates,
            &self.settings(),
        )
    }
}

/// SHA-256 of a file's bytes, hex.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

pub(crate) fn bytes_sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Warning text for an artifact whose embedded hash differs from the config's.
pub fn hash_mismatch(artifact: &str, found: &str, expected: &str) -> Option<String> {
    (found != expected).then(|| {
        format!(
            "{artifact} was produced with configuration {}…, current configuration is {}…",
            &found[..found.len().min(12)],
            &expected[..expected.len().min(12)]
        )
    })
}
