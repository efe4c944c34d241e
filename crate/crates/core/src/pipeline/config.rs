use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{LevelSchedule, NoiseInit};
use crate::confidence::{ConfidenceSettings, SurrogateDomainMap};
use crate::darcy::{DarcyOptions, WellConfig};
use crate::error::{invalid, Result};
use crate::fastgp::{FitOptions, PriorMean};
use crate::qmc::{LatticeGenerator, DEFAULT_LATTICE_LOG2_MAX};
use crate::random_field::MaternCovariance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub schedule: LevelSchedule,
    /// Shared samples per level, `m`.
    pub samples: usize,
    pub seed: u64,
    pub noise_init: NoiseInit,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            schedule: LevelSchedule::default(),
            samples: 32,
            seed: 1,
            noise_init: NoiseInit::Squared,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Kernel smoothness order, 2 or 4.
    pub order: u32,
    pub prior_mean: PriorMean,
    pub optimize: bool,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let o = FitOptions::default();
        Self {
            order: 4,
            prior_mean: o.prior_mean,
            optimize: o.optimize,
            max_iterations: o.max_iterations,
            relative_tolerance: o.relative_tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Seed of the random shift shared by all training points; `None` uses the
    /// unshifted lattice, whose origin point needs the uniform clamp.
    pub shift_seed: Option<u64>,
    /// Generating vector override; the embedded default otherwise.
    pub generating_vector: Option<Vec<u64>>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            shift_seed: Some(0),
            generating_vector: None,
        }
    }
}

/// Every setting of a surrogate run. Missing JSON fields take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Side length of the square domain in metres.
    pub side_length: f64,
    pub wells: WellConfig,
    pub covariance: MaternCovariance,
    /// KL truncation used for training.
    pub s: usize,
    /// Mesh cells per side used for training.
    pub d: usize,
    /// Training size, a power of two.
    pub n: usize,
    pub darcy: DarcyOptions,
    pub calibration: CalibrationConfig,
    pub fit: FitConfig,
    pub sampling: SamplingConfig,
    pub confidence: ConfidenceSettings,
    pub rate_points: usize,
    pub threshold_points: usize,
    /// Ensemble worker threads; the global pool when unset. Not part of the
    /// configuration hash.
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            side_length: 200.0,
            wells: WellConfig::default(),
            covariance: MaternCovariance::default(),
            s: 8,
            d: 32,
            n: 1024,
            darcy: DarcyOptions::default(),
            calibration: CalibrationConfig::default(),
            fit: FitConfig::default(),
            sampling: SamplingConfig::default(),
            confidence: ConfidenceSettings::default(),
            rate_points: 65,
            threshold_points: 65,
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let config: Self = serde_json::from_slice(&fs::read(path)?)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.side_length.is_finite() && self.side_length > 0.0) {
            return Err(invalid(format!(
                "side length must be positive, got {}",
                self.side_length
            )));
        }
        self.wells.validate(self.side_length)?;
        if self.wells.injection_rate <= 0.0 {
            return Err(invalid("injection rate must be positive"));
        }
        self.covariance.validate()?;
        if !self.n.is_power_of_two() {
            return Err(invalid(format!("n = {} is not a power of two", self.n)));
        }
        let gen = self.generator()?;
        if self.n as u128 > 1u128 << gen.max_log2_points() {
            return Err(invalid(format!(
                "n = {} exceeds the lattice capacity 2^{}",
                self.n,
                gen.max_log2_points()
            )));
        }
        if self.s == 0 || self.s + 1 > gen.max_dim() {
            return Err(invalid(format!(
                "s = {} needs 1 + s ≤ {} lattice dimensions",
                self.s,
                gen.max_dim()
            )));
        }
        if self.d < 2 {
            return Err(invalid(format!("d = {} must be at least 2", self.d)));
        }
        self.calibration.schedule.validate()?;
        if self.calibration_level().is_none() {
            let sch = &self.calibration.schedule;
            return Err(invalid(format!(
                "(s, d) = ({}, {}) is not a level (v_s·2^j, v_d·2^j) of the calibration schedule \
                 (v_s = {}, v_d = {}, N = {})",
                self.s, self.d, sch.v_s, sch.v_d, sch.levels
            )));
        }
        if self.calibration.samples < 8 {
            return Err(invalid("calibration needs at least 8 samples"));
        }
        if self.fit.order != 2 && self.fit.order != 4 {
            return Err(invalid("kernel order must be 2 or 4"));
        }
        self.confidence.validate()?;
        if self.rate_points == 0 || self.threshold_points == 0 {
            return Err(invalid("grid sizes must be positive"));
        }
        if self.workers == Some(0) {
            return Err(invalid("worker count must be positive"));
        }
        Ok(())
    }

    /// Level `j` of the calibration schedule with `(s_j, d_j) = (s, d)`.
    pub fn calibration_level(&self) -> Option<usize> {
        let sch = &self.calibration.schedule;
        (0..=sch.levels).find(|&j| sch.s(j) == self.s && sch.d(j) == self.d)
    }

    /// Mesh and truncation the KL basis is built for: the finest of the
    /// schedule and the training level.
    pub fn basis_level(&self) -> (usize, usize) {
        let sch = &self.calibration.schedule;
        (
            sch.s(sch.levels).max(self.s),
            sch.d(sch.levels).max(self.d),
        )
    }

    /// Training lattice generator including the common shift.
    pub fn generator(&self) -> Result<LatticeGenerator> {
        let base = match &self.sampling.generating_vector {
            Some(v) => LatticeGenerator::new(v.clone(), DEFAULT_LATTICE_LOG2_MAX)?,
            None => LatticeGenerator::default(),
        };
        Ok(match self.sampling.shift_seed {
            Some(seed) => base.random_shift(seed),
            None => base,
        })
    }

    pub fn domain_map(&self) -> Result<SurrogateDomainMap> {
        SurrogateDomainMap::new(self.wells.injection_rate, self.s)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            optimize: self.fit.optimize,
            kernel: None,
            order: self.fit.order,
            prior_mean: self.fit.prior_mean,
            max_iterations: self.fit.max_iterations,
            relative_tolerance: self.fit.relative_tolerance,
            ..FitOptions::default()
        }
    }

    /// The configuration without settings that cannot change results.
    pub fn canonical(&self) -> Self {
        Self {
            workers: None,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.canonical()).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.calibration_level(), Some(3));
        assert_eq!(c.basis_level(), (8, 32));
        assert_eq!(c.wells.injection_rate, 0.031688);
        assert_eq!(c.covariance.correlation_length, 50.0);
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let mut c = RunConfig::default();
        c.n = 1000;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.s = 40;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.d = 48;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.s = 4;
        c.d = 16;
        c.validate().unwrap();
        assert_eq!(c.basis_level(), (8, 32));
        let mut c = RunConfig::default();
        c.workers = Some(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_workers_and_tracks_values() {
        let a = RunConfig::default();
        let b = RunConfig {
            workers: Some(8),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = RunConfig {
            n: 512,
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn partial_json_takes_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"n": 256, "fit": {"order": 2}}"#).unwrap();
        assert_eq!(c.n, 256);
        assert_eq!(c.fit.order, 2);
        assert_eq!(c.fit.max_iterations, 200);
        assert_eq!(c.side_length, 200.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        c.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), c);
    }
}
