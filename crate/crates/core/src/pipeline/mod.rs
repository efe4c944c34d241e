//! Sample → solve → calibrate → fit → evaluate, with persistence.

mod config;
mod model;
mod training;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;

pub use config::{CalibrationConfig, FitConfig, RunConfig, SamplingConfig};
pub use model::{
    file_sha256, hash_mismatch, ModelInfo, NoiseProvenance, SurrogateModel, BUNDLE_FORMAT,
    BUNDLE_VERSION,
};
pub use training::{Provenance, SamplingLocations, SolveFailure, TrainingSet};

use crate::calibration::{level_differences, CalibrationReport};
use crate::darcy::{critical_solve, Mesh};
use crate::error::{invalid, Error, Result};
use crate::fastgp::{FastGpModel, LatticeDesign};
use crate::random_field::{build_kl, KlBasis};

/// Largest tolerated fraction of failed ensemble solves.
pub const MAX_FAILURE_FRACTION: f64 = 1e-3;

/// KL basis on the finest mesh the run needs.
pub fn build_basis(config: &RunConfig) -> Result<KlBasis> {
    config.validate()?;
    let (s, d) = config.basis_level();
    build_kl(&config.covariance, &Mesh::new(d, config.side_length)?, s)
}

/// First `n` lattice points in `1 + s` dimensions and their `(r, z)` images.
pub fn run_sampling(config: &RunConfig) -> Result<SamplingLocations> {
    config.validate()?;
    let generator = config.generator()?;
    let points = generator.points(config.n, config.s + 1)?;
    let map = config.domain_map()?;
    let mut rates = Vec::with_capacity(config.n);
    let mut coefficients = Vec::with_capacity(config.n * config.s);
    for t in points.rows() {
        let (r, z) = map.to_physical(t)?;
        rates.push(r);
        coefficients.extend(z);
    }
    Ok(SamplingLocations {
        points,
        generator,
        rates,
        coefficients,
        s: config.s,
    })
}

fn in_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::Solver(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Solves every sampling location on the training `(s, d)` level.
pub fn run_ensemble(
    config: &RunConfig,
    basis: &KlBasis,
    locations: &SamplingLocations,
) -> Result<TrainingSet> {
    config.validate()?;
    if basis.s() < config.s || basis.mesh().d() % config.d != 0 {
        return Err(invalid(format!(
            "KL basis (s = {}, d = {}) cannot serve the training level (s = {}, d = {})",
            basis.s(),
            basis.mesh().d(),
            config.s,
            config.d
        )));
    }
    if locations.s != config.s || locations.len() != config.n {
        return Err(invalid("sampling locations do not match the configuration"));
    }
    let results: Vec<Result<(f64, f64)>> = in_pool(config.workers, || {
        (0..locations.len())
            .into_par_iter()
            .map(|i| {
                critical_solve(
                    config.d,
                    basis,
                    &config.wells,
                    locations.rates[i],
                    locations.z(i),
                    &config.darcy,
                )
            })
            .collect()
    })?;

    let mut failures = Vec::new();
    let mut y = Vec::with_capacity(results.len());
    let mut residuals = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok((h, res)) if h.is_finite() => {
                y.push(h);
                residuals.push(res);
            }
            Ok((h, _)) => {
                failures.push(SolveFailure {
                    index,
                    message: format!("non-finite head {h}"),
                });
                y.push(f64::NAN);
                residuals.push(f64::NAN);
            }
            Err(e) => {
                failures.push(SolveFailure {
                    index,
                    message: e.to_string(),
                });
                y.push(f64::NAN);
                residuals.push(f64::NAN);
            }
        }
    }
    let n = y.len();
    if failures.len() as f64 > MAX_FAILURE_FRACTION * n as f64 {
        return Err(Error::Solver(format!(
            "{} of {n} ensemble solves failed (limit {:.1}%); first: sample {}: {}",
            failures.len(),
            100.0 * MAX_FAILURE_FRACTION,
            failures[0].index,
            failures[0].message
        )));
    }
    if !failures.is_empty() {
        let ok: Vec<f64> = y.iter().cloned().filter(|v| v.is_finite()).collect();
        let fill = ok.iter().sum::<f64>() / ok.len() as f64;
        for f in &failures {
            y[f.index] = fill;
        }
    }
    Ok(TrainingSet {
        locations: locations.clone(),
        y,
        residuals,
        provenance: Provenance {
            config_hash: config.hash(),
            generator: locations.generator.clone(),
            n: config.n,
            s: config.s,
            d: config.d,
            failures,
        },
    })
}

/// Level differences, decay fit and RMSE bounds for the configured schedule.
pub fn run_calibration(config: &RunConfig, basis: &KlBasis) -> Result<CalibrationReport> {
    config.validate()?;
    let cal = &config.calibration;
    let norms = in_pool(config.workers, || {
        level_differences(
            &cal.schedule,
            basis,
            &config.wells,
            &config.darcy,
            cal.samples,
            cal.seed,
        )
    })??;
    let mut report = CalibrationReport::new(cal.schedule, cal.samples, cal.seed, norms)?;
    report.config_hash = config.hash();
    Ok(report)
}

pub fn save_calibration(report: &CalibrationReport, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationReport> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        Error::Format(format!(
            "calibration report {} is required to initialize the noise variance: {e}",
            path.display()
        ))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Fits the surrogate with `ζ_init` derived from the calibration bound at the
/// training level.
pub fn run_fit(
    config: &RunConfig,
    training: &TrainingSet,
    calibration: &CalibrationReport,
) -> Result<SurrogateModel> {
    config.validate()?;
    if training.len() != config.n || training.locations.s != config.s {
        return Err(invalid(format!(
            "training set (n = {}, s = {}) does not match the configuration (n = {}, s = {})",
            training.len(),
            training.locations.s,
            config.n,
            config.s
        )));
    }
    let level = config
        .calibration_level()
        .ok_or_else(|| invalid("training level is not on the calibration schedule"))?;
    let bound = calibration
        .bounds
        .iter()
        .find(|b| b.level == level)
        .ok_or_else(|| invalid(format!("calibration report has no bound for level {level}")))?;
    if !bound.is_finite() {
        return Err(invalid(format!(
            "calibration bound at level {level} is infinite (fitted decay slopes a_s = {:.3}, \
             a_d = {:.3} are not both negative); refine the schedule",
            calibration.fit.a_s, calibration.fit.a_d
        )));
    }
    let noise_init = config.calibration.noise_init.apply(bound.value);
    let design = LatticeDesign::new(training.locations.generator.clone(), config.n, config.s + 1)?;
    let model = FastGpModel::fit(&design, &training.y, noise_init, &config.fit_options())?;
    let calibration_hash = model::bytes_sha256(&serde_json::to_vec(calibration)?);
    Ok(SurrogateModel {
        config: config.canonical(),
        config_hash: config.hash(),
        noise: NoiseProvenance {
            level,
            rmse_bound: bound.value,
            noise_init,
            calibration_hash,
        },
        model,
    })
}

/// Artifact paths and stage timings of an end-to-end run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub training_path: PathBuf,
    pub calibration_path: PathBuf,
    pub model_path: PathBuf,
    pub model_hash: String,
    pub timings: Vec<(&'static str, Duration)>,
}

pub const TRAINING_FILE: &str = "training.csv";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const MODEL_FILE: &str = "model.json";
pub const CONFIG_FILE: &str = "config.json";

/// Runs every stage and writes the artifacts into `out_dir`.
pub fn run_pipeline(config: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunSummary> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    config.validate()?;
    config.save(out.join(CONFIG_FILE))?;
    let mut timings = Vec::new();
    let mut stage = |name: &'static str, start: Instant| timings.push((name, start.elapsed()));

    let t = Instant::now();
    let basis = build_basis(config)?;
    stage("basis", t);

    let t = Instant::now();
    let locations = run_sampling(config)?;
    let training = run_ensemble(config, &basis, &locations)?;
    let training_path = out.join(TRAINING_FILE);
    training.save(&training_path)?;
    stage("ensemble", t);

    let t = Instant::now();
    let report = run_calibration(config, &basis)?;
    let calibration_path = out.join(CALIBRATION_FILE);
    save_calibration(&report, &calibration_path)?;
    stage("calibration", t);

    let t = Instant::now();
    let surrogate = run_fit(config, &training, &report)?;
    let model_path = out.join(MODEL_FILE);
    surrogate.save(&model_path)?;
    stage("fit", t);

    Ok(RunSummary {
        model_hash: file_sha256(&model_path)?,
        training_path,
        calibration_path,
        model_path,
        timings,
    })
}
