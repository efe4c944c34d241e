//! Run-configuration flags shared by the pipeline subcommands.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use porous_gp::calibration::NoiseInit;
use porous_gp::pipeline::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoiseInitArg {
    /// ζ_init is the squared RMSE bound.
    Squared,
    /// ζ_init is the bound itself.
    Raw,
}

/// Every numeric setting of [`RunConfig`]. Flags override the JSON file given
/// with `--config`, which overrides the built-in defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Side length of the square domain (m).
    #[arg(long)]
    pub side_length: Option<f64>,
    /// Injection rate w (m³/s); extraction rates range over [0, w].
    #[arg(long)]
    pub injection_rate: Option<f64>,
    #[arg(long)]
    pub injection_x: Option<f64>,
    #[arg(long)]
    pub injection_y: Option<f64>,
    #[arg(long)]
    pub extraction_x: Option<f64>,
    #[arg(long)]
    pub extraction_y: Option<f64>,
    #[arg(long)]
    pub critical_x: Option<f64>,
    #[arg(long)]
    pub critical_y: Option<f64>,

    /// Matérn variance of the log-permeability field.
    #[arg(long)]
    pub variance: Option<f64>,
    /// Matérn correlation length (m).
    #[arg(long)]
    pub correlation_length: Option<f64>,
    /// Matérn smoothness ν.
    #[arg(long)]
    pub smoothness: Option<f64>,

    /// KL truncation used for training.
    #[arg(long)]
    pub s: Option<usize>,
    /// Mesh cells per side used for training.
    #[arg(long)]
    pub d: Option<usize>,
    /// Training size (power of two).
    #[arg(long)]
    pub n: Option<usize>,
    /// Relative tolerance of the iterative Darcy solver.
    #[arg(long)]
    pub solver_tolerance: Option<f64>,

    /// Calibration schedule: s_j = v_s·2^j.
    #[arg(long)]
    pub v_s: Option<usize>,
    /// Calibration schedule: d_j = v_d·2^j.
    #[arg(long)]
    pub v_d: Option<usize>,
    /// Finest calibration level N.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Shared samples per calibration level.
    #[arg(long)]
    pub calibration_samples: Option<usize>,
    #[arg(long)]
    pub calibration_seed: Option<u64>,
    #[arg(long, value_enum)]
    pub noise_init: Option<NoiseInitArg>,

    /// Kernel order (2 or 4).
    #[arg(long)]
    pub order: Option<u32>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub relative_tolerance: Option<f64>,
    /// Keep the initial hyperparameters instead of maximizing the likelihood.
    #[arg(long)]
    pub no_optimize: bool,

    /// Seed of the common random shift of the training lattice.
    #[arg(long, conflicts_with = "no_shift")]
    pub shift_seed: Option<u64>,
    /// Use the unshifted training lattice.
    #[arg(long)]
    pub no_shift: bool,

    /// QMC nodes per shift (power of two).
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Number of random digital shifts.
    #[arg(long)]
    pub shifts: Option<usize>,
    #[arg(long)]
    pub confidence_seed: Option<u64>,
    #[arg(long)]
    pub rate_points: Option<usize>,
    #[arg(long)]
    pub threshold_points: Option<usize>,

    /// Ensemble worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl ConfigArgs {
    /// Resolves the configuration and validates it.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)
                .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?,
            None => RunConfig::default(),
        };
        set!(c.side_length, self.side_length);
        set!(c.wells.injection_rate, self.injection_rate);
        set!(c.wells.injection_location.0, self.injection_x);
        set!(c.wells.injection_location.1, self.injection_y);
        set!(c.wells.extraction_location.0, self.extraction_x);
        set!(c.wells.extraction_location.1, self.extraction_y);
        set!(c.wells.critical_location.0, self.critical_x);
        set!(c.wells.critical_location.1, self.critical_y);
        set!(c.covariance.variance, self.variance);
        set!(c.covariance.correlation_length, self.correlation_length);
        set!(c.covariance.smoothness, self.smoothness);
        set!(c.s, self.s);
        set!(c.d, self.d);
        set!(c.n, self.n);
        set!(c.darcy.tolerance, self.solver_tolerance);
        set!(c.calibration.schedule.v_s, self.v_s);
        set!(c.calibration.schedule.v_d, self.v_d);
        set!(c.calibration.schedule.levels, self.levels);
        set!(c.calibration.samples, self.calibration_samples);
        set!(c.calibration.seed, self.calibration_seed);
        if let Some(ni) = self.noise_init {
            c.calibration.noise_init = match ni {
                NoiseInitArg::Squared => NoiseInit::Squared,
                NoiseInitArg::Raw => NoiseInit::Raw,
            };
        }
        set!(c.fit.order, self.order);
        set!(c.fit.max_iterations, self.max_iterations);
        set!(c.fit.relative_tolerance, self.relative_tolerance);
        if self.no_optimize {
            c.fit.optimize = false;
        }
        if self.no_shift {
            c.sampling.shift_seed = None;
        } else if let Some(seed) = self.shift_seed {
            c.sampling.shift_seed = Some(seed);
        }
        set!(c.confidence.nodes, self.nodes);
        set!(c.confidence.shifts, self.shifts);
        set!(c.confidence.seed, self.confidence_seed);
        set!(c.rate_points, self.rate_points);
        set!(c.threshold_points, self.threshold_points);
        if self.workers.is_some() {
            c.workers = self.workers;
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Wrapper {
        #[command(flatten)]
        args: ConfigArgs,
    }

    #[test]
    fn defaults_resolve_to_default_config() {
        let w = Wrapper::parse_from(["x"]);
        assert_eq!(w.args.resolve().unwrap(), RunConfig::default());
    }

    #[test]
    fn flags_override_file_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"n": 256, "rate_points": 9}"#).unwrap();
        let w = Wrapper::parse_from([
            "x",
            "--config",
            path.to_str().unwrap(),
            "--n",
            "512",
            "--injection-rate",
            "0.02",
            "--no-shift",
            "--noise-init",
            "raw",
        ]);
        let c = w.args.resolve().unwrap();
        assert_eq!(c.n, 512);
        assert_eq!(c.rate_points, 9);
        assert_eq!(c.wells.injection_rate, 0.02);
        assert_eq!(c.sampling.shift_seed, None);
        assert_eq!(c.calibration.noise_init, NoiseInit::Raw);
    }

    #[test]
    fn inconsistent_flags_are_rejected() {
        let w = Wrapper::parse_from(["x", "--n", "1000"]);
        assert!(w.args.resolve().is_err());
    }
}
