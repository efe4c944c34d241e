use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use porous_gp::confidence;
use porous_gp::pipeline::{
    self, hash_mismatch, RunConfig, SurrogateModel, TrainingSet, CALIBRATION_FILE, CONFIG_FILE,
    MODEL_FILE, TRAINING_FILE,
};
use porous_gp_cli::args::ConfigArgs;
use porous_gp_cli::{server, svg};

#[derive(Parser)]
#[command(name = "porous-gp", version, about = "Error-aware GP surrogates for Darcy flow with random permeability")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run sampling, solves, calibration and fitting in one go.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Write the training locations (r, z) without solving.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Solve the PDE at every training location.
    Solve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Estimate level differences and the RMSE bound.
    Calibrate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Fit the surrogate from the training set and calibration report.
    Fit {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Expected confidence at one rate and threshold.
    Confidence {
        #[arg(long, default_value = "run/model.json")]
        model: PathBuf,
        /// Extraction rate (m³/s).
        #[arg(long)]
        r: f64,
        /// Pressure threshold.
        #[arg(long)]
        h: f64,
    },
    /// Confidence over a rate × threshold grid, as CSV.
    Heatmap {
        #[arg(long, default_value = "run/model.json")]
        model: PathBuf,
        /// Comma-separated rates; the model's default grid otherwise.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Comma-separated thresholds; the model's default grid otherwise.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Smallest grid rate whose confidence reaches the target.
    MinRate {
        #[arg(long, default_value = "run/model.json")]
        model: PathBuf,
        #[arg(long)]
        h: f64,
        #[arg(long, default_value_t = 0.9)]
        target: f64,
        /// Rate grid size; the model's `rate_points` otherwise.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Render the confidence curve and heatmap as SVG.
    Plot {
        #[arg(long, default_value = "run/model.json")]
        model: PathBuf,
        /// Threshold of the curve; the middle of the threshold grid otherwise.
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Serve the HTTP JSON API.
    Serve {
        #[arg(long, default_value = "run/model.json")]
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Allowed CORS origin; any origin when absent.
        #[arg(long)]
        cors_origin: Option<String>,
        /// Rates whose node moments are cached.
        #[arg(long, default_value_t = server::DEFAULT_CACHE_RATES)]
        cache_rates: usize,
        /// Skip precomputing the default rate grid at start-up.
        #[arg(long)]
        no_warm: bool,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn prepare(config: &ConfigArgs, out_dir: &Path) -> Result<RunConfig> {
    let c = config.resolve()?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    c.save(out_dir.join(CONFIG_FILE))?;
    Ok(c)
}

fn warn(message: Option<String>) {
    if let Some(m) = message {
        eprintln!("warning: {m}");
    }
}

fn load_model(path: &Path) -> Result<SurrogateModel> {
    SurrogateModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out_dir } => {
            let c = config.resolve()?;
            let summary = pipeline::run_pipeline(&c, &out_dir)?;
            for (stage, t) in &summary.timings {
                eprintln!("{stage:>12}: {:.2} s", t.as_secs_f64());
            }
            println!("model {} (sha256 {})", summary.model_path.display(), summary.model_hash);
        }
        Command::Sample { config, out_dir } => {
            let c = prepare(&config, &out_dir)?;
            let loc = pipeline::run_sampling(&c)?;
            let path = out_dir.join("locations.csv");
            let mut w = io::BufWriter::new(fs::File::create(&path)?);
            let zs: Vec<String> = (1..=c.s).map(|j| format!("z{j}")).collect();
            writeln!(w, "r,{}", zs.join(","))?;
            for i in 0..loc.len() {
                let z: Vec<String> = loc.z(i).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{},{}", loc.rates[i], z.join(","))?;
            }
            w.flush()?;
            println!("{} locations written to {}", loc.len(), path.display());
        }
        Command::Solve { config, out_dir } => {
            let c = prepare(&config, &out_dir)?;
            let basis = pipeline::build_basis(&c)?;
            let loc = pipeline::run_sampling(&c)?;
            let training = pipeline::run_ensemble(&c, &basis, &loc)?;
            let path = out_dir.join(TRAINING_FILE);
            training.save(&path)?;
            let failed = training.provenance.failures.len();
            println!("{} solves ({failed} failed) written to {}", training.len(), path.display());
        }
        Command::Calibrate { config, out_dir } => {
            let c = prepare(&config, &out_dir)?;
            let basis = pipeline::build_basis(&c)?;
            let report = pipeline::run_calibration(&c, &basis)?;
            let path = out_dir.join(CALIBRATION_FILE);
            pipeline::save_calibration(&report, &path)?;
            let f = &report.fit;
            println!(
                "decay a_s = {:.3}, a_d = {:.3}; bound at level {} = {:e}",
                f.a_s,
                f.a_d,
                report.schedule.levels,
                report.finest_bound().value
            );
        }
        Command::Fit { config, out_dir } => {
            let c = config.resolve()?;
            let training = TrainingSet::load(out_dir.join(TRAINING_FILE))?;
            warn(hash_mismatch("training set", &training.provenance.config_hash, &c.hash()));
            let report = pipeline::load_calibration(out_dir.join(CALIBRATION_FILE))?;
            warn(hash_mismatch("calibration report", &report.config_hash, &c.hash()));
            let model = pipeline::run_fit(&c, &training, &report)?;
            let path = out_dir.join(MODEL_FILE);
            model.save(&path)?;
            let d = model.model.diagnostics();
            println!(
                "ζ {:e} → {:e}, log-likelihood {:.3} after {} iterations; model written to {}",
                model.noise.noise_init,
                model.model.noise(),
                d.log_likelihood,
                d.iterations,
                path.display()
            );
        }
        Command::Confidence { model, r, h } => {
            let m = load_model(&model)?;
            print_json(&m.confidence(r, h)?)?;
        }
        Command::Heatmap {
            model,
            rates,
            thresholds,
            out,
        } => {
            let m = load_model(&model)?;
            let rates = rates.unwrap_or_else(|| m.rate_grid(m.config.rate_points));
            let thresholds = match thresholds {
                Some(t) => t,
                None => m.threshold_grid(m.config.threshold_points)?,
            };
            let map = m.heatmap(&rates, &thresholds)?;
            let results = map.results();
            match out {
                Some(path) => {
                    let mut f = io::BufWriter::new(fs::File::create(&path)?);
                    confidence::write_csv(&mut f, results)?;
                    f.flush()?;
                }
                None => confidence::write_csv(&mut io::stdout().lock(), results)?,
            }
        }
        Command::MinRate {
            model,
            h,
            target,
            points,
        } => {
            let m = load_model(&model)?;
            let rates = m.rate_grid(points.unwrap_or(m.config.rate_points));
            let rate = m.min_rate(h, target, &rates)?;
            print_json(&server::MinRateResponse { h, target, rate })?;
        }
        Command::Plot { model, h, out_dir } => {
            let m = load_model(&model)?;
            let thresholds = m.threshold_grid(m.config.threshold_points)?;
            let rates = m.rate_grid(m.config.rate_points);
            let map = m.heatmap(&rates, &thresholds)?;
            let h = h.unwrap_or(thresholds[thresholds.len() / 2]);
            let curve = m.curve(h, &rates)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("curve.svg"), svg::curve_svg(&curve, h))?;
            fs::write(out_dir.join("heatmap.svg"), svg::heatmap_svg(&map))?;
            println!("wrote curve.svg and heatmap.svg to {}", out_dir.display());
        }
        Command::Serve {
            model,
            bind,
            cors_origin,
            cache_rates,
            no_warm,
        } => {
            let m = load_model(&model)?;
            if m.model.is_empty() {
                bail!("model {} has no observations", model.display());
            }
            let service = Arc::new(server::Service::new(m, cache_rates)?);
            let cors = server::cors(cors_origin.as_deref())?;
            tokio::runtime::Runtime::new()?.block_on(server::serve(service, &bind, cors, !no_warm))?;
        }
    }
    Ok(())
}
