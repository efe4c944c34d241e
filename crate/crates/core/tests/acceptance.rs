//! Acceptance suite for the primary components. Runs every criterion in one
//! test so the timing checks are not disturbed by sibling tests, prints one
//! PASS/FAIL line per criterion and fails if any criterion fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use porous_gp::calibration::{fit_decay, rmse_upper_bound, DecayFit, LevelNorms, LevelSchedule};
use porous_gp::confidence::{self, ConfidenceSettings, SurrogateDomainMap};
use porous_gp::darcy::{self, DarcyOptions, WellConfig};
use porous_gp::fastgp::{DenseGp, FastGpModel, FitOptions, LatticeDesign, PeriodicKernel};
use porous_gp::normal;
use porous_gp::pipeline::{self, RunConfig, SurrogateModel};
use porous_gp::qmc::LatticeGenerator;
use porous_gp::random_field::{build_kl, node_covariance, MaternCovariance};
use porous_gp::Mesh;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(b.abs())
}

fn smooth(t: &[f64]) -> f64 {
    t.iter()
        .enumerate()
        .map(|(j, x)| (2.0 * PI * x).sin() / (j + 1) as f64 + 0.3 * (4.0 * PI * x).cos())
        .sum::<f64>()
        + 1.0
}

fn shifted_design(n: usize, p: usize, seed: u64) -> LatticeDesign {
    LatticeDesign::new(LatticeGenerator::default().random_shift(seed), n, p).unwrap()
}

fn fixed(kernel: &PeriodicKernel) -> FitOptions {
    FitOptions {
        optimize: false,
        kernel: Some(kernel.clone()),
        ..FitOptions::default()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_ll, mut worst_mean, mut worst_var) = (0.0f64, 0.0f64, 0.0f64);
    for n in [32usize, 64, 128, 256] {
        for p in [2usize, 4, 10] {
            let d = shifted_design(n, p, 7 * n as u64 + p as u64);
            let y: Vec<f64> = d
                .points()
                .rows()
                .map(|t| smooth(t) + 0.05 * (rng.random::<f64>() - 0.5))
                .collect();
            let kernel = PeriodicKernel::new(4, vec![0.5; p], 1.3).unwrap();
            let noise = 1e-3;
            let fast = FastGpModel::fit(&d, &y, noise, &fixed(&kernel)).unwrap();
            let dense = DenseGp::fit(d.points(), &y, &kernel, noise).unwrap();
            worst_ll = worst_ll.max(rel(fast.log_likelihood(), dense.log_likelihood(), 1.0));
            let ymax = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let prior = kernel.diagonal();
            for _ in 0..25 {
                let t: Vec<f64> = (0..p).map(|_| rng.random()).collect();
                worst_mean = worst_mean.max(rel(
                    fast.posterior_mean(&t).unwrap(),
                    dense.posterior_mean(&t),
                    ymax,
                ));
                let v2 = dense.posterior_variance(&t).max(0.0);
                worst_var = worst_var.max(rel(fast.posterior_variance(&t).unwrap(), v2, prior));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_ll <= 1e-8
        && worst_mean <= 1e-8
        && worst_var <= 1e-8
        && elapsed <= Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "fast vs dense GPR, max relative gap: log-likelihood {worst_ll:.1e}, mean {worst_mean:.1e}, \
             variance {worst_var:.1e} (tol 1e-8); {:.2} s (limit 60 s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn criterion_2() -> Outcome {
    let p = 9;
    // fixed optimizer budget: tolerance 0 forces every iteration to run
    let options = FitOptions {
        max_iterations: 8,
        relative_tolerance: 0.0,
        ..FitOptions::default()
    };
    let time_fit = |n: usize| {
        let d = shifted_design(n, p, 3);
        let y: Vec<f64> = d.points().rows().map(smooth).collect();
        (0..3)
            .map(|_| {
                let t = Instant::now();
                let m = FastGpModel::fit(&d, &y, 1e-6, &options).unwrap();
                std::hint::black_box(m.noise());
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let sizes: Vec<usize> = (12..=16).map(|m| 1usize << m).collect();
    let times: Vec<f64> = sizes.iter().map(|&n| time_fit(n)).collect();
    let mut ratios: Vec<f64> = times.windows(2).map(|w| w[1] / w[0]).collect();
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
    let med = median(&mut ratios);

    // dense baseline for context
    let dense_time = |n: usize| {
        let d = shifted_design(n, p, 3);
        let y: Vec<f64> = d.points().rows().map(smooth).collect();
        let kernel = PeriodicKernel::isotropic(4, p, 0.1, 1.0).unwrap();
        let t = Instant::now();
        std::hint::black_box(DenseGp::fit(d.points(), &y, &kernel, 1e-6).unwrap().log_likelihood());
        t.elapsed().as_secs_f64()
    };
    let dense_ratio = dense_time(1024) / dense_time(512);
    outcome(
        med <= 2.6,
        format!(
            "fit time ratios t(2n)/t(n) for n = 2^12..2^16, p = 9: [{}], median {med:.2} (limit 2.6); \
             dense 512→1024 ratio {dense_ratio:.1}",
            shown.join(", ")
        ),
    )
}

fn manufactured_error(d: usize) -> f64 {
    let l = 200.0;
    let mesh = Mesh::new(d, l).unwrap();
    let k = PI / l;
    let exact = |x: f64, y: f64| (k * x).sin() * (k * y).sin();
    let mut src = Vec::with_capacity(mesh.cell_count());
    for j in 0..d {
        for i in 0..d {
            let (x, y) = mesh.cell_center(i, j);
            src.push(2.0 * k * k * exact(x, y));
        }
    }
    let field = darcy::solve_cells(
        &mesh,
        &vec![1.0; mesh.cell_count()],
        &src,
        &DarcyOptions::default(),
    )
    .unwrap();
    let mut err = 0.0f64;
    for j in 0..d {
        for i in 0..d {
            let (x, y) = mesh.cell_center(i, j);
            err = err.max((field.head(i, j) - exact(x, y)).abs());
        }
    }
    err
}

fn criterion_3() -> Outcome {
    let errs: Vec<f64> = [16, 32, 64, 128].iter().map(|&d| manufactured_error(d)).collect();
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let orders_ok = orders.iter().all(|o| (1.8..=2.2).contains(o));

    let mesh = Mesh::new(32, 200.0).unwrap();
    let basis = build_kl(&MaternCovariance::default(), &mesh, 8).unwrap();
    let wells = WellConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let z: Vec<f64> = (0..8)
            .map(|_| normal::quantile(rng.random_range(1e-6..1.0 - 1e-6)))
            .collect();
        let r = rng.random_range(0.0..=wells.injection_rate);
        let perm = basis.sample_field(&z).unwrap();
        let field = darcy::solve_pressure(&mesh, &wells, &perm, r, &DarcyOptions::default()).unwrap();
        let scale = wells.injection_rate;
        worst = worst
            .max((field.boundary_outflow() - field.net_source()).abs() / scale)
            .max(field.max_cell_imbalance() / scale);
    }
    let shown: Vec<String> = orders.iter().map(|o| format!("{o:.3}")).collect();
    outcome(
        orders_ok && worst <= 1e-8,
        format!(
            "manufactured-solution orders over d = 16..128: [{}] (range [1.8, 2.2]); \
             worst conservation error over 50 realizations {worst:.1e} (tol 1e-8)",
            shown.join(", ")
        ),
    )
}

fn frobenius(m: &nalgebra::DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn criterion_4() -> Outcome {
    // 16 cells per side gives a 17 × 17 node grid
    let mesh = Mesh::new(16, 200.0).unwrap();
    let cov = MaternCovariance::default();
    let c = node_covariance(&cov, &mesh);
    let full = build_kl(&cov, &mesh, mesh.node_count()).unwrap();
    let full_err = frobenius(&(full.covariance_matrix() - &c)) / frobenius(&c);
    let errs: Vec<f64> = [1usize, 2, 4, 8, 16]
        .iter()
        .map(|&s| frobenius(&(full.truncated(s).unwrap().covariance_matrix() - &c)) / frobenius(&c))
        .collect();
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = errs.iter().map(|e| format!("{e:.3e}")).collect();
    outcome(
        full_err <= 1e-8 && decreasing,
        format!(
            "full-rank reconstruction on 17×17 nodes {full_err:.1e} (tol 1e-8); \
             truncated errors s = 1,2,4,8,16: [{}] strictly decreasing: {decreasing}",
            shown.join(", ")
        ),
    )
}

fn exact_norms(schedule: &LevelSchedule, truth: &DecayFit) -> Vec<LevelNorms> {
    (1..=schedule.levels)
        .map(|j| LevelNorms {
            level: j,
            s: schedule.s(j),
            d: schedule.d(j),
            delta_s: truth.model_delta_s(schedule.s(j) as f64),
            delta_d: truth.model_delta_d(schedule.d(j) as f64),
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let schedule = LevelSchedule::new(2, 4, 6).unwrap();
    let truth = DecayFit {
        a_s: -1.3,
        b_s: 0.7,
        a_d: -2.1,
        b_d: -3.0,
    };
    let fit = fit_decay(&exact_norms(&schedule, &truth)).unwrap();
    let fit_err = [
        fit.a_s - truth.a_s,
        fit.b_s - truth.b_s,
        fit.a_d - truth.a_d,
        fit.b_d - truth.b_d,
    ]
    .iter()
    .fold(0.0f64, |m, v| m.max(v.abs()));

    let mut tail_err = 0.0f64;
    for n in 0..=schedule.levels {
        let bound = rmse_upper_bound(&truth, &schedule, n).value;
        let mut tail = 0.0;
        for j in n + 1..=500 {
            let two_j = 2f64.powi(j as i32);
            tail += truth.model_delta_s(schedule.v_s as f64 * two_j)
                + truth.model_delta_d(schedule.v_d as f64 * two_j);
        }
        tail_err = tail_err.max(((bound - tail) / tail).abs());
    }

    let unit = DecayFit {
        a_s: -1.0,
        b_s: 0.0,
        a_d: -1.0,
        b_d: 0.0,
    };
    let mut trivial_ok = true;
    for n in 2..=12 {
        let mut sch = LevelSchedule::new(1, 2, n).unwrap();
        sch.v_d = 1;
        trivial_ok &= rmse_upper_bound(&unit, &sch, n).value == 2.0 * 2f64.powi(-(n as i32));
    }
    outcome(
        fit_err <= 1e-10 && tail_err <= 1e-12 && trivial_ok,
        format!(
            "power-law recovery error {fit_err:.1e} (tol 1e-10); bound vs tail sum {tail_err:.1e} \
             (tol 1e-12); a = -1, b = 0, v = 1 gives 2·2^-N exactly: {trivial_ok}"
        ),
    )
}

/// Plain Monte Carlo estimate of the expected confidence and its standard error.
fn monte_carlo(model: &FastGpModel, map: &SurrogateDomainMap, r: f64, h: f64, draws: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let t0 = map.rate_coordinate(r).unwrap();
    let p = map.dim();
    let (mut sum, mut sum2) = (0.0, 0.0);
    let chunk = 1 << 14;
    let mut done = 0;
    while done < draws {
        let k = chunk.min(draws - done);
        let mut q = Vec::with_capacity(k * p);
        for _ in 0..k {
            q.push(t0);
            q.extend((1..p).map(|_| rng.random::<f64>()));
        }
        let batch = model.posterior_batch(&q).unwrap();
        for (m, v) in batch.mean.iter().zip(&batch.variance) {
            let c = confidence::node_average(&[*m], &[v.sqrt()], h);
            sum += c;
            sum2 += c * c;
        }
        done += k;
    }
    let n = draws as f64;
    let mean = sum / n;
    (mean, ((sum2 / n - mean * mean).max(0.0) / (n - 1.0)).sqrt())
}

fn criterion_6(desk: &SurrogateModel) -> Outcome {
    let map = desk.domain_map();
    let settings = ConfidenceSettings {
        nodes: 1 << 12,
        ..desk.settings()
    };
    let model = &desk.model;

    // exact monotonicity in the threshold on the default grids
    let rates = desk.rate_grid(17);
    let thresholds = desk.threshold_grid(65).unwrap();
    let heat = confidence::confidence_heatmap(model, &map, &rates, &thresholds, &settings).unwrap();
    let monotone_h = heat.estimates.iter().all(|row| row.windows(2).all(|w| w[1] >= w[0]));

    // degenerate model: no data, so every node has the prior moments
    let empty = LatticeDesign::new(LatticeGenerator::default(), 0, map.dim()).unwrap();
    let kernel = PeriodicKernel::isotropic(4, map.dim(), 0.3, 2.5e-6).unwrap();
    let prior = FastGpModel::fit(&empty, &[], 1e-8, &fixed(&kernel)).unwrap();
    let sd = kernel.diagonal().sqrt();
    let mut closed_gap = 0.0f64;
    for h in [-3e-3, -1e-4, 0.0, 1e-3, 4e-3] {
        for r in [0.0, 0.01, desk.injection_rate()] {
            let est = confidence::expected_confidence(&prior, &map, r, h, &settings).unwrap();
            closed_gap = closed_gap.max((est.estimate - normal::cdf(h / sd)).abs());
        }
    }

    // Monte Carlo oracle at a mid-range rate and threshold
    let r = 0.5 * desk.injection_rate();
    let mut y = model.observations().to_vec();
    y.sort_by(f64::total_cmp);
    let h = y[y.len() / 2];
    let qmc = confidence::expected_confidence(model, &map, r, h, &settings).unwrap();
    let (mc, mc_se) = monte_carlo(model, &map, r, h, 1_000_000);
    let se = (mc_se.powi(2) + qmc.stderr.unwrap_or(0.0).powi(2)).sqrt();
    let z = (qmc.estimate - mc).abs() / se;
    outcome(
        monotone_h && closed_gap <= 1e-12 && z <= 3.0,
        format!(
            "monotone in threshold on a {}×{} grid: {monotone_h}; degenerate closed-form gap \
             {closed_gap:.1e} (tol 1e-12); QMC {:.5} vs 10^6-draw MC {mc:.5}: {z:.2} standard errors (limit 3)",
            rates.len(),
            thresholds.len(),
            qmc.estimate
        ),
    )
}

fn criterion_7(desk: &SurrogateModel, pipeline_time: Duration) -> Outcome {
    let start = Instant::now();
    let rates = desk.rate_grid(desk.config.rate_points);
    let thresholds = desk.threshold_grid(desk.config.threshold_points).unwrap();
    let heat = desk.heatmap(&rates, &thresholds).unwrap();
    let elapsed = pipeline_time + start.elapsed();

    let monotone_h = heat.estimates.iter().all(|row| row.windows(2).all(|w| w[1] >= w[0]));
    // largest drop of the curve in r, over all pairs of rates
    let mut worst_drop = 0.0f64;
    for j in 0..thresholds.len() {
        let mut running_max = f64::NEG_INFINITY;
        for row in &heat.estimates {
            running_max = running_max.max(row[j]);
            worst_drop = worst_drop.max(running_max - row[j]);
        }
    }

    // noise decrease over ten seeded runs sharing one KL basis
    let basis = pipeline::build_basis(&desk.config).unwrap();
    let mut decreased = 0;
    let mut ratios = Vec::new();
    for seed in 0..10u64 {
        let mut c = desk.config.clone();
        c.sampling.shift_seed = Some(100 + seed);
        c.calibration.seed = 200 + seed;
        let loc = pipeline::run_sampling(&c).unwrap();
        let training = pipeline::run_ensemble(&c, &basis, &loc).unwrap();
        let report = pipeline::run_calibration(&c, &basis).unwrap();
        let fitted = pipeline::run_fit(&c, &training, &report).unwrap();
        let (zeta, init) = (fitted.model.noise(), fitted.noise.noise_init);
        ratios.push(zeta / init);
        if zeta <= init {
            decreased += 1;
        }
    }
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
    outcome(
        elapsed <= Duration::from_secs(600) && monotone_h && worst_drop <= 0.02 && decreased >= 8,
        format!(
            "desk run + {}×{} heatmap in {:.1} s (limit 600 s); monotone in threshold: {monotone_h}; \
             largest decrease in r {worst_drop:.4} (tol 0.02); ζ ≤ ζ_init in {decreased}/10 seeds \
             (need 8), ζ/ζ_init = [{}]",
            rates.len(),
            thresholds.len(),
            elapsed.as_secs_f64(),
            shown.join(", ")
        ),
    )
}

fn criterion_8(config: &RunConfig, first_hash: &str) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let again = pipeline::run_pipeline(config, dir.path()).unwrap();
    outcome(
        again.model_hash == first_hash,
        format!(
            "repeated desk run model hash {}… vs {}…",
            &again.model_hash[..16],
            &first_hash[..16]
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |i: usize, o: Outcome| {
        println!(
            "criterion {i}: {} | {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((i, o));
    };

    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());

    // desk-scale run: d = 32, s = 8, n = 2^10, N = 2^12 nodes per shift
    let config = RunConfig::default();
    assert_eq!((config.d, config.s, config.n, config.confidence.nodes), (32, 8, 1024, 4096));
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let summary = pipeline::run_pipeline(&config, dir.path()).unwrap();
    let pipeline_time = start.elapsed();
    let desk = SurrogateModel::load(&summary.model_path).unwrap();

    report(6, criterion_6(&desk));
    report(7, criterion_7(&desk, pipeline_time));
    report(8, criterion_8(&config, &summary.model_hash));

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(i, _)| *i).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
