//! Gaussian-process regression on rank-1 lattice designs.
//!
//! With lattice points in natural order and a shift-invariant periodic kernel,
//! `K[i][j] = c[(i − j) mod n]` where `c[k] = k(x_k, x_0)`, so `K` is circulant
//! and diagonalized by the DFT. Solves, log-determinants and likelihood
//! gradients then cost `O(n log n)`.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::qmc::{wrap_unit, LatticeGenerator, PointSet};

/// Largest `n` accepted by the dense reference path.
pub const DENSE_MAX_POINTS: usize = 2048;

/// Model file format version.
pub const MODEL_VERSION: u32 = 1;

/// Product kernel `k(x, y) = scale · Π_j (1 + γ_j B̃_α((x_j − y_j) mod 1))`.
///
/// `B̃_2(t) = 2π² B₂(t)` and `B̃_4(t) = −(2π)⁴/24 · B₄(t)` with Bernoulli
/// polynomials `B₂`, `B₄`; both equal `Σ_{k≠0} e^{2πikt}/|k|^α`, so every
/// factor has positive Fourier coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicKernel {
    pub order: u32,
    pub weights: Vec<f64>,
    pub scale: f64,
}

impl PeriodicKernel {
    pub fn new(order: u32, weights: Vec<f64>, scale: f64) -> Result<Self> {
        let kernel = Self {
            order,
            weights,
            scale,
        };
        kernel.validate()?;
        Ok(kernel)
    }

    /// Same weight `γ` in each of `p` dimensions.
    pub fn isotropic(order: u32, p: usize, gamma: f64, scale: f64) -> Result<Self> {
        Self::new(order, vec![gamma; p], scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order != 2 && self.order != 4 {
            return Err(invalid(format!(
                "kernel order must be 2 or 4, got {}",
                self.order
            )));
        }
        if self.weights.is_empty() {
            return Err(invalid("kernel needs at least one dimension"));
        }
        if self.weights.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(invalid("kernel weights must be finite and non-negative"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(invalid(format!(
                "kernel scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// The periodic factor `B̃_α` at a wrapped difference `t ∈ [0, 1)`.
    #[inline]
    pub fn factor(order: u32, t: f64) -> f64 {
        const C2: f64 = 2.0 * PI * PI;
        const C4: f64 = -(2.0 * PI) * (2.0 * PI) * (2.0 * PI) * (2.0 * PI) / 24.0;
        if order == 2 {
            C2 * (t * t - t + 1.0 / 6.0)
        } else {
            let t2 = t * t;
            C4 * (t2 * (t2 - 2.0 * t + 1.0) - 1.0 / 30.0)
        }
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut prod = self.scale;
        for ((xi, yi), g) in x.iter().zip(y).zip(&self.weights) {
            prod *= 1.0 + g * Self::factor(self.order, wrap_unit(xi - yi));
        }
        prod
    }

    /// `k(x, y)/scale − 1`, accumulated so that it keeps its relative
    /// accuracy when the weights are small.
    pub fn excess(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut d = 0.0;
        for ((xi, yi), g) in x.iter().zip(y).zip(&self.weights) {
            let a = g * Self::factor(self.order, wrap_unit(xi - yi));
            d += a * (1.0 + d);
        }
        d
    }

    /// `k(t, t)`, the same for every `t`.
    pub fn diagonal(&self) -> f64 {
        let b0 = Self::factor(self.order, 0.0);
        self.scale * self.weights.iter().map(|g| 1.0 + g * b0).product::<f64>()
    }
}

/// The first `n` natural-order points of a rank-1 lattice in `p` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeDesign {
    generator: LatticeGenerator,
    n: usize,
    p: usize,
    points: PointSet,
}

impl LatticeDesign {
    pub fn new(generator: LatticeGenerator, n: usize, p: usize) -> Result<Self> {
        if n != 0 && !n.is_power_of_two() {
            return Err(invalid(format!("lattice size {n} is not a power of two")));
        }
        let points = if n == 0 {
            PointSet::from_rows(0, p, Vec::new())?
        } else {
            generator.points(n, p)?
        };
        Ok(Self {
            generator,
            n,
            p,
            points,
        })
    }

    pub fn generator(&self) -> &LatticeGenerator {
        &self.generator
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn points(&self) -> &PointSet {
        &self.points
    }
}

fn forward_fft(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

fn real_fft(fft: &dyn Fft<f64>, values: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf
}

/// Per-dimension factors `B̃_α` of the Gram first column, `p × n` row-major.
fn first_column_factors(order: u32, design: &LatticeDesign) -> Vec<f64> {
    let (n, p) = (design.n, design.p);
    let x0 = design.points.row(0);
    let mut out = vec![0.0; n * p];
    for k in 0..n {
        let xk = design.points.row(k);
        for j in 0..p {
            out[j * n + k] = PeriodicKernel::factor(order, wrap_unit(xk[j] - x0[j]));
        }
    }
    out
}

fn column_from_factors(kernel: &PeriodicKernel, factors: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![kernel.scale; n];
    for (j, g) in kernel.weights.iter().enumerate() {
        for (ck, b) in c.iter_mut().zip(&factors[j * n..(j + 1) * n]) {
            *ck *= 1.0 + g * b;
        }
    }
    c
}

/// DFT eigenvalues of the circulant Gram matrix of `kernel` on `design`.
pub fn gram_spectrum(kernel: &PeriodicKernel, design: &LatticeDesign) -> Result<Vec<f64>> {
    let n = design.len();
    if !n.is_power_of_two() {
        return Err(invalid(format!("lattice size {n} is not a power of two")));
    }
    if kernel.dim() != design.dim() {
        return Err(invalid(format!(
            "kernel has {} dimensions, design has {}",
            kernel.dim(),
            design.dim()
        )));
    }
    let factors = first_column_factors(kernel.order, design);
    let c = column_from_factors(kernel, &factors, n);
    let spec = real_fft(forward_fft(n).as_ref(), &c);
    Ok(spec.into_iter().map(|z| z.re).collect())
}

/// Prior mean of the GP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMean {
    #[default]
    Zero,
    /// Constant estimated by generalized least squares. The constant vector
    /// is an eigenvector of every circulant Gram matrix, so the estimate is
    /// the sample mean of `y` whatever the kernel.
    Constant,
}

/// Optimizer settings for [`FastGpModel::fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Maximize the likelihood over `(scale, γ, ζ)`; otherwise keep the
    /// initial values.
    pub optimize: bool,
    /// Initial kernel; `None` picks the most likely isotropic kernel of
    /// `order` over a few weights, scaled to the mean square of centred `y`.
    pub kernel: Option<PeriodicKernel>,
    pub order: u32,
    pub prior_mean: PriorMean,
    pub max_iterations: usize,
    /// Stop when the relative change of the log-likelihood falls below this.
    pub relative_tolerance: f64,
    /// Lower bound on `ζ` relative to `k(t, t)` while optimizing.
    pub noise_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            optimize: true,
            kernel: None,
            order: 4,
            prior_mean: PriorMean::Zero,
            max_iterations: 200,
            relative_tolerance: 1e-8,
            noise_floor: 1e-12,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub initial_log_likelihood: f64,
    pub log_likelihood: f64,
    pub noise_init: f64,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Round-off negative eigenvalues set to zero.
    pub clamped_eigenvalues: usize,
}

/// A fitted circulant GP. Immutable once built.
#[derive(Clone)]
pub struct FastGpModel {
    design: LatticeDesign,
    y: Vec<f64>,
    mean: f64,
    kernel: PeriodicKernel,
    noise: f64,
    spectrum: Vec<f64>,
    coefficients: Vec<f64>,
    /// `Σαᵢ`, taken from the zero frequency for accuracy.
    coefficient_sum: f64,
    /// Design points by coordinate (`p × n`), for vectorized kernel rows.
    columns: Vec<f64>,
    diagnostics: FitDiagnostics,
    fft: Option<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for FastGpModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FastGpModel")
            .field("n", &self.len())
            .field("p", &self.dim())
            .field("kernel", &self.kernel)
            .field("noise", &self.noise)
            .field("diagnostics", &self.diagnostics)
            .finish()
    }
}

/// Quantities shared by the likelihood and its gradient.
struct Objective {
    n: usize,
    factors: Vec<f64>,
    yhat_sq: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

struct Evaluation {
    log_likelihood: f64,
    lambda: Vec<f64>,
    clamped: usize,
}

impl Objective {
    fn new(design: &LatticeDesign, order: u32, y: &[f64]) -> Self {
        let n = design.len();
        let fft = forward_fft(n);
        let yhat_sq = real_fft(fft.as_ref(), y).iter().map(|z| z.norm_sqr()).collect();
        Self {
            n,
            factors: first_column_factors(order, design),
            yhat_sq,
            fft,
        }
    }

    fn evaluate(&self, kernel: &PeriodicKernel, noise: f64) -> Result<Evaluation> {
        let c = column_from_factors(kernel, &self.factors, self.n);
        let (lambda, clamped) = clamp_spectrum(
            real_fft(self.fft.as_ref(), &c).into_iter().map(|z| z.re).collect(),
        );
        let log_likelihood = log_likelihood_from_spectrum(&lambda, &self.yhat_sq, noise)?;
        Ok(Evaluation {
            log_likelihood,
            lambda,
            clamped,
        })
    }

    /// Gradient with respect to `(ln scale, ln γ_1.., [ln ζ])`.
    fn gradient(&self, kernel: &PeriodicKernel, noise: f64, lambda: &[f64], with_noise: bool) -> Vec<f64> {
        let n = self.n;
        let p = kernel.dim();
        let nf = n as f64;
        let contract = |dl: &dyn Fn(usize) -> f64| -> f64 {
            let mut g = 0.0;
            for k in 0..n {
                let a = lambda[k] + noise;
                let d = dl(k);
                g += 0.5 * (self.yhat_sq[k] / nf) * d / (a * a) - 0.5 * d / a;
            }
            g
        };
        let mut grad = Vec::with_capacity(p + 2);
        grad.push(contract(&|k| lambda[k]));

        // d c_k / d ln γ_j = scale γ_j B_jk Π_{l≠j} (1 + γ_l B_lk) via prefix/suffix products
        let f = |j: usize, k: usize| 1.0 + kernel.weights[j] * self.factors[j * n + k];
        let mut prefix = vec![1.0; n * (p + 1)];
        let mut suffix = vec![1.0; n * (p + 1)];
        for k in 0..n {
            for j in 0..p {
                prefix[(j + 1) * n + k] = prefix[j * n + k] * f(j, k);
            }
            for j in (0..p).rev() {
                suffix[j * n + k] = suffix[(j + 1) * n + k] * f(j, k);
            }
        }
        let mut dc = vec![0.0; n];
        for j in 0..p {
            let g = kernel.weights[j];
            for k in 0..n {
                dc[k] = kernel.scale
                    * g
                    * self.factors[j * n + k]
                    * prefix[j * n + k]
                    * suffix[(j + 1) * n + k];
            }
            let dl: Vec<f64> = real_fft(self.fft.as_ref(), &dc).iter().map(|z| z.re).collect();
            grad.push(contract(&|k| dl[k]));
        }
        if with_noise {
            grad.push(noise * contract(&|_| 1.0));
        }
        grad
    }
}

fn clamp_spectrum(mut lambda: Vec<f64>) -> (Vec<f64>, usize) {
    let max = lambda.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-12 * max.max(f64::MIN_POSITIVE);
    let mut clamped = 0;
    for l in &mut lambda {
        if *l < 0.0 && *l >= -tol {
            *l = 0.0;
            clamped += 1;
        }
    }
    (lambda, clamped)
}

fn log_likelihood_from_spectrum(lambda: &[f64], yhat_sq: &[f64], noise: f64) -> Result<f64> {
    let n = lambda.len() as f64;
    let mut quad = 0.0;
    let mut logdet = 0.0;
    for (l, y2) in lambda.iter().zip(yhat_sq) {
        let a = l + noise;
        if !(a > 0.0) {
            let min = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
            return Err(Error::NonFiniteLikelihood(format!(
                "regularized spectrum not positive: min eigenvalue {min:e}, noise {noise:e}"
            )));
        }
        quad += y2 / a;
        logdet += a.ln();
    }
    let ll = -0.5 * quad / n - 0.5 * logdet - 0.5 * n * (2.0 * PI).ln();
    if !ll.is_finite() {
        return Err(Error::NonFiniteLikelihood(format!(
            "quadratic form {quad:e}, log-determinant {logdet:e}, noise {noise:e}"
        )));
    }
    Ok(ll)
}

/// Log-parameter vector with box constraints.
struct Params {
    theta: Vec<f64>,
    with_noise: bool,
    noise_fixed: f64,
    noise_floor_ln: f64,
}

impl Params {
    fn unpack(&self, order: u32) -> (PeriodicKernel, f64) {
        let p = self.theta.len() - 1 - usize::from(self.with_noise);
        let kernel = PeriodicKernel {
            order,
            weights: self.theta[1..=p].iter().map(|t| t.exp()).collect(),
            scale: self.theta[0].exp(),
        };
        let noise = if self.with_noise {
            self.theta[p + 1].exp()
        } else {
            self.noise_fixed
        };
        (kernel, noise)
    }

    fn project(&self, theta: &mut [f64]) {
        let p = theta.len() - 1 - usize::from(self.with_noise);
        theta[0] = theta[0].clamp(-600.0, 600.0);
        for t in &mut theta[1..=p] {
            *t = t.clamp(-20.0, 20.0);
        }
        if self.with_noise {
            theta[p + 1] = theta[p + 1].clamp(self.noise_floor_ln, 600.0);
        }
    }
}

impl FastGpModel {
    /// Fits to observations `y` at the design points. `noise_init = 0` keeps
    /// the noise fixed at zero (interpolation) even when optimizing.
    pub fn fit(
        design: &LatticeDesign,
        y: &[f64],
        noise_init: f64,
        options: &FitOptions,
    ) -> Result<Self> {
        let n = design.len();
        if y.len() != n {
            return Err(invalid(format!(
                "{} observations for {n} design points",
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("observations must be finite"));
        }
        if !(noise_init.is_finite() && noise_init >= 0.0) {
            return Err(invalid(format!("noise must be ≥ 0, got {noise_init}")));
        }
        let mean = match options.prior_mean {
            PriorMean::Constant if n > 0 => y.iter().sum::<f64>() / n as f64,
            _ => 0.0,
        };
        let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let kernel = match &options.kernel {
            Some(k) => {
                k.validate()?;
                if k.dim() != design.dim() {
                    return Err(invalid(format!(
                        "kernel has {} dimensions, design has {}",
                        k.dim(),
                        design.dim()
                    )));
                }
                k.clone()
            }
            None => default_kernel(options.order, design.dim(), &yc, 1.0),
        };
        if n == 0 {
            return Ok(Self {
                design: design.clone(),
                y: Vec::new(),
                mean,
                kernel,
                noise: noise_init,
                spectrum: Vec::new(),
                coefficients: Vec::new(),
                coefficient_sum: 0.0,
                columns: Vec::new(),
                diagnostics: FitDiagnostics {
                    noise_init,
                    converged: true,
                    ..Default::default()
                },
                fft: None,
            });
        }

        let objective = Objective::new(design, kernel.order, &yc);
        let (kernel, initial) = match options.kernel {
            Some(_) => {
                let initial = objective.evaluate(&kernel, noise_init)?;
                (kernel, initial)
            }
            None => {
                // isotropic start with the best likelihood; large weights on
                // every axis at once tend to lead the ascent into poor optima
                let mut best: Option<(PeriodicKernel, Evaluation)> = None;
                for w in INITIAL_WEIGHTS {
                    let k = default_kernel(options.order, design.dim(), &yc, w);
                    if let Ok(e) = objective.evaluate(&k, noise_init) {
                        if best.as_ref().is_none_or(|(_, b)| e.log_likelihood > b.log_likelihood) {
                            best = Some((k, e));
                        }
                    }
                }
                match best {
                    Some(b) => b,
                    None => (kernel.clone(), objective.evaluate(&kernel, noise_init)?),
                }
            }
        };
        let mut diagnostics = FitDiagnostics {
            iterations: 0,
            initial_log_likelihood: initial.log_likelihood,
            log_likelihood: initial.log_likelihood,
            noise_init,
            converged: !options.optimize,
            gradient_norm: 0.0,
            clamped_eigenvalues: initial.clamped,
        };
        let (kernel, noise, eval) = if options.optimize {
            optimize(&objective, kernel, noise_init, initial, options, &mut diagnostics)?
        } else {
            (kernel, noise_init, initial)
        };
        diagnostics.log_likelihood = eval.log_likelihood;
        diagnostics.clamped_eigenvalues = eval.clamped;

        let spectrum = eval.lambda;
        let fft = objective.fft.clone();
        let coefficients = solve_circulant(fft.as_ref(), &spectrum, noise, &yc);
        Ok(Self {
            design: design.clone(),
            y: y.to_vec(),
            mean,
            kernel,
            noise,
            coefficient_sum: coefficient_sum(&spectrum, noise, &yc),
            columns: columns(design),
            spectrum,
            coefficients,
            diagnostics,
            fft: Some(fft),
        })
    }

    pub fn len(&self) -> usize {
        self.design.len()
    }

    pub fn is_empty(&self) -> bool {
        self.design.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.design.dim()
    }

    pub fn design(&self) -> &LatticeDesign {
        &self.design
    }

    pub fn observations(&self) -> &[f64] {
        &self.y
    }

    pub fn kernel(&self) -> &PeriodicKernel {
        &self.kernel
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// Prior mean constant (zero unless fitted).
    pub fn prior_mean(&self) -> f64 {
        self.mean
    }

    /// `(K + ζI)⁻¹ (y − μ)`.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    pub fn log_likelihood(&self) -> f64 {
        self.diagnostics.log_likelihood
    }

    fn check_query(&self, t: &[f64]) -> Result<()> {
        if t.len() != self.dim() {
            return Err(invalid(format!(
                "query has {} coordinates, model has {}",
                t.len(),
                self.dim()
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(invalid("query coordinates must be finite"));
        }
        Ok(())
    }

    /// Kernel excesses `k(t, tᵢ)/scale − 1`; see [`PeriodicKernel::excess`].
    fn kernel_vector(&self, t: &[f64], out: &mut [f64]) {
        let n = out.len();
        if n == 0 {
            return;
        }
        out.fill(0.0);
        let order = self.kernel.order;
        for ((tj, g), col) in t.iter().zip(&self.kernel.weights).zip(self.columns.chunks_exact(n)) {
            // the factors are symmetric about 1/2, so |t − x| stands in for the
            // wrapped difference once both lie in [0, 1]
            let tj = wrap_unit(*tj);
            for (o, x) in out.iter_mut().zip(col) {
                let a = g * PeriodicKernel::factor(order, (tj - x).abs());
                *o += a * (1.0 + *o);
            }
        }
    }

    /// `k_tᵀα` from the excess vector, splitting off the constant part.
    fn mean_from_excess(&self, excess: &[f64]) -> f64 {
        let dot: f64 = excess.iter().zip(&self.coefficients).map(|(d, a)| d * a).sum();
        self.mean + self.kernel.scale * (self.coefficient_sum + dot)
    }

    /// Posterior mean `k_tᵀ (K + ζI)⁻¹ y`, `O(n)` per query.
    pub fn posterior_mean(&self, t: &[f64]) -> Result<f64> {
        self.check_query(t)?;
        Ok(self.evaluator().mean_unchecked(t))
    }

    /// Posterior variance, clamped at zero.
    pub fn posterior_variance(&self, t: &[f64]) -> Result<f64> {
        self.check_query(t)?;
        Ok(self.evaluator().posterior_unchecked(t).variance)
    }

    /// Posterior covariance `k(t, t′) − k_tᵀ (K + ζI)⁻¹ k_t′`.
    pub fn cross_covariance(&self, t: &[f64], u: &[f64]) -> Result<f64> {
        self.check_query(t)?;
        self.check_query(u)?;
        let prior = self.kernel.value(t, u);
        if self.is_empty() {
            return Ok(prior);
        }
        let mut ev = self.evaluator();
        let a = ev.transformed_kernel_vector(t);
        let b = ev.transformed_kernel_vector(u);
        let nf = self.len() as f64;
        let quad: f64 = a
            .iter()
            .zip(&b)
            .zip(&self.spectrum)
            .map(|((x, y), l)| (x.conj() * y).re / (l + self.noise))
            .sum();
        Ok(prior - quad / nf)
    }

    /// Mean and variance at a batch of queries (row-major, `p` columns).
    pub fn posterior_batch(&self, queries: &[f64]) -> Result<PosteriorBatch> {
        let p = self.dim();
        if queries.len() % p != 0 {
            return Err(invalid("query batch length is not a multiple of the dimension"));
        }
        for t in queries.chunks_exact(p) {
            self.check_query(t)?;
        }
        let results: Vec<Posterior> = queries
            .par_chunks_exact(p)
            .map_init(|| self.evaluator(), |ev, t| ev.posterior_unchecked(t))
            .collect();
        Ok(PosteriorBatch::from_results(results))
    }

    /// Reusable scratch space for repeated queries.
    pub fn evaluator(&self) -> Evaluator<'_> {
        let n = self.len();
        Evaluator {
            model: self,
            kvec: vec![0.0; n],
            buf: vec![Complex::new(0.0, 0.0); n],
            scratch: vec![
                Complex::new(0.0, 0.0);
                self.fft.as_ref().map_or(0, |f| f.get_inplace_scratch_len())
            ],
        }
    }

    /// Writes the model as versioned JSON with base64 `f64` payloads.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: ModelFile = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_file(file)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            version: MODEL_VERSION,
            n: self.len(),
            p: self.dim(),
            generator: self.design.generator.clone(),
            kernel: self.kernel.clone(),
            noise: self.noise,
            observations: self.y.clone(),
            prior_mean: self.mean,
            spectrum: self.spectrum.clone(),
            coefficients: self.coefficients.clone(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "model version {} is not supported (expected {MODEL_VERSION})",
                file.version
            )));
        }
        file.kernel.validate()?;
        let n = file.n;
        if file.kernel.dim() != file.p
            || file.observations.len() != n
            || file.spectrum.len() != n
            || file.coefficients.len() != n
        {
            return Err(Error::Format("model payload sizes are inconsistent".into()));
        }
        let design = LatticeDesign::new(file.generator, n, file.p)?;
        let centred: Vec<f64> = file.observations.iter().map(|v| v - file.prior_mean).collect();
        Ok(Self {
            coefficient_sum: coefficient_sum(&file.spectrum, file.noise, &centred),
            columns: columns(&design),
            design,
            y: file.observations,
            mean: file.prior_mean,
            kernel: file.kernel,
            noise: file.noise,
            spectrum: file.spectrum,
            coefficients: file.coefficients,
            diagnostics: file.diagnostics,
            fft: (n > 0).then(|| forward_fft(n)),
        })
    }
}

/// Isotropic starting weights tried when no kernel is given.
const INITIAL_WEIGHTS: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];

/// Isotropic kernel with `k(0)` equal to the mean square of the (centred) data.
fn default_kernel(order: u32, p: usize, y: &[f64], weight: f64) -> PeriodicKernel {
    let base = PeriodicKernel {
        order,
        weights: vec![weight; p.max(1)],
        scale: 1.0,
    };
    let ms = if y.is_empty() {
        1.0
    } else {
        y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64
    };
    let scale = if ms > 0.0 { ms / base.diagonal() } else { 1.0 };
    PeriodicKernel { scale, ..base }
}

fn columns(design: &LatticeDesign) -> Vec<f64> {
    let (n, p) = (design.len(), design.dim());
    let mut out = vec![0.0; n * p];
    for (i, row) in design.points().rows().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j * n + i] = *v;
        }
    }
    out
}

fn coefficient_sum(spectrum: &[f64], noise: f64, y: &[f64]) -> f64 {
    match spectrum.first() {
        Some(l0) => y.iter().sum::<f64>() / (l0 + noise),
        None => 0.0,
    }
}

fn solve_circulant(fft: &dyn Fft<f64>, lambda: &[f64], noise: f64, y: &[f64]) -> Vec<f64> {
    // (K + ζI)⁻¹ y = IDFT(ŷ / (λ + ζ)), using conj(DFT(conj(v)))/n for the inverse
    let n = y.len() as f64;
    let mut buf = real_fft(fft, y);
    for (b, l) in buf.iter_mut().zip(lambda) {
        *b = (*b / (l + noise)).conj();
    }
    fft.process(&mut buf);
    buf.iter().map(|z| z.re / n).collect()
}

const LBFGS_MEMORY: usize = 10;

fn scaled_gradient(
    objective: &Objective,
    k: &PeriodicKernel,
    z: f64,
    eval: &Evaluation,
    with_noise: bool,
) -> Vec<f64> {
    let n = objective.n as f64;
    objective
        .gradient(k, z, &eval.lambda, with_noise)
        .into_iter()
        .map(|g| g / n)
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Two-loop recursion: approximate inverse Hessian of `−ll` applied to the gradient.
fn lbfgs_direction(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alpha = vec![0.0; history.len()];
    for (i, (s, y, rho)) in history.iter().enumerate().rev() {
        let a = rho * s.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alpha[i] = a;
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = s.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
            / y.iter().map(|v| v * v).sum::<f64>();
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (i, (s, y, rho)) in history.iter().enumerate() {
        let b = rho * y.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (alpha[i] - b) * si);
    }
    q
}

fn optimize(
    objective: &Objective,
    kernel: PeriodicKernel,
    noise_init: f64,
    initial: Evaluation,
    options: &FitOptions,
    diagnostics: &mut FitDiagnostics,
) -> Result<(PeriodicKernel, f64, Evaluation)> {
    let order = kernel.order;
    let with_noise = noise_init > 0.0;
    let floor = (options.noise_floor * kernel.diagonal()).max(f64::MIN_POSITIVE);
    let mut theta: Vec<f64> = std::iter::once(kernel.scale.ln())
        .chain(kernel.weights.iter().map(|g| g.max(1e-300).ln()))
        .collect();
    if with_noise {
        theta.push(noise_init.max(floor).ln());
    }
    let mut params = Params {
        theta: Vec::new(),
        with_noise,
        noise_fixed: noise_init,
        noise_floor_ln: floor.ln(),
    };
    params.project(&mut theta);
    params.theta = theta;
    let n = objective.n as f64;

    // the projection may have moved the start (e.g. ζ raised to its floor)
    let (mut k, mut z) = params.unpack(order);
    let mut current = if z != noise_init || k != kernel {
        objective.evaluate(&k, z)?
    } else {
        initial
    };
    // limited-memory BFGS on the ascent problem; pairs are (Δθ, −Δ∇)
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut grad = scaled_gradient(objective, &k, z, &current, with_noise);
    for it in 0..options.max_iterations {
        diagnostics.iterations = it + 1;
        diagnostics.gradient_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if diagnostics.gradient_norm == 0.0 || !diagnostics.gradient_norm.is_finite() {
            diagnostics.converged = diagnostics.gradient_norm == 0.0;
            break;
        }
        let mut dir = lbfgs_direction(&grad, &history);
        if dir.iter().zip(&grad).map(|(d, g)| d * g).sum::<f64>() <= 0.0 {
            history.clear();
            dir = grad.clone();
        }
        let max = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if max > 1.0 {
            dir.iter_mut().for_each(|d| *d /= max);
        }
        let f0 = current.log_likelihood / n;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand: Vec<f64> = params
                .theta
                .iter()
                .zip(&dir)
                .map(|(t, d)| t + step * d)
                .collect();
            params.project(&mut cand);
            let moved: f64 = cand
                .iter()
                .zip(&params.theta)
                .zip(&grad)
                .map(|((c, t), g)| (c - t) * g)
                .sum();
            if moved > 0.0 {
                let trial = Params {
                    theta: cand.clone(),
                    ..params
                };
                let (kc, zc) = trial.unpack(order);
                if let Ok(eval) = objective.evaluate(&kc, zc) {
                    if eval.log_likelihood / n >= f0 + 1e-4 * moved {
                        accepted = Some((cand, kc, zc, eval));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((cand, kc, zc, eval)) = accepted else {
            if history.is_empty() {
                diagnostics.converged = true;
                break;
            }
            // retry along the plain gradient
            history.clear();
            continue;
        };
        let change = (eval.log_likelihood - current.log_likelihood).abs()
            / current.log_likelihood.abs().max(1.0);
        let next_grad = scaled_gradient(objective, &kc, zc, &eval, with_noise);
        let sv: Vec<f64> = cand.iter().zip(&params.theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = grad.iter().zip(&next_grad).map(|(a, b)| a - b).collect();
        let sy: f64 = sv.iter().zip(&yv).map(|(a, b)| a * b).sum();
        if sy > 1e-12 * norm(&sv) * norm(&yv) && sy > 0.0 {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((sv, yv, 1.0 / sy));
        }
        params.theta = cand;
        k = kc;
        z = zc;
        current = eval;
        grad = next_grad;
        if change <= options.relative_tolerance {
            diagnostics.converged = true;
            break;
        }
    }
    Ok((k, z, current))
}

/// Mean and variance at one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    /// Clamped at zero.
    pub variance: f64,
    /// Before clamping.
    pub raw_variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorBatch {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Queries whose raw variance was below `-1e-8` before clamping.
    pub negative_variances: usize,
}

impl PosteriorBatch {
    fn from_results(results: Vec<Posterior>) -> Self {
        Self {
            negative_variances: results.iter().filter(|r| r.raw_variance < -1e-8).count(),
            mean: results.iter().map(|r| r.mean).collect(),
            variance: results.iter().map(|r| r.variance).collect(),
        }
    }
}

/// Per-thread scratch buffers for posterior queries.
pub struct Evaluator<'a> {
    model: &'a FastGpModel,
    kvec: Vec<f64>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl Evaluator<'_> {
    pub fn mean(&mut self, t: &[f64]) -> Result<f64> {
        self.model.check_query(t)?;
        Ok(self.mean_unchecked(t))
    }

    pub fn posterior(&mut self, t: &[f64]) -> Result<Posterior> {
        self.model.check_query(t)?;
        Ok(self.posterior_unchecked(t))
    }

    fn mean_unchecked(&mut self, t: &[f64]) -> f64 {
        self.model.kernel_vector(t, &mut self.kvec);
        self.model.mean_from_excess(&self.kvec)
    }

    fn transformed_kernel_vector(&mut self, t: &[f64]) -> Vec<Complex<f64>> {
        self.model.kernel_vector(t, &mut self.kvec);
        self.fft_kvec();
        self.buf.clone()
    }

    fn fft_kvec(&mut self) {
        let scale = self.model.kernel.scale;
        for (b, d) in self.buf.iter_mut().zip(&self.kvec) {
            *b = Complex::new(scale * (1.0 + d), 0.0);
        }
        if let Some(fft) = &self.model.fft {
            fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        }
    }

    fn posterior_unchecked(&mut self, t: &[f64]) -> Posterior {
        let m = self.model;
        let prior = m.kernel.diagonal();
        if m.is_empty() {
            return Posterior {
                mean: m.mean,
                variance: prior,
                raw_variance: prior,
            };
        }
        m.kernel_vector(t, &mut self.kvec);
        let mean = m.mean_from_excess(&self.kvec);
        self.fft_kvec();
        let quad: f64 = self
            .buf
            .iter()
            .zip(&m.spectrum)
            .map(|(b, l)| b.norm_sqr() / (l + m.noise))
            .sum();
        let raw = prior - quad / m.len() as f64;
        Posterior {
            mean,
            variance: raw.max(0.0),
            raw_variance: raw,
        }
    }
}

/// On-disk model representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub n: usize,
    pub p: usize,
    pub generator: LatticeGenerator,
    pub kernel: PeriodicKernel,
    pub noise: f64,
    #[serde(with = "crate::codec::f64_base64")]
    pub observations: Vec<f64>,
    #[serde(default)]
    pub prior_mean: f64,
    #[serde(with = "crate::codec::f64_base64")]
    pub spectrum: Vec<f64>,
    #[serde(with = "crate::codec::f64_base64")]
    pub coefficients: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

/// Textbook GP regression with a dense Cholesky factor, for checking the
/// fast path on small problems. Works on any point set.
#[derive(Clone, Debug)]
pub struct DenseGp {
    points: PointSet,
    kernel: PeriodicKernel,
    noise: f64,
    factor: DMatrix<f64>,
    coefficients: DVector<f64>,
    log_likelihood: f64,
}

impl DenseGp {
    pub fn fit(points: &PointSet, y: &[f64], kernel: &PeriodicKernel, noise: f64) -> Result<Self> {
        let n = points.len();
        if n > DENSE_MAX_POINTS {
            return Err(Error::Capacity(format!(
                "dense GP limited to {DENSE_MAX_POINTS} points, got {n}"
            )));
        }
        if y.len() != n {
            return Err(invalid(format!("{} observations for {n} points", y.len())));
        }
        if kernel.dim() != points.dim() {
            return Err(invalid("kernel and point dimensions differ"));
        }
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel.value(points.row(i), points.row(j)) + if i == j { noise } else { 0.0 }
        });
        let chol = k.cholesky().ok_or_else(|| {
            Error::Factorization(format!("K + ζI is not positive definite (ζ = {noise:e})"))
        })?;
        let yv = DVector::from_column_slice(y);
        let coefficients = chol.solve(&yv);
        let factor = chol.l();
        let logdet: f64 = 2.0 * factor.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_likelihood = -0.5 * yv.dot(&coefficients)
            - 0.5 * logdet
            - 0.5 * n as f64 * (2.0 * PI).ln();
        Ok(Self {
            points: points.clone(),
            kernel: kernel.clone(),
            noise,
            factor,
            coefficients,
            log_likelihood,
        })
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn coefficients(&self) -> &[f64] {
        self.coefficients.as_slice()
    }

    fn kvec(&self, t: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.points.len(),
            self.points.rows().map(|x| self.kernel.value(t, x)),
        )
    }

    pub fn posterior_mean(&self, t: &[f64]) -> f64 {
        self.kvec(t).dot(&self.coefficients)
    }

    pub fn posterior_variance(&self, t: &[f64]) -> f64 {
        let kt = self.kvec(t);
        let v = self
            .factor
            .solve_lower_triangular(&kt)
            .expect("Cholesky factor has a positive diagonal");
        self.kernel.value(t, t) - v.dot(&v)
    }

    /// Dense Gram matrix without the noise term.
    pub fn gram(points: &PointSet, kernel: &PeriodicKernel) -> DMatrix<f64> {
        let n = points.len();
        DMatrix::from_fn(n, n, |i, j| kernel.value(points.row(i), points.row(j)))
    }
}
