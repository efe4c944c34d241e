//! Expected conditional confidence that the critical pressure stays below a
//! threshold, estimated by randomized quasi-Monte Carlo over the surrogate.
//!
//! The surrogate lives on the periodized unit cube: input `t₀` encodes the
//! rate through `r = w·b(t₀)` and `t_j` the KL coefficients through
//! `z_j = Φ⁻¹(b(t_j))`. A query at rate `r` uses `t₀ = r/(2w)`; the remaining
//! coordinates are QMC nodes `U`, fed directly since `b(U)` is uniform too.

use std::borrow::Borrow;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fastgp::FastGpModel;
use crate::normal;
use crate::qmc::{tent, DigitalGenerator};

/// Smallest and largest `b(u)` passed to `Φ⁻¹`.
pub const UNIFORM_CLAMP: f64 = 1.0 / 4_294_967_296.0;

/// Map between the unit cube and the physical inputs `(r, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateDomainMap {
    pub injection_rate: f64,
    pub s: usize,
    /// Apply the baker map to the QMC nodes as well.
    pub node_baker: bool,
}

impl SurrogateDomainMap {
    pub fn new(injection_rate: f64, s: usize) -> Result<Self> {
        if !(injection_rate.is_finite() && injection_rate > 0.0) {
            return Err(invalid(format!(
                "injection rate must be positive, got {injection_rate}"
            )));
        }
        if s == 0 {
            return Err(invalid("truncation s must be at least 1"));
        }
        Ok(Self {
            injection_rate,
            s,
            node_baker: false,
        })
    }

    pub fn with_node_baker(mut self, on: bool) -> Self {
        self.node_baker = on;
        self
    }

    pub fn dim(&self) -> usize {
        self.s + 1
    }

    /// Physical `(r, z)` for a unit-cube point, clamping `b(t_j)` into
    /// `[2⁻³², 1 − 2⁻³²]` so `z` stays finite at the lattice origin.
    pub fn to_physical(&self, t: &[f64]) -> Result<(f64, Vec<f64>)> {
        if t.len() != self.dim() {
            return Err(invalid(format!(
                "unit-cube point has {} coordinates, expected {}",
                t.len(),
                self.dim()
            )));
        }
        if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("unit-cube point outside [0,1]"));
        }
        let r = self.injection_rate * tent(t[0]);
        let z = t[1..]
            .iter()
            .map(|&u| normal::quantile(tent(u).clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)))
            .collect();
        Ok((r, z))
    }

    /// First surrogate coordinate for a physical rate.
    pub fn rate_coordinate(&self, r: f64) -> Result<f64> {
        if !(0.0..=self.injection_rate).contains(&r) {
            return Err(invalid(format!(
                "rate {r} outside [0, {}]",
                self.injection_rate
            )));
        }
        Ok(r / (2.0 * self.injection_rate))
    }
}

/// QMC settings for the confidence estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidenceSettings {
    /// Nodes per replicate; a power of two.
    pub nodes: usize,
    /// Independent digital shifts; the standard error needs at least two.
    pub shifts: usize,
    pub seed: u64,
}

impl Default for ConfidenceSettings {
    fn default() -> Self {
        Self {
            nodes: 1 << 12,
            shifts: 8,
            seed: 0,
        }
    }
}

impl ConfidenceSettings {
    pub fn validate(&self) -> Result<()> {
        if !self.nodes.is_power_of_two() {
            return Err(invalid(format!(
                "node count {} is not a power of two",
                self.nodes
            )));
        }
        if self.shifts == 0 {
            return Err(invalid("at least one shift is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceResult {
    pub r: f64,
    pub threshold: f64,
    pub estimate: f64,
    pub nodes: usize,
    /// Standard error across shifts; `None` with a single shift.
    pub stderr: Option<f64>,
}

/// Posterior moments `(m̊, σ̊)` at every node for one rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RateMoments {
    pub r: f64,
    /// Per shift: node means and standard deviations.
    pub replicates: Vec<(Vec<f64>, Vec<f64>)>,
}

impl RateMoments {
    pub fn estimate(&self, threshold: f64) -> ConfidenceResult {
        let per_shift: Vec<f64> = self
            .replicates
            .iter()
            .map(|(m, s)| node_average(m, s, threshold))
            .collect();
        let k = per_shift.len() as f64;
        let estimate = (per_shift.iter().sum::<f64>() / k).clamp(0.0, 1.0);
        let stderr = (per_shift.len() > 1).then(|| {
            let var = per_shift.iter().map(|e| (e - estimate).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        });
        ConfidenceResult {
            r: self.r,
            threshold,
            estimate,
            nodes: self.replicates.first().map_or(0, |(m, _)| m.len()),
            stderr,
        }
    }
}

/// `(1/N) Σ Φ((h − m_i)/σ_i)`, with the indicator `m_i ≤ h` where `σ_i = 0`.
pub fn node_average(means: &[f64], sds: &[f64], threshold: f64) -> f64 {
    let sum: f64 = means
        .iter()
        .zip(sds)
        .map(|(&m, &s)| {
            if s > 0.0 {
                normal::cdf((threshold - m) / s)
            } else if m <= threshold {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    sum / means.len() as f64
}

/// Confidence estimator holding the QMC node sets shared by all rates.
pub struct ConfidenceEstimator<'a> {
    model: &'a FastGpModel,
    map: SurrogateDomainMap,
    settings: ConfidenceSettings,
    nodes: Vec<Vec<f64>>,
}

impl<'a> ConfidenceEstimator<'a> {
    pub fn new(
        model: &'a FastGpModel,
        map: SurrogateDomainMap,
        settings: ConfidenceSettings,
    ) -> Result<Self> {
        settings.validate()?;
        if model.dim() != map.dim() {
            return Err(invalid(format!(
                "model has {} inputs, domain map expects {}",
                model.dim(),
                map.dim()
            )));
        }
        let sobol = DigitalGenerator::sobol(map.s).map_err(|e| {
            Error::Capacity(format!("confidence nodes in {} dimensions: {e}", map.s))
        })?;
        let nodes = (0..settings.shifts)
            .map(|k| {
                let pts = sobol
                    .random_shift(settings.seed.wrapping_add(k as u64))
                    .points(settings.nodes, map.s)?;
                let mut v = pts.as_slice().to_vec();
                if map.node_baker {
                    v.iter_mut().for_each(|u| *u = tent(*u));
                }
                Ok(v)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            map,
            settings,
            nodes,
        })
    }

    pub fn settings(&self) -> &ConfidenceSettings {
        &self.settings
    }

    pub fn map(&self) -> &SurrogateDomainMap {
        &self.map
    }

    /// Node moments at rate `r`: one posterior batch per shift.
    pub fn moments(&self, r: f64) -> Result<RateMoments> {
        let t0 = self.map.rate_coordinate(r)?;
        let s = self.map.s;
        let replicates = self
            .nodes
            .iter()
            .map(|nodes| {
                let mut queries = Vec::with_capacity(nodes.len() / s * (s + 1));
                for u in nodes.chunks_exact(s) {
                    queries.push(t0);
                    queries.extend_from_slice(u);
                }
                let batch = self.model.posterior_batch(&queries)?;
                let sds = batch.variance.iter().map(|v| v.sqrt()).collect();
                Ok((batch.mean, sds))
            })
            .collect::<Result<_>>()?;
        Ok(RateMoments { r, replicates })
    }

    pub fn estimate(&self, r: f64, threshold: f64) -> Result<ConfidenceResult> {
        Ok(self.moments(r)?.estimate(threshold))
    }

    pub fn curve(&self, rates: &[f64], threshold: f64) -> Result<Vec<ConfidenceResult>> {
        if rates.is_empty() {
            return Err(invalid("rate grid is empty"));
        }
        rates.iter().map(|&r| self.estimate(r, threshold)).collect()
    }

    /// Heatmap over sorted copies of the grids; one moment batch per rate.
    pub fn heatmap(&self, rates: &[f64], thresholds: &[f64]) -> Result<ConfidenceHeatmap> {
        heatmap_with(rates, thresholds, |r| self.moments(r))
    }

    /// Smallest grid rate whose confidence reaches `target`.
    pub fn min_rate(&self, threshold: f64, target: f64, rates: &[f64]) -> Result<Option<f64>> {
        check_target(target)?;
        let mut rates = rates.to_vec();
        rates.sort_by(f64::total_cmp);
        Ok(first_rate_reaching(&self.curve(&rates, threshold)?, target))
    }
}

pub(crate) fn check_target(target: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&target) {
        return Err(invalid(format!("target confidence {target} outside [0,1]")));
    }
    Ok(())
}

/// Heatmap from a per-rate moment source, e.g. a cache in front of
/// [`ConfidenceEstimator::moments`].
pub fn heatmap_with<M>(
    rates: &[f64],
    thresholds: &[f64],
    mut moments: impl FnMut(f64) -> Result<M>,
) -> Result<ConfidenceHeatmap>
where
    M: Borrow<RateMoments>,
{
    if rates.is_empty() || thresholds.is_empty() {
        return Err(invalid("heatmap grids must be non-empty"));
    }
    let mut rates = rates.to_vec();
    let mut thresholds = thresholds.to_vec();
    if rates.iter().chain(&thresholds).any(|v| !v.is_finite()) {
        return Err(invalid("heatmap grids must be finite"));
    }
    rates.sort_by(f64::total_cmp);
    thresholds.sort_by(f64::total_cmp);
    let mut estimates = Vec::with_capacity(rates.len());
    let mut stderr = Vec::with_capacity(rates.len());
    for &r in &rates {
        let m = moments(r)?;
        let m = m.borrow();
        let row: Vec<ConfidenceResult> = thresholds.iter().map(|&h| m.estimate(h)).collect();
        estimates.push(row.iter().map(|c| c.estimate).collect());
        stderr.push(row.iter().map(|c| c.stderr).collect());
    }
    Ok(ConfidenceHeatmap {
        rates,
        thresholds,
        estimates,
        stderr,
    })
}

/// `c̊_n(r)` at one rate and threshold.
pub fn expected_confidence(
    model: &FastGpModel,
    map: &SurrogateDomainMap,
    r: f64,
    threshold: f64,
    settings: &ConfidenceSettings,
) -> Result<ConfidenceResult> {
    ConfidenceEstimator::new(model, *map, *settings)?.estimate(r, threshold)
}

/// Confidence over a grid of rates at a fixed threshold.
pub fn confidence_curve(
    model: &FastGpModel,
    map: &SurrogateDomainMap,
    rates: &[f64],
    threshold: f64,
    settings: &ConfidenceSettings,
) -> Result<Vec<ConfidenceResult>> {
    if rates.is_empty() {
        return Err(invalid("rate grid is empty"));
    }
    ConfidenceEstimator::new(model, *map, *settings)?.curve(rates, threshold)
}

/// Confidence on a rate × threshold grid, both axes sorted ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHeatmap {
    pub rates: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// `estimates[i][j]` at `rates[i]`, `thresholds[j]`.
    pub estimates: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<Option<f64>>>,
}

impl ConfidenceHeatmap {
    pub fn results(&self) -> impl Iterator<Item = ConfidenceResult> + '_ {
        self.rates.iter().enumerate().flat_map(move |(i, &r)| {
            self.thresholds
                .iter()
                .enumerate()
                .map(move |(j, &h)| ConfidenceResult {
                    r,
                    threshold: h,
                    estimate: self.estimates[i][j],
                    nodes: 0,
                    stderr: self.stderr[i][j],
                })
        })
    }
}

pub fn confidence_heatmap(
    model: &FastGpModel,
    map: &SurrogateDomainMap,
    rates: &[f64],
    thresholds: &[f64],
    settings: &ConfidenceSettings,
) -> Result<ConfidenceHeatmap> {
    if rates.is_empty() || thresholds.is_empty() {
        return Err(invalid("heatmap grids must be non-empty"));
    }
    ConfidenceEstimator::new(model, *map, *settings)?.heatmap(rates, thresholds)
}

/// Smallest grid rate whose confidence reaches `target`.
pub fn min_rate_for_confidence(
    model: &FastGpModel,
    map: &SurrogateDomainMap,
    threshold: f64,
    target: f64,
    rates: &[f64],
    settings: &ConfidenceSettings,
) -> Result<Option<f64>> {
    check_target(target)?;
    ConfidenceEstimator::new(model, *map, *settings)?.min_rate(threshold, target, rates)
}

/// First entry of an ascending curve with `estimate ≥ target`.
pub fn first_rate_reaching(curve: &[ConfidenceResult], target: f64) -> Option<f64> {
    curve.iter().find(|c| c.estimate >= target).map(|c| c.r)
}

/// `points` equispaced rates covering `[0, w]`.
pub fn default_rate_grid(w: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![w],
        _ => (0..points)
            .map(|i| w * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// `points` thresholds spanning the observed range widened by three RMS
/// posterior standard deviations (sampled at 256 Sobol points).
pub fn default_threshold_grid(model: &FastGpModel, points: usize) -> Result<Vec<f64>> {
    let y = model.observations();
    if y.is_empty() {
        return Err(invalid("model has no observations"));
    }
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let probe = DigitalGenerator::sobol(model.dim())?.points(256, model.dim())?;
    let batch = model.posterior_batch(probe.as_slice())?;
    let sd = (batch.variance.iter().sum::<f64>() / batch.variance.len() as f64).sqrt();
    let (a, b) = (lo - 3.0 * sd, hi + 3.0 * sd);
    Ok(match points {
        0 => Vec::new(),
        1 => vec![0.5 * (a + b)],
        _ => (0..points)
            .map(|i| a + (b - a) * i as f64 / (points - 1) as f64)
            .collect(),
    })
}

/// Writes `r,h,estimate,stderr` rows.
pub fn write_csv<W: Write>(
    out: W,
    results: impl IntoIterator<Item = ConfidenceResult>,
) -> Result<()> {
    let mut out = out;
    writeln!(out, "r,h,estimate,stderr")?;
    for c in results {
        let se = c.stderr.map_or(String::new(), |s| format!("{s:e}"));
        writeln!(out, "{:e},{:e},{:e},{se}", c.r, c.threshold, c.estimate)?;
    }
    Ok(())
}
