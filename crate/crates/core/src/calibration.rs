//! Discretization-error calibration across a dyadic level schedule.
//!
//! Differences between neighbouring truncation levels `s_j = v_s 2^j` and mesh
//! levels `d_j = v_d 2^j` are measured on a shared sample set, fitted with
//! power laws in the log₂-log₂ domain, and summed as geometric tails to bound
//! the RMSE of the finest level against the exact critical pressure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::darcy::{critical_pressure, DarcyOptions, WellConfig};
use crate::error::{invalid, Error, Result};
use crate::random_field::KlBasis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSchedule {
    /// Initial truncation `v_s`.
    pub v_s: usize,
    /// Initial mesh dimension `v_d`.
    pub v_d: usize,
    /// Finest level `N`.
    pub levels: usize,
}

impl Default for LevelSchedule {
    fn default() -> Self {
        Self {
            v_s: 1,
            v_d: 4,
            levels: 3,
        }
    }
}

impl LevelSchedule {
    pub fn new(v_s: usize, v_d: usize, levels: usize) -> Result<Self> {
        let schedule = Self { v_s, v_d, levels };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.v_s < 1 || self.v_d < 2 || self.levels < 2 {
            return Err(invalid(format!(
                "level schedule needs v_s ≥ 1, v_d ≥ 2, N ≥ 2 (got {}, {}, {})",
                self.v_s, self.v_d, self.levels
            )));
        }
        if self.levels > 20 {
            return Err(invalid("level schedule deeper than 20 levels"));
        }
        Ok(())
    }

    pub fn s(&self, j: usize) -> usize {
        self.v_s << j
    }

    pub fn d(&self, j: usize) -> usize {
        self.v_d << j
    }
}

/// RMS differences measured at level `j ≥ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelNorms {
    pub level: usize,
    pub s: usize,
    pub d: usize,
    /// `‖Δ_{s_j}‖`: `(s_j, d_{j−1})` against `(s_{j−1}, d_{j−1})`.
    pub delta_s: f64,
    /// `‖Δ_{d_j}‖`: `(s_j, d_j)` against `(s_j, d_{j−1})`.
    pub delta_d: f64,
}

/// Power-law decay `‖Δ_{s_j}‖ = 2^{b_s} s_j^{a_s}`, `‖Δ_{d_j}‖ = 2^{b_d} d_j^{a_d}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub a_s: f64,
    pub b_s: f64,
    pub a_d: f64,
    pub b_d: f64,
}

impl DecayFit {
    /// Both fitted slopes are negative, so the tail sums converge.
    pub fn is_convergent(&self) -> bool {
        self.a_s < 0.0 && self.a_d < 0.0
    }

    pub fn model_delta_s(&self, s: f64) -> f64 {
        2f64.powf(self.b_s) * s.powf(self.a_s)
    }

    pub fn model_delta_d(&self, d: f64) -> f64 {
        2f64.powf(self.b_d) * d.powf(self.a_d)
    }
}

/// Upper bound on the RMSE at `(s_N, d_N)`; infinite when a fitted slope is
/// non-negative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseBound {
    #[serde(with = "finite_or_null")]
    pub value: f64,
    pub level: usize,
    pub s: usize,
    pub d: usize,
}

impl RmseBound {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Level norms from an arbitrary numerical critical-pressure oracle
/// `solve(sample, s, d)`. Samples are evaluated in parallel.
pub fn level_norms_with<F>(schedule: &LevelSchedule, m: usize, solve: F) -> Result<Vec<LevelNorms>>
where
    F: Fn(usize, usize, usize) -> Result<f64> + Sync,
{
    schedule.validate()?;
    if m < 8 {
        return Err(invalid(format!("calibration needs m ≥ 8 samples, got {m}")));
    }
    let n_levels = schedule.levels;
    // per sample: H(s_j, d_j) for j = 0..=N and H(s_j, d_{j-1}) for j = 1..=N
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut diag = Vec::with_capacity(n_levels + 1);
            let mut cross = Vec::with_capacity(n_levels);
            for j in 0..=n_levels {
                let h = solve(i, schedule.s(j), schedule.d(j)).map_err(|e| Error::Level {
                    level: j,
                    family: "d",
                    message: e.to_string(),
                })?;
                diag.push(h);
                if j > 0 {
                    let h = solve(i, schedule.s(j), schedule.d(j - 1)).map_err(|e| {
                        Error::Level {
                            level: j,
                            family: "s",
                            message: e.to_string(),
                        }
                    })?;
                    cross.push(h);
                }
            }
            Ok((diag, cross))
        })
        .collect::<Result<_>>()?;

    Ok((1..=n_levels)
        .map(|j| {
            let (mut ss, mut sd) = (0.0, 0.0);
            for (diag, cross) in &per_sample {
                let ds = cross[j - 1] - diag[j - 1];
                let dd = diag[j] - cross[j - 1];
                ss += ds * ds;
                sd += dd * dd;
            }
            LevelNorms {
                level: j,
                s: schedule.s(j),
                d: schedule.d(j),
                delta_s: (ss / m as f64).sqrt(),
                delta_d: (sd / m as f64).sqrt(),
            }
        })
        .collect())
}

/// Level norms from Darcy solves on a shared sample set: `R ~ U[0, w]` and
/// `Z ~ N(0, I)` of length `s_N`, each level using a prefix of `Z`.
pub fn level_differences(
    schedule: &LevelSchedule,
    basis: &KlBasis,
    wells: &WellConfig,
    options: &DarcyOptions,
    m: usize,
    seed: u64,
) -> Result<Vec<LevelNorms>> {
    schedule.validate()?;
    let s_max = schedule.s(schedule.levels);
    let d_max = schedule.d(schedule.levels);
    if basis.s() < s_max {
        return Err(invalid(format!(
            "KL basis has {} terms, schedule needs {s_max}",
            basis.s()
        )));
    }
    if basis.mesh().d() % d_max != 0 {
        return Err(invalid(format!(
            "KL mesh d = {} does not nest the finest level d = {d_max}",
            basis.mesh().d()
        )));
    }
    let samples = calibration_samples(wells.injection_rate, s_max, m, seed);
    level_norms_with(schedule, m, |i, s, d| {
        let (r, z) = &samples[i];
        critical_pressure(d, basis, wells, *r, &z[..s], options)
    })
}

/// The shared `(R_i, Z_i)` draws used by [`level_differences`].
pub fn calibration_samples(w: f64, s_max: usize, m: usize, seed: u64) -> Vec<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let r = w * rng.random::<f64>();
            let z = (0..s_max).map(|_| rng.sample(StandardNormal)).collect();
            (r, z)
        })
        .collect()
}

/// Least-squares fit of `log₂‖Δ‖ = b + a·log₂(level dimension)` per family.
pub fn fit_decay(norms: &[LevelNorms]) -> Result<DecayFit> {
    if norms.len() < 2 {
        return Err(invalid(format!(
            "decay fit needs at least 2 levels, got {}",
            norms.len()
        )));
    }
    if let Some(n) = norms.iter().find(|n| !(n.delta_s > 0.0 && n.delta_d > 0.0)) {
        return Err(invalid(format!(
            "level {} has a non-positive difference norm (Δs = {}, Δd = {}); log undefined",
            n.level, n.delta_s, n.delta_d
        )));
    }
    let (a_s, b_s) = log2_line(norms.iter().map(|n| (n.s as f64, n.delta_s)));
    let (a_d, b_d) = log2_line(norms.iter().map(|n| (n.d as f64, n.delta_d)));
    Ok(DecayFit { a_s, b_s, a_d, b_d })
}

fn log2_line(points: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = points.map(|(x, y)| (x.log2(), y.log2())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Geometric-tail bound on the RMSE at level `n` of `schedule`.
pub fn rmse_upper_bound(fit: &DecayFit, schedule: &LevelSchedule, n: usize) -> RmseBound {
    let tail = |a: f64, b: f64, v: usize| {
        if a >= 0.0 {
            f64::INFINITY
        } else {
            2f64.powf(b) * (v as f64).powf(a) * 2f64.powf((n as f64 + 1.0) * a)
                / (1.0 - 2f64.powf(a))
        }
    };
    RmseBound {
        value: tail(fit.a_s, fit.b_s, schedule.v_s) + tail(fit.a_d, fit.b_d, schedule.v_d),
        level: n,
        s: schedule.s(n),
        d: schedule.d(n),
    }
}

/// How the RMSE bound seeds the GP noise variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseInit {
    /// `ζ = bound²` (the bound is a standard-deviation scale).
    #[default]
    Squared,
    /// `ζ = bound`.
    Raw,
}

impl NoiseInit {
    pub fn apply(self, bound: f64) -> f64 {
        match self {
            Self::Squared => bound * bound,
            Self::Raw => bound,
        }
    }
}

/// Everything the calibration stage persists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schedule: LevelSchedule,
    pub samples: usize,
    pub seed: u64,
    pub levels: Vec<LevelNorms>,
    pub fit: DecayFit,
    /// Bound at every level `0..=N`.
    pub bounds: Vec<RmseBound>,
    #[serde(default)]
    pub config_hash: String,
}

impl CalibrationReport {
    pub fn new(
        schedule: LevelSchedule,
        samples: usize,
        seed: u64,
        levels: Vec<LevelNorms>,
    ) -> Result<Self> {
        let fit = fit_decay(&levels)?;
        let bounds = (0..=schedule.levels)
            .map(|j| rmse_upper_bound(&fit, &schedule, j))
            .collect();
        Ok(Self {
            schedule,
            samples,
            seed,
            levels,
            fit,
            bounds,
            config_hash: String::new(),
        })
    }

    /// Bound at the finest level `N`.
    pub fn finest_bound(&self) -> &RmseBound {
        self.bounds.last().expect("at least one bound")
    }
}
