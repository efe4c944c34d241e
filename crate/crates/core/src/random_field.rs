//! Gaussian log-permeability fields via a truncated Karhunen-Loève expansion.
//!
//! The covariance operator is discretized on mesh nodes with trapezoidal
//! weights `W` (Nyström). The symmetric matrix `W^½ C W^½` is eigendecomposed;
//! eigenfunctions `φ = W^-½ ψ` are then orthonormal in the weighted inner
//! product and `Σ λ φ φᵀ` reproduces the node covariance `C`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};
use crate::mesh::Mesh;
use crate::normal;

/// Isotropic Matérn covariance `C(ρ) = σ² 2^{1−ν}/Γ(ν) (√(2ν)ρ/ℓ)^ν K_ν(√(2ν)ρ/ℓ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaternCovariance {
    pub variance: f64,
    pub correlation_length: f64,
    pub smoothness: f64,
}

impl Default for MaternCovariance {
    fn default() -> Self {
        Self {
            variance: 1.0,
            correlation_length: 50.0,
            smoothness: 1.5,
        }
    }
}

impl MaternCovariance {
    pub fn new(variance: f64, correlation_length: f64, smoothness: f64) -> Result<Self> {
        let cov = Self {
            variance,
            correlation_length,
            smoothness,
        };
        cov.validate()?;
        Ok(cov)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance.is_finite() && self.variance >= 0.0) {
            return Err(invalid(format!("field variance must be ≥ 0, got {}", self.variance)));
        }
        if !(self.correlation_length.is_finite() && self.correlation_length > 0.0) {
            return Err(invalid(format!(
                "correlation length must be > 0, got {}",
                self.correlation_length
            )));
        }
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return Err(invalid(format!("smoothness must be > 0, got {}", self.smoothness)));
        }
        Ok(())
    }

    /// Covariance at separation `dist` (metres).
    pub fn value(&self, dist: f64) -> f64 {
        if dist <= 0.0 {
            return self.variance;
        }
        let nu = self.smoothness;
        let x = (2.0 * nu).sqrt() * dist / self.correlation_length;
        let half_order = nu - 0.5;
        if (half_order - half_order.round()).abs() < 1e-12 && half_order.round() <= 20.0 {
            self.variance * half_integer_matern(half_order.round() as u32, x)
        } else {
            let k = bessel_k(nu, x);
            self.variance * 2f64.powf(1.0 - nu) / gamma(nu) * x.powf(nu) * k
        }
    }
}

/// Normalized Matérn correlation for `ν = p + ½` in closed form.
fn half_integer_matern(p: u32, x: f64) -> f64 {
    let fact = |k: u32| (1..=k).fold(1.0f64, |a, b| a * b as f64);
    let lead = fact(p) / fact(2 * p);
    let sum: f64 = (0..=p)
        .map(|i| fact(p + i) / (fact(i) * fact(p - i)) * (2.0 * x).powi((p - i) as i32))
        .sum();
    (-x).exp() * lead * sum
}

/// Modified Bessel function of the second kind via
/// `K_ν(x) = ∫₀^∞ exp(−x cosh t) cosh(νt) dt` (trapezoidal rule; the integrand
/// is analytic and decays double-exponentially).
fn bessel_k(nu: f64, x: f64) -> f64 {
    let h = 0.01;
    let term = |t: f64| {
        let log_cosh = nu * t + (-2.0 * nu * t).exp().ln_1p() - std::f64::consts::LN_2;
        (-x * t.cosh() + log_cosh).exp()
    };
    let mut sum = 0.5 * term(0.0);
    let mut k = 1;
    loop {
        let t = k as f64 * h;
        let v = term(t);
        sum += v;
        if t > 1.0 && v < 1e-18 * sum {
            break;
        }
        k += 1;
    }
    sum * h
}

/// Top eigenpairs of the discretized covariance operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlBasis {
    mesh: Mesh,
    covariance: MaternCovariance,
    #[serde(with = "crate::codec::f64_base64")]
    eigenvalues: Vec<f64>,
    /// Row-major `s × nodes`.
    #[serde(with = "crate::codec::f64_base64")]
    eigenfunctions: Vec<f64>,
    #[serde(with = "crate::codec::f64_base64")]
    node_weights: Vec<f64>,
}

/// Node covariance matrix `C_ij = C(|x_i − x_j|)`.
pub fn node_covariance(cov: &MaternCovariance, mesh: &Mesh) -> DMatrix<f64> {
    let n = mesh.node_count();
    let coords: Vec<(f64, f64)> = (0..n).map(|k| mesh.node_coords(k)).collect();
    DMatrix::from_fn(n, n, |i, j| {
        let (xi, yi) = coords[i];
        let (xj, yj) = coords[j];
        cov.value((xi - xj).hypot(yi - yj))
    })
}

/// Builds the `s` leading KL eigenpairs on `mesh`.
pub fn build_kl(cov: &MaternCovariance, mesh: &Mesh, s: usize) -> Result<KlBasis> {
    cov.validate()?;
    let n = mesh.node_count();
    if s == 0 || s > n {
        return Err(invalid(format!(
            "truncation s = {s} must lie in 1..={n} (mesh nodes)"
        )));
    }
    let weights = mesh.node_weights();
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut a = node_covariance(cov, mesh);
    for j in 0..n {
        for i in 0..n {
            a[(i, j)] *= sqrt_w[i] * sqrt_w[j];
        }
    }
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let largest = eig.eigenvalues[order[0]].max(0.0);
    let smallest = eig.eigenvalues[order[n - 1]];
    // Round-off leaves eigenvalues of order ε·λ₁ on either side of zero.
    let tolerance = 1e-10 * largest.max(f64::MIN_POSITIVE) * n as f64;
    if smallest < -tolerance {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: smallest,
        });
    }

    let mut eigenvalues = Vec::with_capacity(s);
    let mut eigenfunctions = Vec::with_capacity(s * n);
    for &k in order.iter().take(s) {
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
        let psi = eig.eigenvectors.column(k);
        // fix the sign so the basis is deterministic
        let sign = if psi.iter().fold(0.0, |a, v| a + v) < 0.0 { -1.0 } else { 1.0 };
        eigenfunctions.extend((0..n).map(|i| sign * psi[i] / sqrt_w[i]));
    }
    Ok(KlBasis {
        mesh: *mesh,
        covariance: *cov,
        eigenvalues,
        eigenfunctions,
        node_weights: weights,
    })
}

impl KlBasis {
    pub fn s(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn covariance(&self) -> &MaternCovariance {
        &self.covariance
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn node_weights(&self) -> &[f64] {
        &self.node_weights
    }

    pub fn eigenfunction(&self, j: usize) -> &[f64] {
        let n = self.mesh.node_count();
        &self.eigenfunctions[j * n..(j + 1) * n]
    }

    /// Leading `s` terms of this basis.
    pub fn truncated(&self, s: usize) -> Result<KlBasis> {
        if s == 0 || s > self.s() {
            return Err(invalid(format!(
                "cannot truncate a {}-term basis to {s} terms",
                self.s()
            )));
        }
        let n = self.mesh.node_count();
        Ok(KlBasis {
            eigenvalues: self.eigenvalues[..s].to_vec(),
            eigenfunctions: self.eigenfunctions[..s * n].to_vec(),
            ..self.clone()
        })
    }

    /// `Σⱼ √λⱼ φⱼ zⱼ` on the basis mesh.
    pub fn sample_field(&self, z: &[f64]) -> Result<FieldRealization> {
        if z.len() != self.s() {
            return Err(invalid(format!(
                "coefficient vector has length {}, basis has s = {}",
                z.len(),
                self.s()
            )));
        }
        let n = self.mesh.node_count();
        let mut values = vec![0.0; n];
        for (j, &zj) in z.iter().enumerate() {
            let a = self.eigenvalues[j].sqrt() * zj;
            if a == 0.0 {
                continue;
            }
            for (v, phi) in values.iter_mut().zip(self.eigenfunction(j)) {
                *v += a * phi;
            }
        }
        Ok(FieldRealization {
            mesh: self.mesh,
            values,
            coefficients: z.to_vec(),
        })
    }

    /// Same as [`sample_field`](Self::sample_field) using only the first `z.len()` terms.
    pub fn sample_prefix(&self, z: &[f64]) -> Result<FieldRealization> {
        if z.is_empty() || z.len() > self.s() {
            return Err(invalid(format!(
                "prefix length {} must lie in 1..={}",
                z.len(),
                self.s()
            )));
        }
        let mut padded = z.to_vec();
        padded.resize(self.s(), 0.0);
        let mut field = self.sample_field(&padded)?;
        field.coefficients.truncate(z.len());
        Ok(field)
    }

    /// `Σⱼ λⱼ φⱼ φⱼᵀ`, the node covariance implied by the truncated expansion.
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let n = self.mesh.node_count();
        let mut c = DMatrix::zeros(n, n);
        for j in 0..self.s() {
            let phi = nalgebra::DVector::from_column_slice(self.eigenfunction(j));
            c.ger(self.eigenvalues[j], &phi, &phi, 1.0);
        }
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let basis: KlBasis = serde_json::from_slice(&fs::read(path)?)?;
        let n = basis.mesh.node_count();
        if basis.eigenfunctions.len() != basis.eigenvalues.len() * n
            || basis.node_weights.len() != n
        {
            return Err(Error::Format("KL basis payload sizes do not match its mesh".into()));
        }
        Ok(basis)
    }
}

/// One permeability (log-permeability by default) realization on mesh nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldRealization {
    pub mesh: Mesh,
    pub values: Vec<f64>,
    pub coefficients: Vec<f64>,
}

impl FieldRealization {
    pub fn s(&self) -> usize {
        self.coefficients.len()
    }

    /// Restricts node values to a coarser mesh whose nodes are a subset of ours.
    pub fn restrict(&self, coarse: &Mesh) -> Result<FieldRealization> {
        if !self.mesh.nests(coarse) {
            return Err(invalid(format!(
                "mesh d = {} is not nested in d = {}",
                coarse.d(),
                self.mesh.d()
            )));
        }
        let step = self.mesh.d() / coarse.d();
        let nc = coarse.nodes_per_axis();
        let mut values = Vec::with_capacity(nc * nc);
        for j in 0..nc {
            for i in 0..nc {
                values.push(self.values[self.mesh.node_index(i * step, j * step)]);
            }
        }
        Ok(FieldRealization {
            mesh: *coarse,
            values,
            coefficients: self.coefficients.clone(),
        })
    }
}

/// `Φ⁻¹(u)`; `u ∈ {0, 1}` is rejected since the result is unbounded.
pub fn uniform_to_gaussian(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(invalid(format!(
            "inverse normal CDF needs u in (0,1), got {u} (unbounded result)"
        )));
    }
    Ok(normal::quantile(u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_mesh() -> Mesh {
        Mesh::new(8, 200.0).unwrap()
    }

    fn frobenius(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn matern_closed_forms() {
        let cov = MaternCovariance::new(2.0, 50.0, 1.5).unwrap();
        assert_eq!(cov.value(0.0), 2.0);
        let x = 3f64.sqrt() * 20.0 / 50.0;
        assert!((cov.value(20.0) - 2.0 * (1.0 + x) * (-x).exp()).abs() < 1e-14);
        let exp_cov = MaternCovariance::new(1.0, 50.0, 0.5).unwrap();
        assert!((exp_cov.value(25.0) - (-0.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn bessel_route_agrees_with_closed_form() {
        // ν = 3/2 evaluated through the integral representation
        for dist in [1.0, 10.0, 50.0, 150.0] {
            let nu: f64 = 1.5;
            let x = (2.0 * nu).sqrt() * dist / 50.0;
            let via_k = 2f64.powf(1.0 - nu) / gamma(nu) * x.powf(nu) * bessel_k(nu, x);
            assert!((via_k - half_integer_matern(1, x)).abs() < 1e-10, "{dist}");
        }
    }

    #[test]
    fn matern_is_non_increasing() {
        for nu in [0.5, 1.0, 1.5, 2.5, 3.7] {
            let cov = MaternCovariance::new(1.0, 50.0, nu).unwrap();
            let mut prev = cov.value(0.0);
            for k in 1..400 {
                let v = cov.value(k as f64);
                assert!(v <= prev + 1e-15, "ν={nu} at {k}");
                prev = v;
            }
        }
    }

    #[test]
    fn eigenvalues_sorted_and_functions_orthonormal() {
        let mesh = small_mesh();
        let basis = build_kl(&MaternCovariance::default(), &mesh, 20).unwrap();
        assert!(basis.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        let w = basis.node_weights();
        for a in 0..basis.s() {
            for b in 0..basis.s() {
                let ip: f64 = (0..mesh.node_count())
                    .map(|k| w[k] * basis.eigenfunction(a)[k] * basis.eigenfunction(b)[k])
                    .sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((ip - expected).abs() < 1e-8, "({a},{b}) -> {ip}");
            }
        }
    }

    #[test]
    fn full_rank_reconstructs_node_covariance() {
        let mesh = small_mesh();
        let cov = MaternCovariance::default();
        let basis = build_kl(&cov, &mesh, mesh.node_count()).unwrap();
        let c = node_covariance(&cov, &mesh);
        let err = frobenius(&(basis.covariance_matrix() - &c)) / frobenius(&c);
        assert!(err < 1e-8, "{err:e}");
    }

    #[test]
    fn zero_variance_gives_zero_spectrum() {
        let mesh = Mesh::new(4, 200.0).unwrap();
        let cov = MaternCovariance::new(0.0, 50.0, 1.5).unwrap();
        let basis = build_kl(&cov, &mesh, 5).unwrap();
        assert!(basis.eigenvalues().iter().all(|&l| l == 0.0));
        let field = basis.sample_field(&[1.0, -2.0, 0.3, 4.0, 1.0]).unwrap();
        assert!(field.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partial_spectrum_sums_bounded_by_trace() {
        let mesh = small_mesh();
        let basis = build_kl(&MaternCovariance::default(), &mesh, mesh.node_count()).unwrap();
        let trace: f64 = basis
            .node_weights()
            .iter()
            .map(|w| w * MaternCovariance::default().variance)
            .sum();
        let mut partial = 0.0;
        for &l in basis.eigenvalues() {
            let next = partial + l;
            assert!(next >= partial);
            partial = next;
            assert!(partial <= trace * (1.0 + 1e-12));
        }
        assert!((partial - trace).abs() < 1e-9 * trace);
    }

    #[test]
    fn invalid_truncation_rejected() {
        let mesh = Mesh::new(2, 200.0).unwrap();
        let cov = MaternCovariance::default();
        assert!(build_kl(&cov, &mesh, 0).is_err());
        assert!(build_kl(&cov, &mesh, 10).is_err());
        assert!(MaternCovariance::new(1.0, -1.0, 1.5).is_err());
    }

    #[test]
    fn sampling_is_linear() {
        let basis = build_kl(&MaternCovariance::default(), &small_mesh(), 6).unwrap();
        let z1 = [0.3, -1.2, 0.8, 2.0, -0.1, 0.0];
        let z2 = [1.0, 0.5, -0.4, 0.1, 0.9, -2.2];
        let sum: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
        let f1 = basis.sample_field(&z1).unwrap();
        let f2 = basis.sample_field(&z2).unwrap();
        let f12 = basis.sample_field(&sum).unwrap();
        for k in 0..f1.values.len() {
            assert!((f12.values[k] - f1.values[k] - f2.values[k]).abs() < 1e-12);
        }
        let zero = basis.sample_field(&[0.0; 6]).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        assert!(basis.sample_field(&[0.0; 5]).is_err());
    }

    #[test]
    fn empirical_covariance_matches_truncated_expansion() {
        let mesh = Mesh::new(4, 200.0).unwrap();
        let basis = build_kl(&MaternCovariance::default(), &mesh, 8).unwrap();
        let n = mesh.node_count();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut emp = DMatrix::<f64>::zeros(n, n);
        for _ in 0..draws {
            let z: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let f = nalgebra::DVector::from_vec(basis.sample_field(&z).unwrap().values);
            emp.ger(1.0 / draws as f64, &f, &f, 1.0);
        }
        let model = basis.covariance_matrix();
        let rel = frobenius(&(&emp - &model)) / frobenius(&model);
        assert!(rel <= 0.05, "{rel}");
        // truncation only removes variance
        for k in 0..n {
            assert!(model[(k, k)] <= MaternCovariance::default().variance + 1e-12);
        }
    }

    #[test]
    fn truncated_error_is_monotone() {
        let mesh = small_mesh();
        let cov = MaternCovariance::default();
        let c = node_covariance(&cov, &mesh);
        let full = build_kl(&cov, &mesh, 32).unwrap();
        let mut prev = f64::INFINITY;
        for s in 1..=32 {
            let err = frobenius(&(&c - full.truncated(s).unwrap().covariance_matrix()));
            assert!(err <= prev, "s={s}");
            prev = err;
        }
        assert!(full.eigenvalues()[15] / full.eigenvalues()[0] < 1.0);
    }

    #[test]
    fn restriction_to_nested_mesh() {
        let fine = Mesh::new(8, 200.0).unwrap();
        let basis = build_kl(&MaternCovariance::default(), &fine, 4).unwrap();
        let field = basis.sample_field(&[1.0, 0.5, -0.5, 2.0]).unwrap();
        let coarse = Mesh::new(4, 200.0).unwrap();
        let r = field.restrict(&coarse).unwrap();
        assert_eq!(r.values.len(), 25);
        assert_eq!(r.values[coarse.node_index(1, 2)], field.values[fine.node_index(2, 4)]);
        assert!(field.restrict(&Mesh::new(3, 200.0).unwrap()).is_err());
    }

    #[test]
    fn basis_file_roundtrip() {
        let basis = build_kl(&MaternCovariance::default(), &Mesh::new(4, 200.0).unwrap(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kl.json");
        basis.save(&path).unwrap();
        assert_eq!(KlBasis::load(&path).unwrap(), basis);
    }

    #[test]
    fn uniform_to_gaussian_domain() {
        assert_eq!(uniform_to_gaussian(0.5).unwrap(), 0.0);
        assert!(uniform_to_gaussian(0.0).is_err());
        assert!(uniform_to_gaussian(1.0).is_err());
        assert!((uniform_to_gaussian(0.975).unwrap() - 1.959964).abs() < 1e-6);
    }
}
