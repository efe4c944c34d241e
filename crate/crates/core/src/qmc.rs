//! Low-discrepancy point sets on the unit cube.
//!
//! Two families are provided:
//!
//! * rank-1 lattices `x_i = (i·z/n + Δ) mod 1`, stored in natural index order so that
//!   the unshifted set of size `2^m` is the cyclic group generated by `z/n`;
//! * base-2 digital sequences built from generating matrices (Sobol' by default),
//!   with an optional digital shift.
//!
//! The baker (tent) transform used to periodize integrands also lives here.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// First 32 components of the Cools-Kuo-Nuyens embedded lattice sequence
/// (`lattice-32001-1024-1048575.3600`, order-2 product weights), extensible in
/// base 2 up to `2^20` points.
pub const DEFAULT_GENERATING_VECTOR: [u64; 32] = [
    1, 182667, 469891, 498753, 110745, 446247, 250185, 118627, 245333, 283199, 408519, 391023,
    246327, 126539, 399185, 461527, 300343, 69681, 516695, 436179, 106383, 238523, 413283, 70841,
    47719, 300129, 113029, 123925, 410745, 211325, 17489, 511893,
];

/// `log2` of the largest point count the default generating vector supports.
pub const DEFAULT_LATTICE_LOG2_MAX: u32 = 20;

/// Joe-Kuo (`new-joe-kuo-6.21201`) primitive polynomials for Sobol' dimensions 2..=32:
/// `(degree, coefficient bits, initial direction numbers m_1..m_degree)`.
const JOE_KUO: [(u32, u32, &[u32]); 31] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
    (7, 7, &[1, 1, 3, 13, 7, 35, 63]),
    (7, 8, &[1, 3, 5, 9, 1, 25, 53]),
    (7, 14, &[1, 3, 1, 13, 9, 35, 107]),
    (7, 19, &[1, 3, 1, 5, 27, 61, 31]),
    (7, 21, &[1, 1, 5, 11, 19, 41, 61]),
    (7, 28, &[1, 3, 5, 3, 3, 13, 69]),
    (7, 31, &[1, 1, 7, 13, 1, 19, 1]),
    (7, 32, &[1, 3, 7, 5, 13, 19, 59]),
    (7, 37, &[1, 1, 3, 9, 25, 29, 41]),
    (7, 41, &[1, 3, 5, 13, 23, 1, 55]),
    (7, 42, &[1, 3, 7, 3, 13, 59, 17]),
];

/// Bits of precision in digital-sequence coordinates.
pub const DIGITAL_PRECISION: u32 = 32;

/// A dense `n × dim` block of points stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn from_rows(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(invalid(format!(
                "point data has length {} but {n}×{dim} was requested",
                data.len()
            )));
        }
        Ok(Self { n, dim, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.n)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Rank-1 lattice generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeGenerator {
    generating_vector: Vec<u64>,
    max_log2_points: u32,
    shift: Option<Vec<f64>>,
}

impl Default for LatticeGenerator {
    fn default() -> Self {
        Self {
            generating_vector: DEFAULT_GENERATING_VECTOR.to_vec(),
            max_log2_points: DEFAULT_LATTICE_LOG2_MAX,
            shift: None,
        }
    }
}

impl LatticeGenerator {
    pub fn new(generating_vector: Vec<u64>, max_log2_points: u32) -> Result<Self> {
        if generating_vector.is_empty() {
            return Err(invalid("generating vector must have at least one entry"));
        }
        if !(1..=62).contains(&max_log2_points) {
            return Err(invalid(format!(
                "max_log2_points must lie in 1..=62, got {max_log2_points}"
            )));
        }
        if let Some(j) = generating_vector.iter().position(|&z| z % 2 == 0) {
            return Err(invalid(format!(
                "generating vector entry {j} ({}) is even",
                generating_vector[j]
            )));
        }
        Ok(Self {
            generating_vector,
            max_log2_points,
            shift: None,
        })
    }

    /// Reads a generating vector from a text file holding one integer per line.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn from_file(path: impl AsRef<Path>, max_log2_points: u32) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, max_log2_points)
    }

    pub fn parse(text: &str, max_log2_points: u32) -> Result<Self> {
        let mut gv = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let z = line.parse::<u64>().map_err(|e| {
                Error::Format(format!("generating vector line {}: {e}", lineno + 1))
            })?;
            gv.push(z);
        }
        Self::new(gv, max_log2_points)
    }

    pub fn with_shift(mut self, shift: Vec<f64>) -> Result<Self> {
        if shift.len() != self.generating_vector.len() {
            return Err(invalid(format!(
                "shift has {} coordinates, generator has {}",
                shift.len(),
                self.generating_vector.len()
            )));
        }
        if shift.iter().any(|s| !(0.0..1.0).contains(s)) {
            return Err(invalid("shift coordinates must lie in [0,1)"));
        }
        self.shift = Some(shift);
        Ok(self)
    }

    pub fn without_shift(mut self) -> Self {
        self.shift = None;
        self
    }

    /// Returns a copy carrying a uniform random shift drawn reproducibly from `seed`.
    pub fn random_shift(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = (0..self.generating_vector.len())
            .map(|_| rng.random::<f64>())
            .collect();
        Self {
            shift: Some(shift),
            ..self.clone()
        }
    }

    pub fn generating_vector(&self) -> &[u64] {
        &self.generating_vector
    }

    pub fn max_log2_points(&self) -> u32 {
        self.max_log2_points
    }

    pub fn shift(&self) -> Option<&[f64]> {
        self.shift.as_deref()
    }

    pub fn max_dim(&self) -> usize {
        self.generating_vector.len()
    }

    fn check(&self, n: usize, dim: usize) -> Result<()> {
        if dim == 0 || dim > self.generating_vector.len() {
            return Err(Error::Capacity(format!(
                "lattice supports dimensions 1..={}, requested {dim}",
                self.generating_vector.len()
            )));
        }
        if n as u128 > 1u128 << self.max_log2_points {
            return Err(Error::Capacity(format!(
                "lattice supports at most 2^{} points, requested {n}",
                self.max_log2_points
            )));
        }
        Ok(())
    }

    /// First `n` points in natural order: row `i` is `(i·z/n + Δ) mod 1`.
    pub fn points(&self, n: usize, dim: usize) -> Result<PointSet> {
        self.check(n, dim)?;
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            for j in 0..dim {
                data.push(self.coordinate(i, n, j));
            }
        }
        PointSet::from_rows(n, dim, data)
    }

    /// Coordinate `j` of natural-order point `i` in a lattice of size `n`.
    #[inline]
    pub fn coordinate(&self, i: usize, n: usize, j: usize) -> f64 {
        let z = self.generating_vector[j] as u128;
        let k = (i as u128 * z) % n as u128;
        let x = k as f64 / n as f64;
        match &self.shift {
            Some(s) => wrap_unit(x + s[j]),
            None => x,
        }
    }
}

/// Permutation from extensible-sequence order to natural (group) order: entry `k`
/// is the natural index of the `k`-th sequence point of a lattice of size `n = 2^m`.
///
/// Sequence point `k` is `φ₂(k)·z mod 1` with `φ₂` the base-2 radical inverse,
/// which equals natural point `bitreverse_m(k)`.
pub fn sequence_to_natural_order(n: usize) -> Result<Vec<usize>> {
    if !n.is_power_of_two() {
        return Err(invalid(format!("lattice size {n} is not a power of two")));
    }
    let m = n.trailing_zeros();
    Ok((0..n)
        .map(|k| if m == 0 { 0 } else { k.reverse_bits() >> (usize::BITS - m) })
        .collect())
}

/// Base-2 digital sequence generator.
///
/// Each dimension holds the columns of its generating matrix as
/// [`DIGITAL_PRECISION`]-bit integers whose most significant bit is the first
/// binary digit of the output coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigitalGenerator {
    columns: Vec<Vec<u32>>,
    max_log2_points: u32,
    digital_shift: Option<Vec<u32>>,
}

impl Default for DigitalGenerator {
    fn default() -> Self {
        Self::sobol(JOE_KUO.len() + 1).expect("embedded direction numbers are valid")
    }
}

impl DigitalGenerator {
    pub fn new(columns: Vec<Vec<u32>>) -> Result<Self> {
        let Some(first) = columns.first() else {
            return Err(invalid("digital generator needs at least one dimension"));
        };
        let m = first.len();
        if m == 0 || m > DIGITAL_PRECISION as usize {
            return Err(invalid(format!(
                "generating matrices need 1..={DIGITAL_PRECISION} columns, got {m}"
            )));
        }
        for (j, cols) in columns.iter().enumerate() {
            if cols.len() != m {
                return Err(invalid(format!(
                    "dimension {j} has {} columns, expected {m}",
                    cols.len()
                )));
            }
            for (k, &c) in cols.iter().enumerate() {
                let diag = DIGITAL_PRECISION - 1 - k as u32;
                let below = if diag == 0 { 0 } else { c & ((1u32 << diag) - 1) };
                if (c >> diag) & 1 != 1 || below != 0 {
                    return Err(invalid(format!(
                        "generating matrix of dimension {j} is not unit upper triangular at column {k}"
                    )));
                }
            }
        }
        Ok(Self {
            columns,
            max_log2_points: m as u32,
            digital_shift: None,
        })
    }

    /// Sobol' generating matrices for the first `dim` dimensions (at most 32).
    pub fn sobol(dim: usize) -> Result<Self> {
        if dim == 0 || dim > JOE_KUO.len() + 1 {
            return Err(Error::Capacity(format!(
                "embedded Sobol' direction numbers cover 1..={} dimensions, requested {dim}",
                JOE_KUO.len() + 1
            )));
        }
        let bits = DIGITAL_PRECISION as usize;
        let mut columns = Vec::with_capacity(dim);
        columns.push((0..bits).map(|k| 1u32 << (bits - 1 - k)).collect());
        for &(degree, coeff, m_init) in JOE_KUO.iter().take(dim - 1) {
            let s = degree as usize;
            let mut v = vec![0u32; bits];
            for k in 0..s.min(bits) {
                v[k] = m_init[k] << (bits - 1 - k);
            }
            for k in s..bits {
                let mut x = v[k - s] ^ (v[k - s] >> s);
                for l in 1..s {
                    if (coeff >> (s - 1 - l)) & 1 == 1 {
                        x ^= v[k - l];
                    }
                }
                v[k] = x;
            }
            columns.push(v);
        }
        Self::new(columns)
    }

    /// Reads generating matrices from a text file: one line per dimension, each
    /// holding the matrix columns as whitespace-separated integers
    /// (32-bit, most significant bit first). `#` lines are comments.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("direction numbers line {}: {e}", lineno + 1)))?;
            columns.push(row);
        }
        Self::new(columns)
    }

    pub fn with_digital_shift(mut self, shift: Vec<u32>) -> Result<Self> {
        if shift.len() != self.columns.len() {
            return Err(invalid(format!(
                "digital shift has {} coordinates, generator has {}",
                shift.len(),
                self.columns.len()
            )));
        }
        self.digital_shift = Some(shift);
        Ok(self)
    }

    /// Returns a copy carrying a uniform random digital shift drawn from `seed`.
    pub fn random_shift(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = (0..self.columns.len()).map(|_| rng.random::<u32>()).collect();
        Self {
            digital_shift: Some(shift),
            ..self.clone()
        }
    }

    pub fn max_dim(&self) -> usize {
        self.columns.len()
    }

    pub fn max_log2_points(&self) -> u32 {
        self.max_log2_points
    }

    pub fn columns(&self, dim: usize) -> &[u32] {
        &self.columns[dim]
    }

    pub fn digital_shift(&self) -> Option<&[u32]> {
        self.digital_shift.as_deref()
    }

    /// First `n` points in sequence order.
    pub fn points(&self, n: usize, dim: usize) -> Result<PointSet> {
        if dim == 0 || dim > self.columns.len() {
            return Err(Error::Capacity(format!(
                "digital generator supports dimensions 1..={}, requested {dim}",
                self.columns.len()
            )));
        }
        if n as u128 > 1u128 << self.max_log2_points {
            return Err(Error::Capacity(format!(
                "digital generator supports at most 2^{} points, requested {n}",
                self.max_log2_points
            )));
        }
        let scale = 1.0 / (1u64 << DIGITAL_PRECISION) as f64;
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            for j in 0..dim {
                let mut x = self.digital_shift.as_ref().map_or(0, |s| s[j]);
                let mut bits = i;
                let mut k = 0;
                while bits != 0 {
                    if bits & 1 == 1 {
                        x ^= self.columns[j][k];
                    }
                    bits >>= 1;
                    k += 1;
                }
                data.push(x as f64 * scale);
            }
        }
        PointSet::from_rows(n, dim, data)
    }
}

/// Baker (tent) transform `b(u) = 1 − 2|u − 1/2|`.
pub fn baker(u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(invalid(format!("baker transform input {u} outside [0,1]")));
    }
    Ok(tent(u))
}

#[inline]
pub(crate) fn tent(u: f64) -> f64 {
    1.0 - 2.0 * (u - 0.5).abs()
}

#[inline]
pub(crate) fn wrap_unit(x: f64) -> f64 {
    let y = x - x.floor();
    // x slightly below an integer can round up to exactly 1.0
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_lattice_point_is_origin() {
        let p = LatticeGenerator::default().points(1, 5).unwrap();
        assert_eq!(p.row(0), &[0.0; 5]);
    }

    #[test]
    fn four_point_lattice_covers_quarters() {
        for z in [1u64, 3, 5, 7, 182667] {
            let gen = LatticeGenerator::new(vec![z], 4).unwrap();
            let mut xs: Vec<f64> = gen.points(4, 1).unwrap().as_slice().to_vec();
            xs.sort_by(f64::total_cmp);
            assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75]);
        }
    }

    #[test]
    fn eight_point_lattice_is_closed_under_addition() {
        let p = LatticeGenerator::default().points(8, 2).unwrap();
        let rows: Vec<Vec<f64>> = p.rows().map(|r| r.to_vec()).collect();
        for a in &rows {
            for b in &rows {
                let sum: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) % 1.0).collect();
                assert!(rows.contains(&sum), "{sum:?} not in point set");
            }
        }
    }

    #[test]
    fn even_generating_entry_rejected() {
        assert!(LatticeGenerator::new(vec![1, 4], 10).is_err());
        assert!(LatticeGenerator::new(vec![], 10).is_err());
        assert!(LatticeGenerator::new(vec![1], 0).is_err());
    }

    #[test]
    fn lattice_capacity_errors() {
        let gen = LatticeGenerator::new(vec![1, 3], 4).unwrap();
        assert!(matches!(gen.points(32, 2), Err(Error::Capacity(_))));
        assert!(matches!(gen.points(4, 3), Err(Error::Capacity(_))));
        assert!(matches!(gen.points(4, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn sequence_permutation_matches_radical_inverse() {
        let gen = LatticeGenerator::default();
        let n = 16;
        let natural = gen.points(n, 3).unwrap();
        let perm = sequence_to_natural_order(n).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            let phi = (k as u32).reverse_bits() as f64 / 2f64.powi(32);
            for j in 0..3 {
                let z = gen.generating_vector()[j] as f64;
                let expected = (phi * z) % 1.0;
                assert!((natural.row(i)[j] - expected).abs() < 1e-12);
            }
        }
        assert!(sequence_to_natural_order(12).is_err());
    }

    #[test]
    fn digital_first_point_is_origin() {
        let p = DigitalGenerator::default().points(1, 8).unwrap();
        assert_eq!(p.row(0), &[0.0; 8]);
    }

    #[test]
    fn digital_first_dimension_is_van_der_corput() {
        let p = DigitalGenerator::default().points(4, 1).unwrap();
        // radical inverse in base 2
        let oracle: Vec<f64> = (0u32..4)
            .map(|i| i.reverse_bits() as f64 / 2f64.powi(32))
            .collect();
        assert_eq!(p.as_slice(), oracle.as_slice());
        assert_eq!(p.as_slice(), &[0.0, 0.5, 0.25, 0.75]);
    }

    #[test]
    fn digital_projections_are_dyadically_equidistributed() {
        let gen = DigitalGenerator::default();
        for m in 0..=6u32 {
            let n = 1usize << m;
            let p = gen.points(n, gen.max_dim()).unwrap();
            for j in 0..gen.max_dim() {
                let mut hits = vec![0usize; n];
                for row in p.rows() {
                    hits[(row[j] * n as f64).floor() as usize] += 1;
                }
                assert!(hits.iter().all(|&h| h == 1), "m={m} dim={j}: {hits:?}");
            }
        }
    }

    #[test]
    fn digital_generator_rejects_non_triangular_matrix() {
        let good = vec![1u32 << 31, 1u32 << 30];
        assert!(DigitalGenerator::new(vec![good.clone()]).is_ok());
        let zero_diag = vec![1u32 << 31, 1u32 << 31];
        assert!(DigitalGenerator::new(vec![zero_diag]).is_err());
        let below = vec![(1u32 << 31) | 1, 1u32 << 30];
        assert!(DigitalGenerator::new(vec![below]).is_err());
    }

    #[test]
    fn digital_capacity_errors() {
        let gen = DigitalGenerator::sobol(2).unwrap();
        assert!(gen.points(4, 3).is_err());
        assert!(DigitalGenerator::sobol(33).is_err());
        let small = DigitalGenerator::new(vec![vec![1 << 31, 1 << 30]]).unwrap();
        assert!(small.points(5, 1).is_err());
        assert!(small.points(4, 1).is_ok());
    }

    #[test]
    fn digital_shift_xors_coordinates() {
        let gen = DigitalGenerator::sobol(2).unwrap();
        let shifted = gen.clone().with_digital_shift(vec![1 << 31, 0]).unwrap();
        let a = gen.points(4, 2).unwrap();
        let b = shifted.points(4, 2).unwrap();
        for (ra, rb) in a.rows().zip(b.rows()) {
            assert_eq!((ra[0] + 0.5) % 1.0, rb[0]);
            assert_eq!(ra[1], rb[1]);
        }
    }

    #[test]
    fn baker_values() {
        assert_eq!(baker(0.0).unwrap(), 0.0);
        assert_eq!(baker(0.5).unwrap(), 1.0);
        assert_eq!(baker(0.75).unwrap(), 0.5);
        assert_eq!(baker(1.0).unwrap(), 0.0);
        assert!(baker(-0.1).is_err());
        assert!(baker(1.1).is_err());
        assert!(baker(f64::NAN).is_err());
    }

    #[test]
    fn baker_preserves_uniform_mean() {
        let m = 1_000_000;
        let mut sum = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..=m {
            let b = baker(i as f64 / m as f64).unwrap();
            sum += b;
            lo = lo.min(b);
            hi = hi.max(b);
        }
        assert!((sum / (m + 1) as f64 - 0.5).abs() < 1e-3);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn random_shift_is_seeded() {
        let gen = LatticeGenerator::default();
        let a = gen.random_shift(7);
        let b = gen.random_shift(7);
        let c = gen.random_shift(8);
        assert_eq!(a, b);
        assert_ne!(a.shift(), c.shift());
        let p = a.points(64, 32).unwrap();
        assert!(p.as_slice().iter().all(|x| (0.0..1.0).contains(x)));

        let dg = DigitalGenerator::default();
        assert_eq!(dg.random_shift(3), dg.random_shift(3));
        assert_ne!(dg.random_shift(3), dg.random_shift(4));
    }

    #[test]
    fn generator_files_parse() {
        let lat = LatticeGenerator::parse("# z\n1\n\n3\n5\n", 8).unwrap();
        assert_eq!(lat.generating_vector(), &[1, 3, 5]);
        assert!(LatticeGenerator::parse("1\nx\n", 8).is_err());

        let sobol = DigitalGenerator::sobol(3).unwrap();
        let text: String = (0..3)
            .map(|j| {
                let row: Vec<String> = sobol.columns(j).iter().map(|c| c.to_string()).collect();
                row.join(" ") + "\n"
            })
            .collect();
        assert_eq!(DigitalGenerator::parse(&text).unwrap(), sobol);
    }
}
