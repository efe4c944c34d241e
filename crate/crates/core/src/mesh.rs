use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Uniform square mesh with `d + 1` nodes and `d` cells per axis.
///
/// Nodes are numbered `j·(d+1) + i` with `i` along x; cells `j·d + i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    d: usize,
    side_length: f64,
}

impl Mesh {
    pub fn new(d: usize, side_length: f64) -> Result<Self> {
        if d < 2 {
            return Err(invalid(format!("discretization dimension must be ≥ 2, got {d}")));
        }
        if !(side_length.is_finite() && side_length > 0.0) {
            return Err(invalid(format!("side length must be positive, got {side_length}")));
        }
        Ok(Self { d, side_length })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    pub fn spacing(&self) -> f64 {
        self.side_length / self.d as f64
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.d + 1
    }

    pub fn node_count(&self) -> usize {
        (self.d + 1) * (self.d + 1)
    }

    pub fn cell_count(&self) -> usize {
        self.d * self.d
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.d + 1) + i
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        j * self.d + i
    }

    pub fn node_coords(&self, k: usize) -> (f64, f64) {
        let n = self.d + 1;
        let h = self.spacing();
        ((k % n) as f64 * h, (k / n) as f64 * h)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let h = self.spacing();
        ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.side_length).contains(&x) && (0.0..=self.side_length).contains(&y)
    }

    /// Cell holding `(x, y)`; points on a shared face go to the upper cell,
    /// points on the far boundary to the last cell.
    pub fn locate_cell(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        if !self.contains(x, y) {
            return Err(invalid(format!(
                "location ({x}, {y}) lies outside the {0}×{0} domain",
                self.side_length
            )));
        }
        let h = self.spacing();
        let i = ((x / h).floor() as usize).min(self.d - 1);
        let j = ((y / h).floor() as usize).min(self.d - 1);
        Ok((i, j))
    }

    /// Trapezoidal quadrature weight of every node.
    pub fn node_weights(&self) -> Vec<f64> {
        let n = self.d + 1;
        let h = self.spacing();
        let edge = |i: usize| if i == 0 || i == self.d { 0.5 } else { 1.0 };
        (0..n * n)
            .map(|k| h * h * edge(k % n) * edge(k / n))
            .collect()
    }

    /// True when every node of `coarse` is also a node of `self`.
    pub fn nests(&self, coarse: &Mesh) -> bool {
        coarse.d <= self.d
            && self.d % coarse.d == 0
            && (self.side_length - coarse.side_length).abs() <= 1e-12 * self.side_length
    }
}
