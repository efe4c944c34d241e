//! Steady single-phase Darcy flow on a uniform square mesh.
//!
//! Cell-centred two-point flux finite volumes for `−∇·(G ∇H) = f`: injection
//! raises head, extraction lowers it. Face transmissibilities are harmonic
//! means of the adjacent cell coefficients; node-valued fields are averaged to
//! cells arithmetically first. Dirichlet faces use the half-cell distance.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, CsrMatrix, SolverKind};
use crate::random_field::{FieldRealization, KlBasis};

pub use crate::mesh::Mesh;

/// Largest `d` solved with the band Cholesky factorization under [`SolverKind::Auto`].
pub const DIRECT_SOLVER_MAX_D: usize = 128;

/// Injection/extraction wells and the monitored location, in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WellConfig {
    pub injection_location: (f64, f64),
    pub extraction_location: (f64, f64),
    pub critical_location: (f64, f64),
    /// Injection rate `w` in m³/s.
    pub injection_rate: f64,
}

impl Default for WellConfig {
    fn default() -> Self {
        Self {
            injection_location: (50.0, 100.0),
            extraction_location: (150.0, 100.0),
            critical_location: (100.0, 100.0),
            injection_rate: 0.031688,
        }
    }
}

impl WellConfig {
    pub fn validate(&self, side_length: f64) -> Result<()> {
        if !(self.injection_rate.is_finite() && self.injection_rate >= 0.0) {
            return Err(invalid(format!(
                "injection rate must be ≥ 0, got {}",
                self.injection_rate
            )));
        }
        let locs = [
            ("injection", self.injection_location),
            ("extraction", self.extraction_location),
            ("critical", self.critical_location),
        ];
        for (name, (x, y)) in locs {
            if !((0.0..=side_length).contains(&x) && (0.0..=side_length).contains(&y)) {
                return Err(invalid(format!(
                    "{name} location ({x}, {y}) lies outside the domain"
                )));
            }
        }
        for a in 0..3 {
            for b in a + 1..3 {
                if locs[a].1 == locs[b].1 {
                    return Err(invalid(format!(
                        "{} and {} locations coincide",
                        locs[a].0, locs[b].0
                    )));
                }
            }
        }
        Ok(())
    }
}

/// How node values of a field become the Darcy coefficient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldTransform {
    /// Field is log-permeability; the coefficient is `exp(G)`.
    #[default]
    Exp,
    Identity,
}

impl FieldTransform {
    pub fn apply(self, g: f64) -> f64 {
        match self {
            Self::Exp => g.exp(),
            Self::Identity => g,
        }
    }
}

/// Condition on one side of the square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideCondition {
    Dirichlet(f64),
    NoFlow,
}

/// Boundary conditions on the four sides (west, east, south, north).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub west: SideCondition,
    pub east: SideCondition,
    pub south: SideCondition,
    pub north: SideCondition,
}

impl BoundaryConditions {
    pub fn dirichlet(head: f64) -> Self {
        let c = SideCondition::Dirichlet(head);
        Self {
            west: c,
            east: c,
            south: c,
            north: c,
        }
    }

    pub fn no_flow() -> Self {
        let c = SideCondition::NoFlow;
        Self {
            west: c,
            east: c,
            south: c,
            north: c,
        }
    }

    fn all_no_flow(&self) -> bool {
        [self.west, self.east, self.south, self.north]
            .iter()
            .all(|c| *c == SideCondition::NoFlow)
    }
}

impl Default for BoundaryConditions {
    fn default() -> Self {
        Self::dirichlet(0.0)
    }
}

/// Solver settings shared by every solve in an ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DarcyOptions {
    pub boundary: BoundaryConditions,
    pub field_transform: FieldTransform,
    pub solver: SolverKind,
    pub tolerance: f64,
}

impl Default for DarcyOptions {
    fn default() -> Self {
        Self {
            boundary: BoundaryConditions::default(),
            field_transform: FieldTransform::Exp,
            solver: SolverKind::Auto,
            tolerance: 1e-10,
        }
    }
}

/// Solved cell-centred head field.
#[derive(Clone, Debug)]
pub struct PressureField {
    pub mesh: Mesh,
    /// Head at cell centres, indexed `j·d + i`.
    pub heads: Vec<f64>,
    /// Cell coefficients used in the solve.
    pub coefficients: Vec<f64>,
    /// Source rates integrated over each cell (m³/s).
    pub cell_rates: Vec<f64>,
    pub boundary: BoundaryConditions,
    /// Relative residual of the linear solve.
    pub residual: f64,
}

/// Source density (rate per unit area) in each cell: `+w` at the injection
/// cell and `−r` at the extraction cell. A location on a shared face or
/// vertex splits its rate evenly among the touching cells.
pub fn forcing(mesh: &Mesh, wells: &WellConfig, r: f64) -> Result<Vec<f64>> {
    if !(r.is_finite() && r >= 0.0) {
        return Err(invalid(format!("extraction rate must be ≥ 0, got {r}")));
    }
    wells.validate(mesh.side_length())?;
    let mut f = vec![0.0; mesh.cell_count()];
    let area = mesh.spacing().powi(2);
    deposit(mesh, wells.injection_location, wells.injection_rate / area, &mut f)?;
    deposit(mesh, wells.extraction_location, -r / area, &mut f)?;
    Ok(f)
}

fn deposit(mesh: &Mesh, (x, y): (f64, f64), value: f64, f: &mut [f64]) -> Result<()> {
    mesh.locate_cell(x, y)?;
    let cells_x = touching_cells(x, mesh);
    let cells_y = touching_cells(y, mesh);
    let share = value / (cells_x.len() * cells_y.len()) as f64;
    for &i in &cells_x {
        for &j in &cells_y {
            f[mesh.cell_index(i, j)] += share;
        }
    }
    Ok(())
}

fn touching_cells(x: f64, mesh: &Mesh) -> Vec<usize> {
    let t = x / mesh.spacing();
    let k = t.round();
    if (t - k).abs() <= 1e-9 * t.abs().max(1.0) {
        let k = k as usize;
        if k == 0 {
            vec![0]
        } else if k >= mesh.d() {
            vec![mesh.d() - 1]
        } else {
            vec![k - 1, k]
        }
    } else {
        vec![(t.floor() as usize).min(mesh.d() - 1)]
    }
}

/// Averages node values (after `transform`) to cells.
pub fn cell_coefficients(field: &FieldRealization, transform: FieldTransform) -> Result<Vec<f64>> {
    let mesh = &field.mesh;
    if field.values.len() != mesh.node_count() {
        return Err(invalid("field values do not match its mesh"));
    }
    let d = mesh.d();
    let mut coeffs = Vec::with_capacity(mesh.cell_count());
    for j in 0..d {
        for i in 0..d {
            let corners = [
                mesh.node_index(i, j),
                mesh.node_index(i + 1, j),
                mesh.node_index(i, j + 1),
                mesh.node_index(i + 1, j + 1),
            ];
            let avg = corners
                .iter()
                .map(|&k| transform.apply(field.values[k]))
                .sum::<f64>()
                / 4.0;
            coeffs.push(avg);
        }
    }
    Ok(coeffs)
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Assembles and solves the finite-volume system for given cell coefficients
/// and source densities.
pub fn solve_cells(
    mesh: &Mesh,
    coefficients: &[f64],
    source_density: &[f64],
    options: &DarcyOptions,
) -> Result<PressureField> {
    let d = mesh.d();
    let n = mesh.cell_count();
    if coefficients.len() != n || source_density.len() != n {
        return Err(invalid("coefficient/source vectors do not match the mesh"));
    }
    if let Some(k) = coefficients.iter().position(|&c| !(c.is_finite() && c > 0.0)) {
        return Err(invalid(format!(
            "coefficient {} in cell {k} is not strictly positive",
            coefficients[k]
        )));
    }
    let area = mesh.spacing().powi(2);
    let cell_rates: Vec<f64> = source_density.iter().map(|f| f * area).collect();
    let bc = options.boundary;

    let mut rows = Vec::with_capacity(n);
    let mut rhs = cell_rates.clone();
    for j in 0..d {
        for i in 0..d {
            let p = mesh.cell_index(i, j);
            let kp = coefficients[p];
            let mut row = Vec::with_capacity(5);
            let mut diag = 0.0;
            let neighbours = [
                (i > 0).then(|| mesh.cell_index(i - 1, j)),
                (i + 1 < d).then(|| mesh.cell_index(i + 1, j)),
                (j > 0).then(|| mesh.cell_index(i, j - 1)),
                (j + 1 < d).then(|| mesh.cell_index(i, j + 1)),
            ];
            let sides = [bc.west, bc.east, bc.south, bc.north];
            for (nb, side) in neighbours.into_iter().zip(sides) {
                match nb {
                    Some(q) => {
                        let t = harmonic(kp, coefficients[q]);
                        diag += t;
                        row.push((q, -t));
                    }
                    None => {
                        if let SideCondition::Dirichlet(h0) = side {
                            let t = 2.0 * kp;
                            diag += t;
                            rhs[p] += t * h0;
                        }
                    }
                }
            }
            row.push((p, diag));
            rows.push(row);
        }
    }

    if bc.all_no_flow() {
        let net: f64 = cell_rates.iter().sum();
        let scale: f64 = cell_rates.iter().map(|q| q.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        if net.abs() > 1e-12 * scale {
            return Err(Error::Solver(format!(
                "no-flow boundary with unbalanced net source {net:e}: system is singular"
            )));
        }
        // compatible sources: fix the gauge with H = 0 in cell 0
        for row in rows.iter_mut() {
            row.retain(|&(c, _)| c != 0);
        }
        rows[0] = vec![(0, 1.0)];
        rhs[0] = 0.0;
    }

    let a = CsrMatrix::from_rows(rows);
    let direct = match options.solver {
        SolverKind::Auto => d <= DIRECT_SOLVER_MAX_D,
        SolverKind::Direct => true,
        SolverKind::Iterative => false,
    };
    let heads = if direct {
        linalg::solve_direct(&a, &rhs)?
    } else {
        linalg::solve_pcg(&a, &rhs, options.tolerance, 20 * n)?
    };
    let residual = a.relative_residual(&heads, &rhs);
    if !(residual <= options.tolerance) || heads.iter().any(|h| !h.is_finite()) {
        return Err(Error::Solver(format!(
            "pressure solve reached relative residual {residual:e} (tolerance {:e})",
            options.tolerance
        )));
    }
    Ok(PressureField {
        mesh: *mesh,
        heads,
        coefficients: coefficients.to_vec(),
        cell_rates,
        boundary: bc,
        residual,
    })
}

/// Solves for the head field produced by `perm` at extraction rate `r`.
pub fn solve_pressure(
    mesh: &Mesh,
    wells: &WellConfig,
    perm: &FieldRealization,
    r: f64,
    options: &DarcyOptions,
) -> Result<PressureField> {
    let field = if perm.mesh == *mesh {
        perm.clone()
    } else {
        perm.restrict(mesh)?
    };
    let coeffs = cell_coefficients(&field, options.field_transform)?;
    let f = forcing(mesh, wells, r)?;
    solve_cells(mesh, &coeffs, &f, options)
}

/// Numerical critical pressure `H^c_{s,d}(r, z)`: solve on the `d` mesh with the
/// leading `z.len()` KL terms of `basis` and interpolate at the critical location.
pub fn critical_pressure(
    mesh_d: usize,
    basis: &KlBasis,
    wells: &WellConfig,
    r: f64,
    z: &[f64],
    options: &DarcyOptions,
) -> Result<f64> {
    Ok(critical_solve(mesh_d, basis, wells, r, z, options)?.0)
}

/// [`critical_pressure`] together with the solver residual.
pub fn critical_solve(
    mesh_d: usize,
    basis: &KlBasis,
    wells: &WellConfig,
    r: f64,
    z: &[f64],
    options: &DarcyOptions,
) -> Result<(f64, f64)> {
    let mesh = Mesh::new(mesh_d, basis.mesh().side_length())?;
    let perm = basis.sample_prefix(z)?;
    let field = solve_pressure(&mesh, wells, &perm, r, options)?;
    let (x, y) = wells.critical_location;
    Ok((field.head_at(x, y)?, field.residual))
}

impl PressureField {
    pub fn head(&self, i: usize, j: usize) -> f64 {
        self.heads[self.mesh.cell_index(i, j)]
    }

    /// Bilinear interpolation between cell centres; points within half a
    /// cell of the boundary use the nearest row/column of centres.
    pub fn head_at(&self, x: f64, y: f64) -> Result<f64> {
        if !self.mesh.contains(x, y) {
            return Err(invalid(format!("({x}, {y}) lies outside the domain")));
        }
        let d = self.mesh.d();
        let h = self.mesh.spacing();
        let axis = |v: f64| {
            let t = (v / h - 0.5).clamp(0.0, (d - 1) as f64);
            let i0 = (t.floor() as usize).min(d - 2);
            (i0, t - i0 as f64)
        };
        let (i0, tx) = axis(x);
        let (j0, ty) = axis(y);
        Ok((1.0 - tx) * (1.0 - ty) * self.head(i0, j0)
            + tx * (1.0 - ty) * self.head(i0 + 1, j0)
            + (1.0 - tx) * ty * self.head(i0, j0 + 1)
            + tx * ty * self.head(i0 + 1, j0 + 1))
    }

    /// Total flux leaving through Dirichlet faces (m³/s).
    pub fn boundary_outflow(&self) -> f64 {
        let d = self.mesh.d();
        let bc = self.boundary;
        let mut total = 0.0;
        let mut face = |i: usize, j: usize, side: SideCondition| {
            if let SideCondition::Dirichlet(h0) = side {
                let p = self.mesh.cell_index(i, j);
                total += 2.0 * self.coefficients[p] * (self.heads[p] - h0);
            }
        };
        for k in 0..d {
            face(0, k, bc.west);
            face(d - 1, k, bc.east);
            face(k, 0, bc.south);
            face(k, d - 1, bc.north);
        }
        total
    }

    /// Net source rate `Σ cell rates` (equals `w − r` for well forcing).
    pub fn net_source(&self) -> f64 {
        self.cell_rates.iter().sum()
    }

    /// Largest absolute flux imbalance over all cells.
    pub fn max_cell_imbalance(&self) -> f64 {
        let d = self.mesh.d();
        let bc = self.boundary;
        let mut worst = 0.0f64;
        for j in 0..d {
            for i in 0..d {
                let p = self.mesh.cell_index(i, j);
                let kp = self.coefficients[p];
                let hp = self.heads[p];
                let mut out = 0.0;
                let nbs = [
                    (i > 0).then(|| self.mesh.cell_index(i - 1, j)),
                    (i + 1 < d).then(|| self.mesh.cell_index(i + 1, j)),
                    (j > 0).then(|| self.mesh.cell_index(i, j - 1)),
                    (j + 1 < d).then(|| self.mesh.cell_index(i, j + 1)),
                ];
                for (nb, side) in nbs.into_iter().zip([bc.west, bc.east, bc.south, bc.north]) {
                    match (nb, side) {
                        (Some(q), _) => {
                            out += harmonic(kp, self.coefficients[q]) * (hp - self.heads[q])
                        }
                        (None, SideCondition::Dirichlet(h0)) => out += 2.0 * kp * (hp - h0),
                        (None, SideCondition::NoFlow) => {}
                    }
                }
                worst = worst.max((out - self.cell_rates[p]).abs());
            }
        }
        worst
    }
}
