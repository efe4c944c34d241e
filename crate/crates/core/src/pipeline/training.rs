use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qmc::{LatticeGenerator, PointSet};

/// Unit-cube training locations and their physical inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingLocations {
    /// `n × (1 + s)` lattice points in natural order.
    pub points: PointSet,
    pub generator: LatticeGenerator,
    pub rates: Vec<f64>,
    /// `n × s` row-major KL coefficients.
    pub coefficients: Vec<f64>,
    pub s: usize,
}

impl SamplingLocations {
    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn z(&self, i: usize) -> &[f64] {
        &self.coefficients[i * self.s..(i + 1) * self.s]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveFailure {
    pub index: usize,
    pub message: String,
}

/// Where a training set came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub generator: LatticeGenerator,
    pub n: usize,
    pub s: usize,
    pub d: usize,
    /// Failed solves; their `y` holds the mean of the successful ones.
    pub failures: Vec<SolveFailure>,
}

/// Observed numerical critical pressures at the sampling locations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub locations: SamplingLocations,
    pub y: Vec<f64>,
    pub residuals: Vec<f64>,
    pub provenance: Provenance,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Sidecar metadata path: `training.csv` → `training.meta.json`.
    pub fn meta_path(csv: &Path) -> PathBuf {
        csv.with_extension("meta.json")
    }

    /// Writes `r,z1..zs,y,residual` rows plus the metadata sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = self.locations.s;
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        let mut header = vec!["r".to_string()];
        header.extend((1..=s).map(|j| format!("z{j}")));
        header.push("y".into());
        header.push("residual".into());
        w.write_record(&header).map_err(csv_error)?;
        for i in 0..self.len() {
            let mut row = vec![self.locations.rates[i].to_string()];
            row.extend(self.locations.z(i).iter().map(|v| v.to_string()));
            row.push(self.y[i].to_string());
            row.push(self.residuals[i].to_string());
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        fs::write(
            Self::meta_path(path),
            serde_json::to_vec_pretty(&self.provenance)?,
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta_path = Self::meta_path(path);
        let provenance: Provenance = serde_json::from_slice(&fs::read(&meta_path).map_err(|e| {
            Error::Format(format!("training metadata {}: {e}", meta_path.display()))
        })?)?;
        let s = provenance.s;
        let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
        let header = reader.headers().map_err(csv_error)?.clone();
        if header.len() != s + 3 || &header[0] != "r" || &header[s + 1] != "y" {
            return Err(Error::Format(format!(
                "training header does not match s = {s}: {header:?}"
            )));
        }
        let (mut rates, mut coefficients, mut y, mut residuals) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(csv_error)?;
            let vals = record
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Format(format!("training row {}: {e}", line + 1)))?;
            if vals.len() != s + 3 {
                return Err(Error::Format(format!("training row {} has {} fields", line + 1, vals.len())));
            }
            rates.push(vals[0]);
            coefficients.extend_from_slice(&vals[1..=s]);
            y.push(vals[s + 1]);
            residuals.push(vals[s + 2]);
        }
        if y.len() != provenance.n {
            return Err(Error::Format(format!(
                "training file has {} rows, metadata says {}",
                y.len(),
                provenance.n
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("training observations must be finite".into()));
        }
        let points = provenance.generator.points(provenance.n, s + 1)?;
        Ok(Self {
            locations: SamplingLocations {
                points,
                generator: provenance.generator.clone(),
                rates,
                coefficients,
                s,
            },
            y,
            residuals,
            provenance,
        })
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
