//! Observation matrix with optional ground-truth labels.

use nalgebra::{DMatrix, DVector};

use crate::error::{PgmmError, Result};

/// An `n x p` matrix of observations (rows) over variables (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    labels: Option<Vec<usize>>,
}

impl DataMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(PgmmError::contract(format!(
                "data must be non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let n = values.nrows();
            return Err(PgmmError::contract(format!(
                "non-finite entry at row {}, column {}",
                pos % n,
                pos / n
            )));
        }
        Ok(DataMatrix {
            values,
            labels: None,
        })
    }

    /// Builds from row slices; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != p) {
            return Err(PgmmError::contract(format!(
                "row {i} has {} columns, expected {p}",
                rows[i].len()
            )));
        }
        Self::new(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n() {
            return Err(PgmmError::contract(format!(
                "{} labels for {} observations",
                labels.len(),
                self.n()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }

    /// Per-column z-scoring. Constant columns are centred but left unscaled.
    pub fn standardized(&self) -> DataMatrix {
        let n = self.n() as f64;
        let mut values = self.values.clone();
        for mut col in values.column_iter_mut() {
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
            let sd = (col.norm_squared() / n).sqrt();
            if sd > 0.0 {
                col /= sd;
            }
        }
        DataMatrix {
            values,
            labels: self.labels.clone(),
        }
    }

    /// Each observation repeated twice, in order.
    pub fn duplicated(&self) -> DataMatrix {
        let n = self.n();
        let values = DMatrix::from_fn(2 * n, self.p(), |i, j| self.values[(i % n, j)]);
        DataMatrix {
            values,
            labels: self
                .labels
                .as_ref()
                .map(|l| l.iter().chain(l.iter()).copied().collect()),
        }
    }
}
