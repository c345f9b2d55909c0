use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{invalid, GpError, Result};

/// Training or test data: inputs in the coordinates the kernel sees (the unit
/// cube for the higher-dimensional benchmarks) plus responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return invalid(format!("{} input rows but {} responses", x.nrows(), y.len()));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let x = DMatrix::from_fn(rows.len(), self.d(), |i, j| self.x[(rows[i], j)]);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r]));
        Self { x, y }
    }

    /// CSV with header `x1,...,xd,y`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut header: Vec<String> = (1..=self.d()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        let mut m = self.x.clone().insert_column(self.d(), 0.0);
        m.column_mut(self.d()).copy_from(&self.y);
        csvio::write_matrix(w, &header, &m)
    }

    /// Reads the layout written by [`Dataset::write_csv`]; the last column is `y`.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let (header, m) = csvio::read_matrix(r)?;
        if header.len() < 2 {
            return Err(GpError::Parse("dataset CSV needs at least one input and y".into()));
        }
        let d = header.len() - 1;
        let y = m.column(d).into_owned();
        let x = m.columns(0, d).into_owned();
        Self::new(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
            DVector::from_vec(vec![1.5, -2.0, 1.0 / 7.0]),
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x1,x2,y\n"));
        assert_eq!(Dataset::read_csv(&buf[..]).unwrap(), ds);
    }

    #[test]
    fn shape_mismatch() {
        assert!(Dataset::new(DMatrix::zeros(3, 1), DVector::zeros(2)).is_err());
    }
}
