//! Nested-list conversions for matrices in JSON files.

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Builds a matrix from rows; `cols` is used when there are no rows.
pub fn from_rows(rows: Vec<Vec<f64>>, cols: usize, context: &str) -> Result<Array2<f64>> {
    let width = rows.first().map_or(cols, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Validation(format!("{context}: rows have unequal lengths")));
    }
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, width), flat).map_err(|e| Error::Validation(format!("{context}: {e}")))
}
