//! Linear systems in CSR layout with optional fixed degrees of freedom.

use nalgebra_sparse::CsrMatrix;
use rayon::prelude::*;

use super::DiscretizationError;

#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub matrix: CsrMatrix<f64>,
    pub rhs: Vec<f64>,
    /// `(dof, value)` pairs imposed by symmetric elimination.
    pub constraints: Vec<(usize, f64)>,
}

impl SparseSystem {
    pub fn new(matrix: CsrMatrix<f64>, rhs: Vec<f64>) -> Result<Self, DiscretizationError> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() != rhs.len() {
            return Err(DiscretizationError::DimensionMismatch(format!(
                "matrix {}×{} with right-hand side of length {}",
                matrix.nrows(),
                matrix.ncols(),
                rhs.len()
            )));
        }
        Ok(SparseSystem { matrix, rhs, constraints: Vec::new() })
    }

    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    /// Replaces constrained rows and columns by identity rows, moving known values to the right side.
    pub fn apply_constraints(&mut self) -> Result<(), DiscretizationError> {
        if self.constraints.is_empty() {
            return Ok(());
        }
        let n = self.dim();
        let mut fixed = vec![None; n];
        for &(d, v) in &self.constraints {
            if d >= n {
                return Err(DiscretizationError::DimensionMismatch(format!("constraint on dof {d} of {n}")));
            }
            fixed[d] = Some(v);
        }
        let (offsets, cols, values) = {
            let (o, c, v) = self.matrix.csr_data_mut();
            (o.to_vec(), c.to_vec(), v)
        };
        for r in 0..n {
            for e in offsets[r]..offsets[r + 1] {
                let c = cols[e];
                if let Some(val) = fixed[c] {
                    if fixed[r].is_none() {
                        self.rhs[r] -= values[e] * val;
                    }
                    values[e] = if r == c { 1.0 } else { 0.0 };
                } else if fixed[r].is_some() {
                    values[e] = 0.0;
                }
            }
        }
        for (d, v) in fixed.iter().enumerate() {
            if let Some(v) = v {
                self.rhs[d] = *v;
            }
        }
        self.constraints.clear();
        Ok(())
    }
}

fn same_pattern(a: &CsrMatrix<f64>, b: &CsrMatrix<f64>) -> bool {
    a.nrows() == b.nrows()
        && a.row_offsets() == b.row_offsets()
        && a.col_indices() == b.col_indices()
}

/// `Σ cᵢ Aᵢ` for matrices sharing one sparsity pattern.
pub fn combine(terms: &[(f64, &CsrMatrix<f64>)]) -> Result<CsrMatrix<f64>, DiscretizationError> {
    let Some((_, first)) = terms.first() else {
        return Err(DiscretizationError::DimensionMismatch("no terms to combine".into()));
    };
    let mut out = (*first).clone();
    out.values_mut().iter_mut().for_each(|v| *v = 0.0);
    for (c, m) in terms {
        if !same_pattern(first, m) {
            return Err(DiscretizationError::DimensionMismatch("sparsity patterns differ".into()));
        }
        for (o, v) in out.values_mut().iter_mut().zip(m.values()) {
            *o += c * v;
        }
    }
    Ok(out)
}

/// `y = A x`; rows are independent so the parallel loop is deterministic.
pub fn matvec(a: &CsrMatrix<f64>, x: &[f64], y: &mut [f64]) {
    let offsets = a.row_offsets();
    let cols = a.col_indices();
    let vals = a.values();
    let row = |r: usize| -> f64 {
        let mut s = 0.0;
        for e in offsets[r]..offsets[r + 1] {
            s += vals[e] * x[cols[e]];
        }
        s
    };
    if y.len() > 20_000 {
        y.par_iter_mut().enumerate().for_each(|(r, out)| *out = row(r));
    } else {
        y.iter_mut().enumerate().for_each(|(r, out)| *out = row(r));
    }
}

pub fn diagonal(a: &CsrMatrix<f64>) -> Vec<f64> {
    let mut d = vec![0.0; a.nrows()];
    for (r, row) in a.row_iter().enumerate() {
        if let Ok(i) = row.col_indices().binary_search(&r) {
            d[r] = row.values()[i];
        }
    }
    d
}
