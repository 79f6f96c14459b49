//! Sparse matrices and sparse Cholesky factorization.

mod cholesky;
mod csc;
mod ordering;

pub use cholesky::{CholeskyFactor, SymbolicCholesky};
pub use csc::CscMatrix;
pub use ordering::minimum_degree;

use crate::error::{Error, Result};

/// Symmetric positive-definite sparse matrix (a GMRF precision or an
/// observed information). Both triangles are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePrecision {
    matrix: CscMatrix,
}

impl SparsePrecision {
    /// Wrap a matrix after checking exact symmetry. Positive definiteness is
    /// checked when the matrix is factorized.
    pub fn new(matrix: CscMatrix) -> Result<Self> {
        if !matrix.is_symmetric() {
            return Err(Error::invalid("precision matrix is not symmetric"));
        }
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CscMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CscMatrix {
        self.matrix
    }

    /// Analyze and factorize.
    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        SymbolicCholesky::analyze(&self.matrix)?.factor(&self.matrix)
    }
}

/// A family of matrices `sum_k c_k M_k` over a fixed union sparsity pattern.
///
/// Each term is stored as a value array aligned with the union pattern, so a
/// new combination costs one pass over the pattern per term and never
/// reallocates.
#[derive(Debug, Clone)]
pub struct SparseCombination {
    pattern: CscMatrix,
    terms: Vec<Vec<f64>>,
}

impl SparseCombination {
    pub fn new(terms: &[CscMatrix]) -> Result<Self> {
        let first = terms.first().ok_or_else(|| Error::invalid("empty sparse combination"))?;
        let (nr, nc) = (first.nrows(), first.ncols());
        if terms.iter().any(|t| t.nrows() != nr || t.ncols() != nc) {
            return Err(Error::invalid("terms of a sparse combination must share dimensions"));
        }
        let union: Vec<_> = terms.iter().flat_map(|t| t.triplets()).map(|(i, j, _)| (i, j, 0.0)).collect();
        let pattern = CscMatrix::from_triplets(nr, nc, &union)?;
        let aligned = terms
            .iter()
            .map(|t| {
                let mut v = vec![0.0; pattern.nnz()];
                for (i, j, x) in t.triplets() {
                    v[pattern.find(i, j).expect("entry in union pattern")] += x;
                }
                v
            })
            .collect();
        Ok(Self { pattern, terms: aligned })
    }

    pub fn pattern(&self) -> &CscMatrix {
        &self.pattern
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn combine_into(&self, coeffs: &[f64], out: &mut [f64]) {
        assert_eq!(coeffs.len(), self.terms.len(), "one coefficient per term");
        out.iter_mut().for_each(|v| *v = 0.0);
        for (c, t) in coeffs.iter().zip(&self.terms) {
            if *c != 0.0 {
                out.iter_mut().zip(t).for_each(|(o, x)| *o += c * x);
            }
        }
    }

    pub fn combine(&self, coeffs: &[f64]) -> CscMatrix {
        let mut m = self.pattern.clone();
        self.combine_into(coeffs, m.values_mut());
        m
    }
}
