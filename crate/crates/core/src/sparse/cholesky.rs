use std::sync::Arc;

use super::csc::CscMatrix;
use super::ordering::minimum_degree;
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Ordering, elimination tree and column structure of `L` for one sparsity
/// pattern. Computed once and reused for every numeric factorization of
/// matrices that share the pattern.
#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    parent: Vec<usize>,
    /// Upper triangle of `P A P'`, CSC.
    cp: Vec<usize>,
    ci: Vec<usize>,
    /// For each stored entry of `A`, its slot in `cp`/`ci`, or `NONE` if it
    /// falls in the strict lower triangle after permutation.
    a_to_c: Vec<usize>,
    a_colptr: Vec<usize>,
    a_rowidx: Vec<usize>,
    lp: Vec<usize>,
}

impl SymbolicCholesky {
    /// Analyze a structurally symmetric square pattern.
    pub fn analyze(a: &CscMatrix) -> Result<Arc<Self>> {
        let perm = minimum_degree(a.nrows(), a.colptr(), a.rowidx());
        Self::analyze_with_ordering(a, perm)
    }

    pub fn analyze_with_ordering(a: &CscMatrix, perm: Vec<usize>) -> Result<Arc<Self>> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::invalid("Cholesky requires a square matrix"));
        }
        if perm.len() != n {
            return Err(Error::invalid("ordering length does not match matrix dimension"));
        }
        let mut pinv = vec![NONE; n];
        for (k, &i) in perm.iter().enumerate() {
            pinv[i] = k;
        }
        if pinv.contains(&NONE) {
            return Err(Error::invalid("ordering is not a permutation"));
        }

        // upper triangle of C = P A P'
        let mut entries: Vec<(usize, usize, usize)> = Vec::new(); // (col, row, a index)
        for j in 0..n {
            for p in a.colptr()[j]..a.colptr()[j + 1] {
                let (ci, cj) = (pinv[a.rowidx()[p]], pinv[j]);
                if ci <= cj {
                    entries.push((cj, ci, p));
                }
            }
        }
        entries.sort_unstable();
        let mut cp = vec![0usize; n + 1];
        let mut ci = Vec::with_capacity(entries.len());
        let mut a_to_c = vec![NONE; a.nnz()];
        for (slot, &(col, row, p)) in entries.iter().enumerate() {
            cp[col + 1] += 1;
            ci.push(row);
            a_to_c[p] = slot;
        }
        for j in 0..n {
            cp[j + 1] += cp[j];
        }
        for j in 0..n {
            if !ci[cp[j]..cp[j + 1]].contains(&j) {
                return Err(Error::NotPositiveDefinite(format!("structural zero on the diagonal at {}", perm[j])));
            }
        }

        let parent = etree(n, &cp, &ci);

        // column counts of L from the row patterns
        let mut counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = ereach(k, &cp, &ci, &parent, &mut stack, &mut mark);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut lp = vec![0usize; n + 1];
        for j in 0..n {
            lp[j + 1] = lp[j] + counts[j];
        }

        Ok(Arc::new(Self {
            n,
            perm,
            parent,
            cp,
            ci,
            a_to_c,
            a_colptr: a.colptr().to_vec(),
            a_rowidx: a.rowidx().to_vec(),
            lp,
        }))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries of the factor.
    pub fn factor_nnz(&self) -> usize {
        self.lp[self.n]
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    fn same_pattern(&self, a: &CscMatrix) -> bool {
        a.colptr() == self.a_colptr.as_slice() && a.rowidx() == self.a_rowidx.as_slice()
    }

    /// Numeric factorization of a matrix with exactly the analyzed pattern.
    pub fn factor(self: &Arc<Self>, a: &CscMatrix) -> Result<CholeskyFactor> {
        if !self.same_pattern(a) {
            return Err(Error::invalid("matrix pattern differs from the analyzed pattern"));
        }
        self.factor_values(a.values())
    }

    /// Numeric factorization from the value array of a matrix with the analyzed pattern.
    pub fn factor_values(self: &Arc<Self>, values: &[f64]) -> Result<CholeskyFactor> {
        let n = self.n;
        if values.len() != self.a_to_c.len() {
            return Err(Error::invalid("value array length differs from the analyzed pattern"));
        }
        let mut cx = vec![0.0; self.ci.len()];
        for (p, &slot) in self.a_to_c.iter().enumerate() {
            if slot != NONE {
                cx[slot] = values[p];
            }
        }
        let nnz = self.lp[n];
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut next = self.lp[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];

        for k in 0..n {
            let top = ereach(k, &self.cp, &self.ci, &self.parent, &mut stack, &mut mark);
            for p in self.cp[k]..self.cp[k + 1] {
                x[self.ci[p]] = cx[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / lx[self.lp[i]];
                x[i] = 0.0;
                for p in self.lp[i] + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite(format!(
                    "nonpositive pivot {d:e} at original index {}",
                    self.perm[k]
                )));
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }
        Ok(CholeskyFactor { symbolic: Arc::clone(self), li, lx })
    }
}

/// Elimination tree of a matrix given by its upper triangle.
fn etree(n: usize, cp: &[usize], ci: &[usize]) -> Vec<usize> {
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &row in &ci[cp[k]..cp[k + 1]] {
            let mut i = row;
            while i != NONE && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == NONE {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal), written to
/// `stack[top..]` in topological order. Returns `top`.
fn ereach(k: usize, cp: &[usize], ci: &[usize], parent: &[usize], stack: &mut [usize], mark: &mut [usize]) -> usize {
    let n = stack.len();
    let mut top = n;
    mark[k] = k;
    for &row in &ci[cp[k]..cp[k + 1]] {
        let mut i = row;
        if i > k {
            continue;
        }
        let mut len = 0;
        while i != NONE && mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// Numeric Cholesky factor `P A P' = L L'`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    li: Vec<usize>,
    lx: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        let lp = &self.symbolic.lp;
        2.0 * (0..self.dim()).map(|j| self.lx[lp[j]].ln()).sum::<f64>()
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim(), "right-hand side has wrong length");
        let perm = &self.symbolic.perm;
        let mut y: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        self.solve_lower_in_place(&mut y);
        self.solve_upper_in_place(&mut y);
        let mut x = vec![0.0; b.len()];
        for (k, &i) in perm.iter().enumerate() {
            x[i] = y[k];
        }
        x
    }

    /// `P' L^{-T} z`: maps a standard normal vector to a draw from `Normal(0, A^{-1})`.
    pub fn apply_inverse_upper(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim(), "noise vector has wrong length");
        let mut y = z.to_vec();
        self.solve_upper_in_place(&mut y);
        let mut x = vec![0.0; z.len()];
        for (k, &i) in self.symbolic.perm.iter().enumerate() {
            x[i] = y[k];
        }
        x
    }

    fn solve_lower_in_place(&self, y: &mut [f64]) {
        let lp = &self.symbolic.lp;
        for j in 0..self.dim() {
            y[j] /= self.lx[lp[j]];
            let yj = y[j];
            for p in lp[j] + 1..lp[j + 1] {
                y[self.li[p]] -= self.lx[p] * yj;
            }
        }
    }

    fn solve_upper_in_place(&self, y: &mut [f64]) {
        let lp = &self.symbolic.lp;
        for j in (0..self.dim()).rev() {
            let mut acc = y[j];
            for p in lp[j] + 1..lp[j + 1] {
                acc -= self.lx[p] * y[self.li[p]];
            }
            y[j] = acc / self.lx[lp[j]];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, density: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j || rng.gen::<f64>() < density {
                    b[(i, j)] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn factorization_matches_dense() {
        for seed in 0..5 {
            let dense = random_spd(40, 0.05, seed);
            let a = CscMatrix::from_dense(&dense);
            let sym = SymbolicCholesky::analyze(&a).unwrap();
            let f = sym.factor(&a).unwrap();
            let chol = dense.clone().cholesky().unwrap();
            let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            assert!((f.log_det() - logdet).abs() < 1e-10);
            let b: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
            let x = f.solve(&b);
            let xd = chol.solve(&DVector::from_column_slice(&b));
            assert!(x.iter().zip(xd.iter()).all(|(p, q)| (p - q).abs() < 1e-10));
            // identity ordering gives the same answers
            let f2 = SymbolicCholesky::analyze_with_ordering(&a, (0..40).collect()).unwrap().factor(&a).unwrap();
            assert!((f2.log_det() - logdet).abs() < 1e-10);
        }
    }

    #[test]
    fn inverse_upper_has_inverse_covariance() {
        let dense = random_spd(8, 0.3, 11);
        let a = CscMatrix::from_dense(&dense);
        let f = SymbolicCholesky::analyze(&a).unwrap().factor(&a).unwrap();
        // columns of M = P' L^{-T}; M M' = A^{-1}
        let mut m = DMatrix::zeros(8, 8);
        for k in 0..8 {
            let mut e = vec![0.0; 8];
            e[k] = 1.0;
            let col = f.apply_inverse_upper(&e);
            for i in 0..8 {
                m[(i, k)] = col[i];
            }
        }
        let cov = &m * m.transpose();
        let inv = dense.try_inverse().unwrap();
        assert!((cov - inv).abs().max() < 1e-10);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let dense = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = CscMatrix::from_dense(&dense);
        let err = SymbolicCholesky::analyze(&a).unwrap().factor(&a).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite(_)));
    }

    #[test]
    fn pattern_mismatch_is_rejected() {
        let a = CscMatrix::identity(3);
        let sym = SymbolicCholesky::analyze(&a).unwrap();
        let b = CscMatrix::from_dense(&DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0]));
        assert!(sym.factor(&b).is_err());
    }
}
