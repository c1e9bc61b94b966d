//! Sparse symmetric linear algebra: fill-reducing ordering, simplicial
//! Cholesky factorization with log-determinant, triangular solves, sampling
//! with a given precision matrix, and the Takahashi partial inverse.
//!
//! Matrices are stored as full symmetric CSC with sorted row indices. The
//! factorization is the classic up-looking algorithm driven by the
//! elimination tree; the symbolic phase (ordering, etree, column counts,
//! scatter map from input entries to permuted upper-triangular positions)
//! is reusable across numeric factorizations with the same pattern, which
//! is the common case when re-evaluating a likelihood at new parameters.
//!
//! Ordering is approximate minimum degree via the `amd` crate (a port of
//! SuiteSparse AMD). A trailing block of indices can be pinned to the end
//! of the elimination order; the model places fixed-effect coefficients
//! there so the factor pattern covers all latent/fixed cross entries needed
//! by the partial inverse.

use crate::error::{Error, Result};
use std::sync::Arc;

/// Symmetric sparse matrix in full CSC form (both triangles stored).
#[derive(Debug, Clone)]
pub struct SparseSym {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_ind: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseSym {
    /// Builds from triplets, summing duplicates. Both (i, j) and (j, i)
    /// must be supplied for off-diagonal entries.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> SparseSym {
        let mut entries: Vec<(usize, usize, f64)> = triplets.to_vec();
        // Stable sort by (col, row), then compress duplicates. Stability keeps
        // the summation order of duplicates equal for (i, j) and (j, i), so
        // symmetric triplet lists produce bit-exact symmetric matrices.
        entries.sort_by_key(|&(r, c, _)| (c, r));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_ind = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut it = entries.into_iter().peekable();
        while let Some((r, c, v)) = it.next() {
            let mut acc = v;
            while let Some(&(r2, c2, v2)) = it.peek() {
                if r2 == r && c2 == c {
                    acc += v2;
                    it.next();
                } else {
                    break;
                }
            }
            row_ind.push(r);
            values.push(acc);
            col_ptr[c + 1] += 1;
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        SparseSym {
            n,
            col_ptr,
            row_ind,
            values,
        }
    }

    pub fn identity(n: usize) -> SparseSym {
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        SparseSym::from_triplets(n, &t)
    }

    pub fn nnz(&self) -> usize {
        self.row_ind.len()
    }

    pub fn max_row_nnz(&self) -> usize {
        let mut counts = vec![0usize; self.n];
        for &r in &self.row_ind {
            counts[r] += 1;
        }
        counts.into_iter().max().unwrap_or(0)
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let lo = self.col_ptr[j];
        let hi = self.col_ptr[j + 1];
        match self.row_ind[lo..hi].binary_search(&i) {
            Ok(p) => self.values[lo + p],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for c in 0..self.n {
            let xc = x[c];
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_ind[p]] += self.values[p] * xc;
            }
        }
        y
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for c in 0..self.n {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                acc += x[self.row_ind[p]] * self.values[p] * xc;
            }
        }
        acc
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |c| {
            (self.col_ptr[c]..self.col_ptr[c + 1]).map(move |p| (self.row_ind[p], c, self.values[p]))
        })
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter_entries() {
            m[(i, j)] += v;
        }
        m
    }

    fn is_pattern_symmetric(&self) -> bool {
        for (i, j, _) in self.iter_entries() {
            let lo = self.col_ptr[i];
            let hi = self.col_ptr[i + 1];
            if self.row_ind[lo..hi].binary_search(&j).is_err() {
                return false;
            }
        }
        true
    }
}

/// Reusable symbolic factorization: permutation, elimination tree, factor
/// column pointers and the scatter map from input values to permuted
/// upper-triangular columns.
#[derive(Debug)]
pub struct Symbolic {
    pub n: usize,
    /// `perm[k]` = original index eliminated at step k.
    pub perm: Vec<usize>,
    pub iperm: Vec<usize>,
    parent: Vec<i64>,
    /// Permuted upper triangle of the input: per permuted column, the
    /// permuted rows (<= col) and the source index into the input values.
    up_col_ptr: Vec<usize>,
    up_row: Vec<usize>,
    up_src: Vec<usize>,
    /// Column pointers of L (counts include the diagonal).
    l_col_ptr: Vec<usize>,
}

/// Computes a fill-reducing symbolic factorization. `dense_tail` indices at
/// the end of the matrix are kept last in the elimination order.
pub fn analyze(m: &SparseSym, dense_tail: usize) -> Result<Symbolic> {
    if !m.is_pattern_symmetric() {
        return Err(Error::AsymmetricPattern);
    }
    let n = m.n;
    let n0 = n - dense_tail;
    let mut perm: Vec<usize> = (0..n).collect();
    if n0 > 1 {
        // AMD on the leading block.
        let mut a_p = vec![0usize; n0 + 1];
        let mut a_i = Vec::new();
        for c in 0..n0 {
            for p in m.col_ptr[c]..m.col_ptr[c + 1] {
                let r = m.row_ind[p];
                if r < n0 {
                    a_i.push(r);
                    a_p[c + 1] += 1;
                }
            }
        }
        for c in 0..n0 {
            a_p[c + 1] += a_p[c];
        }
        let (p, _pinv, _info) = amd::order::<usize>(n0, &a_p, &a_i, &amd::Control::default())
            .map_err(|_| Error::AsymmetricPattern)?;
        for (k, &orig) in p.iter().enumerate() {
            perm[k] = orig;
        }
    }
    analyze_with_permutation(m, perm)
}

/// Symbolic factorization under a caller-supplied elimination order.
pub fn analyze_with_permutation(m: &SparseSym, perm: Vec<usize>) -> Result<Symbolic> {
    let n = m.n;
    if perm.len() != n {
        return Err(Error::DimensionMismatch("permutation length".into()));
    }
    let mut iperm = vec![0usize; n];
    for (k, &orig) in perm.iter().enumerate() {
        iperm[orig] = k;
    }

    // Permuted upper triangle with source indices, sorted rows per column.
    let mut cols: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for c in 0..n {
        for p in m.col_ptr[c]..m.col_ptr[c + 1] {
            let r = m.row_ind[p];
            let (pi, pj) = (iperm[r], iperm[c]);
            if pi <= pj {
                cols[pj].push((pi, p));
            }
        }
    }
    let mut up_col_ptr = vec![0usize; n + 1];
    let mut up_row = Vec::new();
    let mut up_src = Vec::new();
    for (j, col) in cols.iter_mut().enumerate() {
        col.sort_unstable();
        up_col_ptr[j + 1] = up_col_ptr[j] + col.len();
        for &(r, src) in col.iter() {
            up_row.push(r);
            up_src.push(src);
        }
    }

    // Elimination tree from the permuted upper pattern.
    let mut parent = vec![-1i64; n];
    let mut ancestor = vec![-1i64; n];
    for k in 0..n {
        for p in up_col_ptr[k]..up_col_ptr[k + 1] {
            let mut i = up_row[p] as i64;
            while i != -1 && (i as usize) < k {
                let next = ancestor[i as usize];
                ancestor[i as usize] = k as i64;
                if next == -1 {
                    parent[i as usize] = k as i64;
                }
                i = next;
            }
        }
    }

    // Column counts of L via ereach.
    let mut counts = vec![1usize; n]; // diagonal
    let mut mark = vec![usize::MAX; n];
    let mut stack = vec![0usize; n];
    let mut reach = vec![0usize; n];
    for k in 0..n {
        let top = ereach(
            k, &up_col_ptr, &up_row, &parent, &mut mark, &mut stack, &mut reach,
        );
        for &j in &reach[top..n] {
            counts[j] += 1;
        }
    }
    let mut l_col_ptr = vec![0usize; n + 1];
    for j in 0..n {
        l_col_ptr[j + 1] = l_col_ptr[j] + counts[j];
    }

    Ok(Symbolic {
        n,
        perm,
        iperm,
        parent,
        up_col_ptr,
        up_row,
        up_src,
        l_col_ptr,
    })
}

impl Symbolic {
    /// Number of nonzeros in the factor (diagonal included).
    pub fn factor_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }
}

/// Nonzero pattern of row k of L, in topological order, written into
/// `reach[top..n]`. `mark` is stamped with `k` for visited nodes.
fn ereach(
    k: usize,
    up_col_ptr: &[usize],
    up_row: &[usize],
    parent: &[i64],
    mark: &mut [usize],
    stack: &mut [usize],
    reach: &mut [usize],
) -> usize {
    let n = mark.len();
    let mut top = n;
    mark[k] = k;
    for p in up_col_ptr[k]..up_col_ptr[k + 1] {
        let mut i = up_row[p];
        if i == k {
            continue;
        }
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            let pi = parent[i];
            if pi < 0 {
                break;
            }
            i = pi as usize;
            if i >= k {
                break;
            }
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            reach[top] = stack[len];
        }
    }
    top
}

/// Sparse Cholesky factor `P M P^T = L L^T` with its log-determinant.
#[derive(Debug)]
pub struct CholeskyFactor {
    sym: Arc<Symbolic>,
    l_row: Vec<usize>,
    l_val: Vec<f64>,
    pub log_det: f64,
}

/// Numeric factorization reusing a symbolic analysis.
pub fn factorize(m: &SparseSym, sym: &Arc<Symbolic>) -> Result<CholeskyFactor> {
    let n = sym.n;
    if m.n != n {
        return Err(Error::DimensionMismatch("matrix size vs symbolic".into()));
    }
    let lp = &sym.l_col_ptr;
    let mut l_row = vec![0usize; lp[n]];
    let mut l_val = vec![0.0f64; lp[n]];
    let mut cursor: Vec<usize> = lp[..n].to_vec();
    let mut x = vec![0.0f64; n];
    let mut mark = vec![usize::MAX; n];
    let mut stack = vec![0usize; n];
    let mut reach = vec![0usize; n];
    let mut log_det = 0.0;

    for k in 0..n {
        let top = ereach(
            k,
            &sym.up_col_ptr,
            &sym.up_row,
            &sym.parent,
            &mut mark,
            &mut stack,
            &mut reach,
        );
        // Scatter permuted column k of the input (upper part).
        for p in sym.up_col_ptr[k]..sym.up_col_ptr[k + 1] {
            x[sym.up_row[p]] = m.values[sym.up_src[p]];
        }
        let mut d = x[k];
        x[k] = 0.0;
        for &j in &reach[top..n] {
            let djj = l_val[lp[j]];
            let lkj = x[j] / djj;
            x[j] = 0.0;
            for p in lp[j] + 1..cursor[j] {
                x[l_row[p]] -= l_val[p] * lkj;
            }
            d -= lkj * lkj;
            let c = cursor[j];
            l_row[c] = k;
            l_val[c] = lkj;
            cursor[j] = c + 1;
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: sym.perm[k],
            });
        }
        let djj = d.sqrt();
        l_row[lp[k]] = k;
        l_val[lp[k]] = djj;
        cursor[k] = lp[k] + 1;
        log_det += 2.0 * djj.ln();
    }

    Ok(CholeskyFactor {
        sym: Arc::clone(sym),
        l_row,
        l_val,
        log_det,
    })
}

/// One-shot analyze + factorize with AMD ordering.
pub fn factorize_simple(m: &SparseSym) -> Result<CholeskyFactor> {
    let sym = Arc::new(analyze(m, 0)?);
    factorize(m, &sym)
}

impl CholeskyFactor {
    pub fn n(&self) -> usize {
        self.sym.n
    }

    pub fn symbolic(&self) -> &Arc<Symbolic> {
        &self.sym
    }

    /// Solves `M x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.sym.n;
        let lp = &self.sym.l_col_ptr;
        let mut x: Vec<f64> = (0..n).map(|k| b[self.sym.perm[k]]).collect();
        // Forward: L y = P b.
        for j in 0..n {
            let xj = x[j] / self.l_val[lp[j]];
            x[j] = xj;
            for p in lp[j] + 1..lp[j + 1] {
                x[self.l_row[p]] -= self.l_val[p] * xj;
            }
        }
        // Backward: L^T z = y.
        for j in (0..n).rev() {
            let mut acc = x[j];
            for p in lp[j] + 1..lp[j + 1] {
                acc -= self.l_val[p] * x[self.l_row[p]];
            }
            x[j] = acc / self.l_val[lp[j]];
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.sym.perm[k]] = x[k];
        }
        out
    }

    pub fn solve_many(&self, rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rhs.iter().map(|b| self.solve(b)).collect()
    }

    /// Draws `u = P^T L^{-T} z`; if `z` is standard normal, `u` has
    /// precision matrix `M`.
    pub fn sample(&self, z: &[f64]) -> Result<Vec<f64>> {
        let n = self.sym.n;
        if z.len() != n {
            return Err(Error::DimensionMismatch("sample vector length".into()));
        }
        let lp = &self.sym.l_col_ptr;
        let mut x = z.to_vec();
        for j in (0..n).rev() {
            let mut acc = x[j];
            for p in lp[j] + 1..lp[j + 1] {
                acc -= self.l_val[p] * x[self.l_row[p]];
            }
            x[j] = acc / self.l_val[lp[j]];
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.sym.perm[k]] = x[k];
        }
        Ok(out)
    }

    /// Takahashi partial inverse: entries of `M^{-1}` on the factor
    /// pattern, processed in reverse elimination order.
    pub fn partial_inverse(&self) -> PartialInverse {
        let n = self.sym.n;
        let lp = &self.sym.l_col_ptr;
        let l_row = &self.l_row;
        let l_val = &self.l_val;
        let mut z_val = vec![0.0f64; lp[n]];

        let lookup = |z_val: &[f64], r: usize, c: usize| -> f64 {
            let (hi, lo) = if r >= c { (r, c) } else { (c, r) };
            let a = lp[lo];
            let b = lp[lo + 1];
            match l_row[a..b].binary_search(&hi) {
                Ok(p) => z_val[a + p],
                Err(_) => unreachable!("partial inverse lookup off the factor pattern"),
            }
        };

        for j in (0..n).rev() {
            let djj = l_val[lp[j]];
            for idx in (lp[j]..lp[j + 1]).rev() {
                let i = l_row[idx];
                let mut sum = 0.0;
                for q in lp[j] + 1..lp[j + 1] {
                    let k = l_row[q];
                    sum += l_val[q] * lookup(&z_val, k, i);
                }
                z_val[idx] = if i == j {
                    1.0 / (djj * djj) - sum / djj
                } else {
                    -sum / djj
                };
            }
        }

        PartialInverse {
            sym: Arc::clone(&self.sym),
            z_val,
            l_row_copy: self.l_row.clone(),
        }
    }
}

/// Entries of `M^{-1}` restricted to the pattern of `L + L^T`, indexed in
/// the original (unpermuted) numbering.
pub struct PartialInverse {
    sym: Arc<Symbolic>,
    z_val: Vec<f64>,
    l_row_copy: Vec<usize>,
}

impl PartialInverse {
    pub fn n(&self) -> usize {
        self.sym.n
    }

    /// Entry `(i, j)` in original indices, if on the factor pattern.
    pub fn entry(&self, i: usize, j: usize) -> Option<f64> {
        let (pi, pj) = (self.sym.iperm[i], self.sym.iperm[j]);
        let (hi, lo) = if pi >= pj { (pi, pj) } else { (pj, pi) };
        let a = self.sym.l_col_ptr[lo];
        let b = self.sym.l_col_ptr[lo + 1];
        self.l_row_copy[a..b]
            .binary_search(&hi)
            .ok()
            .map(|p| self.z_val[a + p])
    }

    /// Marginal variances `diag(M^{-1})` in original order.
    pub fn diag(&self) -> Vec<f64> {
        let n = self.sym.n;
        let mut d = vec![0.0; n];
        for k in 0..n {
            d[self.sym.perm[k]] = self.z_val[self.sym.l_col_ptr[k]];
        }
        d
    }

    /// `Tr(M^{-1} B)` for a sparse `B` whose pattern lies on the factor
    /// pattern. `B` may be smaller than `M`; it is treated as the leading
    /// block padded with zeros.
    pub fn trace_product(&self, b: &SparseSym) -> f64 {
        let mut acc = 0.0;
        for (i, j, v) in b.iter_entries() {
            if v != 0.0 {
                acc += v
                    * self
                        .entry(i, j)
                        .expect("trace_product: entry off the factor pattern");
            }
        }
        acc
    }
}
