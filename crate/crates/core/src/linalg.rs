//! Small dense/sparse helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Entries with magnitude at or below this are treated as structural zeros.
pub const SPARSE_DROP_TOL: f64 = 1e-14;

/// Column-compressed sparse matrix; enough structure for applying
/// permutation-like representation matrices cheaply.
#[derive(Clone, Debug)]
pub struct SparseMat {
    pub nrows: usize,
    pub ncols: usize,
    /// `cols[j]` lists `(row, value)` for the nonzeros of column `j`.
    pub cols: Vec<Vec<(usize, f64)>>,
}

impl SparseMat {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let cols = (0..m.ncols())
            .map(|j| {
                (0..m.nrows())
                    .filter_map(|i| {
                        let v = m[(i, j)];
                        (v.abs() > SPARSE_DROP_TOL).then_some((i, v))
                    })
                    .collect()
            })
            .collect();
        SparseMat {
            nrows: m.nrows(),
            ncols: m.ncols(),
            cols,
        }
    }

    pub fn nnz(&self) -> usize {
        self.cols.iter().map(Vec::len).sum()
    }

    /// Row-compressed view: `rows[i]` lists `(col, value)`.
    pub fn rows(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows = vec![Vec::new(); self.nrows];
        for (j, col) in self.cols.iter().enumerate() {
            for &(i, v) in col {
                rows[i].push((j, v));
            }
        }
        rows
    }

    /// `self * b` for dense `b`.
    pub fn left_mul(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.ncols, b.nrows());
        let mut out = DMatrix::zeros(self.nrows, b.ncols());
        for c in 0..b.ncols() {
            let bc = b.column(c);
            let mut oc = out.column_mut(c);
            for (j, col) in self.cols.iter().enumerate() {
                let x = bc[j];
                if x != 0.0 {
                    for &(i, v) in col {
                        oc[i] += v * x;
                    }
                }
            }
        }
        out
    }

    /// `a * self` for dense `a`.
    pub fn right_mul(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(a.ncols(), self.nrows);
        let mut out = DMatrix::zeros(a.nrows(), self.ncols);
        for (j, col) in self.cols.iter().enumerate() {
            let mut oc = out.column_mut(j);
            for &(i, v) in col {
                oc.axpy(v, &a.column(i), 1.0);
            }
        }
        out
    }
}

/// `a * (left ⊗ right)` computed blockwise: with `a = [a_0, ..., a_{D-1}]`
/// split into column blocks of width `right.ncols`, block `d` of the
/// result is `sum_{d'} left[d', d] * a_{d'} * right`.
pub fn mul_kron_right(a: &DMatrix<f64>, left: &DMatrix<f64>, right: &SparseMat) -> DMatrix<f64> {
    let k = right.nrows;
    let d = left.nrows();
    assert_eq!(a.ncols(), d * k, "column blocks");
    let rows = a.nrows();
    let mut out = DMatrix::zeros(rows, d * right.ncols);
    for dp in 0..d {
        let block = a.columns(dp * k, k).into_owned();
        let br = right.right_mul(&block);
        for dd in 0..left.ncols() {
            let w = left[(dp, dd)];
            if w.abs() > SPARSE_DROP_TOL {
                let mut target = out.columns_mut(dd * right.ncols, right.ncols);
                target += &br * w;
            }
        }
    }
    out
}

/// Singular values and `V^T` of `q`, with `q` padded by zero rows when it
/// has fewer rows than columns so that `V^T` is always square.
pub fn svd_right(q: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = q.ncols();
    let q = if q.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, q.nrows()).copy_from(q);
        p
    } else {
        q.clone()
    };
    let svd = q.svd(false, true);
    let sv = svd.singular_values.iter().copied().collect();
    (sv, svd.v_t.expect("requested V"))
}

/// Orthonormal basis of the null space of `q` from its SVD.
///
/// Singular values below `rel_tol * sigma_ref` count as zero, where
/// `sigma_ref` defaults to the largest singular value of `q`. Returns the
/// singular values too.
pub fn null_space(q: &DMatrix<f64>, rel_tol: f64, sigma_ref: Option<f64>) -> (Vec<DVector<f64>>, Vec<f64>) {
    if q.ncols() == 0 {
        return (Vec::new(), Vec::new());
    }
    let (sv, v_t) = svd_right(q);
    let sigma_max = sigma_ref.unwrap_or_else(|| sv.iter().cloned().fold(0.0, f64::max));
    let nulls = null_rows(&sv, &v_t, rel_tol * sigma_max, sigma_max == 0.0);
    (nulls, sv)
}

/// Rows of `v_t` whose singular value is below `threshold` (all rows when
/// `all` is set).
pub fn null_rows(sv: &[f64], v_t: &DMatrix<f64>, threshold: f64, all: bool) -> Vec<DVector<f64>> {
    (0..v_t.nrows())
        .filter(|&i| all || sv[i] < threshold)
        .map(|i| v_t.row(i).transpose())
        .collect()
}

/// Flip the sign of `v` so its largest-magnitude entry (first one, within
/// a relative 1e-9) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    if let Some(x) = v.iter().find(|x| x.abs() >= max * (1.0 - 1e-9)) {
        if *x < 0.0 {
            v.iter_mut().for_each(|y| *y = -*y);
        }
    }
}

/// Block-diagonal matrix with the given blocks in order.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), (b.nrows(), b.ncols())).copy_from(*b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

/// Disjoint-set forest with path halving.
pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index becomes the root so components are keyed by their minimum
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_products_match_dense() {
        let a = DMatrix::from_fn(4, 6, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        let s = DMatrix::from_fn(6, 6, |i, j| if (i + 2 * j) % 6 == 0 { 1.0 } else { 0.0 });
        let sp = SparseMat::from_dense(&s);
        assert_eq!((sp.right_mul(&a) - &a * &s).norm(), 0.0);
        let b = a.transpose();
        assert_eq!((sp.left_mul(&b) - &s * &b).norm(), 0.0);
    }

    #[test]
    fn kron_right_matches_dense_kronecker() {
        let left = DMatrix::from_fn(3, 3, |i, j| (i as f64 - j as f64) * 0.3 + 0.1);
        let right = DMatrix::from_fn(2, 2, |i, j| if i == j { 0.0 } else { 1.0 });
        let a = DMatrix::from_fn(5, 6, |i, j| (i * j) as f64 * 0.01 + i as f64);
        let dense = &a * left.kronecker(&right);
        let fast = mul_kron_right(&a, &left, &SparseMat::from_dense(&right));
        assert!((dense - fast).norm() < 1e-12);
    }

    #[test]
    fn null_space_of_rank_deficient_matrix() {
        // rows span the first two coordinates only
        let q = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let (ns, _) = null_space(&q, 1e-8, None);
        assert_eq!(ns.len(), 2);
        for v in &ns {
            assert!((&q * v).norm() < 1e-12);
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
        let (empty, _) = null_space(&DMatrix::<f64>::identity(3, 3), 1e-8, None);
        assert!(empty.is_empty());
    }

    #[test]
    fn sign_fix_prefers_positive_peak() {
        let mut v = vec![0.1, -0.9, 0.3];
        fix_sign(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
    }
}
