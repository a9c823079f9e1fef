//! Equivariance constraints on PDO coefficients and their null-space bases.
//!
//! A second-order PDO filter from a `K`-dim field to a `K'`-dim field is
//! `A0 + sum_i A_i d_i + sum_{i<=j} A_ij d_ij` with `K' x K` blocks, grouped
//! as `B0 = A0`, `B1 = [A1, A2, A3]` and
//! `B2 = [A11, A12, A13, A22, A23, A33]`. It is equivariant iff for every
//! group element
//!
//! ```text
//! rho'(g) B0 = B0 rho(g)
//! rho'(g) B1 = B1 (g (x) rho(g))
//! rho'(g) B2 = B2 (P (g (x) g) P^+ (x) rho(g))
//! ```
//!
//! and it suffices to impose this on generators. With column-stacked
//! `vec`, each line is a homogeneous system `M vec(B) = 0`.
//!
//! The stacked systems are assembled sparsely. Unknowns that no constraint
//! row couples fall into separate connected components, and the null space
//! of a block-diagonal system is the direct sum of the blocks' null spaces,
//! so each component gets its own (small) dense SVD. For permutation
//! representations the components are orbits of coefficient entries, which
//! turns a 3456-unknown SVD for the cube's regular field into 144 SVDs of
//! size 24.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::{CoreError, Result};
use crate::group::{random_rotation, Group, Rotation3};
use crate::linalg::{fix_sign, mul_kron_right, null_rows, svd_right, SparseMat, UnionFind, SPARSE_DROP_TOL};
use crate::repr::{row_major, RepKind, RepSpec, Representation};

/// Default relative singular-value threshold.
pub const DEFAULT_REL_TOL: f64 = 1e-8;
/// Number of derivative terms per order: 1, 3 and 6.
pub const ORDER_WIDTHS: [usize; 3] = [1, 3, 6];
/// Number of PDO terms (identity, 3 first-order, 6 second-order).
pub const N_TERMS: usize = 10;

/// The 6x9 matrix `P` taking `vec` of a 3x3 matrix (row-major) to the
/// coordinates `(11, 12, 13, 22, 23, 33)` of its symmetric part.
pub fn p_matrix() -> DMatrix<f64> {
    let mut p = DMatrix::zeros(6, 9);
    p[(0, 0)] = 1.0;
    p[(1, 1)] = 0.5;
    p[(1, 3)] = 0.5;
    p[(2, 2)] = 0.5;
    p[(2, 6)] = 0.5;
    p[(3, 4)] = 1.0;
    p[(4, 5)] = 0.5;
    p[(4, 7)] = 0.5;
    p[(5, 8)] = 1.0;
    p
}

/// The 9x6 pseudo-inverse `P^+`, expanding symmetric coordinates back to a
/// full 3x3 matrix.
pub fn p_dagger() -> DMatrix<f64> {
    let rows = [0usize, 1, 2, 1, 3, 4, 2, 4, 5];
    let mut pd = DMatrix::zeros(9, 6);
    for (r, &c) in rows.iter().enumerate() {
        pd[(r, c)] = 1.0;
    }
    pd
}

fn dense3(g: &Rotation3) -> DMatrix<f64> {
    DMatrix::from_fn(3, 3, |i, j| g.matrix()[(i, j)])
}

/// `P (g (x) g) P^+`, the action of `g` on second-derivative coordinates.
pub fn second_order_action(g: &Rotation3) -> DMatrix<f64> {
    let gm = dense3(g);
    p_matrix() * gm.kronecker(&gm) * p_dagger()
}

/// The derivative-index action for order `d`: `1`, `g` or `P (g (x) g) P^+`.
pub fn derivative_action(order: usize, g: &Rotation3) -> DMatrix<f64> {
    match order {
        0 => DMatrix::identity(1, 1),
        1 => dense3(g),
        2 => second_order_action(g),
        _ => panic!("PDO order {order} out of range"),
    }
}

/// Right-hand action `Y_d(g)` on `B_d`: `rho`, `g (x) rho` or
/// `P (g (x) g) P^+ (x) rho`.
pub fn order_action(order: usize, g: &Rotation3, rho_in_g: &DMatrix<f64>) -> DMatrix<f64> {
    if order == 0 {
        rho_in_g.clone()
    } else {
        derivative_action(order, g).kronecker(rho_in_g)
    }
}

/// The three dense constraint matrices `M_d = I (x) rho'(g) - Y_d(g)^T (x) I_{K'}`
/// for one group element.
pub fn constraint_blocks(
    g: &Rotation3,
    rho_in_g: &DMatrix<f64>,
    rho_out_g: &DMatrix<f64>,
) -> Result<[DMatrix<f64>; 3]> {
    if !rho_in_g.is_square() || !rho_out_g.is_square() {
        return Err(CoreError::DimensionMismatch(
            "representation matrices must be square".into(),
        ));
    }
    let kp = rho_out_g.nrows();
    let blocks = [0, 1, 2].map(|d| {
        let y = order_action(d, g, rho_in_g);
        let n = y.nrows();
        DMatrix::<f64>::identity(n, n).kronecker(rho_out_g) - y.transpose().kronecker(&DMatrix::identity(kp, kp))
    });
    Ok(blocks)
}

/// Coefficients `(B0, B1, B2)` of one PDO filter.
#[derive(Clone, Debug, PartialEq)]
pub struct PdoCoefficients {
    pub b0: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

impl PdoCoefficients {
    pub fn zeros(k_out: usize, k_in: usize) -> Self {
        PdoCoefficients {
            b0: DMatrix::zeros(k_out, k_in),
            b1: DMatrix::zeros(k_out, 3 * k_in),
            b2: DMatrix::zeros(k_out, 6 * k_in),
        }
    }

    pub fn k_out(&self) -> usize {
        self.b0.nrows()
    }

    pub fn k_in(&self) -> usize {
        self.b0.ncols()
    }

    pub fn order(&self, d: usize) -> &DMatrix<f64> {
        [&self.b0, &self.b1, &self.b2][d]
    }

    pub fn order_mut(&mut self, d: usize) -> &mut DMatrix<f64> {
        match d {
            0 => &mut self.b0,
            1 => &mut self.b1,
            2 => &mut self.b2,
            _ => panic!("PDO order {d} out of range"),
        }
    }

    /// The `K' x K` block of term `t` in the order 0, 1, 2, 3, 11, 12, 13, 22, 23, 33.
    pub fn term(&self, t: usize) -> DMatrix<f64> {
        let k = self.k_in();
        match t {
            0 => self.b0.clone(),
            1..=3 => self.b1.columns((t - 1) * k, k).into_owned(),
            4..=9 => self.b2.columns((t - 4) * k, k).into_owned(),
            _ => panic!("PDO term {t} out of range"),
        }
    }

    pub fn set_term(&mut self, t: usize, a: &DMatrix<f64>) {
        let k = self.k_in();
        match t {
            0 => self.b0.copy_from(a),
            1..=3 => self.b1.columns_mut((t - 1) * k, k).copy_from(a),
            4..=9 => self.b2.columns_mut((t - 4) * k, k).copy_from(a),
            _ => panic!("PDO term {t} out of range"),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &PdoCoefficients) {
        for d in 0..3 {
            *self.order_mut(d) += other.order(d) * alpha;
        }
    }
}

/// Orthonormal bases of the equivariant `B0`, `B1`, `B2` for one pair of
/// field representations. Basis elements are indexed with all `B0`
/// elements first, then `B1`, then `B2`.
#[derive(Clone, Debug)]
pub struct KernelBasis {
    rho_in: Representation,
    rho_out: Representation,
    bases: [Vec<DMatrix<f64>>; 3],
}

impl KernelBasis {
    pub fn rho_in(&self) -> &Representation {
        &self.rho_in
    }

    pub fn rho_out(&self) -> &Representation {
        &self.rho_out
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.bases[0].len(), self.bases[1].len(), self.bases[2].len())
    }

    pub fn len(&self) -> usize {
        self.bases.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Basis matrices of order `d`, each `K' x (w_d K)`.
    pub fn order(&self, d: usize) -> &[DMatrix<f64>] {
        &self.bases[d]
    }

    /// `(order, index within order)` of global element `j`.
    pub fn locate(&self, j: usize) -> (usize, usize) {
        let mut j = j;
        for d in 0..3 {
            if j < self.bases[d].len() {
                return (d, j);
            }
            j -= self.bases[d].len();
        }
        panic!("basis index out of range");
    }

    /// Element `j` as a full coefficient triple (other orders zero).
    pub fn element(&self, j: usize) -> PdoCoefficients {
        let (d, i) = self.locate(j);
        let mut c = PdoCoefficients::zeros(self.rho_out.dim(), self.rho_in.dim());
        c.order_mut(d).copy_from(&self.bases[d][i]);
        c
    }

    /// `sum_j w_j element(j)`.
    pub fn combine(&self, weights: &[f64]) -> Result<PdoCoefficients> {
        if weights.len() != self.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "{} weights for a basis of {}",
                weights.len(),
                self.len()
            )));
        }
        let mut c = PdoCoefficients::zeros(self.rho_out.dim(), self.rho_in.dim());
        let mut j = 0;
        for d in 0..3 {
            for b in &self.bases[d] {
                *c.order_mut(d) += b * weights[j];
                j += 1;
            }
        }
        Ok(c)
    }

    /// JSON dump `{group, rho_in, rho_out, dims, basis0, basis1, basis2}`;
    /// each basis entry is `{shape: [rows, cols], data: [row-major]}`.
    pub fn to_json(&self) -> Value {
        let dump = |list: &[DMatrix<f64>]| -> Vec<Value> {
            list.iter()
                .map(|m| json!({"shape": [m.nrows(), m.ncols()], "data": row_major(m)}))
                .collect()
        };
        let (a, b, c) = self.dims();
        json!({
            "group": self.rho_in.group_spec().to_string(),
            "rho_in": self.rho_in.kind().to_string(),
            "rho_out": self.rho_out.kind().to_string(),
            "dims": [a, b, c],
            "basis0": dump(&self.bases[0]),
            "basis1": dump(&self.bases[1]),
            "basis2": dump(&self.bases[2]),
        })
    }

    /// Inverse of [`to_json`](Self::to_json). The representations are
    /// rebuilt over `group` from their kind strings.
    pub fn from_json(v: &Value, group: &Group) -> Result<Self> {
        let field = |k: &str| -> Result<&Value> {
            v.get(k)
                .ok_or_else(|| CoreError::InvalidParameter(format!("basis dump lacks '{k}'")))
        };
        let spec_of = |k: &str| -> Result<RepSpec> {
            field(k)?
                .as_str()
                .ok_or_else(|| CoreError::InvalidParameter(format!("'{k}' is not a string")))?
                .parse()
        };
        let rho_in = spec_of("rho_in")?.build(group)?;
        let rho_out = spec_of("rho_out")?.build(group)?;
        let mut bases: [Vec<DMatrix<f64>>; 3] = Default::default();
        for (d, list) in bases.iter_mut().enumerate() {
            let entries: Vec<Value> = serde_json::from_value(field(&format!("basis{d}"))?.clone())?;
            for e in entries {
                let (shape, data): ([usize; 2], Vec<f64>) = (
                    serde_json::from_value(e["shape"].clone())?,
                    serde_json::from_value(e["data"].clone())?,
                );
                if shape != [rho_out.dim(), ORDER_WIDTHS[d] * rho_in.dim()] || data.len() != shape[0] * shape[1] {
                    return Err(CoreError::DimensionMismatch(format!(
                        "basis{d} entry of shape {shape:?}"
                    )));
                }
                list.push(DMatrix::from_row_slice(shape[0], shape[1], &data));
            }
        }
        Ok(KernelBasis { rho_in, rho_out, bases })
    }
}

/// Generator elements with their representation matrices.
fn generator_matrices(
    rho_in: &Representation,
    rho_out: &Representation,
) -> Result<Vec<(Rotation3, DMatrix<f64>, DMatrix<f64>)>> {
    let group = rho_in.group();
    match group {
        Group::Finite(g) => Ok(g
            .generator_ids()
            .iter()
            .map(|&i| (*g.element(i), rho_in.matrix_at(i).clone(), rho_out.matrix_at(i).clone()))
            .collect()),
        Group::SO3 => group
            .constraint_generators()
            .into_iter()
            .map(|g| Ok((g, rho_in.eval(&g)?, rho_out.eval(&g)?)))
            .collect(),
    }
}

fn check_same_group(rho_in: &Representation, rho_out: &Representation) -> Result<()> {
    if !rho_in.group().same_as(rho_out.group()) {
        return Err(CoreError::GroupMismatch(
            rho_in.group_spec().to_string(),
            rho_out.group_spec().to_string(),
        ));
    }
    Ok(())
}

/// Sparse rows of the stacked order-`d` system over all generators.
/// Unknown `(o, c)` (entry of `B_d`) has column index `c * K' + o`.
fn stacked_rows(
    order: usize,
    gens: &[(Rotation3, DMatrix<f64>, DMatrix<f64>)],
    k_out: usize,
) -> Vec<Vec<(usize, f64)>> {
    let mut rows = Vec::new();
    let mut scratch: Vec<(usize, f64)> = Vec::new();
    for (g, ri, ro) in gens {
        let y = SparseMat::from_dense(&order_action(order, g, ri));
        let r_rows = SparseMat::from_dense(ro).rows();
        for c in 0..y.ncols {
            for o in 0..k_out {
                scratch.clear();
                scratch.extend(r_rows[o].iter().map(|&(op, v)| (c * k_out + op, v)));
                scratch.extend(y.cols[c].iter().map(|&(cp, v)| (cp * k_out + o, -v)));
                scratch.sort_unstable_by_key(|e| e.0);
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(scratch.len());
                for &(col, v) in &scratch {
                    match row.last_mut() {
                        Some(last) if last.0 == col => last.1 += v,
                        _ => row.push((col, v)),
                    }
                }
                row.retain(|e| e.1.abs() > SPARSE_DROP_TOL);
                if !row.is_empty() {
                    rows.push(row);
                }
            }
        }
    }
    rows
}

/// Orthonormal null space of a sparse homogeneous system with `n` unknowns,
/// solved per connected component. The singular-value threshold is
/// `rel_tol` times the largest singular value over all components.
pub fn sparse_null_space(rows: &[Vec<(usize, f64)>], n: usize, rel_tol: f64) -> Vec<DVector<f64>> {
    let mut uf = UnionFind::new(n);
    for row in rows {
        for e in &row[1..] {
            uf.union(row[0].0, e.0);
        }
    }
    let mut comp_of_root: HashMap<usize, usize> = HashMap::new();
    let mut comp_cols: Vec<Vec<usize>> = Vec::new();
    let mut local = vec![0usize; n];
    for col in 0..n {
        let root = uf.find(col);
        let id = *comp_of_root.entry(root).or_insert_with(|| {
            comp_cols.push(Vec::new());
            comp_cols.len() - 1
        });
        local[col] = comp_cols[id].len();
        comp_cols[id].push(col);
    }
    let mut comp_rows: Vec<Vec<usize>> = vec![Vec::new(); comp_cols.len()];
    for (r, row) in rows.iter().enumerate() {
        comp_rows[comp_of_root[&uf.find(row[0].0)]].push(r);
    }

    let svds: Vec<(Vec<f64>, DMatrix<f64>)> = comp_cols
        .iter()
        .zip(&comp_rows)
        .map(|(cols, rs)| {
            let mut q = DMatrix::zeros(rs.len(), cols.len());
            for (i, &r) in rs.iter().enumerate() {
                for &(col, v) in &rows[r] {
                    q[(i, local[col])] = v;
                }
            }
            svd_right(&q)
        })
        .collect();
    let sigma_max = svds.iter().flat_map(|(sv, _)| sv.iter()).cloned().fold(0.0, f64::max);

    let mut out = Vec::new();
    for (cols, (sv, v_t)) in comp_cols.iter().zip(&svds) {
        for v in null_rows(sv, v_t, rel_tol * sigma_max, sigma_max == 0.0) {
            let mut full = DVector::zeros(n);
            for (li, &col) in cols.iter().enumerate() {
                full[col] = v[li];
            }
            fix_sign(full.as_mut_slice());
            out.push(full);
        }
    }
    out
}

/// Solves the generator-stacked constraints for `rho_in -> rho_out`.
pub fn solve_basis(rho_in: &Representation, rho_out: &Representation, rel_tol: f64) -> Result<KernelBasis> {
    check_same_group(rho_in, rho_out)?;
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(CoreError::InvalidParameter(format!("rel_tol {rel_tol} not in (0, 1)")));
    }
    let gens = generator_matrices(rho_in, rho_out)?;
    let (k, kp) = (rho_in.dim(), rho_out.dim());
    let bases = [0, 1, 2].map(|d| {
        let cols = ORDER_WIDTHS[d] * k;
        let rows = stacked_rows(d, &gens, kp);
        sparse_null_space(&rows, kp * cols, rel_tol)
            .into_iter()
            .map(|v| DMatrix::from_column_slice(kp, cols, v.as_slice()))
            .collect()
    });
    Ok(KernelBasis {
        rho_in: rho_in.clone(),
        rho_out: rho_out.clone(),
        bases,
    })
}

/// Worst Frobenius residual `||rho'(g) B - B Y_d(g)||` over the given
/// elements and all basis matrices.
fn residual_over(basis: &KernelBasis, elems: &[(Rotation3, DMatrix<f64>, DMatrix<f64>)]) -> f64 {
    let mut worst = 0.0f64;
    for (g, ri, ro) in elems {
        let ri_s = SparseMat::from_dense(ri);
        let ro_s = SparseMat::from_dense(ro);
        for d in 0..3 {
            let left = derivative_action(d, g);
            for b in basis.order(d) {
                let lhs = ro_s.left_mul(b);
                let rhs = mul_kron_right(b, &left, &ri_s);
                worst = worst.max((lhs - rhs).norm());
            }
        }
    }
    worst
}

/// Full-group check of a basis: all elements for finite groups,
/// `n_samples` Haar-random rotations (seeded) for SO(3).
pub fn verify_basis(basis: &KernelBasis, n_samples: usize, seed: u64) -> Result<f64> {
    let (ri, ro) = (basis.rho_in(), basis.rho_out());
    let elems: Vec<_> = match ri.group() {
        Group::Finite(g) => (0..g.order())
            .map(|i| (*g.element(i), ri.matrix_at(i).clone(), ro.matrix_at(i).clone()))
            .collect(),
        Group::SO3 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n_samples)
                .map(|_| {
                    let g = random_rotation(&mut rng);
                    Ok((g, ri.eval(&g)?, ro.eval(&g)?))
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(residual_over(basis, &elems))
}

/// Largest deviation of the vectorized Gram matrix of each order from the
/// identity.
pub fn orthonormality_defect(basis: &KernelBasis) -> f64 {
    let mut worst = 0.0f64;
    for d in 0..3 {
        let list = basis.order(d);
        for (i, a) in list.iter().enumerate() {
            for (j, b) in list.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((a.dot(b) - target).abs());
            }
        }
    }
    worst
}

/// All-pairs dims for a family of field kinds: `table[i][j]` is the entry
/// for input `kinds[i]` and output `kinds[j]`.
pub fn dimension_table(group: &Group, kinds: &[RepSpec], rel_tol: f64) -> Result<Vec<Vec<(usize, usize, usize)>>> {
    let reps: Vec<Representation> = kinds.iter().map(|k| k.build(group)).collect::<Result<_>>()?;
    reps.iter()
        .map(|ri| reps.iter().map(|ro| Ok(solve_basis(ri, ro, rel_tol)?.dims())).collect())
        .collect()
}

/// One block of a [`BlockwiseBasis`]: a factor instance pair and the
/// shared pair basis it uses.
#[derive(Clone, Debug)]
pub struct BasisBlock {
    pub out_offset: usize,
    pub in_offset: usize,
    pub pair: usize,
}

/// Basis for maps between direct sums, built from independently solved
/// factor pairs placed at their block positions.
///
/// Element order: all `B0` elements (block by block), then `B1`, then `B2`.
#[derive(Clone, Debug)]
pub struct BlockwiseBasis {
    rho_in: Representation,
    rho_out: Representation,
    pairs: Vec<Arc<KernelBasis>>,
    blocks: Vec<BasisBlock>,
    /// `(order, block, index within the pair basis)` per element.
    index: Vec<(usize, usize, usize)>,
}

fn factor_key(rep: &Representation) -> RepKind {
    match rep.kind() {
        RepKind::Custom(name) => RepKind::Custom(format!(
            "{name}@{:p}",
            rep.matrices().map_or(std::ptr::null(), |m| m.as_ptr())
        )),
        k => k.clone(),
    }
}

impl BlockwiseBasis {
    pub fn rho_in(&self) -> &Representation {
        &self.rho_in
    }

    pub fn rho_out(&self) -> &Representation {
        &self.rho_out
    }

    pub fn pairs(&self) -> &[Arc<KernelBasis>] {
        &self.pairs
    }

    pub fn blocks(&self) -> &[BasisBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let count = |d| self.index.iter().filter(|e| e.0 == d).count();
        (count(0), count(1), count(2))
    }

    /// `(order, block, index within the pair basis)` of element `j`.
    pub fn locate(&self, j: usize) -> (usize, usize, usize) {
        self.index[j]
    }

    /// Element `j` embedded at its block position in a full-size triple.
    pub fn element(&self, j: usize) -> PdoCoefficients {
        let mut c = PdoCoefficients::zeros(self.rho_out.dim(), self.rho_in.dim());
        self.add_element(&mut c, j, 1.0);
        c
    }

    fn add_element(&self, c: &mut PdoCoefficients, j: usize, w: f64) {
        let (d, blk, i) = self.index[j];
        let block = &self.blocks[blk];
        let pair = &self.pairs[block.pair];
        let local = &pair.order(d)[i];
        let (kpf, kf) = (pair.rho_out().dim(), pair.rho_in().dim());
        let k = self.rho_in.dim();
        let target = c.order_mut(d);
        for t in 0..ORDER_WIDTHS[d] {
            let mut dst = target.view_mut((block.out_offset, t * k + block.in_offset), (kpf, kf));
            dst += local.columns(t * kf, kf) * w;
        }
    }

    pub fn combine(&self, weights: &[f64]) -> Result<PdoCoefficients> {
        if weights.len() != self.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "{} weights for a basis of {}",
                weights.len(),
                self.len()
            )));
        }
        let mut c = PdoCoefficients::zeros(self.rho_out.dim(), self.rho_in.dim());
        for (j, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                self.add_element(&mut c, j, w);
            }
        }
        Ok(c)
    }

    /// The assembled basis as a plain [`KernelBasis`] over the full
    /// representations.
    pub fn to_kernel_basis(&self) -> KernelBasis {
        let mut bases: [Vec<DMatrix<f64>>; 3] = Default::default();
        for j in 0..self.len() {
            let d = self.index[j].0;
            bases[d].push(self.element(j).order(d).clone());
        }
        KernelBasis {
            rho_in: self.rho_in.clone(),
            rho_out: self.rho_out.clone(),
            bases,
        }
    }
}

/// Solves each (output factor, input factor) pair once and assembles a
/// basis for the direct sums. Pair bases are shared between repeated
/// factor instances.
pub fn solve_basis_blockwise(
    rho_in: &Representation,
    rho_out: &Representation,
    rel_tol: f64,
) -> Result<BlockwiseBasis> {
    check_same_group(rho_in, rho_out)?;
    let ins = rho_in.factor_instances();
    let outs = rho_out.factor_instances();
    let mut cache: HashMap<(RepKind, RepKind), usize> = HashMap::new();
    let mut pairs = Vec::new();
    let mut blocks = Vec::new();
    for (fo, out_offset) in &outs {
        for (fi, in_offset) in &ins {
            let key = (factor_key(fi), factor_key(fo));
            let pair = match cache.get(&key) {
                Some(&p) => p,
                None => {
                    pairs.push(Arc::new(solve_basis(fi, fo, rel_tol)?));
                    cache.insert(key, pairs.len() - 1);
                    pairs.len() - 1
                }
            };
            blocks.push(BasisBlock {
                out_offset: *out_offset,
                in_offset: *in_offset,
                pair,
            });
        }
    }
    let mut index = Vec::new();
    for d in 0..3 {
        for (b, block) in blocks.iter().enumerate() {
            for i in 0..pairs[block.pair].order(d).len() {
                index.push((d, b, i));
            }
        }
    }
    Ok(BlockwiseBasis {
        rho_in: rho_in.clone(),
        rho_out: rho_out.clone(),
        pairs,
        blocks,
        index,
    })
}
