//! Slow, direct reference computations for cross-checking the solver.
//!
//! Nothing here shares code with `pdo3d-core`. Constraints are taken over
//! every element of a finite group (not just its generators) and the null
//! space is read off the eigenvalues of the accumulated Gram matrix
//! `sum_g C_g^T C_g`, where `C_g vec(B) = vec(rho'(g) B - B Y(g))` with
//! column-stacked `vec`.

use nalgebra::{DMatrix, DVector, Matrix3};

/// Action of `g` on the symmetric second-derivative coordinates
/// `(11, 12, 13, 22, 23, 33)`: column `e` holds the coordinates of
/// `g S_e g^T`, where `S_e` is the symmetric matrix with coordinate vector
/// `e`.
pub fn symmetric_action(g: &Matrix3<f64>) -> DMatrix<f64> {
    const PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
    let mut out = DMatrix::zeros(6, 6);
    for (e, &(a, b)) in PAIRS.iter().enumerate() {
        let mut s = Matrix3::zeros();
        s[(a, b)] = 1.0;
        s[(b, a)] = 1.0;
        let t = g * s * g.transpose();
        for (r, &(i, j)) in PAIRS.iter().enumerate() {
            out[(r, e)] = t[(i, j)];
        }
    }
    out
}

fn dense3(g: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(3, 3, |i, j| g[(i, j)])
}

/// The right-hand actions `Y(g)` for orders 0, 1 and 2.
pub fn order_actions(g: &Matrix3<f64>, rho_in: &DMatrix<f64>) -> [DMatrix<f64>; 3] {
    [
        rho_in.clone(),
        dense3(g).kronecker(rho_in),
        symmetric_action(g).kronecker(rho_in),
    ]
}

/// Accumulates `C^T C` for `C = I_n (x) R - Y^T (x) I_{K'}` into `gram`.
///
/// By the mixed-product rule
/// `C^T C = I (x) R^T R - Y^T (x) R^T - Y (x) R + Y Y^T (x) I`, evaluated
/// entrywise rather than through explicit Kronecker products so memory
/// stays at one Gram matrix.
pub fn accumulate_gram(gram: &mut DMatrix<f64>, y: &DMatrix<f64>, r: &DMatrix<f64>) {
    let n = y.nrows();
    let kp = r.nrows();
    assert_eq!(gram.nrows(), n * kp);
    let rtr = r.transpose() * r;
    let yyt = y * y.transpose();
    // column index of vec(B) for entry (i, a) of B is a * kp + i
    for b in 0..n {
        for j in 0..kp {
            let col = b * kp + j;
            for a in 0..n {
                let yab = y[(a, b)];
                let yba = y[(b, a)];
                let yy = yyt[(a, b)];
                for i in 0..kp {
                    let mut v = yy * if i == j { 1.0 } else { 0.0 };
                    if a == b {
                        v += rtr[(i, j)];
                    }
                    // -(Y^T (x) R^T)[(a,i),(b,j)] - (Y (x) R)[(a,i),(b,j)]
                    v -= yba * r[(j, i)] + yab * r[(i, j)];
                    gram[(a * kp + i, col)] += v;
                }
            }
        }
    }
}

/// Gram matrices for orders 0, 1, 2 summed over every listed element.
pub fn all_element_grams(
    rotations: &[Matrix3<f64>],
    rho_in: &[DMatrix<f64>],
    rho_out: &[DMatrix<f64>],
) -> [DMatrix<f64>; 3] {
    let k = rho_in[0].nrows();
    let kp = rho_out[0].nrows();
    let mut grams = [1usize, 3, 6].map(|d| DMatrix::zeros(d * k * kp, d * k * kp));
    for ((g, ri), ro) in rotations.iter().zip(rho_in).zip(rho_out) {
        let ys = order_actions(g, ri);
        for (gram, y) in grams.iter_mut().zip(ys.iter()) {
            accumulate_gram(gram, y, ro);
        }
    }
    grams
}

/// Number of eigenvalues of a positive semidefinite `gram` below
/// `rel_tol * lambda_max` (all of them if `gram` is zero).
pub fn null_dim(gram: &DMatrix<f64>, rel_tol: f64) -> usize {
    if gram.nrows() == 0 {
        return 0;
    }
    let ev = gram.clone().symmetric_eigenvalues();
    let max = ev.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    ev.iter().filter(|&&x| max == 0.0 || x < rel_tol * max).count()
}

/// Orthonormal null vectors of `gram`, same threshold as [`null_dim`].
pub fn null_vectors(gram: &DMatrix<f64>, rel_tol: f64) -> Vec<DVector<f64>> {
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    (0..gram.nrows())
        .filter(|&i| max == 0.0 || eig.eigenvalues[i] < rel_tol * max)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect()
}

/// `(n_B0, n_B1, n_B2)` from all-element stacking.
pub fn all_element_dims(rotations: &[Matrix3<f64>], rho_in: &[DMatrix<f64>], rho_out: &[DMatrix<f64>]) -> [usize; 3] {
    all_element_grams(rotations, rho_in, rho_out).map(|g| null_dim(&g, 1e-9))
}

/// Closes a generator set under multiplication by brute force, comparing
/// against every element found so far. Identity first.
pub fn brute_closure(gens: &[Matrix3<f64>], tol: f64) -> Vec<Matrix3<f64>> {
    let mut elems = vec![Matrix3::identity()];
    let mut changed = true;
    while changed {
        changed = false;
        let snapshot = elems.clone();
        for a in &snapshot {
            for g in gens {
                let p = a * g;
                if !elems.iter().any(|e| (e - p).norm() < tol) {
                    elems.push(p);
                    changed = true;
                }
            }
        }
        assert!(elems.len() <= 1000, "closure does not terminate");
    }
    elems
}

/// Regular representation matrices by brute-force product lookup.
pub fn brute_regular(elems: &[Matrix3<f64>], tol: f64) -> Vec<DMatrix<f64>> {
    let n = elems.len();
    elems
        .iter()
        .map(|a| {
            let mut m = DMatrix::zeros(n, n);
            for (j, b) in elems.iter().enumerate() {
                let p = a * b;
                let i = elems.iter().position(|e| (e - p).norm() < tol).expect("closed");
                m[(i, j)] = 1.0;
            }
            m
        })
        .collect()
}
