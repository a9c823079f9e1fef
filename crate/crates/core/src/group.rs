//! 3D rotations and the finite rotation groups.
//!
//! Finite groups are realized as explicit element lists closed under
//! multiplication, with a Cayley table over element indices. Element 0 is
//! always the identity; the rest follow breadth-first discovery order, so
//! every index-based structure built on top (permutation representations,
//! cosets, basis dumps) is reproducible run to run.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Frobenius distance below which two group elements are identified.
pub const DEFAULT_DEDUP_TOL: f64 = 1e-9;
/// Upper bound on the size of a generated group.
pub const DEFAULT_CLOSURE_CAP: usize = 360;

const ROTATION_TOL: f64 = 1e-12;

/// A proper rotation of R^3 stored as a 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3(Matrix3::identity())
    }

    /// Validating constructor: `m^T m = I` and `det m = 1` within `1e-12`.
    pub fn try_new(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if !m.iter().all(|x| x.is_finite()) || ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(CoreError::NotARotation(format!(
                "orthogonality residual {ortho:.3e}, det {det}"
            )));
        }
        Ok(Rotation3(m))
    }

    /// Wraps a matrix known to be a rotation up to rounding (e.g. a product
    /// of rotations).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation3(m)
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::try_new(Matrix3::from_fn(|i, j| rows[i][j]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation3(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation3) -> Self {
        Rotation3(self.0 * other.0)
    }

    /// Frobenius distance between the two matrices.
    pub fn distance(&self, other: &Rotation3) -> f64 {
        (self.0 - other.0).norm()
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Returns the signed permutation this rotation equals, if every entry
    /// is within `tol` of -1, 0 or 1 with one nonzero per row: `perm[r]` is
    /// the column of the nonzero in row `r` and `sign[r]` its sign.
    pub fn as_signed_permutation(&self, tol: f64) -> Option<([usize; 3], [i8; 3])> {
        let mut perm = [0usize; 3];
        let mut sign = [0i8; 3];
        let mut used = [false; 3];
        for r in 0..3 {
            let mut found = None;
            for c in 0..3 {
                let v = self.0[(r, c)];
                if (v.abs() - 1.0).abs() <= tol {
                    if found.is_some() {
                        return None;
                    }
                    found = Some((c, if v > 0.0 { 1 } else { -1 }));
                } else if v.abs() > tol {
                    return None;
                }
            }
            let (c, s) = found?;
            if used[c] {
                return None;
            }
            used[c] = true;
            perm[r] = c;
            sign[r] = s;
        }
        Some((perm, sign))
    }

    /// ZYZ Euler angles `(alpha, beta, gamma)` with
    /// `self = Z(alpha) Y(beta) Z(gamma)` and `beta` in `[0, pi]`.
    ///
    /// When `|sin beta| < 1e-9` the decomposition is degenerate; `gamma` is
    /// set to zero and the whole z-rotation is folded into `alpha`.
    pub fn euler_zyz(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let beta = m[(2, 2)].clamp(-1.0, 1.0).acos();
        if beta.sin().abs() < 1e-9 {
            if m[(2, 2)] > 0.0 {
                (m[(1, 0)].atan2(m[(0, 0)]), 0.0, 0.0)
            } else {
                // g = Z(alpha) Y(pi): first column of g is (-cos a, -sin a, 0)
                ((-m[(1, 0)]).atan2(-m[(0, 0)]), PI, 0.0)
            }
        } else {
            let alpha = m[(1, 2)].atan2(m[(0, 2)]);
            let gamma = m[(2, 1)].atan2(-m[(2, 0)]);
            (alpha, beta, gamma)
        }
    }

    pub fn from_euler_zyz(alpha: f64, beta: f64, gamma: f64) -> Self {
        Rotation3(rot_z(alpha).0 * rot_y(beta).0 * rot_z(gamma).0)
    }
}

impl std::ops::Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        self.compose(&rhs)
    }
}

/// Rotation by `alpha` radians about the z axis.
pub fn rot_z(alpha: f64) -> Rotation3 {
    let (s, c) = alpha.sin_cos();
    Rotation3(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
}

/// Rotation by `beta` radians about the y axis.
pub fn rot_y(beta: f64) -> Rotation3 {
    let (s, c) = beta.sin_cos();
    Rotation3(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
}

/// Haar-uniform random rotation via ZYZ angles with `beta = acos(1 - 2u)`.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation3 {
    let alpha = rng.random::<f64>() * 2.0 * PI;
    let gamma = rng.random::<f64>() * 2.0 * PI;
    let beta = (1.0 - 2.0 * rng.random::<f64>()).clamp(-1.0, 1.0).acos();
    Rotation3::from_euler_zyz(alpha, beta, gamma)
}

/// Snap entries within 1e-14 of -1, 0 or 1 to the exact value, so that
/// quarter and half turns built from `sin`/`cos` are exact signed
/// permutations.
fn snap(m: Rotation3) -> Rotation3 {
    Rotation3(m.0.map(|v| {
        let r = v.round();
        if r.abs() <= 1.0 && (v - r).abs() < 1e-14 {
            r + 0.0
        } else {
            v
        }
    }))
}

/// The supported rotation groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupSpec {
    /// Klein four-group of a rectangle.
    V,
    /// Tetrahedral group, 12 elements.
    T,
    /// Octahedral (cubic) group, 24 elements.
    O,
    /// Icosahedral group, 60 elements.
    I,
    /// Cyclic group of rotations by multiples of `2 pi / n` about z.
    Cyclic(u32),
    /// Dihedral group of order `2n`.
    Dihedral(u32),
    SO3,
}

impl GroupSpec {
    pub fn is_finite(&self) -> bool {
        !matches!(self, GroupSpec::SO3)
    }

    /// Build from a kind name and the `n` of `CN`/`DN`.
    pub fn from_kind(kind: &str, n: Option<u32>) -> Result<Self> {
        let need_n = || {
            n.filter(|&n| n >= 1)
                .ok_or_else(|| CoreError::InvalidGroupSpec(format!("{kind} requires n >= 1")))
        };
        match kind {
            "V" => Ok(GroupSpec::V),
            "T" => Ok(GroupSpec::T),
            "O" => Ok(GroupSpec::O),
            "I" => Ok(GroupSpec::I),
            "SO3" => Ok(GroupSpec::SO3),
            "CN" | "C" => Ok(GroupSpec::Cyclic(need_n()?)),
            "DN" | "D" => Ok(GroupSpec::Dihedral(need_n()?)),
            other => Err(CoreError::InvalidGroupSpec(other.to_string())),
        }
    }

    /// Nominal group order (`None` for SO(3)).
    pub fn order(&self) -> Option<usize> {
        match *self {
            GroupSpec::V => Some(4),
            GroupSpec::T => Some(12),
            GroupSpec::O => Some(24),
            GroupSpec::I => Some(60),
            GroupSpec::Cyclic(n) => Some(n as usize),
            GroupSpec::Dihedral(n) => Some(2 * n as usize),
            GroupSpec::SO3 => None,
        }
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupSpec::V => write!(f, "V"),
            GroupSpec::T => write!(f, "T"),
            GroupSpec::O => write!(f, "O"),
            GroupSpec::I => write!(f, "I"),
            GroupSpec::Cyclic(n) => write!(f, "CN-{n}"),
            GroupSpec::Dihedral(n) => write!(f, "DN-{n}"),
            GroupSpec::SO3 => write!(f, "SO3"),
        }
    }
}

impl FromStr for GroupSpec {
    type Err = CoreError;

    /// Accepts `V`, `T`, `O`, `I`, `SO3`, `CN-<n>` and `DN-<n>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('-') {
            Some((kind, n)) => {
                let n = n
                    .parse::<u32>()
                    .map_err(|_| CoreError::InvalidGroupSpec(s.to_string()))?;
                Self::from_kind(kind, Some(n))
            }
            None => Self::from_kind(s, None),
        }
    }
}

/// Generator matrices of a finite group.
///
/// `V`, `T`, `O` and `I` use the tabulated generators (with the golden ratio
/// for `I`); `CN` is generated by `Z(2 pi / n)` and `DN` additionally by the
/// half turn `diag(1, -1, -1)`.
pub fn generators_of(spec: GroupSpec) -> Result<Vec<Rotation3>> {
    let r = |rows: [[f64; 3]; 3]| Rotation3(Matrix3::from_fn(|i, j| rows[i][j]));
    let half_z = r([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]);
    let half_x = r([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]);
    let gens = match spec {
        GroupSpec::V => vec![half_z, half_x],
        GroupSpec::T => vec![r([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), half_z],
        GroupSpec::O => vec![
            r([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
            r([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]),
        ],
        GroupSpec::I => {
            let phi = (1.0 + 5f64.sqrt()) / 2.0;
            vec![
                half_z,
                r([
                    [(1.0 - phi) / 2.0, phi / 2.0, -0.5],
                    [-phi / 2.0, -0.5, (1.0 - phi) / 2.0],
                    [-0.5, (phi - 1.0) / 2.0, phi / 2.0],
                ]),
            ]
        }
        GroupSpec::Cyclic(n) | GroupSpec::Dihedral(n) if n == 0 => {
            return Err(CoreError::InvalidGroupSpec(format!("{spec}: n must be >= 1")));
        }
        GroupSpec::Cyclic(n) => vec![snap(rot_z(2.0 * PI / n as f64))],
        GroupSpec::Dihedral(n) => vec![snap(rot_z(2.0 * PI / n as f64)), half_x],
        GroupSpec::SO3 => return Err(CoreError::InfiniteGroup(spec.to_string())),
    };
    Ok(gens)
}

/// A constructed symmetry group: either a finite group with its table or
/// SO(3) itself.
#[derive(Clone, Debug)]
pub enum Group {
    Finite(Arc<FiniteRotationGroup>),
    SO3,
}

impl Group {
    pub fn build(spec: GroupSpec) -> Result<Self> {
        match spec {
            GroupSpec::SO3 => Ok(Group::SO3),
            s => Ok(Group::Finite(FiniteRotationGroup::build(s)?)),
        }
    }

    pub fn spec(&self) -> GroupSpec {
        match self {
            Group::Finite(g) => g.spec().expect("groups are built from a spec"),
            Group::SO3 => GroupSpec::SO3,
        }
    }

    pub fn finite(&self) -> Option<&Arc<FiniteRotationGroup>> {
        match self {
            Group::Finite(g) => Some(g),
            Group::SO3 => None,
        }
    }

    /// The elements whose constraints are stacked by the solver: the group
    /// generators for finite groups, `Z(1)` and `Y(1)` for SO(3).
    pub fn constraint_generators(&self) -> Vec<Rotation3> {
        match self {
            Group::Finite(g) => g.generator_ids().iter().map(|&i| *g.element(i)).collect(),
            Group::SO3 => vec![rot_z(1.0), rot_y(1.0)],
        }
    }

    pub fn same_as(&self, other: &Group) -> bool {
        match (self, other) {
            (Group::SO3, Group::SO3) => true,
            (Group::Finite(a), Group::Finite(b)) => Arc::ptr_eq(a, b) || (a.spec().is_some() && a.spec() == b.spec()),
            _ => false,
        }
    }
}

/// A finite rotation group with its Cayley table.
#[derive(Clone, Debug)]
pub struct FiniteRotationGroup {
    spec: Option<GroupSpec>,
    elements: Vec<Rotation3>,
    cayley: Vec<Vec<usize>>,
    generator_ids: Vec<usize>,
    dedup_tol: f64,
}

impl FiniteRotationGroup {
    /// The group named by `spec`, closed with the default tolerance and cap.
    pub fn build(spec: GroupSpec) -> Result<Arc<Self>> {
        let gens = generators_of(spec)?;
        let mut group = generate_closure(&gens, DEFAULT_DEDUP_TOL, DEFAULT_CLOSURE_CAP)?;
        group.spec = Some(spec);
        Ok(Arc::new(group))
    }

    pub fn spec(&self) -> Option<GroupSpec> {
        self.spec
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[Rotation3] {
        &self.elements
    }

    pub fn element(&self, i: usize) -> &Rotation3 {
        &self.elements[i]
    }

    /// `cayley()[i][j]` is the index of `elements[i] * elements[j]`.
    pub fn cayley(&self) -> &[Vec<usize>] {
        &self.cayley
    }

    pub fn product(&self, i: usize, j: usize) -> usize {
        self.cayley[i][j]
    }

    pub fn generator_ids(&self) -> &[usize] {
        &self.generator_ids
    }

    pub fn identity_id(&self) -> usize {
        0
    }

    pub fn dedup_tol(&self) -> f64 {
        self.dedup_tol
    }

    pub fn inverse(&self, i: usize) -> usize {
        self.cayley[i]
            .iter()
            .position(|&k| k == 0)
            .expect("closed group has inverses")
    }

    /// Index of the element equal to `g` within the dedup tolerance.
    pub fn find(&self, g: &Rotation3) -> Option<usize> {
        find_in(&self.elements, g, self.dedup_tol)
    }

    /// Closure of `ids` under the Cayley table; returns sorted indices.
    pub fn subgroup_generated_by(&self, ids: &[usize]) -> Vec<usize> {
        let mut member = vec![false; self.order()];
        member[0] = true;
        let mut queue: VecDeque<usize> = VecDeque::from([0]);
        while let Some(a) = queue.pop_front() {
            for &g in ids {
                let p = self.cayley[a][g];
                if !member[p] {
                    member[p] = true;
                    queue.push_back(p);
                }
            }
        }
        (0..self.order()).filter(|&i| member[i]).collect()
    }

    /// JSON dump `{kind, size, elements, cayley, generators}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.spec.map(|s| s.to_string()).unwrap_or_else(|| "custom".into()),
            "size": self.order(),
            "elements": self.elements.iter().map(|e| e.row_major().to_vec()).collect::<Vec<_>>(),
            "cayley": self.cayley,
            "generators": self.generator_ids,
        })
    }
}

fn find_in(elements: &[Rotation3], g: &Rotation3, tol: f64) -> Option<usize> {
    elements.iter().position(|e| e.distance(g) < tol)
}

/// Breadth-first product closure of `gens`.
///
/// Elements are identified when their Frobenius distance is below
/// `dedup_tol`. Fails once more than `cap` distinct elements appear.
pub fn generate_closure(gens: &[Rotation3], dedup_tol: f64, cap: usize) -> Result<FiniteRotationGroup> {
    if gens.is_empty() {
        return Err(CoreError::InvalidParameter("generator list is empty".into()));
    }
    for g in gens {
        Rotation3::try_new(g.0)?;
    }
    let mut elements = vec![Rotation3::identity()];
    let mut queue = VecDeque::from([0usize]);
    while let Some(a) = queue.pop_front() {
        for g in gens {
            let p = elements[a].compose(g);
            if find_in(&elements, &p, dedup_tol).is_none() {
                if elements.len() >= cap {
                    return Err(CoreError::ClosureOverflow { cap });
                }
                elements.push(p);
                queue.push_back(elements.len() - 1);
            }
        }
    }
    let n = elements.len();
    let mut cayley = vec![vec![0usize; n]; n];
    for i in 0..n {
        for j in 0..n {
            let p = elements[i].compose(&elements[j]);
            cayley[i][j] = find_in(&elements, &p, dedup_tol).ok_or(CoreError::ClosureOverflow { cap })?;
        }
    }
    let generator_ids = gens
        .iter()
        .map(|g| find_in(&elements, g, dedup_tol).expect("generator is in its closure"))
        .collect();
    Ok(FiniteRotationGroup {
        spec: None,
        elements,
        cayley,
        generator_ids,
        dedup_tol,
    })
}

/// Checks that `ids` is closed under the Cayley table and contains the
/// identity. Returns the violating pair otherwise.
pub fn validate_subgroup(group: &FiniteRotationGroup, ids: &[usize]) -> Result<()> {
    let n = group.order();
    let mut member = vec![false; n];
    for &i in ids {
        if i >= n {
            return Err(CoreError::InvalidParameter(format!("element index {i} out of range")));
        }
        member[i] = true;
    }
    if !member[0] {
        return Err(CoreError::NotASubgroup(0, 0));
    }
    for &a in ids {
        for &b in ids {
            if !member[group.product(a, b)] {
                return Err(CoreError::NotASubgroup(a, b));
            }
        }
    }
    Ok(())
}

/// Left cosets `gH`, each sorted, ordered by smallest member. The first coset
/// is `H` itself.
pub fn left_cosets(group: &FiniteRotationGroup, subgroup_ids: &[usize]) -> Result<Vec<Vec<usize>>> {
    validate_subgroup(group, subgroup_ids)?;
    let mut assigned = vec![false; group.order()];
    let mut cosets = Vec::new();
    for g in 0..group.order() {
        if assigned[g] {
            continue;
        }
        let mut coset: Vec<usize> = subgroup_ids.iter().map(|&h| group.product(g, h)).collect();
        coset.sort_unstable();
        coset.dedup();
        for &c in &coset {
            assigned[c] = true;
        }
        cosets.push(coset);
    }
    Ok(cosets)
}

/// Indices of the copy of `sub_spec` (built from its canonical generators)
/// inside `group`.
pub fn embed_subgroup(group: &FiniteRotationGroup, sub_spec: GroupSpec) -> Result<Vec<usize>> {
    let gens = generators_of(sub_spec)?;
    let mut ids = Vec::with_capacity(gens.len());
    for (index, g) in gens.iter().enumerate() {
        let id = group.find(g).ok_or_else(|| CoreError::EmbeddingFailed {
            spec: sub_spec.to_string(),
            index,
        })?;
        ids.push(id);
    }
    Ok(group.subgroup_generated_by(&ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn group(spec: GroupSpec) -> Arc<FiniteRotationGroup> {
        FiniteRotationGroup::build(spec).unwrap()
    }

    #[test]
    fn elementary_rotations() {
        assert_eq!(rot_z(0.0), Rotation3::identity());
        assert_eq!(rot_y(0.0), Rotation3::identity());
        let z = snap(rot_z(PI / 2.0));
        assert_eq!(z.row_major(), [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let y = snap(rot_y(PI / 2.0));
        assert_eq!(y.row_major(), [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        assert!((rot_z(1.0) * rot_z(-1.0)).distance(&Rotation3::identity()) < 1e-15);
        let b = rot_y(0.7);
        assert!((b.inverse() * b).distance(&Rotation3::identity()) < 1e-15);
    }

    #[test]
    fn tabulated_generators() {
        let v = generators_of(GroupSpec::V).unwrap();
        assert_eq!(v[0].row_major(), [-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(v[1].row_major(), [1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0]);
        assert_eq!(
            generators_of(GroupSpec::Cyclic(1)).unwrap(),
            vec![Rotation3::identity()]
        );

        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let g = generators_of(GroupSpec::I).unwrap()[1];
        let allowed = [phi / 2.0, (1.0 - phi) / 2.0, 0.5];
        for v in g.row_major() {
            assert!(allowed.iter().any(|a| (v.abs() - a.abs()).abs() < 1e-15), "{v}");
        }
        assert!(Rotation3::try_new(*g.matrix()).is_ok());
        assert!(matches!(
            generators_of(GroupSpec::SO3),
            Err(CoreError::InfiniteGroup(_))
        ));
    }

    #[test]
    fn closure_sizes() {
        for (spec, n) in [
            (GroupSpec::V, 4),
            (GroupSpec::T, 12),
            (GroupSpec::O, 24),
            (GroupSpec::I, 60),
            (GroupSpec::Cyclic(1), 1),
            (GroupSpec::Cyclic(5), 5),
            (GroupSpec::Dihedral(2), 4),
            (GroupSpec::Dihedral(6), 12),
        ] {
            let g = group(spec);
            assert_eq!(g.order(), n, "{spec}");
            assert_eq!(*g.element(0), Rotation3::identity());
        }
    }

    #[test]
    fn cayley_table_is_consistent_and_associative() {
        for spec in [
            GroupSpec::V,
            GroupSpec::T,
            GroupSpec::O,
            GroupSpec::I,
            GroupSpec::Dihedral(5),
        ] {
            let g = group(spec);
            let n = g.order();
            for i in 0..n {
                for j in 0..n {
                    let p = g.element(i).compose(g.element(j));
                    assert!(p.distance(g.element(g.product(i, j))) < 1e-10);
                }
                let inv = g.inverse(i);
                assert_eq!(g.product(inv, i), 0);
            }
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        assert_eq!(g.product(g.product(i, j), k), g.product(i, g.product(j, k)));
                    }
                }
            }
        }
    }

    #[test]
    fn minimum_pairwise_distance_in_icosahedral_group() {
        let g = group(GroupSpec::I);
        let mut min = f64::INFINITY;
        for a in g.elements() {
            for b in g.elements() {
                let d = a.distance(b);
                if d > 0.0 {
                    min = min.min(d);
                }
            }
        }
        assert!(min > 1e-2, "{min}");
    }

    #[test]
    fn closure_cap_detects_infinite_generators() {
        let err = generate_closure(&[rot_z(1.0)], DEFAULT_DEDUP_TOL, DEFAULT_CLOSURE_CAP).unwrap_err();
        assert!(matches!(err, CoreError::ClosureOverflow { cap: 360 }));
    }

    #[test]
    fn embedded_klein_group_is_the_diagonal_sign_matrices() {
        let o = group(GroupSpec::O);
        // brute-force scan for det-1 diagonal sign matrices
        let mut expected: Vec<usize> = (0..24)
            .filter(|&i| {
                let m = o.element(i).matrix();
                let diag = (0..3).all(|r| (0..3).all(|c| r == c || m[(r, c)] == 0.0));
                diag && (0..3).all(|r| m[(r, r)].abs() == 1.0)
            })
            .collect();
        expected.sort_unstable();
        assert_eq!(expected.len(), 4);
        assert_eq!(embed_subgroup(&o, GroupSpec::V).unwrap(), expected);
    }

    #[test]
    fn embedded_tetrahedral_group() {
        let o = group(GroupSpec::O);
        let t_ids = embed_subgroup(&o, GroupSpec::T).unwrap();
        assert_eq!(t_ids.len(), 12);
        // brute force: T inside O is the set of elements that are even
        // permutations of the axes (up to sign)
        let expected: Vec<usize> = (0..24)
            .filter(|&i| {
                let (perm, _) = o.element(i).as_signed_permutation(1e-12).unwrap();
                let inversions = (0..3)
                    .flat_map(|a| (a + 1..3).map(move |b| (a, b)))
                    .filter(|&(a, b)| perm[a] > perm[b])
                    .count();
                inversions % 2 == 0
            })
            .collect();
        assert_eq!(t_ids, expected);
        assert_eq!(embed_subgroup(&o, GroupSpec::Cyclic(1)).unwrap(), vec![0]);
    }

    #[test]
    fn cosets() {
        let o = group(GroupSpec::O);
        let v = embed_subgroup(&o, GroupSpec::V).unwrap();
        let cv = left_cosets(&o, &v).unwrap();
        assert_eq!(cv.len(), 6);
        assert!(cv.iter().all(|c| c.len() == 4));
        assert_eq!(cv[0], v);
        let t = embed_subgroup(&o, GroupSpec::T).unwrap();
        let ct = left_cosets(&o, &t).unwrap();
        assert_eq!(ct.len(), 2);
        assert!(ct.iter().all(|c| c.len() == 12));
        let ce = left_cosets(&o, &[0]).unwrap();
        assert_eq!(ce.len(), 24);
        for (i, c) in ce.iter().enumerate() {
            assert_eq!(c, &vec![i]);
        }
        let mut all: Vec<usize> = cv.concat();
        all.sort_unstable();
        assert_eq!(all, (0..24).collect::<Vec<_>>());
        for w in cv.windows(2) {
            assert!(w[0][0] < w[1][0]);
        }
    }

    #[test]
    fn non_subgroup_is_rejected_with_the_violating_pair() {
        let o = group(GroupSpec::O);
        let gen = o.generator_ids()[0];
        match left_cosets(&o, &[0, gen]) {
            Err(CoreError::NotASubgroup(a, b)) => {
                assert!(![0, gen].contains(&o.product(a, b)));
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn icosahedral_group_contains_the_tetrahedral_generators() {
        let i = group(GroupSpec::I);
        assert_eq!(embed_subgroup(&i, GroupSpec::T).unwrap().len(), 12);
        assert_eq!(embed_subgroup(&i, GroupSpec::V).unwrap().len(), 4);
        assert!(matches!(
            embed_subgroup(&i, GroupSpec::O),
            Err(CoreError::EmbeddingFailed { .. })
        ));
    }

    #[test]
    fn euler_round_trip_including_gimbal_cases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        use rand::SeedableRng;
        let mut samples: Vec<Rotation3> = (0..200).map(|_| random_rotation(&mut rng)).collect();
        samples.push(rot_z(0.3));
        samples.push(rot_z(0.3) * rot_y(PI) * rot_z(1.1));
        samples.push(Rotation3::identity());
        for g in samples {
            let (a, b, c) = g.euler_zyz();
            assert!((0.0..=PI).contains(&b));
            assert_abs_diff_eq!(Rotation3::from_euler_zyz(a, b, c).distance(&g), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn group_spec_strings() {
        for s in ["V", "T", "O", "I", "SO3", "CN-3", "DN-4"] {
            assert_eq!(s.parse::<GroupSpec>().unwrap().to_string(), s);
        }
        assert!("CN-0".parse::<GroupSpec>().is_err());
        assert!("Q".parse::<GroupSpec>().is_err());
        assert!(GroupSpec::from_kind("CN", None).is_err());
    }

    #[test]
    fn json_dump_fields() {
        let v = group(GroupSpec::V).to_json();
        assert_eq!(v["kind"], "V");
        assert_eq!(v["size"], 4);
        assert_eq!(v["elements"].as_array().unwrap().len(), 4);
        assert_eq!(v["elements"][0].as_array().unwrap().len(), 9);
        assert_eq!(v["cayley"].as_array().unwrap().len(), 4);
        assert_eq!(v["generators"].as_array().unwrap().len(), 2);
    }
}
