//! Group representations that type feature fields.
//!
//! Finite-group representations store one matrix per group element (indexed
//! like the group's element list). SO(3) representations are evaluated on
//! demand from their kind, which is always trivial, a Wigner-D irrep or a
//! direct sum of those.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::group::{embed_subgroup, left_cosets, random_rotation, FiniteRotationGroup, Group, GroupSpec, Rotation3};
use crate::linalg::block_diag;
use crate::wigner::wigner_d_real;

/// What a representation is, structurally.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RepKind {
    Trivial,
    Regular,
    /// Permutation action on the left cosets of the subgroup with these
    /// element ids; `subgroup` names it when it came from a known spec.
    Quotient {
        subgroup: Option<GroupSpec>,
        ids: Vec<usize>,
    },
    Irrep(u32),
    DirectSum(Vec<(RepKind, usize)>),
    /// User-supplied matrices.
    Custom(String),
}

impl RepKind {
    /// The command-line description of this kind, if it has one (custom
    /// matrices and unnamed quotients do not).
    pub fn to_spec(&self) -> Option<RepSpec> {
        match self {
            RepKind::Trivial => Some(RepSpec::Trivial),
            RepKind::Regular => Some(RepSpec::Regular),
            RepKind::Quotient { subgroup: Some(s), .. } => Some(RepSpec::Quotient(*s)),
            RepKind::Irrep(l) => Some(RepSpec::Irrep(*l)),
            RepKind::DirectSum(parts) => parts
                .iter()
                .map(|(k, m)| Some((k.to_spec()?, *m)))
                .collect::<Option<Vec<_>>>()
                .map(RepSpec::Sum),
            _ => None,
        }
    }
}

impl fmt::Display for RepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RepKind::Trivial => write!(f, "trivial"),
            RepKind::Regular => write!(f, "regular"),
            RepKind::Quotient { subgroup: Some(s), .. } => write!(f, "quotient:{s}"),
            RepKind::Quotient { subgroup: None, ids } => write!(f, "quotient:{ids:?}"),
            RepKind::Irrep(l) => write!(f, "irrep:{l}"),
            RepKind::DirectSum(parts) => {
                write!(f, "sum:")?;
                for (i, (k, m)) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{k}x{m}")?;
                }
                Ok(())
            }
            RepKind::Custom(name) => write!(f, "custom:{name}"),
        }
    }
}

/// Group-independent description of a field type, as written on the
/// command line: `trivial | regular | quotient:<spec> | irrep:<l> |
/// sum:<kind>x<mult>[+...]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RepSpec {
    Trivial,
    Regular,
    Quotient(GroupSpec),
    Irrep(u32),
    Sum(Vec<(RepSpec, usize)>),
}

impl RepSpec {
    pub fn build(&self, group: &Group) -> Result<Representation> {
        match self {
            RepSpec::Trivial => Ok(Representation::trivial(group)),
            RepSpec::Regular => Representation::regular(group),
            RepSpec::Quotient(sub) => Representation::quotient_by(group, *sub),
            RepSpec::Irrep(l) => Ok(Representation::irrep(group, *l)),
            RepSpec::Sum(parts) => {
                let built = parts
                    .iter()
                    .map(|(s, m)| Ok((s.build(group)?, *m)))
                    .collect::<Result<Vec<_>>>()?;
                Representation::direct_sum(&built)
            }
        }
    }
}

impl fmt::Display for RepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RepSpec::Trivial => write!(f, "trivial"),
            RepSpec::Regular => write!(f, "regular"),
            RepSpec::Quotient(s) => write!(f, "quotient:{s}"),
            RepSpec::Irrep(l) => write!(f, "irrep:{l}"),
            RepSpec::Sum(parts) => {
                write!(f, "sum:")?;
                for (i, (k, m)) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{k}x{m}")?;
                }
                Ok(())
            }
        }
    }
}

fn parse_basic(s: &str) -> Result<RepSpec> {
    let bad = || CoreError::InvalidRepSpec(s.to_string());
    match s {
        "trivial" => return Ok(RepSpec::Trivial),
        "regular" => return Ok(RepSpec::Regular),
        _ => {}
    }
    if let Some(sub) = s.strip_prefix("quotient:") {
        return Ok(RepSpec::Quotient(sub.parse().map_err(|_| bad())?));
    }
    if let Some(l) = s.strip_prefix("irrep:") {
        return Ok(RepSpec::Irrep(l.parse().map_err(|_| bad())?));
    }
    Err(bad())
}

impl FromStr for RepSpec {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let Some(body) = s.strip_prefix("sum:") else {
            return parse_basic(s);
        };
        let mut parts = Vec::new();
        for term in body.split('+') {
            let term = term.trim();
            let (kind, mult) = match term.rsplit_once('x') {
                Some((k, m)) if !m.is_empty() && m.chars().all(|c| c.is_ascii_digit()) => (
                    k,
                    m.parse::<usize>()
                        .map_err(|_| CoreError::InvalidRepSpec(term.to_string()))?,
                ),
                _ => (term, 1),
            };
            if mult == 0 {
                return Err(CoreError::InvalidRepSpec(format!("zero multiplicity in {term}")));
            }
            parts.push((parse_basic(kind)?, mult));
        }
        if parts.is_empty() {
            return Err(CoreError::InvalidRepSpec(s.to_string()));
        }
        Ok(RepSpec::Sum(parts))
    }
}

/// A real orthogonal representation of a rotation group.
#[derive(Clone, Debug)]
pub struct Representation {
    group: Group,
    kind: RepKind,
    dim: usize,
    matrices: Option<Arc<Vec<DMatrix<f64>>>>,
    /// Direct-sum structure as consecutive `(factor, multiplicity)` runs;
    /// empty for non-sums.
    parts: Vec<(Arc<Representation>, usize)>,
}

fn permutation_matrix(n: usize, image: impl Fn(usize) -> usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for c in 0..n {
        m[(image(c), c)] = 1.0;
    }
    m
}

impl Representation {
    fn finite(group: &Arc<FiniteRotationGroup>, kind: RepKind, matrices: Vec<DMatrix<f64>>) -> Self {
        let dim = matrices[0].nrows();
        Representation {
            group: Group::Finite(group.clone()),
            kind,
            dim,
            matrices: Some(Arc::new(matrices)),
            parts: Vec::new(),
        }
    }

    fn require_finite(group: &Group, what: &str) -> Result<Arc<FiniteRotationGroup>> {
        group
            .finite()
            .cloned()
            .ok_or_else(|| CoreError::InvalidRepresentation(format!("{what} needs a finite group")))
    }

    pub fn trivial(group: &Group) -> Self {
        match group {
            Group::Finite(g) => Self::finite(g, RepKind::Trivial, vec![DMatrix::identity(1, 1); g.order()]),
            Group::SO3 => Representation {
                group: Group::SO3,
                kind: RepKind::Trivial,
                dim: 1,
                matrices: None,
                parts: Vec::new(),
            },
        }
    }

    /// Left-multiplication permutation action on the group itself.
    pub fn regular(group: &Group) -> Result<Self> {
        let g = Self::require_finite(group, "the regular representation")?;
        let n = g.order();
        let mats = (0..n).map(|a| permutation_matrix(n, |b| g.product(a, b))).collect();
        Ok(Self::finite(&g, RepKind::Regular, mats))
    }

    /// Permutation action on the left cosets of `subgroup_ids`, in the
    /// order returned by [`left_cosets`].
    pub fn quotient(group: &Group, subgroup_ids: &[usize], label: Option<GroupSpec>) -> Result<Self> {
        let g = Self::require_finite(group, "a quotient representation")?;
        let cosets = left_cosets(&g, subgroup_ids)?;
        let mut coset_of = vec![0usize; g.order()];
        for (c, members) in cosets.iter().enumerate() {
            for &m in members {
                coset_of[m] = c;
            }
        }
        let n = cosets.len();
        let mats = (0..g.order())
            .map(|a| permutation_matrix(n, |c| coset_of[g.product(a, cosets[c][0])]))
            .collect();
        let mut ids = subgroup_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        Ok(Self::finite(&g, RepKind::Quotient { subgroup: label, ids }, mats))
    }

    /// Quotient by the canonical copy of `sub` inside the group.
    pub fn quotient_by(group: &Group, sub: GroupSpec) -> Result<Self> {
        let g = Self::require_finite(group, "a quotient representation")?;
        let ids = embed_subgroup(&g, sub)?;
        Self::quotient(group, &ids, Some(sub))
    }

    /// Real Wigner-D of degree `l`; over a finite group this is its
    /// restriction.
    pub fn irrep(group: &Group, l: u32) -> Self {
        match group {
            Group::Finite(g) => {
                let mats = g.elements().iter().map(|e| wigner_d_real(l, e)).collect();
                Self::finite(g, RepKind::Irrep(l), mats)
            }
            Group::SO3 => Representation {
                group: Group::SO3,
                kind: RepKind::Irrep(l),
                dim: 2 * l as usize + 1,
                matrices: None,
                parts: Vec::new(),
            },
        }
    }

    /// Wrap user-supplied matrices, one per element of `group` in element
    /// order. Only shapes are validated; see [`check_homomorphism`].
    pub fn from_matrices(group: &Arc<FiniteRotationGroup>, name: &str, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if matrices.len() != group.order() {
            return Err(CoreError::DimensionMismatch(format!(
                "{} matrices for a group of order {}",
                matrices.len(),
                group.order()
            )));
        }
        let k = matrices[0].nrows();
        if k == 0 || matrices.iter().any(|m| m.nrows() != k || m.ncols() != k) {
            return Err(CoreError::DimensionMismatch(
                "matrices must all be K x K with K >= 1".into(),
            ));
        }
        Ok(Self::finite(group, RepKind::Custom(name.to_string()), matrices))
    }

    /// Block-diagonal sum; each factor appears `multiplicity` times in a row.
    /// Nested sums are flattened and adjacent equal factors merged.
    pub fn direct_sum(parts: &[(Representation, usize)]) -> Result<Self> {
        let Some((first, _)) = parts.first() else {
            return Err(CoreError::InvalidRepresentation("empty direct sum".into()));
        };
        let group = first.group.clone();
        let mut flat: Vec<(Arc<Representation>, usize)> = Vec::new();
        for (rep, mult) in parts {
            if !rep.group.same_as(&group) {
                return Err(CoreError::GroupMismatch(
                    group.spec().to_string(),
                    rep.group.spec().to_string(),
                ));
            }
            if *mult == 0 {
                continue;
            }
            let sub: Vec<(Arc<Representation>, usize)> = if rep.parts.is_empty() {
                vec![(Arc::new(rep.clone()), 1)]
            } else {
                rep.parts.clone()
            };
            for _ in 0..*mult {
                for (f, m) in &sub {
                    match flat.last_mut() {
                        Some((last, lm)) if last.kind == f.kind && same_matrices(last, f) => *lm += m,
                        _ => flat.push((f.clone(), *m)),
                    }
                }
            }
        }
        if flat.is_empty() {
            return Err(CoreError::InvalidRepresentation(
                "direct sum of zero total dimension".into(),
            ));
        }
        let dim = flat.iter().map(|(f, m)| f.dim * m).sum();
        let kind = RepKind::DirectSum(flat.iter().map(|(f, m)| (f.kind.clone(), *m)).collect());
        let matrices = match &group {
            Group::Finite(g) => Some(Arc::new(
                (0..g.order())
                    .map(|e| {
                        let blocks: Vec<&DMatrix<f64>> = flat
                            .iter()
                            .flat_map(|(f, m)| std::iter::repeat_n(f.matrix_at(e), *m))
                            .collect();
                        block_diag(&blocks)
                    })
                    .collect(),
            )),
            Group::SO3 => None,
        };
        Ok(Representation {
            group,
            kind,
            dim,
            matrices,
            parts: flat,
        })
    }

    /// Sum of the given representations, each once.
    pub fn direct_sum_of(reps: &[Representation]) -> Result<Self> {
        let parts: Vec<_> = reps.iter().map(|r| (r.clone(), 1)).collect();
        Self::direct_sum(&parts)
    }

    pub fn group(&self) -> &Group {
        &self.group
    }

    pub fn group_spec(&self) -> GroupSpec {
        self.group.spec()
    }

    pub fn kind(&self) -> &RepKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored matrices (finite groups only).
    pub fn matrices(&self) -> Option<&[DMatrix<f64>]> {
        self.matrices.as_deref().map(Vec::as_slice)
    }

    /// `rho(g)` for element index `idx` of a finite group.
    ///
    /// # Panics
    /// On SO(3) representations, or for an out-of-range index.
    pub fn matrix_at(&self, idx: usize) -> &DMatrix<f64> {
        &self.matrices.as_ref().expect("matrix_at needs a finite group")[idx]
    }

    /// `rho(g)` for an arbitrary rotation: looked up for finite groups
    /// (error if `g` is not an element), evaluated for SO(3).
    pub fn eval(&self, g: &Rotation3) -> Result<DMatrix<f64>> {
        match &self.group {
            Group::Finite(grp) => {
                let idx = grp
                    .find(g)
                    .ok_or_else(|| CoreError::NotAnElement(format!("{:?}", g.row_major())))?;
                Ok(self.matrix_at(idx).clone())
            }
            Group::SO3 => Ok(eval_so3(&self.kind, g)),
        }
    }

    /// Direct-sum runs `(factor, multiplicity)`; a non-sum is its own single
    /// factor.
    pub fn parts(&self) -> Vec<(Arc<Representation>, usize)> {
        if self.parts.is_empty() {
            vec![(Arc::new(self.clone()), 1)]
        } else {
            self.parts.clone()
        }
    }

    /// Factor instances in block order, each with its channel offset.
    pub fn factor_instances(&self) -> Vec<(Arc<Representation>, usize)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (f, m) in self.parts() {
            for _ in 0..m {
                out.push((f.clone(), offset));
                offset += f.dim;
            }
        }
        out
    }

    /// True if every `rho(g)` is a 0/1 permutation matrix. Such fields admit
    /// pointwise nonlinearities.
    pub fn is_permutation(&self) -> bool {
        match &self.matrices {
            Some(ms) => ms.iter().all(is_permutation_matrix),
            None => match &self.kind {
                RepKind::Trivial | RepKind::Irrep(0) => true,
                RepKind::DirectSum(p) => p.iter().all(|(k, _)| matches!(k, RepKind::Trivial | RepKind::Irrep(0))),
                _ => false,
            },
        }
    }

    /// JSON dump `{group, kind, dim, matrices?}`; matrices are row-major and
    /// omitted for SO(3).
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "group": self.group_spec().to_string(),
            "kind": self.kind.to_string(),
            "dim": self.dim,
        });
        if let Some(ms) = self.matrices() {
            let rows: Vec<Vec<f64>> = ms.iter().map(row_major).collect();
            v["matrices"] = serde_json::json!(rows);
        }
        v
    }
}

fn same_matrices(a: &Representation, b: &Representation) -> bool {
    match (&a.matrices, &b.matrices) {
        (Some(x), Some(y)) => Arc::ptr_eq(x, y) || x == y,
        (None, None) => true,
        _ => false,
    }
}

fn eval_so3(kind: &RepKind, g: &Rotation3) -> DMatrix<f64> {
    match kind {
        RepKind::Trivial => DMatrix::identity(1, 1),
        RepKind::Irrep(l) => wigner_d_real(*l, g),
        RepKind::DirectSum(parts) => {
            let blocks: Vec<DMatrix<f64>> = parts
                .iter()
                .flat_map(|(k, m)| std::iter::repeat_n(eval_so3(k, g), *m))
                .collect();
            let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
            block_diag(&refs)
        }
        other => unreachable!("SO(3) representation of kind {other}"),
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn is_permutation_matrix(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    if m.iter().any(|&x| x != 0.0 && x != 1.0) {
        return false;
    }
    (0..n).all(|i| m.row(i).sum() == 1.0) && (0..n).all(|j| m.column(j).sum() == 1.0)
}

/// Homomorphism residual `max ||rho(g) rho(h) - rho(gh)||_F`, over all pairs
/// for finite groups and over `n_samples` Haar-random pairs for SO(3).
/// Also folds in `||rho(e) - I||_F`.
pub fn check_homomorphism(rep: &Representation, n_samples: usize, seed: u64) -> f64 {
    let id = DMatrix::<f64>::identity(rep.dim(), rep.dim());
    match rep.group() {
        Group::Finite(g) => {
            let mut worst = (rep.matrix_at(g.identity_id()) - &id).norm();
            for a in 0..g.order() {
                for b in 0..g.order() {
                    let r = (rep.matrix_at(a) * rep.matrix_at(b) - rep.matrix_at(g.product(a, b))).norm();
                    worst = worst.max(r);
                }
            }
            worst
        }
        Group::SO3 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = rep.eval(&Rotation3::identity()).expect("SO(3) evaluation");
            let mut worst = (e - &id).norm();
            for _ in 0..n_samples {
                let g = random_rotation(&mut rng);
                let h = random_rotation(&mut rng);
                let lhs = rep.eval(&g).unwrap() * rep.eval(&h).unwrap();
                let r = (lhs - rep.eval(&(g * h)).unwrap()).norm();
                worst = worst.max(r);
            }
            worst
        }
    }
}
