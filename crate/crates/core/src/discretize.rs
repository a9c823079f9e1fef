//! Stencils for the ten PDO terms and discretization of PDO filters.
//!
//! Stencils are applied as cross-correlations,
//! `(u * F)(x) = sum_n u(n) F(x + n)`, with `n` ranging over the integer
//! offsets `[-r, r]^3`, `r = k / 2`. Weights are stored row-major with the
//! `x1` offset slowest: entry `(a, b, c)` is offset `(a - r, b - r, c - r)`.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::basis::{PdoCoefficients, N_TERMS};
use crate::error::{CoreError, Result};
use crate::group::Rotation3;

/// The ten PDO terms, in coefficient order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PdoIndex {
    Identity,
    X1,
    X2,
    X3,
    X1X1,
    X1X2,
    X1X3,
    X2X2,
    X2X3,
    X3X3,
}

impl PdoIndex {
    pub const ALL: [PdoIndex; N_TERMS] = [
        PdoIndex::Identity,
        PdoIndex::X1,
        PdoIndex::X2,
        PdoIndex::X3,
        PdoIndex::X1X1,
        PdoIndex::X1X2,
        PdoIndex::X1X3,
        PdoIndex::X2X2,
        PdoIndex::X2X3,
        PdoIndex::X3X3,
    ];

    /// Position in [`PdoIndex::ALL`], which is also the term index of
    /// [`PdoCoefficients::term`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// The axes differentiated, e.g. `[0, 1]` for `x1 x2`.
    pub fn axes(self) -> &'static [usize] {
        match self {
            PdoIndex::Identity => &[],
            PdoIndex::X1 => &[0],
            PdoIndex::X2 => &[1],
            PdoIndex::X3 => &[2],
            PdoIndex::X1X1 => &[0, 0],
            PdoIndex::X1X2 => &[0, 1],
            PdoIndex::X1X3 => &[0, 2],
            PdoIndex::X2X2 => &[1, 1],
            PdoIndex::X2X3 => &[1, 2],
            PdoIndex::X3X3 => &[2, 2],
        }
    }

    pub fn from_axes(axes: &[usize]) -> Option<Self> {
        let mut a = axes.to_vec();
        a.sort_unstable();
        PdoIndex::ALL.into_iter().find(|p| p.axes() == a.as_slice())
    }

    pub fn order(self) -> usize {
        self.axes().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            PdoIndex::Identity => "identity",
            PdoIndex::X1 => "x1",
            PdoIndex::X2 => "x2",
            PdoIndex::X3 => "x3",
            PdoIndex::X1X1 => "x1^2",
            PdoIndex::X1X2 => "x1x2",
            PdoIndex::X1X3 => "x1x3",
            PdoIndex::X2X2 => "x2^2",
            PdoIndex::X2X3 => "x2x3",
            PdoIndex::X3X3 => "x3^2",
        }
    }
}

impl fmt::Display for PdoIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A `k x k x k` correlation stencil.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil3 {
    k: usize,
    weights: Vec<f64>,
    spacing: [f64; 3],
}

impl Stencil3 {
    pub fn new(k: usize, weights: Vec<f64>, spacing: [f64; 3]) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(CoreError::InvalidParameter(format!("stencil size {k} must be odd")));
        }
        if weights.len() != k * k * k || !weights.iter().all(|w| w.is_finite()) {
            return Err(CoreError::InvalidParameter(format!(
                "stencil of size {k} needs {} finite weights",
                k * k * k
            )));
        }
        Ok(Stencil3 { k, weights, spacing })
    }

    fn from_fn(k: usize, spacing: [f64; 3], f: impl Fn([i64; 3]) -> f64) -> Self {
        let r = (k / 2) as i64;
        let mut weights = Vec::with_capacity(k * k * k);
        for a in -r..=r {
            for b in -r..=r {
                for c in -r..=r {
                    weights.push(f([a, b, c]));
                }
            }
        }
        Stencil3 { k, weights, spacing }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn radius(&self) -> i64 {
        (self.k / 2) as i64
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn flat(&self, n: [i64; 3]) -> Option<usize> {
        let r = self.radius();
        if n.iter().any(|x| x.abs() > r) {
            return None;
        }
        let k = self.k as i64;
        Some((((n[0] + r) * k + (n[1] + r)) * k + (n[2] + r)) as usize)
    }

    /// Weight at offset `n` (zero outside the support).
    pub fn at(&self, n: [i64; 3]) -> f64 {
        self.flat(n).map_or(0.0, |i| self.weights[i])
    }

    fn offsets(&self) -> impl Iterator<Item = ([i64; 3], f64)> + '_ {
        let r = self.radius();
        let k = self.k as i64;
        self.weights.iter().enumerate().map(move |(i, &w)| {
            let i = i as i64;
            ([i / (k * k) - r, (i / k) % k - r, i % k - r], w)
        })
    }

    /// `sum_n u(n) f(x + n)`.
    pub fn apply<F: Fn([i64; 3]) -> f64>(&self, f: F, x: [i64; 3]) -> f64 {
        self.offsets()
            .filter(|(_, w)| *w != 0.0)
            .map(|(n, w)| w * f([x[0] + n[0], x[1] + n[1], x[2] + n[2]]))
            .sum()
    }

    /// `sum_n u(n) prod_axis n_axis^e_axis`, a discrete moment.
    pub fn moment(&self, e: [u32; 3]) -> f64 {
        self.offsets()
            .map(|(n, w)| w * (0..3).map(|a| (n[a] as f64).powi(e[a] as i32)).product::<f64>())
            .sum()
    }

    /// The stencil transported by a signed permutation `g`:
    /// `(g . u)(n) = u(g^-1 n)`.
    pub fn rotated(&self, g: &Rotation3) -> Result<Stencil3> {
        let (perm, sign) = g
            .as_signed_permutation(1e-9)
            .ok_or_else(|| CoreError::InvalidParameter("stencil rotation needs a signed permutation".into()))?;
        // g^-1 = g^T maps n to m with m[perm[r]] = sign[r] * n[r]
        Ok(Stencil3::from_fn(self.k, self.spacing, |n| {
            let mut m = [0i64; 3];
            for r in 0..3 {
                m[perm[r]] = sign[r] as i64 * n[r];
            }
            self.at(m)
        }))
    }

    pub fn scaled(&self, s: f64) -> Stencil3 {
        Stencil3 {
            k: self.k,
            weights: self.weights.iter().map(|w| w * s).collect(),
            spacing: self.spacing,
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &Stencil3) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += s * b;
        }
    }
}

/// How a [`StencilScheme`] was produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Central differences on a grid with spacings `h`.
    Fd { h: [f64; 3] },
    /// Sampled Gaussian derivatives; `corrected` enables moment correction.
    Gaussian { k: usize, sigma: f64, corrected: bool },
}

/// One stencil per PDO term.
#[derive(Clone, Debug, PartialEq)]
pub struct StencilScheme {
    kind: SchemeKind,
    stencils: Vec<Stencil3>,
}

impl StencilScheme {
    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.stencils[0].k
    }

    pub fn stencil(&self, p: PdoIndex) -> &Stencil3 {
        &self.stencils[p.index()]
    }

    pub fn stencils(&self) -> &[Stencil3] {
        &self.stencils
    }

    /// Short identifier, e.g. `fd` or `gaussian-k5-s1`.
    pub fn id(&self) -> String {
        match self.kind {
            SchemeKind::Fd { h } if h == [1.0; 3] => "fd".to_string(),
            SchemeKind::Fd { h } => format!("fd-h{}-{}-{}", h[0], h[1], h[2]),
            SchemeKind::Gaussian { k, sigma, corrected } => {
                format!("gaussian-k{k}-s{sigma}{}", if corrected { "" } else { "-raw" })
            }
        }
    }

    /// JSON dump: PDO name -> `{k, weights}` (row-major).
    pub fn to_json(&self) -> Value {
        let mut m = serde_json::Map::new();
        for p in PdoIndex::ALL {
            let s = self.stencil(p);
            m.insert(p.name().to_string(), json!({"k": s.k, "weights": s.weights}));
        }
        Value::Object(m)
    }
}

/// Central-difference `3 x 3 x 3` stencils for spacings `h`.
///
/// The mixed stencils are the four-corner scheme with weight `+1/4` where
/// both offsets have the same sign, so that each stencil is exact on
/// quadratics under the correlation convention above.
pub fn fd_stencils(h: [f64; 3]) -> Result<StencilScheme> {
    if !h.iter().all(|&x| x > 0.0 && x.is_finite()) {
        return Err(CoreError::InvalidParameter(format!(
            "grid spacings {h:?} must be positive"
        )));
    }
    let stencils = PdoIndex::ALL
        .iter()
        .map(|p| {
            Stencil3::from_fn(3, h, |n| {
                let on_axes = |axes: &[usize]| (0..3).all(|a| axes.contains(&a) || n[a] == 0);
                match *p.axes() {
                    [] => (n == [0, 0, 0]) as i32 as f64,
                    [a] if on_axes(&[a]) => n[a] as f64 / (2.0 * h[a]),
                    [a, b] if a == b && on_axes(&[a]) => [1.0, -2.0, 1.0][(n[a] + 1) as usize] / (h[a] * h[a]),
                    [a, b] if a != b && on_axes(&[a, b]) => (n[a] * n[b]) as f64 / (4.0 * h[a] * h[b]),
                    _ => 0.0,
                }
            })
        })
        .collect();
    Ok(StencilScheme {
        kind: SchemeKind::Fd { h },
        stencils,
    })
}

/// Gaussian-derivative stencils with moment correction.
pub fn gaussian_stencils(k: usize, sigma: f64) -> Result<StencilScheme> {
    gaussian_stencils_with(k, sigma, true)
}

/// Gaussian-derivative stencils of size `k` and width `sigma` (grid units).
///
/// Weights at offset `n` are the derivatives of the isotropic Gaussian
/// density taken at `-n`, which turns the correlation sum into the
/// derivative estimate. The identity stencil is the Gaussian normalized to
/// unit sum. With `corrected`, each derivative stencil is adjusted within
/// its symmetry class so that it is exact on quadratic polynomials:
/// first-order and mixed stencils are rescaled to unit leading moment, and
/// the pure second-order stencil along axis `a` is re-fit as
/// `(alpha + beta n_a^2 + gamma (|n|^2 - n_a^2)) G(n)` with zero mass,
/// second moment 2 along `a` and 0 across.
pub fn gaussian_stencils_with(k: usize, sigma: f64, corrected: bool) -> Result<StencilScheme> {
    if k < 3 || k % 2 == 0 {
        return Err(CoreError::InvalidParameter(format!(
            "Gaussian stencil size {k} must be odd and >= 3"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CoreError::InvalidParameter(format!("sigma {sigma} must be positive")));
    }
    let s2 = sigma * sigma;
    let norm = (2.0 * std::f64::consts::PI * s2).powf(-1.5);
    let gauss = |n: [i64; 3]| {
        let r2: f64 = n.iter().map(|&x| (x * x) as f64).sum();
        norm * (-r2 / (2.0 * s2)).exp()
    };
    let one = [1.0; 3];
    let g = Stencil3::from_fn(k, one, gauss);
    let mass: f64 = g.weights.iter().sum();

    let stencil_for = |p: &PdoIndex| -> Result<Stencil3> {
        let axes = p.axes();
        let raw = match *axes {
            [] => return Ok(g.scaled(1.0 / mass)),
            [a] => Stencil3::from_fn(k, one, |n| n[a] as f64 / s2 * gauss(n)),
            [a, b] if a == b => Stencil3::from_fn(k, one, |n| ((n[a] * n[a]) as f64 / (s2 * s2) - 1.0 / s2) * gauss(n)),
            [a, b] => Stencil3::from_fn(k, one, |n| (n[a] * n[b]) as f64 / (s2 * s2) * gauss(n)),
            _ => unreachable!(),
        };
        if !corrected {
            return Ok(raw);
        }
        let mut e = [0u32; 3];
        for &a in axes {
            e[a] += 1;
        }
        match *axes {
            [a, b] if a == b => {
                let other = (a + 1) % 3;
                let basis = [
                    g.clone(),
                    Stencil3::from_fn(k, one, |n| (n[a] * n[a]) as f64 * gauss(n)),
                    Stencil3::from_fn(k, one, |n| {
                        (n.iter().map(|x| x * x).sum::<i64>() - n[a] * n[a]) as f64 * gauss(n)
                    }),
                ];
                let mut ea = [0u32; 3];
                ea[a] = 2;
                let mut eo = [0u32; 3];
                eo[other] = 2;
                let m = Matrix3::from_fn(|r, c| match r {
                    0 => basis[c].moment([0, 0, 0]),
                    1 => basis[c].moment(ea),
                    _ => basis[c].moment(eo),
                });
                let coef = m.lu().solve(&Vector3::new(0.0, 2.0, 0.0)).ok_or_else(|| {
                    CoreError::InvalidParameter(format!("moment system singular for k={k}, sigma={sigma}"))
                })?;
                let mut w = basis[0].scaled(coef[0]);
                w.add_scaled(coef[1], &basis[1]);
                w.add_scaled(coef[2], &basis[2]);
                Ok(w)
            }
            _ => {
                let m = raw.moment(e);
                Ok(raw.scaled(1.0 / m))
            }
        }
    };
    let stencils = PdoIndex::ALL.iter().map(stencil_for).collect::<Result<_>>()?;
    Ok(StencilScheme {
        kind: SchemeKind::Gaussian { k, sigma, corrected },
        stencils,
    })
}

/// Default Gaussian width for a kernel size: half the kernel radius.
pub fn default_sigma(k: usize) -> f64 {
    (k / 2) as f64 / 2.0
}

/// A bank of `K' x K` stencils, row-major as `[o][i][a][b][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteFilter {
    pub k_out: usize,
    pub k_in: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub scheme: String,
}

impl DiscreteFilter {
    pub fn zeros(k_out: usize, k_in: usize, k: usize, scheme: &str) -> Self {
        DiscreteFilter {
            k_out,
            k_in,
            k,
            weights: vec![0.0; k_out * k_in * k * k * k],
            scheme: scheme.to_string(),
        }
    }

    pub fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Stencil from input channel `i` to output channel `o`.
    pub fn tap(&self, o: usize, i: usize) -> &[f64] {
        let t = self.taps();
        let start = (o * self.k_in + i) * t;
        &self.weights[start..start + t]
    }

    pub fn tap_mut(&mut self, o: usize, i: usize) -> &mut [f64] {
        let t = self.taps();
        let start = (o * self.k_in + i) * t;
        &mut self.weights[start..start + t]
    }

    pub fn axpy(&mut self, alpha: f64, other: &DiscreteFilter) {
        assert_eq!(self.weights.len(), other.weights.len());
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += alpha * b;
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// `weights[o, i] = sum_p A_p[o, i] u_p`.
pub fn discretize(coeffs: &PdoCoefficients, scheme: &StencilScheme) -> DiscreteFilter {
    let (kout, kin) = (coeffs.k_out(), coeffs.k_in());
    let mut f = DiscreteFilter::zeros(kout, kin, scheme.k(), &scheme.id());
    for p in PdoIndex::ALL {
        let a = coeffs.term(p.index());
        let u = scheme.stencil(p).weights();
        for o in 0..kout {
            for i in 0..kin {
                let c = a[(o, i)];
                if c != 0.0 {
                    for (w, s) in f.tap_mut(o, i).iter_mut().zip(u) {
                        *w += c * s;
                    }
                }
            }
        }
    }
    f
}
