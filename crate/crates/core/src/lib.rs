//! Steerable 3D PDO filters.
//!
//! The crate covers four layers, bottom-up:
//!
//! * [`group`]: 3x3 rotations, the finite rotation groups and their Cayley
//!   tables, cosets and subgroup embeddings.
//! * [`repr`]: representations that type feature fields (trivial, regular,
//!   quotient, real Wigner-D irreps of SO(3), direct sums).
//! * [`basis`]: the linear equivariance constraints on the coefficients of a
//!   second-order PDO filter and their orthonormal null-space bases.
//! * [`discretize`]: finite-difference and Gaussian-derivative stencils that
//!   turn PDO coefficients into `k x k x k` convolution filters.

pub mod basis;
pub mod discretize;
pub mod error;
pub mod group;
pub mod linalg;
pub mod repr;
pub mod wigner;

pub use basis::{BlockwiseBasis, KernelBasis, PdoCoefficients};
pub use discretize::{DiscreteFilter, PdoIndex, Stencil3, StencilScheme};
pub use error::{CoreError, Result};
pub use group::{FiniteRotationGroup, Group, GroupSpec, Rotation3};
pub use repr::{RepKind, RepSpec, Representation};
