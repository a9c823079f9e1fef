//! Equivariant 3D CNNs whose convolutions are steerable PDO filters.
//!
//! [`layers::EquivConv`] materializes its filter bank from learnable
//! coefficients over a solved kernel basis; the remaining layers are the
//! admissible nonlinearities, normalizations and pooling for the field
//! types involved. [`equiv`] applies the group action to voxel data and
//! measures how far layers and models are from commuting with it.

pub mod conv;
pub mod equiv;
pub mod error;
pub mod field;
pub mod io;
pub mod layers;
pub mod model;
pub mod sweep;
pub mod tetris;
pub mod train;

pub use conv::{conv3d, conv3d_backward, Padding};
pub use equiv::{layer_equivariance_error, model_equivariance_error, rotate_voxels, RotationMode, VoxelRotation};
pub use error::{NnError, Result};
pub use field::{FieldInstance, FieldTensor, FieldType};
pub use layers::Layer;
pub use model::{LayerSpec, Model, ModelSpec, SchemeSpec};
pub use train::{train, TrainConfig};
