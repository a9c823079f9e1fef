use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),

    #[error("{0} is an infinite group and has no finite generator list")]
    InfiniteGroup(String),

    #[error("invalid group spec: {0}")]
    InvalidGroupSpec(String),

    #[error("closure exceeded {cap} elements; generators are not a finite set or the tolerance is too tight")]
    ClosureOverflow { cap: usize },

    #[error("not a subgroup: product of elements {0} and {1} leaves the set")]
    NotASubgroup(usize, usize),

    #[error("subgroup generator {index} of {spec} is not an element of the parent group")]
    EmbeddingFailed { spec: String, index: usize },

    #[error("rotation is not an element of group {0}")]
    NotAnElement(String),

    #[error("group mismatch: {0} vs {1}")]
    GroupMismatch(String, String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid representation: {0}")]
    InvalidRepresentation(String),

    #[error("invalid representation spec `{0}`")]
    InvalidRepSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
