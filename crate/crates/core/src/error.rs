use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("point {index} is at or behind the camera plane (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("degenerate bone {bone}: 2D length below threshold")]
    DegenerateBone { bone: usize },

    #[error("heat-map channel {channel} has no mass")]
    EmptyChannel { channel: usize },

    #[error("bone {bone} has empty POF support")]
    EmptySupport { bone: usize },

    #[error("invalid model bundle: {0}")]
    Model(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("loss weight {name} is negative")]
    NegativeWeight { name: String },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
