use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("cannot sample batch: {0}")]
    Sampling(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("label {label} out of range for {n_identities} identities")]
    LabelOutOfRange { label: usize, n_identities: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("metabn: {0}")]
    MetaBn(String),
    #[error("non-finite gradient in {0}")]
    NonFinite(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
