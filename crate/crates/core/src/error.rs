use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum MasmError {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("svd did not converge for {rows}x{cols} matrix after {sweeps} sweeps")]
    SvdNoConvergence { rows: usize, cols: usize, sweeps: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rank policy unresolvable: {0}; adjust rank_policy or lower K")]
    RankPolicy(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("non-finite activations in block {block}")]
    Activation { block: usize },

    #[error("pretraining reached accuracy {reached:.4} below floor {floor:.4} after {epochs} epochs; try an easier data config")]
    PretrainFloor { reached: f64, floor: f64, epochs: usize },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("family leakage: {0}")]
    Leakage(String),

    #[error("unknown artifact family `{0}`")]
    UnknownFamily(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl MasmError {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            MasmError::NonFinite(_) => "non_finite",
            MasmError::SvdNoConvergence { .. } => "svd_no_convergence",
            MasmError::Shape(_) => "shape",
            MasmError::RankPolicy(_) => "rank_policy",
            MasmError::Config(_) => "config",
            MasmError::Metric(_) => "metric",
            MasmError::Activation { .. } => "activation",
            MasmError::PretrainFloor { .. } => "pretrain_floor",
            MasmError::Checkpoint(_) => "checkpoint",
            MasmError::Leakage(_) => "leakage",
            MasmError::UnknownFamily(_) => "unknown_family",
            MasmError::Io(_) => "io",
            MasmError::Csv(_) => "csv",
            MasmError::Json(_) => "json",
            MasmError::Toml(_) => "toml",
        }
    }
}

pub type Result<T> = std::result::Result<T, MasmError>;
