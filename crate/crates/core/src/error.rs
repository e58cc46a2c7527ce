use thiserror::Error;

/// Errors raised by the modeling and simulation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("regression is rank deficient: {0}")]
    RankDeficient(String),

    #[error("model oracle failure: {0}")]
    Oracle(String),

    #[error("trace parse error:\n{}", format_lines(.0))]
    TraceParse(Vec<(u64, String)>),

    #[error("trace mismatch: {0}")]
    TraceMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_lines(lines: &[(u64, String)]) -> String {
    lines
        .iter()
        .map(|(line, msg)| format!("  line {line}: {msg}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
