use thiserror::Error;

use enrichcap_core::embed_store::StoreError;
use enrichcap_core::fusion::FusionError;
use enrichcap_core::keypoints::ImageError;
use enrichcap_core::metrics::MetricsError;
use enrichcap_core::providers::ProviderError;
use enrichcap_core::text_context::TextError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("query `{query_id}` failed at {stage}: {message}")]
    Stage {
        query_id: String,
        stage: String,
        message: String,
    },
    #[error("{failed} of {total} queries failed")]
    QueriesFailed { failed: usize, total: usize },
}

impl CliError {
    /// 2 for configuration and usage problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
