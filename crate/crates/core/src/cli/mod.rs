//! Command layer behind the `xpose` binary: run configuration, artifact
//! layout under the output directory, and one function per subcommand.
//!
//! Exit codes: 0 success, 1 configuration error, 2 missing prerequisite,
//! 3 numeric failure. Failures print one JSON object on stderr.

mod cache;
mod commands;
mod config;

pub use cache::{AeCache, AeMeta, AE_MAGIC};
pub use commands::{attack, eval, featdiff, gen_data, pipeline, report, sweep, train};
pub use config::{DatasetConfig, DatasetKind, ModelEntry, NamedAttack, Protocol, RunConfig, Source, TrainSettings, ZooConfig};

use std::path::{Path, PathBuf};

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("missing {what}: expected {}", path.display())]
    Missing { what: String, path: PathBuf },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing { .. } => 2,
            CliError::Numeric(_) => 3,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Usage(_) => "usage",
            CliError::Missing { .. } => "missing_prerequisite",
            CliError::Mismatch(_) => "checkpoint_mismatch",
            CliError::Numeric(_) => "numeric",
            CliError::Io { .. } => "io",
            CliError::Other(_) => "error",
        }
    }

    /// The machine-readable line printed on failure.
    pub fn json_line(&self) -> String {
        let mut v = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Config { pointer, .. } => v["pointer"] = json!(pointer),
            CliError::Missing { path, .. } | CliError::Io { path, .. } => v["path"] = json!(path.display().to_string()),
            _ => {}
        }
        v.to_string()
    }
}

/// Artifact paths under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data").join("train.bin")
    }

    pub fn test_data(&self) -> PathBuf {
        self.root.join("data").join("test.bin")
    }

    pub fn checkpoint(&self, model: &str) -> PathBuf {
        self.root.join("models").join(format!("{model}.ckpt"))
    }

    pub fn ae_cache(&self, source: &Source, attack: &str) -> PathBuf {
        self.root.join("aes").join(format!("{}__{attack}.ae", source.id()))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    crate::io::write_atomic(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}
