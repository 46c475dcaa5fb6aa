use std::path::{Path, PathBuf};

use molbart_core::corrupt::CorruptError;
use molbart_core::finetune::FinetuneError;
use molbart_core::interpret::InterpretError;
use molbart_core::model::ModelError;
use molbart_core::molgraph::SplitError;
use molbart_core::tokenizer::TokenizerError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt artifact {path}: {reason}")]
    CorruptArtifact { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Corrupt(#[from] CorruptError),
    #[error(transparent)]
    Split(#[from] SplitError),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.as_ref().to_path_buf();
        move |source| CliError::Io { path, source }
    }

    pub fn corrupt(path: impl AsRef<Path>, reason: impl ToString) -> CliError {
        CliError::CorruptArtifact { path: path.as_ref().to_path_buf(), reason: reason.to_string() }
    }

    /// Stable kind name used in the error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigInvalid(_) => "config_invalid",
            CliError::MissingArtifact(_) => "missing_artifact",
            CliError::InvalidInput(_) => "invalid_input",
            CliError::Io { .. } => "io",
            CliError::CorruptArtifact { .. } => "corrupt_artifact",
            CliError::Model(_) => "model",
            CliError::Finetune(_) => "finetune",
            CliError::Interpret(_) => "interpret",
            CliError::Tokenizer(_) => "tokenizer",
            CliError::Corrupt(_) => "corrupt",
            CliError::Split(_) => "split",
        }
    }

    /// 1 for problems the user can fix (config, inputs, missing files),
    /// 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        use ModelError as M;
        match self {
            CliError::ConfigInvalid(_) | CliError::MissingArtifact(_) | CliError::InvalidInput(_) | CliError::Split(_) => 1,
            CliError::Io { source, .. } => match source.kind() {
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => 1,
                _ => 2,
            },
            CliError::Model(M::InvalidConfig(_) | M::InvalidTrainConfig(_) | M::EmptyCorpus) => 1,
            CliError::Finetune(
                FinetuneError::EmptySplit(_)
                | FinetuneError::SingleClass
                | FinetuneError::InvalidTask(_)
                | FinetuneError::InvalidLabel(_),
            ) => 1,
            CliError::Corrupt(_) | CliError::Tokenizer(_) => 1,
            _ => 2,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::InvalidInput(e.to_string())
    }
}
