use thiserror::Error;

use crate::ndgrad::NdError;
use crate::stylegen::Stage;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("stage {0:?} cannot receive an injection")]
    InvalidInjectionStage(Stage),
    #[error("unknown edit target `{0}`")]
    UnknownTarget(String),
    #[error("prompt does not match any template: `{0}`")]
    UnparseablePrompt(String),
    #[error("label `{0}` is not in the lexicon")]
    UnknownLabel(String),
    #[error("image values must lie in [0,1]")]
    BadImageRange,
    #[error("vector norm {0:e} is too small to normalize")]
    DegenerateVector(f64),
    #[error("target prompt embeds to the source prompt; no edit direction")]
    SourceEqualsTarget,
    #[error("lexicon has no labels for {0}")]
    EmptyLexicon(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
