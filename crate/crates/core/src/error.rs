use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tokenizer::TokenId;

/// Errors raised by the tokenizer model and its codec.
#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("malformed tokenizer definition: {0}")]
    Malformed(String),
    #[error("duplicate token id {id} ({first:?} and {second:?})")]
    DuplicateId {
        id: TokenId,
        first: String,
        second: String,
    },
    #[error("token ids are not dense: id {0} is unassigned")]
    SparseIds(TokenId),
    #[error("merge {left:?} + {right:?} produces a piece absent from the vocabulary")]
    MergeNotInVocab { left: String, right: String },
    #[error("merge operand {0:?} is absent from the vocabulary")]
    MergeOperandMissing(String),
    #[error("byte unit for 0x{0:02X} is absent from the vocabulary")]
    MissingByteToken(u8),
    #[error("special token {0:?} is not in the vocabulary")]
    UnknownSpecial(String),
    #[error("unknown id {0}")]
    UnknownId(TokenId),
    #[error("empty sample: text contains no words")]
    EmptySample,
}

/// Errors raised while reading, writing or converting tensor containers.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("header length {header} exceeds file size {file}")]
    HeaderTooLarge { header: u64, file: u64 },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("tensor {name:?}: data_offsets [{begin}, {end}) overlap the previous tensor")]
    Overlap {
        name: String,
        begin: usize,
        end: usize,
    },
    #[error("tensor {name:?}: data_offsets leave a gap at byte {at}")]
    Gap { name: String, at: usize },
    #[error("tensor {name:?}: {len} bytes do not match shape {shape:?} of {dtype}")]
    SizeMismatch {
        name: String,
        len: usize,
        shape: Vec<usize>,
        dtype: String,
    },
    #[error("tensor {0:?}: shape must have at least one extent and no zero extents")]
    BadShape(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("missing tensor {0:?}")]
    Missing(String),
}

/// Errors raised by vocabulary injection.
#[derive(Debug, Error)]
pub enum InjectError {
    #[error("candidate {0:?} collides with special token")]
    SpecialCollision(String),
    #[error("candidate at line {0} is empty")]
    EmptyPiece(usize),
    #[error("candidate line {line}: bad score {score:?}")]
    BadScore { line: usize, score: String },
}

/// Errors raised by embedding surgery.
#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("v_new ({v_new}) must exceed v_old ({v_old})")]
    NotGrowing { v_old: usize, v_new: usize },
    #[error("tensor {name:?} has shape {actual:?}, plan expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("new token id {id} lies outside [{v_old}, {v_new})")]
    IdOutOfRange {
        id: usize,
        v_old: usize,
        v_new: usize,
    },
    #[error("new token ids do not cover [{v_old}, {v_new}) exactly")]
    IncompleteCoverage { v_old: usize, v_new: usize },
    #[error("surface {surface:?} decomposes to id {id} >= v_old {v_old}")]
    UninitializedSource {
        surface: String,
        id: usize,
        v_old: usize,
    },
    #[error("unk id {unk} is not an original row (v_old {v_old})")]
    BadUnk { unk: usize, v_old: usize },
    #[error("tensor {0:?} is not a floating-point tensor")]
    NotFloat(String),
    #[error("no unk id given and the tokenizer defines none")]
    NoUnk,
}

/// Errors raised by the pretraining packer and window sampler.
#[derive(Debug, Error)]
pub enum PackError {
    #[error("tokenizer has no eos token")]
    NoEos,
    #[error("window length {len} exceeds stream of {tokens} tokens")]
    WindowTooLong { len: usize, tokens: usize },
    #[error("window length must be at least 1")]
    ZeroWindow,
    #[error("empty benchmark")]
    EmptyBenchmark,
    #[error("token file size {0} is not a multiple of 4")]
    RaggedFile(u64),
    #[error("batch plan fields must all be >= 1")]
    ZeroBatchField,
    #[error("document line {line}: {msg}")]
    BadDocument { line: usize, msg: String },
    #[error("sidecar records {meta} tokens but the file holds {file}")]
    MetaMismatch { meta: usize, file: u64 },
}

/// Errors raised by SFT data preparation.
#[derive(Debug, Error)]
pub enum SftError {
    #[error("unknown role {0:?}")]
    UnknownRole(String),
    #[error("example has no assistant turn")]
    NoAssistantTurn,
    #[error(
        "roles must alternate user/assistant after an optional leading system turn (turn {0})"
    )]
    BadTurnOrder(usize),
    #[error("tokenizer is missing special token {0:?}")]
    MissingSpecial(&'static str),
    #[error("label stream length {labels} diverges from token stream length {tokens}")]
    LengthDivergence { tokens: usize, labels: usize },
    #[error("no response tokens in output")]
    NoResponseTokens,
    #[error("example line {line}: {msg}")]
    BadExample { line: usize, msg: String },
}

/// Errors raised by checkpoint merging.
#[derive(Debug, Error)]
pub enum MergeError {
    #[error("stores differ: {0}")]
    StructureMismatch(String),
    #[error("interpolation factor {0} outside [0, 1]")]
    BadFactor(f64),
    #[error("weights must sum to 1 (got {0})")]
    WeightSum(f64),
    #[error("weights must be non-negative")]
    NegativeWeight,
    #[error("{method} needs {expected} operands, got {got}")]
    OperandCount {
        method: &'static str,
        expected: &'static str,
        got: usize,
    },
    #[error("weight count {weights} does not match operand count {operands}")]
    WeightCount { weights: usize, operands: usize },
    #[error("duplicate recipe name {0:?}")]
    DuplicateRecipe(String),
}

/// Errors raised by the loss and metric kernels.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no supervised positions")]
    NoSupervisedPositions,
    #[error("log-prob and label lengths differ ({logprobs} vs {labels})")]
    LengthMismatch { logprobs: usize, labels: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("beta must be positive (got {0})")]
    BadBeta(f64),
    #[error("loss must be finite")]
    NonFiniteLoss,
}

/// Errors raised by the quantization footprint estimator.
#[derive(Debug, Error)]
pub enum QuantError {
    #[error("empty manifest")]
    EmptyManifest,
    #[error("tensor {0:?} has an empty shape")]
    EmptyShape(String),
    #[error("invalid scheme: {0}")]
    BadScheme(String),
}

/// Crate-wide error: module errors plus I/O and JSON failures with context.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{context}: {source}")]
    Json {
        context: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True when the failure came from the filesystem rather than from input content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
