use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("utterance has too few usable frames: {0}")]
    EmptyUtterance(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("digit {0} does not occur in the training data")]
    MissingDigit(u8),

    #[error("alignment infeasible: {frames} frames for {states} states")]
    AlignmentInfeasible { frames: usize, states: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("scatter needs at least two speakers, got {0}")]
    DegenerateScatter(usize),

    #[error("zero-length vector")]
    ZeroVector,

    #[error("trial {0} shares no digits with its enrollment model")]
    IncompatibleTrial(String),

    #[error("score lists are not aligned: {0}")]
    TrialMismatch(String),

    #[error("trial set needs both target and nontarget scores")]
    DegenerateTrialSet,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt container: {0}")]
    CorruptBundle(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
