use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("sample generation exhausted after {attempts} attempts (foreground fraction out of range)")]
    GenerationExhausted { attempts: usize },
    #[error("annotation has no usable foreground")]
    EmptyAnnotation,
    #[error("invalid fold {0}, expected 0..=3")]
    InvalidFold(usize),
    #[error("not enough samples: {0}")]
    InsufficientSamples(String),
    #[error("image is {got_h}x{got_w}, encoder expects {want_h}x{want_w}")]
    ResolutionMismatch {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("prototype has zero norm")]
    ZeroPrototype,
    #[error("no priors to fuse")]
    NoPriors,
    #[error("invalid step count T={0}, need T >= 2")]
    InvalidT(usize),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid DDIM step pair t={t} -> t_prev={t_prev}")]
    InvalidStepPair { t: usize, t_prev: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("evaluation on base classes requires allow_base")]
    BaseClassLeak,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
