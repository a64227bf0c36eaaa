use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("shape mismatch for `{0}`")]
    ShapeMismatch(String),
    #[error("non-finite value in tensor `{0}`")]
    NonFiniteWeight(String),
    #[error("token out of range in sequence {seq} at position {pos}")]
    TokenOutOfRange { seq: usize, pos: usize },
    #[error("sequence {0} is empty")]
    EmptySequence(usize),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence of length {len} is too short (need at least {min})")]
    SequenceTooShort { len: usize, min: usize },
    #[error("layer {layer} out of range for a {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("head {head} out of range ({n_heads} heads)")]
    HeadOutOfRange { head: usize, n_heads: usize },
    #[error("duplicate layer {0} in skip set")]
    DuplicateSkip(usize),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("spectrum is identically zero")]
    AllZeroSpectrum,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("need at least {min} samples, got {actual}")]
    TooFewSamples { min: usize, actual: usize },
    #[error("top-k energy needs k >= 1")]
    InvalidTopK,
    #[error("zero variance in ranked input")]
    ZeroVariance,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no corpus passage with length in [{min}, {max}]")]
    EmptyBucket { min: usize, max: usize },
    #[error("invalid bucket spec: {0}")]
    InvalidBuckets(String),
    #[error("metric `{0}` is zero at every layer after normalization")]
    DegenerateMetric(&'static str),
    #[error("score weights must be non-negative and sum to 1")]
    WeightSumInvalid,
    #[error("m = {m} out of range for {n_layers} layers")]
    MOutOfRange { m: usize, n_layers: usize },
    #[error("unsupported bit width {0}")]
    UnsupportedBitWidth(u8),
    #[error("plan covers {actual} layers, model has {expected}")]
    PlanLengthMismatch { expected: usize, actual: usize },
    #[error("code {code} at index {index} does not fit in {bits} bits")]
    CodeOutOfRange { index: usize, code: u8, bits: u8 },
    #[error("invalid group size {0}")]
    InvalidGroupSize(usize),
    #[error("fixture dimensions too large: {0}")]
    DimsTooLarge(String),
    #[error("architecture mismatch between models")]
    ArchMismatch,
    #[error("quantized model was built from checkpoint {expected:#010x}, got {actual:#010x}")]
    SourceMismatch { expected: u32, actual: u32 },
    #[error("invalid fixture spec: {0}")]
    InvalidFixture(String),
}
