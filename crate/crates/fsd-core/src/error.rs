use core::fmt;

/// Errors shared across the probability, model, decoding, and oracle layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// All weights passed to normalization were zero.
    AllZero,
    /// A negative weight was passed where a probability weight was expected.
    NegativeWeight { index: usize, value: f64 },
    /// Probabilities do not sum to 1 within the construction tolerance.
    NotNormalized { sum: f64 },
    /// Temperature must be strictly positive.
    NonPositiveTemperature { tau: f64 },
    /// Two distributions with different vocabulary sizes were combined.
    VocabMismatch { left: usize, right: usize },
    /// A token id is outside the model's vocabulary.
    TokenOutOfRange { token: u32, vocab_size: usize },
    /// The SD acceptance ratio is undefined when the draft assigns zero
    /// probability to the candidate.
    ZeroDraftProbability { token: u32 },
    /// The SD residual is undefined when target and draft agree exactly.
    DegenerateResidual,
    /// The exact enumeration would exceed the sequence cap.
    EnumerationTooLarge { sequences: u64, cap: u64 },
    /// Two sequence distributions over different domains were compared.
    DomainMismatch,
    /// A backend failed while decoding; the block index gives the position.
    Backend { block: usize, message: alloc::string::String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::AllZero => write!(f, "all weights are zero"),
            Error::NegativeWeight { index, value } => {
                write!(f, "negative weight {value} at index {index}")
            }
            Error::NotNormalized { sum } => {
                write!(f, "probabilities sum to {sum}, expected 1 within 1e-9")
            }
            Error::NonPositiveTemperature { tau } => {
                write!(f, "temperature {tau} is not strictly positive")
            }
            Error::VocabMismatch { left, right } => {
                write!(f, "vocabulary sizes differ: {left} vs {right}")
            }
            Error::TokenOutOfRange { token, vocab_size } => {
                write!(f, "token {token} out of range for vocab of {vocab_size}")
            }
            Error::ZeroDraftProbability { token } => {
                write!(f, "draft probability of candidate {token} is zero")
            }
            Error::DegenerateResidual => {
                write!(f, "residual distribution undefined: target equals draft")
            }
            Error::EnumerationTooLarge { sequences, cap } => {
                write!(f, "enumeration of {sequences} sequences exceeds cap {cap}")
            }
            Error::DomainMismatch => write!(f, "sequence distributions over different domains"),
            Error::Backend { block, message } => {
                write!(f, "backend error in block {block}: {message}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
