use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Data length does not match the product of the shape.
    BadTensor {
        shape: Vec<usize>,
        len: usize,
    },
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    TopKTooLarge {
        k: usize,
        len: usize,
    },
    NotEnoughExperts {
        k: usize,
        available: usize,
    },
    NanInput {
        op: &'static str,
    },
    NonFinite(String),
    LossNotScalar {
        shape: Vec<usize>,
    },
    UnknownParam(String),
    InvalidStep(f64),
    SequenceTooShort {
        len: usize,
        min: usize,
    },
    TokenOutOfRange {
        token: usize,
        vocab: usize,
    },
    InvalidConfig(String),
    MaskOutOfRange {
        layer: usize,
        expert: usize,
    },
    InvalidMap(String),
    ZeroRow {
        layer: usize,
    },
    ZeroMass,
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },
    MapShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    EmptyGroup(String),
    BadLayerRange {
        start: usize,
        end: usize,
        layers: usize,
    },
    OverlapTooLarge {
        k: usize,
        len: usize,
    },
    NoCandidates(&'static str),
    EmptyInput(&'static str),
    MissingLabel {
        prompt_id: String,
        arm: &'static str,
    },
    DuplicateLabel {
        prompt_id: String,
        arm: &'static str,
    },
    Labeler(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::BadTensor { shape, len } => {
                write!(f, "tensor shape {shape:?} does not match data length {len}")
            }
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::TopKTooLarge { k, len } => {
                write!(f, "top-k: k = {k} exceeds last-axis length {len}")
            }
            Error::NotEnoughExperts { k, available } => {
                write!(
                    f,
                    "top-k routing needs {k} unmasked experts, only {available} available"
                )
            }
            Error::NanInput { op } => write!(f, "{op}: NaN in input"),
            Error::NonFinite(what) => write!(f, "non-finite value: {what}"),
            Error::LossNotScalar { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            Error::UnknownParam(id) => write!(f, "parameter `{id}` is not on the tape"),
            Error::InvalidStep(h) => write!(f, "finite-difference step must be positive, got {h}"),
            Error::SequenceTooShort { len, min } => {
                write!(f, "sequence of length {len} is too short (need at least {min})")
            }
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} out of range for vocabulary of {vocab}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid model config: {msg}"),
            Error::MaskOutOfRange { layer, expert } => {
                write!(
                    f,
                    "suppression pair (layer {layer}, expert {expert}) is out of range"
                )
            }
            Error::InvalidMap(msg) => write!(f, "invalid routing map: {msg}"),
            Error::ZeroRow { layer } => write!(f, "layer {layer} has zero total score"),
            Error::ZeroMass => write!(f, "routing map has zero total mass"),
            Error::KindMismatch { expected, found } => {
                write!(f, "expected a {expected} map, found {found}")
            }
            Error::MapShapeMismatch { expected, found } => write!(
                f,
                "routing map shape mismatch: expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Error::EmptyGroup(group) => write!(f, "no records in group `{group}`"),
            Error::BadLayerRange { start, end, layers } => {
                write!(f, "layer range {start}..{end} is empty or outside 0..{layers}")
            }
            Error::OverlapTooLarge { k, len } => {
                write!(f, "top-{k} overlap requested over only {len} pairs")
            }
            Error::NoCandidates(category) => write!(f, "no rows in category `{category}`"),
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::MissingLabel { prompt_id, arm } => {
                write!(f, "no label for prompt `{prompt_id}` ({arm} arm)")
            }
            Error::DuplicateLabel { prompt_id, arm } => {
                write!(f, "duplicate label for prompt `{prompt_id}` ({arm} arm)")
            }
            Error::Labeler(msg) => write!(f, "labeler failed: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
