//! Character-level recurrent language models: a plain Elman RNN, a variant
//! conditioned on a word-level RNN, and a variant whose output layer is
//! selected by the longest frequent n-gram ending at the current character.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod ngram;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use experiment::Experiment;
pub use error::{CheckpointError, Error, Result};
pub use model::{Model, ModelKind};
pub use trainer::TrainConfig;
