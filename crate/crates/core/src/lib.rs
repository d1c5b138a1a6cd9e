//! One-class prompt learning for face anti-spoofing over precomputed
//! embeddings: a real prompt and a set of unknown-spoof prompts are learned
//! from real faces only, then used to score test embeddings.

pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod prompts;
pub mod store;
pub mod synthetic;
pub mod trainer;
pub mod vector;

pub use encoder::{FrozenTextEncoder, TokenSeq, Tokenizer, ToyTextEncoder};
pub use error::{Error, Result};
pub use eval::metrics::{ScoredSample, ThresholdPolicy};
pub use eval::protocol::{run_protocol, ProtocolSpec};
pub use eval::report::EvalReport;
pub use losses::{LossBreakdown, LossWeights, Objective};
pub use prompts::{PriorBank, PromptSet, PrototypeMode};
pub use store::{EmbeddingStore, Label, Record, RecordMeta, Split};
pub use trainer::{fit, FitOutput, TrainConfig};
pub use vector::Prob;
