//! Visual guidance for text-only sequence models: a word-image dictionary
//! built from a sentence-image corpus, gated attention that fuses retrieved
//! image features into encoder states, and a small Transformer
//! encoder-decoder trained from scratch around it.

pub mod benchmark;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod dictionary;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod real;
pub mod training;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use corpus::{SentenceImagePair, StopWordList, TokenSequence, TokenizerConfig, TokenizerMode};
pub use dictionary::WordImageDictionary;
pub use error::{Error, Result};
pub use features::{ImageFeatureStore, ImageTensor};
pub use fusion::{fusion_forward, FusionParams};
pub use model::{GuidedModel, ModelConfig, Seq2Seq};
pub use parallel::Exec;
pub use training::{lr_at, train, TrainConfig};
