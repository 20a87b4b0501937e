//! Label-free pronoun resolution on twin-sentence pairs.
//!
//! A masked language model scores each candidate in each sentence of a pair;
//! the mutual-exclusivity loss pushes the 2×2 probability matrix toward one of
//! the two consistent assignments without reading any labels.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod mlm;
pub mod optim;
pub mod scorer;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use corpus::{
    load_corpus, save_corpus, validate, Corpus, SchemaSentence, TwinPair, ValidationReport,
};
pub use error::{Error, Result};
pub use eval::{evaluate, resolve, EvalReport, Resolution};
pub use loss::{total_loss, CmVariant, LossHyper, LossValue};
pub use mlm::{
    init_model, load_checkpoint, save_checkpoint, ExternalScorer, ModelConfig, ModelParams,
    ScorerBackend,
};
pub use scorer::{MaskedQuery, PairProb};
pub use synth::synth_generate;
pub use tokenizer::{build_vocab, load_vocab, save_vocab, Vocab};
pub use train::{train, train_with, TrainConfig, TrainLog};
