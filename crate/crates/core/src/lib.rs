//! Persona-conditioned next-utterance retrieval.
//!
//! The crate covers the whole path from a raw threaded-comment dump to an
//! evaluated ranking model:
//!
//! * [`text`]: tokenization, sentence splitting, frequency-capped vocabularies
//! * [`pos`]: coarse lexicon-driven part-of-speech tagging
//! * [`ingest`]: streaming comment parsing and parent/child pairing
//! * [`persona`]: rule filter, bag-of-words persona classifier, persona setups
//! * [`dataset`]: splits, example assembly, coverage, external dialogue files
//! * [`tensor`]: dense tensors with reverse-mode differentiation
//! * [`model`]: encoders, persona memory and dot-product scoring
//! * [`training`]: in-batch negative softmax loss, Adamax, fine-tuning
//! * [`eval`]: candidate sets, hits@k, TF-IDF baseline, ablation tables
//! * [`pipeline`]: staged on-disk pipeline with content-hash provenance
//! * [`synth`]: deterministic synthetic corpora for tests and demos

pub mod dataset;
pub mod error;
pub mod eval;
pub mod hashing;
pub mod ingest;
pub mod io;
pub mod model;
pub mod persona;
pub mod pipeline;
pub mod pos;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
