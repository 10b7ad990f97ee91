//! Entity-aware masked language model batch generation for biomedical text,
//! with the surrounding tooling: subword tokenization with offsets, entity
//! lexicons from NER output, BioASQ/CovidQA dataset handling, QA ranking
//! metrics and a small masked-token predictor for perplexity checks.

pub mod batchfile;
pub mod corpus;
pub mod datasets;
pub mod error;
pub mod lexicon;
pub mod masking;
pub mod metrics;
pub mod provenance;
pub mod rng;
pub mod text;
pub mod tokenizer;
pub mod toy_mlm;

pub use error::{Error, Result};
