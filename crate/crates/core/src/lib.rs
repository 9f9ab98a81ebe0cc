//! Core library of the fine-tuning laboratory: a small causal transformer
//! with exact-reproducibility guarantees, four adaptation strategies, a
//! synthetic grammaticality task plus TSV corpus ingestion, metrics capture,
//! and a Bayesian hyperparameter search.
//!
//! Everything is f64 and deterministic: given the same seed and config, two
//! runs produce byte-identical artifacts, with or without the `parallel`
//! feature.

pub mod data;
pub mod hpo;
pub mod lora;
pub mod mem;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
