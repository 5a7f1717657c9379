//! Context-aware robust fine-tuning of a toy dual-encoder model.
//!
//! A synthetic world of classes and contexts, a small image/text dual
//! encoder pre-trained contrastively, and fine-tuning methods that either
//! ignore (FT, TP-FT, LP-FT) or preserve (CAR-FT) the encoder's zero-shot
//! context recognition. Weight-space ensembles and evaluation protocols
//! complete the pipeline.

pub mod ensemble;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod prompts;
pub mod trainer;
pub mod worldgen;

pub use error::{CheckpointError, Error, ErrorKind, Result};
