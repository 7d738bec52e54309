//! Multilingual translation with selective distillation from per-pair
//! teachers.
//!
//! The crate covers the whole pipeline: parallel corpus loading and
//! balancing ([`corpus`]), subword segmentation ([`bpe`]), a transformer
//! with a hand-written backward pass ([`model`]), token-level losses
//! ([`loss`]), teacher top-K export ([`teacher`]), the training loops
//! ([`trainer`]) and decoding plus BLEU ([`eval`]).

pub mod bpe;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod synth;
mod real;
pub mod teacher;
pub mod trainer;

pub use real::Real;
