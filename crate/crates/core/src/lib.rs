//! Semi-supervised CTC sequence recognition on a synthetic speech-like task.
//!
//! The crate provides an exact CTC engine with LM-fused prefix beam search,
//! a small Conformer-style encoder with hand-written reverse-mode gradients,
//! a backoff n-gram language model, SpecAugment-style masking, a synthetic
//! data generator with domain-shift controls, error-rate metrics, and the
//! three training regimes: supervised seeding, (iterative) pseudo-labeling
//! and momentum pseudo-labeling.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod ctc;
pub mod logmath;
pub mod augment;
pub mod datagen;
pub mod lm;
pub mod metrics;
pub mod encoder;
pub mod trainer;
pub mod config;
pub mod pipeline;
