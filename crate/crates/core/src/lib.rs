//! Core algorithms for a desk-scale distillation toolkit: a small
//! encoder-decoder transcription model plus the full method stack around it --
//! sequence-level knowledge distillation with pseudo-label filtering, greedy /
//! speculative / early-exit decoding, chunked long-form transcription, and
//! word-error-rate evaluation.
//!
//! The crate is `no_std`-compatible (with `alloc`); everything that touches
//! files, clocks, or threads lives in the companion `distilkit` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod corpus;
pub mod decode;
pub mod error;
pub mod longform;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod num;
pub mod rng;
pub mod signal;
pub mod tape;

pub use error::{CoreError, Result};
