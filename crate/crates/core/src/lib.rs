// SPDX-License-Identifier: MIT OR Apache-2.0

//! Segmentation-based attention entropy (SAE) toolkit.
//!
//! Measures how dispersed a vision-language decoder's visual attention is
//! across semantic segments when it emits an object word, turns that into a
//! per-object reliability score for hallucination detection, evaluates
//! detectors and captions, and provides an SAE-gated attention-logit
//! intervention together with a small deterministic decoder to exercise it.

pub mod cli;
pub mod error;
mod fsutil;
pub mod intervene;
pub mod metrics;
pub mod reliability;
pub mod sae;
pub mod seg_align;
pub mod tensorio;
pub mod toymodel;
pub mod trace;

pub use error::{Error, FormatError, Result};
