// SPDX-License-Identifier: MIT OR Apache-2.0

//! Detection and caption-hallucination evaluation.

pub mod chair;
pub mod detection;
pub mod svg;

pub use chair::{chair, extract_mentions, CaptionRecord, ChairResult, GroundTruth, ImageChair, ObjectLexicon};
pub use detection::{auroc, evaluate, DetectionResult, PrPoint, RocPoint};
