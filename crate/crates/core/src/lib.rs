//! Localized visual tokenization toolkit.
//!
//! An image is encoded into a grid of patch tokens plus a small set of
//! region tokens, each bound to a bounding box and addressed in text through
//! a proxy token `<rN>`. This crate holds every stage of that pipeline with
//! deterministic toy weights in place of trained networks, the grounded
//! markup grammar, multi-box grounding evaluation, and the visual-prompt
//! driven conversation-generation pipeline.

pub mod eval;
pub mod fixtures;
pub mod geometry;
pub mod grammar;
pub mod instruct;
pub mod pipeline;
pub mod region;
pub mod rng;
pub mod vision;

pub use geometry::{BoundingBox, ScoredBox, SizeBucket};
pub use grammar::{GroundedResponse, GroundedSpan, Segment};
pub use region::{ProxyRegistry, RegionProposal, RegionToken};
pub use vision::{FeaturePyramid, ImageArray, TokenGrid};

/// Crate version, recorded in artifact manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
