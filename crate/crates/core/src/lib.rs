//! Scoring and ensembling for road-damage object detection.
//!
//! * [`geometry`]: boxes and Intersection over Union.
//! * [`dataset`]: Pascal-VOC ground truth, `submission` and `scored`
//!   detection files, dataset composition counts.
//! * [`metrics`]: class-matched greedy matching at IoU > 0.5 and
//!   precision / recall / F1.
//! * [`fusion`]: NMS, consensus voting and weighted boxes fusion across
//!   models, plus confidence-threshold sweeps.
//! * [`report`]: tables and CSV curves.
//! * [`cli`]: the `rddeval` command.
//!
//! The guide under `book/` walks through each piece; its Rust snippets are
//! compiled and run as doctests of this crate.

pub mod cli;
pub mod dataset;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod report;

pub use dataset::{DamageClass, Detection, GroundTruthBox};
pub use geometry::BBox;
pub use metrics::{compute_f1, evaluate, match_image, Counts};

// Run the guide's code blocks as doctests, one module per chapter so a
// failure points at its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
