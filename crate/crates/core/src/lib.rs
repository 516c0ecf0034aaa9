//! Segment-level renaming for open-vocabulary segmentation benchmarks.

pub mod candidates;
pub mod context;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod names;
pub mod renovation;
pub mod store;
pub mod synthetic;
pub mod verify;

pub use error::{Error, ErrorKind, Result};
pub use mask::Mask;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/context.md")]
    mod context {}
    #[doc = include_str!("../../../book/src/candidates.md")]
    mod candidates {}
    #[doc = include_str!("../../../book/src/renaming.md")]
    mod renaming {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
