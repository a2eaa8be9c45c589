//! The guide's chapters as doc comments, one module per chapter, so that
//! `cargo test` runs every listing in `book/src`. A failing doctest names
//! the module, which names the chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensors-and-gradients.md")]
pub mod tensors_and_gradients {}
#[doc = include_str!("../../../book/src/recalibration.md")]
pub mod recalibration {}
#[doc = include_str!("../../../book/src/centroids.md")]
pub mod centroids {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
