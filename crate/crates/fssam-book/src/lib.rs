//! Doctest shim for the guide in `book/`.
//!
//! mdbook renders the chapters but cannot compile them against the
//! workspace; including each chapter as a doc comment here makes
//! `cargo test --doc` run every code block, so the book cannot drift from
//! the library. Keep one module per chapter so a failing doctest names its
//! chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/feature-maps.md")]
pub mod feature_maps {}

#[doc = include_str!("../../../book/src/prior-masks.md")]
pub mod prior_masks {}

#[doc = include_str!("../../../book/src/memory-refinement.md")]
pub mod memory_refinement {}

#[doc = include_str!("../../../book/src/calibrated-attention.md")]
pub mod calibrated_attention {}

#[doc = include_str!("../../../book/src/episodes-and-metrics.md")]
pub mod episodes_and_metrics {}

#[doc = include_str!("../../../book/src/synthetic-data.md")]
pub mod synthetic_data {}

#[doc = include_str!("../../../book/src/cli-and-formats.md")]
pub mod cli_and_formats {}
