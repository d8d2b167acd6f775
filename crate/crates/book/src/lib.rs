//! Every chapter of `book/src` as a module, so `cargo test` runs its code blocks.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/objectives.md")]
pub mod objectives {}

#[doc = include_str!("../../../book/src/scoring.md")]
pub mod scoring {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}
