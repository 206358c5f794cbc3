//! The chapters of the guide in `book/`, included so that `cargo test` runs
//! every example in them.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/merkle-trees.md")]
pub mod merkle_trees {}

#[doc = include_str!("../../../book/src/receipts.md")]
pub mod receipts {}

#[doc = include_str!("../../../book/src/anchoring.md")]
pub mod anchoring {}

#[doc = include_str!("../../../book/src/exports.md")]
pub mod exports {}

#[doc = include_str!("../../../book/src/misbehavior.md")]
pub mod misbehavior {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
