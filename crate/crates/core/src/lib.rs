//! Open-set domain recognition on desk-scale feature domains.
//!
//! The crate trains an attention-based graph network that regresses
//! linear classifier weights from class semantics over a knowledge graph,
//! uses those weights to initialize a classifier for classes that have no
//! labeled source samples, and then fine-tunes the classifier jointly with
//! a cross-domain matching loss that only counts nearest-neighbour pairs
//! whose classifier responses agree.
//!
//! Module map:
//! - [`tensor`], [`tape`]: dense matrices and reverse-mode gradients.
//! - [`graph`]: class knowledge graph and its text file formats.
//! - [`gcn`]: the two-layer attention network and its regression loss.
//! - [`backbone`], [`dataset`]: feature map, classifier, losses, feature files.
//! - [`matching`]: greedy matching, consistency filter, discrepancy loss, Hungarian baseline.
//! - [`pipeline`]: two-stage training and the run manifest.
//! - [`synth`]: reproducible synthetic domains.
//! - [`eval`], [`ablation`]: metrics, inspection dumps, ablation grid.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod graph;
pub mod matching;
pub mod pipeline;
pub mod synth;
pub mod tape;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Matrix;
