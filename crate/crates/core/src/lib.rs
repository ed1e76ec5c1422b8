//! Direct rewriting of a convolutional classifier's prediction rules.
//!
//! A conv block is treated as an associative memory from unfolded
//! receptive-field keys to output values. An edit maps the keys of a
//! transformed concept onto the values of the original concept with a
//! rank-one update of the block's weights. The crate also ships the
//! fine-tuning baselines, a procedural benchmark with exact concept masks,
//! the correction metrics and hyperparameter selection, and rule discovery.

pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod nets;
pub mod rewrite;
pub mod seeds;
pub mod synthbench;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
