//! FOOD: a few-shot open-set detection head operating on proposal feature
//! vectors.
//!
//! The head is a small affine+ReLU trunk followed by a cosine classifier
//! with `K + 2` output slots: `K` known classes (base first, then novel),
//! one unknown slot and one background slot. Training combines
//! cross-entropy with a decoupled sigmoid loss on the unknown logit, driven
//! by high conditional-energy pseudo-unknown proposals. During fine-tuning
//! the normalized classifier weights are randomly sparsified.
//!
//! Modules follow the pipeline: [`synthbench`] generates data, [`train`]
//! fits the [`head`], [`metrics`] scores detections, and [`experiment`]
//! drives the whole thing from a flat config file.

// `!(x > 0.0)` is the NaN-rejecting form used throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cwsc;
pub mod error;
pub mod experiment;
pub mod head;
pub mod metrics;
pub mod numerics;
pub mod selfcheck;
pub mod synthbench;
pub mod train;
pub mod udl;

pub use error::{FoodError, Result};
