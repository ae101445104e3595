//! Damage-aware semantic segmentation toolkit.
//!
//! Implements the full training/inference protocol for fine-grained damage
//! segmentation at desk scale: class-aware crop sampling, OHEM + Dice losses
//! with analytic gradients, a tiny hierarchical mix-transformer, AdamW with
//! cosine annealing, resolution-preserving sliding-window inference, and
//! confusion-matrix IoU evaluation. A seeded synthetic scene generator
//! reproduces the target class imbalance so the whole pipeline can be
//! exercised end-to-end on CPU.

pub mod config;
pub mod datamodel;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod selftest;
pub mod tiler;
pub mod trainer;

pub use error::{Error, Result};
