//! Progressive joint knowledge distillation and unsupervised domain
//! adaptation for compact dense classifiers.
//!
//! Larger teacher networks each adapt to one target domain (via MMD or
//! adversarial domain confusion) while distilling target knowledge and
//! source-consistency knowledge into a smaller student, under an
//! exponentially shifting balance between adaptation and distillation.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod nets;
pub mod schedule;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
