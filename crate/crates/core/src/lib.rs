//! Unsupervised embedding learning on a memory bank: neighborhood discovery
//! with an entropy-ranked curriculum, a unification-entropy loss, and an
//! augmentation-invariance loss over relationship vectors, plus the encoder,
//! trainer, evaluator and file formats around them.

pub mod augmentation;
pub mod data_io;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod image;
pub mod losses;
pub mod memory_bank;
pub mod neighborhood;
pub mod numerics;
pub mod probability;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
