//! Weakly supervised contrastive pretraining on anatomical descriptors.
//!
//! The crate covers the full loop on a single machine: a small reverse-mode
//! autodiff engine (`numgrad`), regional anatomy descriptors and degrees
//! (`anatomy`), the contrastive losses built on both (`losses`), an MLP
//! encoder with Adam and checkpointing (`model`), synthetic cohort
//! generation and splitting (`cohort`), and linear probes for frozen
//! representations (`probe`).

pub mod anatomy;
pub mod cohort;
pub mod error;
pub mod losses;
pub mod model;
pub mod numgrad;
pub mod probe;

pub use error::{Error, Result};
