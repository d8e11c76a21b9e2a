//! Hyper-kernel neural architecture search for hyperspectral image
//! classification.
//!
//! Candidate convolutions of every searchable layer are centered crops of a
//! single over-sized "hyper kernel", and the importance score of each
//! candidate is the mean weight of the ring it adds to the next-smaller
//! crop. Searching therefore only trains ordinary weights; the architecture
//! is read off the kernels afterwards.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod hyperkernel;
pub mod metrics;
pub mod mixedop;
pub mod ndtensor;
pub mod optim;
pub mod searchspace;

pub use error::{Error, Result};
