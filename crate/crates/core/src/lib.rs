//! Privacy-preserving dataset release via k-way mixup plus Laplacian noise,
//! with an exact pure-DP accountant, poisoning attack generators, filtering
//! defenses, a deterministic from-scratch trainer, and a benchmark harness.

pub mod attack;
pub mod augment;
pub mod privacy;
pub mod datastore;
pub mod defense;
pub mod error;
pub mod harness;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use harness::run_cli;
