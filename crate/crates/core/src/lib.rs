//! Meta-learned per-entity personalization for binary recommenders.
//!
//! The crate covers the whole offline/online loop: task-grouped data, three
//! trainers (plain, full-network MAML, and the partial meta-block variant),
//! per-task meta embedding generation, a versioned binary embedding store,
//! a forward-only scorer, and evaluation and sweep harnesses.

pub mod data;
pub mod embedgen;
pub mod eval;
pub mod error;
pub mod numcore;
pub mod seeds;
pub mod serving;
pub mod store;
pub mod training;

pub use error::{Error, Result};
