//! Deterministic desk-scale simulator for client drift (spatial shift across
//! federated clients) and catastrophic forgetting (temporal shift during
//! training), and for the landscape of both combined.

pub mod analysis;
pub mod corruptions;
pub mod error;
pub mod experiments;
pub mod federation;
pub mod io;
pub mod nn;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
