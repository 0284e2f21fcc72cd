//! Locate function-vector heads by activation patching and concept heads by
//! representational similarity analysis, then steer a small transformer with
//! vectors built from either head family.

pub mod error;
pub mod patching;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod rsa;
pub mod runtime;
pub mod steering;
pub mod tasks;
pub mod toy;
pub mod vectors;

pub use error::{Error, Result};
pub use runtime::{ActivationRecord, HeadLocator, HookSet, Model, ModelConfig};
