//! Minimal decoder-only inference runtime with capture, patch and inject hooks.

mod config;
mod hooks;
mod model;
mod record;
mod tokenizer;
pub mod weights;

pub use config::{Activation, HeadLocator, ModelConfig, NormKind, PositionalKind};
pub use hooks::{HeadCapture, HookSet, Injection, Patch};
pub use model::{softmax, ForwardOutput, Model, PreparedPrompt};
pub use record::{ActivationRecord, ResidualState};
pub use tokenizer::Tokenizer;
pub use weights::{LayerWeights, ModelWeights, NormParams, SpecialTokens};
