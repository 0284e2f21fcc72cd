//! Prompt specs turned into model input.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::runtime::Model;
use crate::tasks::{render_prompt, PromptSpec};

/// Token ids of a rendered prompt (BOS first) and the first token of its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPrompt {
    pub prompt_id: String,
    pub tokens: Vec<u32>,
    pub gold: u32,
}

impl EncodedPrompt {
    pub fn new(model: &Model, spec: &PromptSpec) -> Result<Self> {
        Self::from_text(model, &spec.prompt_id, &render_prompt(spec), &spec.gold)
    }

    pub fn from_text(model: &Model, prompt_id: &str, text: &str, gold: &str) -> Result<Self> {
        let tok = model.tokenizer();
        Ok(Self {
            prompt_id: prompt_id.to_string(),
            tokens: tok.encode_prompt(text)?,
            gold: tok.first_token(gold)?,
        })
    }
}

pub fn encode_all(model: &Model, specs: &[PromptSpec]) -> Result<Vec<EncodedPrompt>> {
    specs.iter().map(|s| EncodedPrompt::new(model, s)).collect()
}
