use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{label_letter, McOptions, PromptSpec};
use crate::error::{Error, Result};

/// Render a spec as prompt text.
///
/// Open-ended blocks are `Q: x\nA: y\n\n` and the prompt ends `Q: x_q\nA: `.
/// Multiple-choice blocks list four lettered options and end `Response: (`.
pub fn render_prompt(spec: &PromptSpec) -> String {
    let mut out = String::new();
    match &spec.query_options {
        None => {
            for d in &spec.demonstrations {
                let _ = write!(out, "Q: {}\nA: {}\n\n", d.input, d.output);
            }
            let _ = write!(out, "Q: {}\nA: ", spec.query);
        }
        Some(q) => {
            for d in &spec.demonstrations {
                let opts = d.options.as_ref().expect("MC demonstration without options");
                mc_block(&mut out, &d.input, opts);
                let _ = write!(out, "{})\n\n", opts.correct_label());
            }
            mc_block(&mut out, &spec.query, q);
        }
    }
    out
}

fn mc_block(out: &mut String, input: &str, opts: &McOptions) {
    let _ = writeln!(out, "Instruction: Q: {input} A: ?");
    for (i, o) in opts.options.iter().enumerate() {
        let _ = writeln!(out, "({}) {o}", label_letter(i));
    }
    out.push_str("Response: (");
}

/// One line of a rendered-prompt dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub prompt_id: String,
    pub text: String,
    pub gold: String,
    pub metadata: serde_json::Value,
}

impl RenderedPrompt {
    pub fn from_spec(spec: &PromptSpec) -> Self {
        Self {
            prompt_id: spec.prompt_id.clone(),
            text: render_prompt(spec),
            gold: spec.gold.clone(),
            metadata: serde_json::json!({
                "concept": spec.concept,
                "format": spec.format,
                "query": spec.query,
                "answer": spec.answer,
                "shots": spec.demonstrations.len(),
            }),
        }
    }
}

/// Write prompts as JSON lines.
pub fn write_prompt_dump<'a>(path: &Path, prompts: impl IntoIterator<Item = &'a RenderedPrompt>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in prompts {
        let line = serde_json::to_string(p).map_err(|e| Error::json("prompt dump", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
