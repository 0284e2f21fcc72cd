use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pairs::{ConceptPairs, TranslationTable, WordPair};
use super::{Concept, Format};
use crate::error::{Error, Result};

pub const MC_OPTIONS: usize = 4;

/// Letter for option `i` (`0 -> "a"`).
pub fn label_letter(i: usize) -> char {
    (b'a' + i as u8) as char
}

/// Four unique answer strings and the index of the correct one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct McOptions {
    pub options: Vec<String>,
    pub correct: usize,
}

impl McOptions {
    pub fn correct_label(&self) -> char {
        label_letter(self.correct)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Demonstration {
    pub input: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<McOptions>,
}

/// One few-shot prompt before rendering.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prompt_id: String,
    pub concept: Concept,
    pub format: Format,
    pub demonstrations: Vec<Demonstration>,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_options: Option<McOptions>,
    /// `y_q`, the expected answer word.
    pub answer: String,
    /// Text the model should emit next: the answer word, or the option letter for MC.
    pub gold: String,
}

impl PromptSpec {
    /// Same query with every demonstration removed.
    pub fn zero_shot(&self) -> Self {
        Self {
            prompt_id: format!("{}-0shot", self.prompt_id),
            demonstrations: Vec::new(),
            ..self.clone()
        }
    }

    /// Check the structural invariants of a generated spec.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Dataset(format!("{}: {msg}", self.prompt_id)));
        if self.demonstrations.iter().any(|d| d.output == self.answer) {
            return bad("gold answer appears as a demonstration output");
        }
        let mut inputs: BTreeSet<&str> = self.demonstrations.iter().map(|d| d.input.as_str()).collect();
        if inputs.len() != self.demonstrations.len() || !inputs.insert(&self.query) {
            return bad("demonstration and query inputs are not distinct");
        }
        let mc = self.format == Format::MultipleChoice;
        let opts = self
            .demonstrations
            .iter()
            .map(|d| (&d.options, &d.output))
            .chain(std::iter::once((&self.query_options, &self.answer)));
        for (o, correct) in opts {
            match (mc, o) {
                (false, None) => {}
                (true, Some(o)) => {
                    let unique: BTreeSet<&String> = o.options.iter().collect();
                    if o.options.len() != MC_OPTIONS || unique.len() != MC_OPTIONS {
                        return bad("MC options are not 4 unique strings");
                    }
                    if o.options.get(o.correct) != Some(correct) {
                        return bad("MC correct label does not point at the answer");
                    }
                }
                _ => return bad("options present exactly when the format is MC"),
            }
        }
        let expected_gold = match &self.query_options {
            Some(o) => o.correct_label().to_string(),
            None => self.answer.clone(),
        };
        if self.gold != expected_gold {
            return bad("gold does not match the answer");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_prompts: usize,
    pub shots: usize,
    pub seed: u64,
}

impl DatasetParams {
    /// 50 prompts with the format's default shot count.
    pub fn standard(format: Format, seed: u64) -> Self {
        Self {
            n_prompts: 50,
            shots: format.default_shots(),
            seed,
        }
    }
}

/// Sample `n_prompts` prompts for one (concept, format) dataset.
///
/// Within a prompt the demonstrations and query are distinct pairs and no
/// demonstration shares the query's answer. Pairs may recur across prompts.
pub fn build_dataset(
    pairs: &ConceptPairs,
    format: Format,
    params: &DatasetParams,
    table: Option<&TranslationTable>,
) -> Result<Vec<PromptSpec>> {
    let words = pairs.in_format(format, table)?;
    let context = format!("{}/{}", pairs.concept, format);
    if words.len() < params.shots + 1 {
        return Err(Error::InsufficientPairs {
            needed: params.shots + 1,
            available: words.len(),
            context,
        });
    }
    let outputs: Vec<&str> = words
        .iter()
        .map(|p| p.output.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if format == Format::MultipleChoice && outputs.len() < MC_OPTIONS {
        return Err(Error::InsufficientPairs {
            needed: MC_OPTIONS,
            available: outputs.len(),
            context: format!("{context} distinct outputs for options"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut specs = Vec::with_capacity(params.n_prompts);
    for i in 0..params.n_prompts {
        let q = rng.gen_range(0..words.len());
        let query = &words[q];
        let candidates: Vec<&WordPair> = words
            .iter()
            .enumerate()
            .filter(|(j, p)| *j != q && p.output != query.output && p.input != query.input)
            .map(|(_, p)| p)
            .collect();
        if candidates.len() < params.shots {
            return Err(Error::InsufficientPairs {
                needed: params.shots,
                available: candidates.len(),
                context: format!("{context} demonstrations for query {:?}", query.input),
            });
        }
        let demos: Vec<&WordPair> = index::sample(&mut rng, candidates.len(), params.shots)
            .into_iter()
            .map(|j| candidates[j])
            .collect();
        let mc = format == Format::MultipleChoice;
        let demonstrations = demos
            .into_iter()
            .map(|p| Demonstration {
                input: p.input.clone(),
                output: p.output.clone(),
                options: mc.then(|| mc_options(&mut rng, &outputs, &p.output)),
            })
            .collect();
        let query_options = mc.then(|| mc_options(&mut rng, &outputs, &query.output));
        let gold = match &query_options {
            Some(o) => o.correct_label().to_string(),
            None => query.output.clone(),
        };
        specs.push(PromptSpec {
            prompt_id: format!("{}-{}-{:03}", pairs.concept, format, i),
            concept: pairs.concept,
            format,
            demonstrations,
            query: query.input.clone(),
            query_options,
            answer: query.output.clone(),
            gold,
        });
    }
    Ok(specs)
}

fn mc_options(rng: &mut ChaCha8Rng, outputs: &[&str], correct: &str) -> McOptions {
    let others: Vec<&str> = outputs.iter().copied().filter(|o| *o != correct).collect();
    let mut picked: Vec<String> = index::sample(rng, others.len(), MC_OPTIONS - 1)
        .into_iter()
        .map(|j| others[j].to_string())
        .collect();
    picked.shuffle(rng);
    let at = rng.gen_range(0..MC_OPTIONS);
    picked.insert(at, correct.to_string());
    McOptions {
        options: picked,
        correct: at,
    }
}

/// Replace each demonstration input with a distinct random word from `pool`.
/// Outputs, options and the query are kept.
pub fn corrupt_prompt(spec: &PromptSpec, pool: &[String], seed: u64) -> Result<PromptSpec> {
    let n = spec.demonstrations.len();
    if n == 0 {
        return Ok(spec.clone());
    }
    if pool.len() < n {
        return Err(Error::InsufficientPairs {
            needed: n,
            available: pool.len(),
            context: format!("distractor pool for {}", spec.prompt_id),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, pool.len(), n);
    let mut out = spec.clone();
    for (demo, j) in out.demonstrations.iter_mut().zip(picks) {
        demo.input = pool[j].clone();
    }
    Ok(out)
}

/// Inputs of every concept other than `target`, in `format`, minus anything
/// that is also an input of `target`. Sorted and unique.
pub fn distractor_pool(
    all: &[ConceptPairs],
    target: Concept,
    format: Format,
    table: Option<&TranslationTable>,
) -> Result<Vec<String>> {
    let mut own = BTreeSet::new();
    let mut pool = BTreeSet::new();
    for c in all {
        let words = match c.in_format(format, table) {
            Ok(w) => w,
            // concepts the table does not cover contribute nothing to an L2 pool
            Err(_) if c.concept != target => continue,
            Err(e) => return Err(e),
        };
        let dest = if c.concept == target { &mut own } else { &mut pool };
        dest.extend(words.into_iter().map(|p| p.input));
    }
    Ok(pool.difference(&own).cloned().collect())
}
