use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Demonstration, PromptSpec};
use super::pairs::{ConceptPairs, WordPair};
use super::{Concept, Format};
use crate::error::{Error, Result};

pub const PRIMARY_SHOTS: usize = 3;
pub const SECONDARY_SHOTS: usize = 2;

/// A prompt mixing two concepts: three primary demonstrations, then two
/// translation demonstrations, then a query whose gold is the primary answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguousPromptSpec {
    pub prompt_id: String,
    pub primary: Concept,
    pub secondary: Concept,
    pub demonstrations: Vec<Demonstration>,
    pub query: String,
    pub gold: String,
    /// The translation of the query, the answer the secondary concept would give.
    pub competitor: String,
}

impl AmbiguousPromptSpec {
    /// As an open-ended English prompt of the primary concept.
    pub fn to_prompt_spec(&self) -> PromptSpec {
        PromptSpec {
            prompt_id: self.prompt_id.clone(),
            concept: self.primary,
            format: Format::OpenEndedEn,
            demonstrations: self.demonstrations.clone(),
            query: self.query.clone(),
            query_options: None,
            answer: self.gold.clone(),
            gold: self.gold.clone(),
        }
    }
}

pub fn build_ambiguous_dataset(
    primary: &ConceptPairs,
    translation: &ConceptPairs,
    n_prompts: usize,
    seed: u64,
) -> Result<Vec<AmbiguousPromptSpec>> {
    let tr: BTreeMap<&str, &str> = translation
        .pairs
        .iter()
        .map(|p| (p.input.as_str(), p.output.as_str()))
        .collect();
    let queries: Vec<(&WordPair, &str)> = primary
        .pairs
        .iter()
        .filter_map(|p| tr.get(p.input.as_str()).map(|t| (p, *t)))
        .filter(|(p, t)| p.output != *t)
        .collect();
    if queries.is_empty() {
        return Err(Error::Dataset(format!(
            "no {} query word is covered by the translation pairs",
            primary.concept
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_prompts);
    for i in 0..n_prompts {
        let (query, competitor) = queries[rng.gen_range(0..queries.len())];
        let prim: Vec<&WordPair> = primary
            .pairs
            .iter()
            .filter(|p| p.input != query.input && p.output != query.output)
            .collect();
        let prim = sample(&mut rng, &prim, PRIMARY_SHOTS, || format!("{} primary demos", primary.concept))?;
        let used: BTreeSet<&str> = prim.iter().map(|p| p.input.as_str()).collect();
        let sec: Vec<&WordPair> = translation
            .pairs
            .iter()
            .filter(|p| p.input != query.input && p.output != competitor && !used.contains(p.input.as_str()))
            .collect();
        let sec = sample(&mut rng, &sec, SECONDARY_SHOTS, || "translation demos".to_string())?;
        let demonstrations = prim
            .into_iter()
            .chain(sec)
            .map(|p| Demonstration {
                input: p.input.clone(),
                output: p.output.clone(),
                options: None,
            })
            .collect();
        out.push(AmbiguousPromptSpec {
            prompt_id: format!("{}-ambiguous-{:03}", primary.concept, i),
            primary: primary.concept,
            secondary: translation.concept,
            demonstrations,
            query: query.input.clone(),
            gold: query.output.clone(),
            competitor: competitor.to_string(),
        });
    }
    Ok(out)
}

fn sample<'a>(
    rng: &mut ChaCha8Rng,
    from: &[&'a WordPair],
    n: usize,
    context: impl FnOnce() -> String,
) -> Result<Vec<&'a WordPair>> {
    if from.len() < n {
        return Err(Error::InsufficientPairs {
            needed: n,
            available: from.len(),
            context: context(),
        });
    }
    Ok(index::sample(rng, from.len(), n).into_iter().map(|j| from[j]).collect())
}
