//! Word-pair files shipped with the crate.

use super::pairs::{ConceptPairs, FilterReport, TranslationTable, WordPair};
use super::Concept;
use crate::error::{Error, Result};

const CONCEPT_FILES: [(Concept, &str); 7] = [
    (Concept::Antonym, include_str!("../../data/concepts/antonym.json")),
    (Concept::Categorical, include_str!("../../data/concepts/categorical.json")),
    (Concept::Causal, include_str!("../../data/concepts/causal.json")),
    (Concept::Synonym, include_str!("../../data/concepts/synonym.json")),
    (Concept::Translation, include_str!("../../data/concepts/translation.json")),
    (Concept::PresentPast, include_str!("../../data/concepts/present_past.json")),
    (Concept::SingularPlural, include_str!("../../data/concepts/singular_plural.json")),
];

const TRANSLATION_FR: &str = include_str!("../../data/translation_fr.json");

#[derive(serde::Deserialize)]
struct RawFile {
    pairs: Vec<WordPair>,
}

/// The bundled pairs for one concept, filtered.
pub fn concept(concept: Concept) -> Result<(ConceptPairs, FilterReport)> {
    let (_, text) = CONCEPT_FILES
        .iter()
        .find(|(c, _)| *c == concept)
        .expect("every concept has a bundled file");
    let raw: RawFile =
        serde_json::from_str(text).map_err(|e| Error::Dataset(format!("bundled {concept} file: {e}")))?;
    ConceptPairs::filtered(concept, raw.pairs)
}

/// All seven bundled concepts, in [`Concept::ALL`] order.
pub fn concepts() -> Result<Vec<ConceptPairs>> {
    Concept::ALL.into_iter().map(|c| concept(c).map(|(p, _)| p)).collect()
}

/// English to French table covering every bundled English word.
pub fn translation_table() -> Result<TranslationTable> {
    serde_json::from_str(TRANSLATION_FR).map_err(|e| Error::Dataset(format!("bundled translation table: {e}")))
}
