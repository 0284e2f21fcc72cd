use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Concept, Format};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WordPair {
    pub input: String,
    pub output: String,
}

impl WordPair {
    pub fn new(input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            output: output.into(),
        }
    }
}

/// Counts from the quality filter, in the order the rules are applied.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub lowercased: usize,
    pub dropped_empty: usize,
    pub dropped_underscore_or_digit: usize,
    pub dropped_too_many_spaces: usize,
    pub dropped_duplicate_input: usize,
    pub retained: usize,
}

/// Filtered input/output pairs for one concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptPairs {
    pub concept: Concept,
    pub pairs: Vec<WordPair>,
}

#[derive(Deserialize)]
struct RawFile {
    concept: Concept,
    pairs: Vec<WordPair>,
}

impl ConceptPairs {
    /// Apply the quality filter: lowercase, drop words with underscores or
    /// digits, drop words with more than one space, then keep the first pair
    /// for each input.
    pub fn filtered(concept: Concept, raw: Vec<WordPair>) -> Result<(Self, FilterReport)> {
        let mut report = FilterReport {
            total: raw.len(),
            ..Default::default()
        };
        let mut seen = BTreeSet::new();
        let mut pairs = Vec::new();
        for pair in raw {
            let input = pair.input.trim().to_lowercase();
            let output = pair.output.trim().to_lowercase();
            if input != pair.input.trim() || output != pair.output.trim() {
                report.lowercased += 1;
            }
            let words = [&input, &output];
            if words.iter().any(|w| w.is_empty()) {
                report.dropped_empty += 1;
            } else if words.iter().any(|w| w.chars().any(|ch| ch == '_' || ch.is_ascii_digit())) {
                report.dropped_underscore_or_digit += 1;
            } else if words.iter().any(|w| w.matches(' ').count() > 1) {
                report.dropped_too_many_spaces += 1;
            } else if !seen.insert(input.clone()) {
                report.dropped_duplicate_input += 1;
            } else {
                pairs.push(WordPair::new(input, output));
            }
        }
        report.retained = pairs.len();
        if pairs.is_empty() {
            return Err(Error::EmptyDataset(format!("{concept}: no pairs survive filtering")));
        }
        Ok((Self { concept, pairs }, report))
    }

    pub fn inputs(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.input.as_str())
    }

    /// Pairs as they appear in prompts of `format`.
    ///
    /// The second-language format maps both words through `table`. For the
    /// translation concept, whose outputs are already second-language words,
    /// the pair is reversed instead, so the prompt asks for the English word.
    pub fn in_format(&self, format: Format, table: Option<&TranslationTable>) -> Result<Vec<WordPair>> {
        match format {
            Format::OpenEndedEn | Format::MultipleChoice => Ok(self.pairs.clone()),
            Format::OpenEndedL2 if self.concept == Concept::Translation => Ok(self
                .pairs
                .iter()
                .map(|p| WordPair::new(p.output.clone(), p.input.clone()))
                .collect()),
            Format::OpenEndedL2 => {
                let table = table.ok_or_else(|| {
                    Error::Dataset(format!("{}: OE_L2 format needs a translation table", self.concept))
                })?;
                self.pairs
                    .iter()
                    .map(|p| Ok(WordPair::new(table.require(&p.input)?, table.require(&p.output)?)))
                    .collect()
            }
        }
    }

    /// EN→L2 pairs for `words`, taken from `table`.
    pub fn from_translation_table<'a>(
        table: &TranslationTable,
        words: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let pairs: Vec<WordPair> = words
            .into_iter()
            .filter(|w| seen.insert(w.to_string()))
            .filter_map(|w| table.get(w).map(|t| WordPair::new(w, t)))
            .collect();
        if pairs.is_empty() {
            return Err(Error::EmptyDataset("no words covered by the translation table".into()));
        }
        Ok(Self {
            concept: Concept::Translation,
            pairs,
        })
    }
}

/// Load a `{concept, pairs: [{input, output}]}` file and filter it.
pub fn load_concept_pairs(path: &Path) -> Result<(ConceptPairs, FilterReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawFile = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("malformed dataset {}: {e}", path.display())))?;
    ConceptPairs::filtered(raw.concept, raw.pairs)
}

/// Word → second-language word.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TranslationTable {
    map: BTreeMap<String, String>,
}

impl TranslationTable {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        Self { map }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("malformed translation table {}: {e}", path.display())))
    }

    pub fn get(&self, word: &str) -> Option<&str> {
        self.map.get(word).map(String::as_str)
    }

    pub fn require(&self, word: &str) -> Result<String> {
        self.get(word)
            .map(str::to_string)
            .ok_or_else(|| Error::Dataset(format!("no translation for {word:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
