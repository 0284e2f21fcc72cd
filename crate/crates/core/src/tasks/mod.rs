//! Concept datasets, prompt formats, corrupted prompts and AmbiguousICL prompts.

mod ambiguous;
pub mod bundled;
mod dataset;
mod pairs;
mod render;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ambiguous::{build_ambiguous_dataset, AmbiguousPromptSpec};
pub use dataset::{
    build_dataset, corrupt_prompt, distractor_pool, label_letter, DatasetParams, Demonstration, McOptions, MC_OPTIONS,
    PromptSpec,
};
pub use pairs::{load_concept_pairs, ConceptPairs, FilterReport, TranslationTable, WordPair};
pub use render::{render_prompt, write_prompt_dump, RenderedPrompt};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concept {
    Antonym,
    Categorical,
    Causal,
    Synonym,
    Translation,
    PresentPast,
    SingularPlural,
}

impl Concept {
    pub const ALL: [Concept; 7] = [
        Concept::Antonym,
        Concept::Categorical,
        Concept::Causal,
        Concept::Synonym,
        Concept::Translation,
        Concept::PresentPast,
        Concept::SingularPlural,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Concept::Antonym => "antonym",
            Concept::Categorical => "categorical",
            Concept::Causal => "causal",
            Concept::Synonym => "synonym",
            Concept::Translation => "translation",
            Concept::PresentPast => "present_past",
            Concept::SingularPlural => "singular_plural",
        }
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Concept {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Concept::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown concept {s:?}")))
    }
}

/// Surface format of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Format {
    /// Open-ended, English.
    #[serde(rename = "OE_EN")]
    OpenEndedEn,
    /// Open-ended, second language (words mapped through a translation table).
    #[serde(rename = "OE_L2")]
    OpenEndedL2,
    /// Multiple choice, English, four lettered options.
    #[serde(rename = "MC")]
    MultipleChoice,
}

/// Coarse question type shared by both open-ended formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    OpenEnded,
    MultipleChoice,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::OpenEndedEn, Format::OpenEndedL2, Format::MultipleChoice];

    pub fn as_str(self) -> &'static str {
        match self {
            Format::OpenEndedEn => "OE_EN",
            Format::OpenEndedL2 => "OE_L2",
            Format::MultipleChoice => "MC",
        }
    }

    pub fn default_shots(self) -> usize {
        match self {
            Format::MultipleChoice => 3,
            _ => 5,
        }
    }

    pub fn question_type(self) -> QuestionType {
        match self {
            Format::MultipleChoice => QuestionType::MultipleChoice,
            _ => QuestionType::OpenEnded,
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Format::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown format {s:?}")))
    }
}

/// One (concept, format) dataset. Serialized as `concept/FORMAT`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct DatasetId {
    pub concept: Concept,
    pub format: Format,
}

impl DatasetId {
    pub fn new(concept: Concept, format: Format) -> Self {
        Self { concept, format }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.concept, self.format)
    }
}

impl From<DatasetId> for String {
    fn from(id: DatasetId) -> Self {
        id.to_string()
    }
}

impl TryFrom<String> for DatasetId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (c, f) = s
            .split_once('/')
            .ok_or_else(|| Error::Dataset(format!("dataset id {s:?} is not concept/format")))?;
        Ok(Self::new(c.parse()?, f.parse()?))
    }
}
