use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tasks::{Concept, DatasetId, Format};

/// Where the model comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// A directory written by `Model::save`.
    Path(PathBuf),
    /// A model built in memory.
    Builtin(Builtin),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    /// The hand-wired model from [`crate::toy::PlantedModel`], built for the configured word pairs.
    Planted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsaSettings {
    /// K values for the FV/CV RSA comparison. Defaults to the K grid.
    #[serde(default)]
    pub k_values: Option<Vec<usize>>,
    /// K values whose full similarity matrices are written out.
    #[serde(default = "default_matrix_k")]
    pub matrix_k: Vec<usize>,
    /// Heatmaps with more prompts than this are drawn as dataset blocks.
    #[serde(default = "default_max_cells")]
    pub heatmap_max_cells: usize,
}

fn default_matrix_k() -> Vec<usize> {
    vec![5]
}

fn default_max_cells() -> usize {
    256
}

impl Default for RsaSettings {
    fn default() -> Self {
        Self {
            k_values: None,
            matrix_k: default_matrix_k(),
            heatmap_max_cells: default_max_cells(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringSettings {
    /// AmbiguousICL prompts per concept.
    #[serde(default = "default_steer_prompts")]
    pub n_prompts: usize,
    /// Concepts to steer toward. Defaults to every concept but translation.
    #[serde(default)]
    pub concepts: Option<Vec<Concept>>,
    /// Concept whose prompts drive the (K, α) search.
    #[serde(default = "default_search_concept")]
    pub search_concept: Concept,
    /// Fixed K; searched when absent.
    #[serde(default)]
    pub k: Option<usize>,
    /// Fixed α; searched when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// The extraction format that matches the steered prompts.
    #[serde(default = "default_id_format")]
    pub id_format: Format,
    /// Tokens whose probability shift is reported, per format that they mark.
    #[serde(default = "default_markers")]
    pub markers: BTreeMap<Format, Vec<String>>,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
}

fn default_steer_prompts() -> usize {
    50
}

fn default_search_concept() -> Concept {
    Concept::Antonym
}

fn default_id_format() -> Format {
    Format::OpenEndedEn
}

fn default_markers() -> BTreeMap<Format, Vec<String>> {
    BTreeMap::from([(Format::MultipleChoice, vec![" (".to_string()])])
}

fn default_top_n() -> usize {
    10
}

impl Default for SteeringSettings {
    fn default() -> Self {
        Self {
            n_prompts: default_steer_prompts(),
            concepts: None,
            search_concept: default_search_concept(),
            k: None,
            alpha: None,
            id_format: default_id_format(),
            markers: default_markers(),
            top_n: default_top_n(),
        }
    }
}

impl SteeringSettings {
    pub fn concepts(&self) -> Vec<Concept> {
        self.concepts.clone().unwrap_or_else(|| {
            Concept::ALL
                .into_iter()
                .filter(|&c| c != Concept::Translation)
                .collect()
        })
    }
}

/// One experiment. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    /// Word-pair files per concept; missing concepts use the bundled pairs.
    #[serde(default)]
    pub datasets: BTreeMap<Concept, PathBuf>,
    /// English to second-language table; the bundled French table when absent.
    #[serde(default)]
    pub translation_table: Option<PathBuf>,
    #[serde(default = "all_formats")]
    pub formats: Vec<Format>,
    pub n_prompts: usize,
    /// Demonstrations per prompt; formats left out use their defaults.
    #[serde(default)]
    pub shots: BTreeMap<Format, usize>,
    /// Root seed; every stage derives its own from it.
    pub seed: u64,
    pub k_grid: Vec<usize>,
    pub alpha_grid: Vec<f64>,
    pub layers: Vec<usize>,
    #[serde(default)]
    pub exclude_datasets: Vec<DatasetId>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub rsa: RsaSettings,
    #[serde(default)]
    pub steering: SteeringSettings,
}

fn all_formats() -> Vec<Format> {
    Format::ALL.to_vec()
}

impl ExperimentConfig {
    pub fn shots(&self, format: Format) -> usize {
        self.shots.get(&format).copied().unwrap_or_else(|| format.default_shots())
    }

    pub fn rsa_k_values(&self) -> Vec<usize> {
        self.rsa.k_values.clone().unwrap_or_else(|| self.k_grid.clone())
    }

    pub fn dataset_ids(&self) -> Vec<DatasetId> {
        Concept::ALL
            .into_iter()
            .flat_map(|c| self.formats.iter().map(move |&f| DatasetId::new(c, f)))
            .collect()
    }

    /// Parse a config document, reporting where a field failed to parse.
    pub fn from_json(text: &str) -> std::result::Result<Self, Diagnostic> {
        let value: Value = serde_json::from_str(text).map_err(|e| Diagnostic::new("", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> std::result::Result<Self, Diagnostic> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let pointer = json_pointer(e.path());
            Diagnostic::new(pointer, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_edits(path, &ConfigEdits::default())
    }

    pub fn load_with_edits(path: &Path, edits: &ConfigEdits) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        edits.apply(&mut value)?;
        Self::from_value(value).map_err(|d| Error::Config(format!("{}: {d}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out += &index.to_string(),
            Segment::Map { key } => out += &key.replace('~', "~0").replace('/', "~1"),
            Segment::Enum { variant } => out += variant,
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// A config problem at a JSON pointer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub pointer: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "{at}: {}", self.message)
    }
}

/// Command-line changes layered over a config file before it is parsed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigEdits {
    /// `key.path=value` assignments, applied in order.
    pub overrides: Vec<String>,
    /// Appended to `exclude_datasets`.
    pub exclude: Vec<DatasetId>,
}

impl ConfigEdits {
    pub fn apply(&self, config: &mut Value) -> Result<()> {
        for o in &self.overrides {
            apply_override(config, o)?;
        }
        if self.exclude.is_empty() {
            return Ok(());
        }
        let Value::Object(map) = config else {
            return Err(Error::Config("config is not a JSON object".into()));
        };
        let list = map.entry("exclude_datasets").or_insert_with(|| Value::Array(Vec::new()));
        let Value::Array(items) = list else {
            return Err(Error::Config("exclude_datasets is not a list".into()));
        };
        for id in &self.exclude {
            let v = Value::String(id.to_string());
            if !items.contains(&v) {
                items.push(v);
            }
        }
        Ok(())
    }
}

/// `a.b.0=value`: set a nested field. The value is read as JSON when it
/// parses, as a string otherwise.
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        slot = match slot {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("override {key}: {part:?} is not an index")))?;
                let item = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("override {key}: index {idx} out of range")))?;
                if last {
                    *item = value;
                    return Ok(());
                }
                item
            }
            _ => return Err(Error::Config(format!("override {key}: {part:?} is inside a scalar"))),
        };
    }
    Err(Error::Config("empty override key".into()))
}

/// Child seed for a named piece of work: the first 8 bytes of
/// `sha256(root_seed_le || label)`, little endian.
pub fn child_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "model": {"builtin": "planted"},
        "n_prompts": 4,
        "seed": 3,
        "k_grid": [1, 3],
        "alpha_grid": [1.0],
        "layers": [0, 1],
        "output_dir": "out",
        "exclude_datasets": ["antonym/MC"]
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_json(SAMPLE).unwrap();
        assert_eq!(c.formats, Format::ALL.to_vec());
        assert_eq!(c.shots(Format::MultipleChoice), 3);
        assert_eq!(c.exclude_datasets[0].format, Format::MultipleChoice);
        assert_eq!(c.steering.concepts().len(), 6);
        assert_eq!(c.dataset_ids().len(), 21);
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parse_errors_carry_a_pointer() {
        let bad = SAMPLE.replace("[1, 3]", "[1, \"x\"]");
        assert_eq!(ExperimentConfig::from_json(&bad).unwrap_err().pointer, "/k_grid/1");
        let bad = SAMPLE.replace("\"seed\"", "\"sed\"");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut v: Value = serde_json::from_str(SAMPLE).unwrap();
        apply_override(&mut v, "steering.alpha=3").unwrap();
        apply_override(&mut v, "k_grid.1=5").unwrap();
        apply_override(&mut v, "output_dir=elsewhere").unwrap();
        let c = ExperimentConfig::from_value(v.clone()).unwrap();
        assert_eq!(c.steering.alpha, Some(3.0));
        assert_eq!(c.k_grid, vec![1, 5]);
        assert_eq!(c.output_dir, PathBuf::from("elsewhere"));
        assert!(apply_override(&mut v, "k_grid.9=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn child_seeds_differ_by_label() {
        assert_eq!(child_seed(1, "capture"), child_seed(1, "capture"));
        assert_ne!(child_seed(1, "capture"), child_seed(1, "steer"));
        assert_ne!(child_seed(1, "capture"), child_seed(2, "capture"));
    }
}
