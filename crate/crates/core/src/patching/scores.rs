use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::{HeadLocator, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "AIE")]
    Aie,
    #[serde(rename = "ConceptRSA")]
    ConceptRsa,
    #[serde(rename = "QuestionTypeRSA")]
    QuestionTypeRsa,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Aie => "AIE",
            Metric::ConceptRsa => "ConceptRSA",
            Metric::QuestionTypeRsa => "QuestionTypeRSA",
        })
    }
}

/// One scalar per head. `None` marks an undefined score (for example a
/// correlation against a constant vector); undefined scores rank last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub metric: Metric,
    /// Which prompts the scores were computed over, e.g. `all` or `OE_EN->MC`.
    pub scope: String,
    pub n_layers: usize,
    pub n_heads_per_layer: usize,
    scores: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Row {
    layer: usize,
    head: usize,
    score: Option<f64>,
}

impl ScoreTable {
    /// `scores` in (layer, head) order.
    pub fn new(
        metric: Metric,
        scope: impl Into<String>,
        config: &ModelConfig,
        scores: Vec<Option<f64>>,
    ) -> Result<Self> {
        if scores.len() != config.total_heads() {
            return Err(Error::DimensionMismatch {
                expected: config.total_heads(),
                found: scores.len(),
            });
        }
        Ok(Self {
            metric,
            scope: scope.into(),
            n_layers: config.n_layers,
            n_heads_per_layer: config.n_heads_per_layer,
            scores,
        })
    }

    pub fn from_fn(
        metric: Metric,
        scope: impl Into<String>,
        config: &ModelConfig,
        f: impl FnMut(HeadLocator) -> Option<f64>,
    ) -> Self {
        let scores = config.heads().map(f).collect();
        Self::new(metric, scope, config, scores).expect("one score per head")
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn locator(&self, i: usize) -> HeadLocator {
        HeadLocator::new(i / self.n_heads_per_layer, i % self.n_heads_per_layer)
    }

    pub fn get(&self, head: HeadLocator) -> Option<f64> {
        if head.layer >= self.n_layers || head.head >= self.n_heads_per_layer {
            return None;
        }
        self.scores[head.layer * self.n_heads_per_layer + head.head]
    }

    pub fn iter(&self) -> impl Iterator<Item = (HeadLocator, Option<f64>)> + '_ {
        self.scores.iter().enumerate().map(|(i, s)| (self.locator(i), *s))
    }

    /// All heads, best first. Ties go to the smaller (layer, head).
    pub fn ranking(&self) -> Vec<HeadLocator> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| rank_order(self.scores[a], self.scores[b]).then(a.cmp(&b)));
        idx.into_iter().map(|i| self.locator(i)).collect()
    }

    /// The `k` best heads (all heads when `k` exceeds the table).
    pub fn top_k(&self, k: usize) -> Vec<HeadLocator> {
        let mut r = self.ranking();
        r.truncate(k);
        r
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "head", "score"])?;
        for (h, s) in self.iter() {
            let score = s.map(format_score).unwrap_or_default();
            w.write_record([h.layer.to_string(), h.head.to_string(), score])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, metric: Metric, scope: &str, config: &ModelConfig) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut scores = vec![None; config.total_heads()];
        let mut seen = BTreeSet::new();
        for row in r.deserialize::<Row>() {
            let row = row?;
            let h = HeadLocator::new(row.layer, row.head);
            config.check_head(h)?;
            if !seen.insert(h) {
                return Err(Error::Analysis(format!("{}: head {h} listed twice", path.display())));
            }
            scores[config.head_index(h)] = row.score;
        }
        if seen.len() != config.total_heads() {
            return Err(Error::Analysis(format!(
                "{}: {} of {} heads present",
                path.display(),
                seen.len(),
                config.total_heads()
            )));
        }
        Self::new(metric, scope, config, scores)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("score table", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Equal-width histogram of the defined scores.
    pub fn histogram(&self, bins: usize) -> Vec<HistogramBin> {
        let vals: Vec<f64> = self.scores.iter().flatten().copied().collect();
        histogram(&vals, bins)
    }

    pub fn write_histogram_csv(&self, path: &Path, bins: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_start", "bin_end", "count"])?;
        for b in self.histogram(bins) {
            w.write_record([format_score(b.start), format_score(b.end), b.count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Descending by score, undefined last.
fn rank_order(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

/// Fixed-precision text so repeated runs give byte-identical files.
pub fn format_score(x: f64) -> String {
    format!("{x:.12e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            start: lo + i as f64 * width,
            end: lo + (i + 1) as f64 * width,
            count,
        })
        .collect()
}

/// Size of the intersection of two head lists.
pub fn overlap_count(a: &[HeadLocator], b: &[HeadLocator]) -> usize {
    let a: BTreeSet<_> = a.iter().collect();
    b.iter().collect::<BTreeSet<_>>().intersection(&a).count()
}
