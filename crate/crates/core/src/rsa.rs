//! Representational similarity analysis over head outputs.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{format_score, Metric, ScoreTable};
use crate::runtime::{ActivationRecord, HeadLocator, ModelConfig};
use crate::tasks::{Concept, Format, PromptSpec};

/// The attributes RSA is run against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub prompt_id: String,
    pub concept: Concept,
    pub format: Format,
}

impl From<&PromptSpec> for PromptMeta {
    fn from(s: &PromptSpec) -> Self {
        Self {
            prompt_id: s.prompt_id.clone(),
            concept: s.concept,
            format: s.format,
        }
    }
}

/// Prompt-by-prompt cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.n + k]
    }

    /// Entries strictly below the diagonal, row by row.
    pub fn lower_triangle(&self) -> Vec<f64> {
        lower(self.n, |i, k| self.get(i, k))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, self.n, |i, k| format_score(self.get(i, k)))
    }
}

fn lower<T>(n: usize, f: impl Fn(usize, usize) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 1..n {
        for k in 0..i {
            out.push(f(i, k));
        }
    }
    out
}

fn write_matrix_csv(path: &Path, n: usize, cell: impl Fn(usize, usize) -> String) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..n {
        w.write_record((0..n).map(|k| cell(i, k)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-prompt vector: one head's output, or the sum over a head subset.
fn prompt_vectors(records: &[ActivationRecord], heads: &[HeadLocator]) -> Result<Array2<f64>> {
    if heads.is_empty() {
        return Err(Error::Analysis("RSM needs at least one head".into()));
    }
    let d = records.first().map_or(0, |r| r.d_model());
    let mut m = Array2::<f64>::zeros((records.len(), d));
    for (i, r) in records.iter().enumerate() {
        if r.d_model() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: r.d_model(),
            });
        }
        let mut row = m.row_mut(i);
        for &h in heads {
            for (a, &b) in row.iter_mut().zip(r.require(h)?) {
                *a += b as f64;
            }
        }
    }
    Ok(m)
}

/// Cosine similarity of (summed) head outputs between every pair of prompts.
pub fn build_rsm(records: &[ActivationRecord], heads: &[HeadLocator]) -> Result<SimilarityMatrix> {
    let m = prompt_vectors(records, heads)?;
    cosine_matrix(m, |i| records[i].prompt_id())
}

/// Cosine similarities between arbitrary equal-length vectors.
pub fn similarity_of<S: AsRef<str>>(ids: &[S], vectors: &[Vec<f32>]) -> Result<SimilarityMatrix> {
    if ids.len() != vectors.len() {
        return Err(Error::DimensionMismatch {
            expected: ids.len(),
            found: vectors.len(),
        });
    }
    let d = vectors.first().map_or(0, Vec::len);
    let mut m = Array2::<f64>::zeros((vectors.len(), d));
    for (mut row, v) in m.rows_mut().into_iter().zip(vectors) {
        if v.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: v.len() });
        }
        row.iter_mut().zip(v).for_each(|(a, &b)| *a = b as f64);
    }
    cosine_matrix(m, |i| ids[i].as_ref())
}

fn cosine_matrix<'a>(mut m: Array2<f64>, id: impl Fn(usize) -> &'a str) -> Result<SimilarityMatrix> {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm {
                prompt_id: id(i).to_string(),
            });
        }
        row /= norm;
    }
    let gram = m.dot(&m.t());
    let n = m.nrows();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
        for k in 0..i {
            let c = gram[[i, k]].clamp(-1.0, 1.0);
            data[i * n + k] = c;
            data[k * n + i] = c;
        }
    }
    Ok(SimilarityMatrix { n, data })
}

/// Prompt order for display: concept-major, then format, then original order.
pub fn concept_major_order(meta: &[PromptMeta]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..meta.len()).collect();
    idx.sort_by_key(|&i| (meta[i].concept, meta[i].format, i));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Concept,
    /// Open-ended (both languages) versus multiple choice.
    QuestionType,
}

/// Binary matrix: 1 where two prompts share the attribute value.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub attribute: Attribute,
    n: usize,
    data: Vec<bool>,
}

impl DesignMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, k: usize) -> bool {
        self.data[i * self.n + k]
    }

    pub fn lower_triangle(&self) -> Vec<f64> {
        lower(self.n, |i, k| if self.get(i, k) { 1.0 } else { 0.0 })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, self.n, |i, k| u8::from(self.get(i, k)).to_string())
    }
}

pub fn build_design_matrix(meta: &[PromptMeta], attribute: Attribute) -> DesignMatrix {
    let key = |m: &PromptMeta| match attribute {
        Attribute::Concept => m.concept as usize,
        Attribute::QuestionType => m.format.question_type() as usize,
    };
    let keys: Vec<usize> = meta.iter().map(key).collect();
    let n = keys.len();
    let data = (0..n * n).map(|ik| keys[ik / n] == keys[ik % n]).collect();
    DesignMatrix { attribute, n, data }
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let r = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

fn centered(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let ss = c.iter().map(|x| x * x).sum();
    (c, ss)
}

fn pearson_centered(a: &[f64], ssa: f64, b: &[f64], ssb: f64) -> Option<f64> {
    if ssa == 0.0 || ssb == 0.0 {
        return None;
    }
    let cov: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((cov / (ssa * ssb).sqrt()).clamp(-1.0, 1.0))
}

/// Tie-corrected Spearman correlation. `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "spearman on unequal lengths");
    let (a, ssa) = centered(&average_ranks(x));
    let (b, ssb) = centered(&average_ranks(y));
    pearson_centered(&a, ssa, &b, ssb)
}

/// Spearman correlation between the strictly-lower triangles.
pub fn spearman_lower_triangle(rsm: &SimilarityMatrix, dm: &DesignMatrix) -> Result<Option<f64>> {
    check_sizes(rsm.n(), dm.n())?;
    Ok(spearman(&rsm.lower_triangle(), &dm.lower_triangle()))
}

fn check_sizes(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, found: b });
    }
    if a < 3 {
        return Err(Error::Analysis(format!("RSA needs at least 3 prompts, got {a}")));
    }
    Ok(())
}

/// Centered ranks of a design matrix, reused across heads.
struct RankedDesign {
    centered: Vec<f64>,
    ss: f64,
}

impl RankedDesign {
    fn new(dm: &DesignMatrix) -> Self {
        let (centered, ss) = centered(&average_ranks(&dm.lower_triangle()));
        Self { centered, ss }
    }

    fn rho(&self, rsm: &SimilarityMatrix) -> Option<f64> {
        let (a, ssa) = centered(&average_ranks(&rsm.lower_triangle()));
        pearson_centered(&a, ssa, &self.centered, self.ss)
    }
}

fn check_alignment(records: &[ActivationRecord], meta: &[PromptMeta]) -> Result<()> {
    check_sizes(records.len(), meta.len())?;
    for (r, m) in records.iter().zip(meta) {
        if r.prompt_id() != m.prompt_id {
            return Err(Error::Analysis(format!(
                "no metadata for record {} (found {} at its position)",
                r.prompt_id(),
                m.prompt_id
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsaScores {
    pub concept: ScoreTable,
    pub question_type: ScoreTable,
}

/// Concept-RSA and question-type RSA of every head. A head whose output is
/// zero on some prompt has no defined cosine there and scores as undefined.
pub fn concept_rsa_all_heads(
    config: &ModelConfig,
    records: &[ActivationRecord],
    meta: &[PromptMeta],
) -> Result<RsaScores> {
    check_alignment(records, meta)?;
    let concept = RankedDesign::new(&build_design_matrix(meta, Attribute::Concept));
    let qtype = RankedDesign::new(&build_design_matrix(meta, Attribute::QuestionType));
    let heads: Vec<HeadLocator> = config.heads().collect();
    let scores = heads
        .par_iter()
        .map(|&h| match build_rsm(records, &[h]) {
            Ok(rsm) => Ok((concept.rho(&rsm), qtype.rho(&rsm))),
            Err(Error::ZeroNorm { .. }) => Ok((None, None)),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let (c, q): (Vec<_>, Vec<_>) = scores.into_iter().unzip();
    Ok(RsaScores {
        concept: ScoreTable::new(Metric::ConceptRsa, "all", config, c)?,
        question_type: ScoreTable::new(Metric::QuestionTypeRsa, "all", config, q)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VectorKind {
    #[serde(rename = "FV")]
    Function,
    #[serde(rename = "CV")]
    Concept,
}

impl VectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VectorKind::Function => "FV",
            VectorKind::Concept => "CV",
        }
    }
}

impl std::fmt::Display for VectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRsaRow {
    pub k: usize,
    pub kind: VectorKind,
    pub heads: Vec<HeadLocator>,
    pub concept_rsa: Option<f64>,
    pub question_type_rsa: Option<f64>,
    /// Mean cosine over prompt pairs that share a question type.
    pub within_question_type_cosine: f64,
}

/// Mean of the lower-triangle entries where `dm` is 1.
pub fn masked_mean(rsm: &SimilarityMatrix, dm: &DesignMatrix) -> Result<f64> {
    if rsm.n() != dm.n() {
        return Err(Error::DimensionMismatch {
            expected: rsm.n(),
            found: dm.n(),
        });
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 1..rsm.n() {
        for k in 0..i {
            if dm.get(i, k) {
                sum += rsm.get(i, k);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Analysis("no prompt pairs share the attribute".into()));
    }
    Ok(sum / count as f64)
}

/// For each K, RSA of the summed top-K FV and CV vectors. `on_matrix` sees
/// every similarity matrix as it is built.
pub fn compare_vector_rsa(
    records: &[ActivationRecord],
    meta: &[PromptMeta],
    fv_scores: &ScoreTable,
    cv_scores: &ScoreTable,
    k_values: &[usize],
    mut on_matrix: impl FnMut(usize, VectorKind, &SimilarityMatrix) -> Result<()>,
) -> Result<Vec<VectorRsaRow>> {
    check_alignment(records, meta)?;
    let concept_dm = build_design_matrix(meta, Attribute::Concept);
    let qt_dm = build_design_matrix(meta, Attribute::QuestionType);
    let concept = RankedDesign::new(&concept_dm);
    let qtype = RankedDesign::new(&qt_dm);
    let mut rows = Vec::new();
    for &k in k_values {
        for (kind, table) in [(VectorKind::Function, fv_scores), (VectorKind::Concept, cv_scores)] {
            if k == 0 || k > table.len() {
                return Err(Error::Analysis(format!("K={k} is outside 1..={}", table.len())));
            }
            let heads = table.top_k(k);
            let rsm = build_rsm(records, &heads)?;
            on_matrix(k, kind, &rsm)?;
            rows.push(VectorRsaRow {
                k,
                kind,
                concept_rsa: concept.rho(&rsm),
                question_type_rsa: qtype.rho(&rsm),
                within_question_type_cosine: masked_mean(&rsm, &qt_dm)?,
                heads,
            });
        }
    }
    Ok(rows)
}
