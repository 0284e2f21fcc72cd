//! Head selections, FV/CV vectors, steering vectors and overlap statistics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{format_score, overlap_count, Metric, ScoreTable};
use crate::rsa::{similarity_of, PromptMeta, SimilarityMatrix, VectorKind};
use crate::runtime::{ActivationRecord, HeadLocator};
use crate::tasks::DatasetId;

/// The top-K heads of one ranking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub method: VectorKind,
    pub k: usize,
    /// Heads in the model the selection was drawn from.
    pub total_heads: usize,
    pub heads: Vec<HeadLocator>,
}

impl HeadSelection {
    /// FV heads come from an AIE table, CV heads from a Concept-RSA table.
    pub fn top_k(method: VectorKind, table: &ScoreTable, k: usize) -> Result<Self> {
        let want = match method {
            VectorKind::Function => Metric::Aie,
            VectorKind::Concept => Metric::ConceptRsa,
        };
        if table.metric != want {
            return Err(Error::Analysis(format!("{method} heads need a {want} table, got {}", table.metric)));
        }
        if k == 0 || k > table.len() {
            return Err(Error::Analysis(format!("K={k} is outside 1..={}", table.len())));
        }
        Ok(Self {
            method,
            k,
            total_heads: table.len(),
            heads: table.top_k(k),
        })
    }
}

fn add_head(acc: &mut [f64], record: &ActivationRecord, head: HeadLocator) -> Result<()> {
    for (a, &b) in acc.iter_mut().zip(record.require(head)?) {
        *a += b as f64;
    }
    Ok(())
}

/// Sum of the selected heads' outputs on one prompt.
pub fn per_prompt_vector(record: &ActivationRecord, heads: &[HeadLocator]) -> Result<Vec<f32>> {
    let mut acc = vec![0.0f64; record.d_model()];
    for &h in heads {
        add_head(&mut acc, record, h)?;
    }
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: VectorKind,
    pub k: usize,
    pub heads: Vec<HeadLocator>,
    pub dataset: DatasetId,
    pub n_prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

/// Per-head means over the extraction prompts, summed over the selection.
pub fn steering_vector(
    records: &[ActivationRecord],
    selection: &HeadSelection,
    dataset: DatasetId,
) -> Result<SteeringVector> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptyDataset(format!("{dataset}: no extraction prompts")))?;
    let d = first.d_model();
    let mut values = vec![0.0f64; d];
    for &h in &selection.heads {
        let mut mean = vec![0.0f64; d];
        for r in records {
            if r.d_model() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: r.d_model(),
                });
            }
            add_head(&mut mean, r, h)?;
        }
        let n = records.len() as f64;
        values.iter_mut().zip(mean).for_each(|(v, m)| *v += m / n);
    }
    let values: Vec<f32> = values.into_iter().map(|x| x as f32).collect();
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("steering vector for {dataset}")));
    }
    Ok(SteeringVector {
        values,
        provenance: Provenance {
            method: selection.method,
            k: selection.k,
            heads: selection.heads.clone(),
            dataset,
            n_prompts: records.len(),
        },
    })
}

impl SteeringVector {
    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Little-endian f32 values at `path`, provenance next to it as `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().flat_map(|x| x.to_le_bytes()).collect();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar(path);
        let text = serde_json::to_string_pretty(&self.provenance).map_err(|e| Error::json("provenance", e))?;
        std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Checksum {
                name: path.display().to_string(),
                reason: format!("{} bytes is not a whole number of f32 values", bytes.len()),
            });
        }
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let side = Self::sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let provenance = serde_json::from_str(&text).map_err(|e| Error::json(side.display().to_string(), e))?;
        Ok(Self { values, provenance })
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for term in xs {
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Pr[X >= x] for two independent random K-subsets of N heads sharing X
/// members.
///
/// The pmf is built up to a constant from the ratio
/// `p(i+1)/p(i) = (K-i)^2 / ((i+1)(N-2K+i+1))`, anchored at the mode, and
/// normalized by its own total. No factorials, so nothing overflows and the
/// relative error stays near machine precision.
pub fn hypergeometric_tail(n: u64, k: u64, x: u64) -> f64 {
    assert!(k <= n, "K={k} exceeds N={n}");
    let lo = (2 * k).saturating_sub(n);
    if x <= lo {
        return 1.0;
    }
    if x > k {
        return 0.0;
    }
    let ratio = |i: u64| {
        let (k, i, n) = (k as f64, i as f64, n as f64);
        (k - i) * (k - i) / ((i + 1.0) * (n - 2.0 * k + i + 1.0))
    };
    let mode = (((k + 1) * (k + 1)) / (n + 2)).clamp(lo, k);
    let mut w = vec![0.0f64; (k - lo + 1) as usize];
    let at = |i: u64| (i - lo) as usize;
    w[at(mode)] = 1.0;
    for i in mode..k {
        w[at(i + 1)] = w[at(i)] * ratio(i);
    }
    for i in (lo..mode).rev() {
        w[at(i)] = w[at(i + 1)] / ratio(i);
    }
    let total = compensated_sum(w.iter().copied());
    let tail = compensated_sum(w[at(x)..].iter().copied());
    (tail / total).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapResult {
    pub k: usize,
    pub overlap: usize,
    pub p_value: f64,
    pub significant: bool,
}

pub const SIGNIFICANCE: f64 = 0.05;

pub fn head_overlap(a: &HeadSelection, b: &HeadSelection) -> Result<OverlapResult> {
    if a.total_heads != b.total_heads {
        return Err(Error::Analysis(format!(
            "selections come from models with {} and {} heads",
            a.total_heads, b.total_heads
        )));
    }
    if a.k != b.k || a.heads.len() != a.k || b.heads.len() != b.k {
        return Err(Error::Analysis(format!("overlap needs equal K, got {} and {}", a.k, b.k)));
    }
    let overlap = overlap_count(&a.heads, &b.heads);
    let p_value = hypergeometric_tail(a.total_heads as u64, a.k as u64, overlap as u64);
    Ok(OverlapResult {
        k: a.k,
        overlap,
        p_value,
        significant: p_value < SIGNIFICANCE,
    })
}

pub fn write_overlap_csv(path: &Path, rows: &[OverlapResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["K", "overlap", "p_value", "significant"])?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.overlap.to_string(),
            format_score(r.p_value),
            r.significant.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub matrix: SimilarityMatrix,
    /// Mean cosine over pairs with the same concept and different formats.
    pub within_concept_cross_format: Option<f64>,
    /// Mean cosine over pairs with the same format and different concepts.
    pub within_format_cross_concept: Option<f64>,
}

pub fn vector_similarity_report(vectors: &[Vec<f32>], meta: &[PromptMeta]) -> Result<SimilarityReport> {
    let ids: Vec<&str> = meta.iter().map(|m| m.prompt_id.as_str()).collect();
    let matrix = similarity_of(&ids, vectors)?;
    let mut concept = (0.0, 0usize);
    let mut format = (0.0, 0usize);
    for i in 1..meta.len() {
        for k in 0..i {
            let (a, b) = (&meta[i], &meta[k]);
            let c = matrix.get(i, k);
            if a.concept == b.concept && a.format != b.format {
                concept.0 += c;
                concept.1 += 1;
            }
            if a.format == b.format && a.concept != b.concept {
                format.0 += c;
                format.1 += 1;
            }
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok(SimilarityReport {
        matrix,
        within_concept_cross_format: mean(concept),
        within_format_cross_concept: mean(format),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{Concept, Format};

    fn rec(id: &str, vs: &[Vec<f32>]) -> ActivationRecord {
        ActivationRecord::from_vectors(
            id,
            vs[0].len(),
            vs.iter().enumerate().map(|(j, v)| (HeadLocator::new(0, j), v.clone())).collect(),
        )
        .unwrap()
    }

    fn dataset() -> DatasetId {
        DatasetId {
            concept: Concept::Antonym,
            format: Format::MultipleChoice,
        }
    }

    fn selection(heads: &[usize]) -> HeadSelection {
        HeadSelection {
            method: VectorKind::Function,
            k: heads.len(),
            total_heads: 4,
            heads: heads.iter().map(|&j| HeadLocator::new(0, j)).collect(),
        }
    }

    #[test]
    fn per_prompt_sums_selected_heads() {
        let r = rec("p", &[vec![1.0, 2.0], vec![10.0, 20.0], vec![5.0, 5.0]]);
        assert_eq!(per_prompt_vector(&r, &[HeadLocator::new(0, 1)]).unwrap(), vec![10.0, 20.0]);
        assert_eq!(per_prompt_vector(&r, &selection(&[0, 1]).heads).unwrap(), vec![11.0, 22.0]);
        assert!(per_prompt_vector(&r, &[HeadLocator::new(1, 0)]).is_err());
    }

    #[test]
    fn steering_vector_of_one_prompt() {
        let r = rec("p", &[vec![1.0, 2.0], vec![10.0, 20.0]]);
        let sel = selection(&[0, 1]);
        let v = steering_vector(std::slice::from_ref(&r), &sel, dataset()).unwrap();
        assert_eq!(v.values, per_prompt_vector(&r, &sel.heads).unwrap());
        assert_eq!(v.provenance.dataset.format, Format::MultipleChoice);
        assert_eq!(v.provenance.n_prompts, 1);
        assert!(matches!(steering_vector(&[], &sel, dataset()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn vector_file_round_trip() {
        let r = rec("p", &[vec![1.5, -2.0, 0.25]]);
        let v = steering_vector(&[r], &selection(&[0]), dataset()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fv.f32");
        v.save(&p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 12);
        assert_eq!(SteeringVector::load(&p).unwrap(), v);
    }

    #[test]
    fn tail_edges() {
        assert_eq!(hypergeometric_tail(1024, 5, 0), 1.0);
        assert_eq!(hypergeometric_tail(10, 3, 4), 0.0);
        // both subsets are everything
        assert!((hypergeometric_tail(6, 6, 6) - 1.0).abs() < 1e-15);
        // forced overlap: two 4-subsets of 6 share at least 2
        assert!((hypergeometric_tail(6, 4, 2) - 1.0).abs() < 1e-15);
        // N=4, K=2: Pr[X=2] = 1/6
        assert!((hypergeometric_tail(4, 2, 2) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn overlap_checks_shapes() {
        let a = selection(&[0, 1]);
        let mut b = selection(&[1, 2]);
        let r = head_overlap(&a, &b).unwrap();
        assert_eq!(r.overlap, 1);
        b.total_heads = 8;
        assert!(head_overlap(&a, &b).is_err());
        assert!(head_overlap(&a, &selection(&[1])).is_err());
    }

    #[test]
    fn similarity_report_groups() {
        let m = |i: usize, concept, format| PromptMeta {
            prompt_id: format!("p{i}"),
            concept,
            format,
        };
        let meta = vec![
            m(0, Concept::Antonym, Format::OpenEndedEn),
            m(1, Concept::Antonym, Format::MultipleChoice),
            m(2, Concept::Synonym, Format::OpenEndedEn),
        ];
        let vs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let r = vector_similarity_report(&vs, &meta).unwrap();
        assert_eq!(r.within_concept_cross_format, Some(0.0));
        assert!((r.within_format_cross_concept.unwrap() - 0.5f64.sqrt()).abs() < 1e-7);
    }
}
