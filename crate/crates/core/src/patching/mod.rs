//! Mean-activation patching: causal indirect effect per head, averaged into AIE.

mod scores;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use scores::{format_score, histogram, overlap_count, HistogramBin, Metric, ScoreTable};

use crate::error::{Error, Result};
use crate::prompts::EncodedPrompt;
use crate::runtime::{ActivationRecord, HeadLocator, HookSet, Model};
use crate::tasks::{DatasetId, Format};

/// Per (dataset, head) mean of last-token head outputs over clean prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanActivationCache {
    d_model: usize,
    heads: Vec<HeadLocator>,
    entries: BTreeMap<DatasetId, MeanEntry>,
}

#[derive(Debug, Clone, PartialEq)]
struct MeanEntry {
    count: usize,
    /// One `d_model` block per head, in `heads` order.
    data: Vec<f32>,
}

impl MeanActivationCache {
    /// Capture every head on each dataset's clean prompts and average.
    pub fn build(model: &Model, datasets: &[(DatasetId, Vec<EncodedPrompt>)]) -> Result<Self> {
        let mut groups = Vec::with_capacity(datasets.len());
        for (id, prompts) in datasets {
            let records = prompts
                .par_iter()
                .map(|p| model.capture(&p.prompt_id, &p.tokens, false))
                .collect::<Result<Vec<_>>>()?;
            groups.push((*id, records));
        }
        Self::from_records(groups.iter().map(|(id, r)| (*id, r.as_slice())))
    }

    /// Average already captured records. Every record must cover the same heads.
    pub fn from_records<'a>(groups: impl IntoIterator<Item = (DatasetId, &'a [ActivationRecord])>) -> Result<Self> {
        let mut d_model = None;
        let mut heads: Option<Vec<HeadLocator>> = None;
        let mut entries = BTreeMap::new();
        for (id, records) in groups {
            let first = records
                .first()
                .ok_or_else(|| Error::EmptyDataset(format!("{id}: no clean prompts to average")))?;
            let d = *d_model.get_or_insert(first.d_model());
            let hs = heads.get_or_insert_with(|| first.heads().to_vec());
            let mut sum = vec![0.0f64; hs.len() * d];
            for r in records {
                if r.d_model() != d || r.heads() != hs.as_slice() {
                    return Err(Error::Analysis(format!(
                        "record {} does not cover the same heads as the rest of {id}",
                        r.prompt_id()
                    )));
                }
                for (s, &v) in sum.iter_mut().zip(r.raw()) {
                    *s += v as f64;
                }
            }
            let n = records.len() as f64;
            let data = sum.into_iter().map(|s| (s / n) as f32).collect();
            if entries.insert(id, MeanEntry { count: records.len(), data }).is_some() {
                return Err(Error::Analysis(format!("dataset {id} listed twice")));
            }
        }
        Ok(Self {
            d_model: d_model.unwrap_or(0),
            heads: heads.unwrap_or_default(),
            entries,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn heads(&self) -> &[HeadLocator] {
        &self.heads
    }

    pub fn datasets(&self) -> impl Iterator<Item = DatasetId> + '_ {
        self.entries.keys().copied()
    }

    pub fn count(&self, id: DatasetId) -> Option<usize> {
        self.entries.get(&id).map(|e| e.count)
    }

    pub fn mean(&self, id: DatasetId, head: HeadLocator) -> Option<&[f32]> {
        let e = self.entries.get(&id)?;
        let i = self.heads.binary_search(&head).ok()?;
        Some(&e.data[i * self.d_model..(i + 1) * self.d_model])
    }

    pub fn require(&self, id: DatasetId, head: HeadLocator) -> Result<&[f32]> {
        self.mean(id, head)
            .ok_or_else(|| Error::Analysis(format!("no cached mean for head {head} on {id}")))
    }
}

/// `P(gold | corrupted, head := mean) - P(gold | corrupted)`.
pub fn cie(model: &Model, corrupted: &EncodedPrompt, head: HeadLocator, mean: &[f32]) -> Result<f64> {
    Ok(prompt_effects(model, corrupted, &[(head, mean)])?[0])
}

/// CIE of each (head, mean) on one prompt, sharing the unpatched pass.
fn prompt_effects(model: &Model, prompt: &EncodedPrompt, patches: &[(HeadLocator, &[f32])]) -> Result<Vec<f64>> {
    let gold = prompt.gold as usize;
    if gold >= model.config().vocab_size {
        return Err(Error::TokenOutOfRange {
            id: prompt.gold,
            vocab_size: model.config().vocab_size,
        });
    }
    let prepared = model.prepare(&prompt.tokens)?;
    let base = model.run(&prepared, &HookSet::new())?.probs[gold] as f64;
    patches
        .iter()
        .map(|(head, mean)| {
            let hooks = HookSet::new().patch(*head, mean.to_vec());
            Ok(model.run(&prepared, &hooks)?.probs[gold] as f64 - base)
        })
        .collect()
}

/// Corrupted prompts of one dataset.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    pub id: DatasetId,
    pub corrupted: Vec<EncodedPrompt>,
}

/// AIE scores plus the per-dataset means they were averaged from.
#[derive(Debug, Clone)]
pub struct AieResult {
    pub table: ScoreTable,
    /// Per dataset, the mean CIE of every head in (layer, head) order.
    pub per_dataset: Vec<(DatasetId, Vec<f64>)>,
}

/// Mean CIE of every head over one dataset's corrupted prompts.
fn dataset_means(
    model: &Model,
    prompts: &[EncodedPrompt],
    means: &[(HeadLocator, &[f32])],
    id: DatasetId,
) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::EmptyDataset(format!("{id}: no corrupted prompts")));
    }
    let effects = prompts
        .par_iter()
        .map(|p| prompt_effects(model, p, means))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0f64; means.len()];
    for e in &effects {
        for (s, v) in sum.iter_mut().zip(e) {
            *s += v;
        }
    }
    Ok(sum.into_iter().map(|s| s / prompts.len() as f64).collect())
}

fn average_datasets(model: &Model, scope: &str, per_dataset: Vec<(DatasetId, Vec<f64>)>) -> Result<AieResult> {
    if per_dataset.is_empty() {
        return Err(Error::EmptyDataset(format!("{scope}: no datasets left to average")));
    }
    let n = model.config().total_heads();
    let mut sum = vec![0.0f64; n];
    for (_, m) in &per_dataset {
        for (s, v) in sum.iter_mut().zip(m) {
            *s += v;
        }
    }
    let k = per_dataset.len() as f64;
    let scores = sum.into_iter().map(|s| Some(s / k)).collect();
    Ok(AieResult {
        table: ScoreTable::new(Metric::Aie, scope, model.config(), scores)?,
        per_dataset,
    })
}

/// Within-dataset AIE: each dataset's corrupted prompts patched with its own
/// clean means, averaged over prompts, then over datasets. Datasets in
/// `exclude` are skipped.
pub fn aie(
    model: &Model,
    datasets: &[PatchDataset],
    cache: &MeanActivationCache,
    exclude: &[DatasetId],
) -> Result<AieResult> {
    let heads: Vec<HeadLocator> = model.config().heads().collect();
    let mut per_dataset = Vec::new();
    for d in datasets.iter().filter(|d| !exclude.contains(&d.id)) {
        let means = heads
            .iter()
            .map(|&h| Ok((h, cache.require(d.id, h)?)))
            .collect::<Result<Vec<_>>>()?;
        per_dataset.push((d.id, dataset_means(model, &d.corrupted, &means, d.id)?));
    }
    average_datasets(model, "all", per_dataset)
}

/// AIE with means from `source`-format clean prompts patched into
/// `target`-format corrupted prompts of the same concept.
pub fn cross_format_aie(
    model: &Model,
    source: Format,
    target: Format,
    datasets: &[PatchDataset],
    cache: &MeanActivationCache,
) -> Result<AieResult> {
    let heads: Vec<HeadLocator> = model.config().heads().collect();
    let mut per_dataset = Vec::new();
    for d in datasets.iter().filter(|d| d.id.format == target) {
        let src = DatasetId::new(d.id.concept, source);
        let means = heads
            .iter()
            .map(|&h| Ok((h, cache.require(src, h)?)))
            .collect::<Result<Vec<_>>>()?;
        per_dataset.push((d.id, dataset_means(model, &d.corrupted, &means, d.id)?));
    }
    average_datasets(model, &format!("{source}->{target}"), per_dataset)
}

/// Top-k of a cross-format table and its overlap with other head sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFormatSummary {
    pub source: Format,
    pub target: Format,
    pub top: Vec<HeadLocator>,
    pub overlap_fv: usize,
    pub overlap_cv: usize,
}

impl CrossFormatSummary {
    pub fn new(
        source: Format,
        target: Format,
        table: &ScoreTable,
        k: usize,
        fv_heads: &[HeadLocator],
        cv_heads: &[HeadLocator],
    ) -> Self {
        let top = table.top_k(k);
        Self {
            source,
            target,
            overlap_fv: overlap_count(&top, fv_heads),
            overlap_cv: overlap_count(&top, cv_heads),
            top,
        }
    }
}
