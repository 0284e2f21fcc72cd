//! Residual-stream steering and its measurements.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{format_score, ScoreTable};
use crate::prompts::EncodedPrompt;
use crate::rsa::VectorKind;
use crate::runtime::{ActivationRecord, HookSet, Model, PreparedPrompt};
use crate::tasks::{render_prompt, AmbiguousPromptSpec, Concept, DatasetId, Format};
use crate::vectors::{steering_vector, HeadSelection, Provenance, SteeringVector};

/// Probability floor applied before taking logs in KL.
pub const KL_FLOOR: f64 = 1e-12;
/// Layers averaged over by [`kl_consistency`].
pub const KL_LAYERS: usize = 5;

/// A prompt to steer, with the token we want and the one it competes with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteerPrompt {
    pub prompt_id: String,
    pub tokens: Vec<u32>,
    pub gold: u32,
    pub competitor: Option<u32>,
}

impl SteerPrompt {
    pub fn ambiguous(model: &Model, spec: &AmbiguousPromptSpec) -> Result<Self> {
        Self::from_ambiguous(model, spec, false)
    }

    /// The query alone, without any demonstrations.
    pub fn ambiguous_zero_shot(model: &Model, spec: &AmbiguousPromptSpec) -> Result<Self> {
        Self::from_ambiguous(model, spec, true)
    }

    fn from_ambiguous(model: &Model, spec: &AmbiguousPromptSpec, zero_shot: bool) -> Result<Self> {
        let mut ps = spec.to_prompt_spec();
        if zero_shot {
            ps = ps.zero_shot();
        }
        let p = EncodedPrompt::from_text(model, &ps.prompt_id, &render_prompt(&ps), &ps.gold)?;
        Ok(Self {
            competitor: Some(model.tokenizer().first_token(&spec.competitor)?),
            ..Self::from(p)
        })
    }
}

impl From<EncodedPrompt> for SteerPrompt {
    fn from(p: EncodedPrompt) -> Self {
        Self {
            prompt_id: p.prompt_id,
            tokens: p.tokens,
            gold: p.gold,
            competitor: None,
        }
    }
}

/// A token whose probability shift is tracked, such as the MC bracket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerToken {
    pub label: String,
    pub id: u32,
}

impl MarkerToken {
    pub fn new(model: &Model, text: &str) -> Result<Self> {
        let id = model
            .tokenizer()
            .id(text)
            .ok_or_else(|| Error::UnknownToken(text.to_string()))?;
        Ok(Self {
            label: text.to_string(),
            id,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub layers: Vec<usize>,
    pub alpha: f32,
    pub markers: Vec<MarkerToken>,
    /// Length of the largest-gain token list per outcome.
    pub top_n: usize,
    /// Keep the steered distribution on each outcome (needed for KL).
    pub keep_distributions: bool,
}

impl SweepOptions {
    pub fn new(layers: Vec<usize>, alpha: f32) -> Self {
        Self {
            layers,
            alpha,
            markers: Vec::new(),
            top_n: 10,
            keep_distributions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDelta {
    pub token: String,
    pub id: u32,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub prompt_id: String,
    pub layer: usize,
    pub alpha: f32,
    pub provenance: Provenance,
    pub p_before: f64,
    pub p_after: f64,
    pub delta_p: f64,
    pub top1_before: bool,
    pub top1_correct: bool,
    pub competitor_delta: Option<f64>,
    pub marker_deltas: Vec<TokenDelta>,
    /// Largest probability gains, biggest first.
    pub top_deltas: Vec<TokenDelta>,
    #[serde(skip)]
    pub post: Option<Vec<f32>>,
}

/// A prompt with its prefix cached and its unsteered distribution.
struct Baseline<'a> {
    prompt: &'a SteerPrompt,
    prepared: PreparedPrompt,
    before: Vec<f32>,
}

fn baselines<'a>(model: &Model, prompts: &'a [SteerPrompt]) -> Result<Vec<Baseline<'a>>> {
    let vocab = model.config().vocab_size;
    prompts
        .par_iter()
        .map(|p| {
            for id in std::iter::once(p.gold).chain(p.competitor) {
                if id as usize >= vocab {
                    return Err(Error::TokenOutOfRange { id, vocab_size: vocab });
                }
            }
            let prepared = model.prepare(&p.tokens)?;
            let before = model.run(&prepared, &HookSet::new())?.probs;
            Ok(Baseline {
                prompt: p,
                prepared,
                before,
            })
        })
        .collect()
}

fn argmax(p: &[f32]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn check_sweep(model: &Model, vector: &SteeringVector, opts: &SweepOptions) -> Result<()> {
    let c = model.config();
    if vector.values.len() != c.d_model {
        return Err(Error::DimensionMismatch {
            expected: c.d_model,
            found: vector.values.len(),
        });
    }
    if vector.values.iter().any(|x| !x.is_finite()) || !opts.alpha.is_finite() {
        return Err(Error::NonFinite("steering vector or alpha".into()));
    }
    for &l in &opts.layers {
        c.check_layer(l)?;
    }
    Ok(())
}

fn sweep_baselines(
    model: &Model,
    base: &[Baseline<'_>],
    vector: &SteeringVector,
    opts: &SweepOptions,
) -> Result<Vec<InterventionOutcome>> {
    check_sweep(model, vector, opts)?;
    let tok = model.tokenizer();
    let delta = |before: &[f32], after: &[f32], id: u32| TokenDelta {
        token: tok.token(id).unwrap_or_default().to_string(),
        id,
        delta: after[id as usize] as f64 - before[id as usize] as f64,
    };
    let jobs: Vec<(&Baseline<'_>, usize)> = base
        .iter()
        .flat_map(|b| opts.layers.iter().map(move |&l| (b, l)))
        .collect();
    let mut out = jobs
        .par_iter()
        .map(|&(b, layer)| {
            let hooks = HookSet::new().inject(layer, vector.values.clone(), opts.alpha);
            let after = model.run(&b.prepared, &hooks)?.probs;
            let gold = b.prompt.gold as usize;
            let mut gains: Vec<(u32, f64)> = after
                .iter()
                .zip(&b.before)
                .enumerate()
                .map(|(i, (&a, &p))| (i as u32, a as f64 - p as f64))
                .collect();
            gains.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            let (p_before, p_after) = (b.before[gold] as f64, after[gold] as f64);
            Ok(InterventionOutcome {
                prompt_id: b.prompt.prompt_id.clone(),
                layer,
                alpha: opts.alpha,
                provenance: vector.provenance.clone(),
                p_before,
                p_after,
                delta_p: p_after - p_before,
                top1_before: argmax(&b.before) == gold,
                top1_correct: argmax(&after) == gold,
                competitor_delta: b.prompt.competitor.map(|c| delta(&b.before, &after, c).delta),
                marker_deltas: opts.markers.iter().map(|m| delta(&b.before, &after, m.id)).collect(),
                top_deltas: gains[..opts.top_n.min(gains.len())]
                    .iter()
                    .map(|&(id, _)| delta(&b.before, &after, id))
                    .collect(),
                post: opts.keep_distributions.then_some(after),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id).then(a.layer.cmp(&b.layer)));
    Ok(out)
}

/// One unsteered and one steered pass per (prompt, layer).
pub fn steer_sweep(
    model: &Model,
    prompts: &[SteerPrompt],
    vector: &SteeringVector,
    opts: &SweepOptions,
) -> Result<Vec<InterventionOutcome>> {
    check_sweep(model, vector, opts)?;
    sweep_baselines(model, &baselines(model, prompts)?, vector, opts)
}

/// [`steer_sweep`] over query-only prompts.
pub fn zero_shot_sweep(
    model: &Model,
    prompts: &[SteerPrompt],
    vector: &SteeringVector,
    opts: &SweepOptions,
) -> Result<Vec<InterventionOutcome>> {
    steer_sweep(model, prompts, vector, opts)
}

/// Mean ΔP and accuracy of one vector at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub concept: Concept,
    pub method: VectorKind,
    pub format: Format,
    pub layer: usize,
    pub n_prompts: usize,
    pub mean_delta_p: f64,
    pub top1_acc: f64,
    pub mean_competitor_delta: Option<f64>,
    pub mean_marker_deltas: Vec<(String, f64)>,
}

pub fn summarize(outcomes: &[InterventionOutcome]) -> Vec<SweepSummary> {
    let mut groups: BTreeMap<(DatasetId, VectorKind, usize), Vec<&InterventionOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups
            .entry((o.provenance.dataset, o.provenance.method, o.layer))
            .or_default()
            .push(o);
    }
    groups
        .into_iter()
        .map(|((dataset, method, layer), os)| {
            let n = os.len() as f64;
            let mean = |f: &dyn Fn(&InterventionOutcome) -> f64| os.iter().map(|o| f(o)).sum::<f64>() / n;
            let comps: Vec<f64> = os.iter().filter_map(|o| o.competitor_delta).collect();
            let markers = os[0]
                .marker_deltas
                .iter()
                .enumerate()
                .map(|(i, m)| (m.token.clone(), mean(&|o| o.marker_deltas[i].delta)))
                .collect();
            SweepSummary {
                concept: dataset.concept,
                method,
                format: dataset.format,
                layer,
                n_prompts: os.len(),
                mean_delta_p: mean(&|o| o.delta_p),
                top1_acc: mean(&|o| f64::from(u8::from(o.top1_correct))),
                mean_competitor_delta: (!comps.is_empty()).then(|| comps.iter().sum::<f64>() / comps.len() as f64),
                mean_marker_deltas: markers,
            }
        })
        .collect()
}

/// Best layer's mean ΔP.
pub fn peak_delta_p(summaries: &[SweepSummary]) -> Option<f64> {
    summaries.iter().map(|s| s.mean_delta_p).max_by(f64::total_cmp)
}

pub fn write_outcomes_jsonl(path: &Path, outcomes: &[InterventionOutcome]) -> Result<()> {
    let mut text = String::new();
    for o in outcomes {
        text += &serde_json::to_string(o).map_err(|e| Error::json("outcome", e))?;
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(path: &Path, rows: &[SweepSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["concept", "method", "format", "layer", "mean_delta_p", "top1_acc"])?;
    for r in rows {
        w.write_record([
            r.concept.to_string(),
            r.method.to_string(),
            r.format.to_string(),
            r.layer.to_string(),
            format_score(r.mean_delta_p),
            format_score(r.top1_acc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean ΔP of the competitor and marker tokens, one row per token.
pub fn write_token_effects_csv(path: &Path, rows: &[SweepSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["concept", "method", "format", "layer", "token", "mean_delta_p"])?;
    for r in rows {
        let comp = r.mean_competitor_delta.map(|d| ("<competitor>".to_string(), d));
        for (token, d) in comp.into_iter().chain(r.mean_marker_deltas.iter().cloned()) {
            w.write_record([
                r.concept.to_string(),
                r.method.to_string(),
                r.format.to_string(),
                r.layer.to_string(),
                token,
                format_score(d),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `D_KL(p || q)` in nats with both sides floored at [`KL_FLOOR`]. Rounding
/// can push the sum a hair below zero; it is reported as zero.
pub fn kl_divergence(p: &[f32], q: &[f32]) -> f64 {
    assert_eq!(p.len(), q.len(), "KL over different supports");
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&p, &q)| {
            let (p, q) = (p as f64, q as f64);
            if p == 0.0 {
                0.0
            } else {
                p * (p.max(KL_FLOOR).ln() - q.max(KL_FLOOR).ln())
            }
        })
        .sum();
    kl.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScore {
    pub concept: Concept,
    pub method: VectorKind,
    pub k: usize,
    pub id_format: Format,
    pub ood_format: Format,
    pub layers: Vec<usize>,
    /// Fewer than [`KL_LAYERS`] layers were available.
    pub short_layer_list: bool,
    pub mean_kl: f64,
}

/// The layers with the highest mean ΔP, at most `n`, ties to the lower layer.
pub fn top_layers(outcomes: &[InterventionOutcome], n: usize) -> Vec<usize> {
    let mut by_layer: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for o in outcomes {
        let e = by_layer.entry(o.layer).or_default();
        e.0 += o.delta_p;
        e.1 += 1;
    }
    let mut layers: Vec<(usize, f64)> = by_layer.into_iter().map(|(l, (s, c))| (l, s / c as f64)).collect();
    layers.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    layers.into_iter().take(n).map(|(l, _)| l).collect()
}

/// Mean `D_KL(post_OOD || post_ID)` over prompts and the best ID layers.
pub fn kl_consistency(
    model: &Model,
    prompts: &[SteerPrompt],
    id_vector: &SteeringVector,
    ood_vector: &SteeringVector,
    id_outcomes: &[InterventionOutcome],
    alpha: f32,
) -> Result<ConsistencyScore> {
    let (a, b) = (&id_vector.provenance, &ood_vector.provenance);
    if a.method != b.method || a.k != b.k || a.dataset.concept != b.dataset.concept {
        return Err(Error::Analysis(format!(
            "KL needs vectors of one method, K and concept; got {} K={} {} and {} K={} {}",
            a.method, a.k, a.dataset, b.method, b.k, b.dataset
        )));
    }
    if prompts.is_empty() {
        return Err(Error::EmptyDataset("no prompts for KL".into()));
    }
    let layers = top_layers(id_outcomes, KL_LAYERS);
    if layers.is_empty() {
        return Err(Error::Analysis("no ID outcomes to pick layers from".into()));
    }
    let mut opts = SweepOptions::new(layers.clone(), alpha);
    opts.top_n = 0;
    opts.keep_distributions = true;
    let base = baselines(model, prompts)?;
    let id = sweep_baselines(model, &base, id_vector, &opts)?;
    let ood = sweep_baselines(model, &base, ood_vector, &opts)?;
    let total: f64 = id
        .iter()
        .zip(&ood)
        .map(|(i, o)| kl_divergence(o.post.as_deref().unwrap(), i.post.as_deref().unwrap()))
        .sum();
    Ok(ConsistencyScore {
        concept: a.dataset.concept,
        method: a.method,
        k: a.k,
        id_format: a.dataset.format,
        ood_format: b.dataset.format,
        short_layer_list: layers.len() < KL_LAYERS,
        layers,
        mean_kl: total / id.len() as f64,
    })
}

pub fn write_kl_csv(path: &Path, rows: &[ConsistencyScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["concept", "method", "k", "id_format", "ood_format", "layers", "mean_kl"])?;
    for r in rows {
        let layers: Vec<String> = r.layers.iter().map(usize::to_string).collect();
        w.write_record([
            r.concept.to_string(),
            r.method.to_string(),
            r.k.to_string(),
            r.id_format.to_string(),
            r.ood_format.to_string(),
            layers.join(";"),
            format_score(r.mean_kl),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub k: usize,
    pub alpha: f32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best: GridCell,
    pub cells: Vec<GridCell>,
}

/// Evaluate every (K, α) and keep the highest score. Ties go to the smaller
/// K, then the smaller α.
pub fn grid_search(
    k_grid: &[usize],
    alpha_grid: &[f32],
    mut score: impl FnMut(usize, f32) -> Result<f64>,
) -> Result<GridSearch> {
    let mut ks = k_grid.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut alphas = alpha_grid.to_vec();
    alphas.sort_by(f32::total_cmp);
    alphas.dedup();
    if ks.is_empty() || alphas.is_empty() {
        return Err(Error::Config("empty K or alpha grid".into()));
    }
    let mut cells = Vec::with_capacity(ks.len() * alphas.len());
    for &k in &ks {
        for &alpha in &alphas {
            let s = score(k, alpha)?;
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("grid score at K={k}, alpha={alpha}")));
            }
            cells.push(GridCell { k, alpha, score: s });
        }
    }
    let best = *cells
        .iter()
        .reduce(|best, c| if c.score > best.score { c } else { best })
        .expect("non-empty grid");
    Ok(GridSearch { best, cells })
}

/// Everything the (K, α) search needs for one concept.
pub struct SearchInputs<'a> {
    /// Extraction records per format.
    pub extraction: Vec<(DatasetId, &'a [ActivationRecord])>,
    pub fv_scores: &'a ScoreTable,
    pub cv_scores: &'a ScoreTable,
    pub prompts: &'a [SteerPrompt],
    pub layers: Vec<usize>,
}

/// Grid search where a cell scores the best-layer mean ΔP, averaged over the
/// extraction formats and over both vector kinds.
pub fn hyperparameter_search(
    model: &Model,
    inputs: &SearchInputs<'_>,
    k_grid: &[usize],
    alpha_grid: &[f32],
) -> Result<GridSearch> {
    if inputs.extraction.is_empty() {
        return Err(Error::EmptyDataset("no extraction datasets for the search".into()));
    }
    let base = baselines(model, inputs.prompts)?;
    let mut vectors: BTreeMap<usize, Vec<SteeringVector>> = BTreeMap::new();
    grid_search(k_grid, alpha_grid, |k, alpha| {
        if let std::collections::btree_map::Entry::Vacant(slot) = vectors.entry(k) {
            let mut vs = Vec::new();
            for (kind, table) in [(VectorKind::Function, inputs.fv_scores), (VectorKind::Concept, inputs.cv_scores)] {
                let sel = HeadSelection::top_k(kind, table, k)?;
                for (id, records) in &inputs.extraction {
                    vs.push(steering_vector(records, &sel, *id)?);
                }
            }
            slot.insert(vs);
        }
        let opts = SweepOptions {
            top_n: 0,
            ..SweepOptions::new(inputs.layers.clone(), alpha)
        };
        let mut total = 0.0;
        let vs = &vectors[&k];
        for v in vs {
            let outcomes = sweep_baselines(model, &base, v, &opts)?;
            total += peak_delta_p(&summarize(&outcomes)).unwrap_or(0.0);
        }
        Ok(total / vs.len() as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_hand_computed() {
        let p = [0.5f32, 0.3, 0.2];
        let q = [0.4f32, 0.4, 0.2];
        let exact: f64 = p
            .iter()
            .zip(&q)
            .map(|(&a, &b)| a as f64 * (a as f64 / b as f64).ln())
            .sum();
        assert!((kl_divergence(&p, &q) - exact).abs() < 1e-12);
        assert_ne!(kl_divergence(&p, &q), kl_divergence(&q, &p));
        assert_eq!(kl_divergence(&p, &p), 0.0);
    }

    #[test]
    fn kl_survives_zeros() {
        let kl = kl_divergence(&[0.5, 0.5, 0.0], &[1.0, 0.0, 0.0]);
        assert!(kl.is_finite() && kl > 0.0);
    }

    #[test]
    fn grid_ties_prefer_small_k_then_alpha() {
        let g = grid_search(&[5, 1, 3], &[10.0, 1.0], |_, _| Ok(0.25)).unwrap();
        assert_eq!((g.best.k, g.best.alpha), (1, 1.0));
        assert_eq!(g.cells.len(), 6);
        let one = grid_search(&[3], &[5.0], |_, _| Ok(-1.0)).unwrap();
        assert_eq!((one.best.k, one.best.alpha), (3, 5.0));
        assert!(grid_search(&[], &[1.0], |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn grid_finds_unique_peak() {
        let surface = |k: usize, a: f32| -((k as f64 - 10.0).powi(2)) - (a as f64 - 3.0).powi(2);
        let g = grid_search(&[1, 3, 5, 10, 20, 50], &[1.0, 3.0, 5.0, 10.0, 15.0], |k, a| Ok(surface(k, a))).unwrap();
        assert_eq!((g.best.k, g.best.alpha), (10, 3.0));
    }

    #[test]
    fn top_layers_ranks_by_mean_delta() {
        let o = |layer, delta_p| InterventionOutcome {
            prompt_id: "p".into(),
            layer,
            alpha: 1.0,
            provenance: Provenance {
                method: VectorKind::Function,
                k: 1,
                heads: vec![],
                dataset: DatasetId {
                    concept: Concept::Antonym,
                    format: Format::OpenEndedEn,
                },
                n_prompts: 1,
            },
            p_before: 0.0,
            p_after: delta_p,
            delta_p,
            top1_before: false,
            top1_correct: false,
            competitor_delta: None,
            marker_deltas: vec![],
            top_deltas: vec![],
            post: None,
        };
        let os = [o(0, 0.1), o(1, 0.3), o(2, 0.3), o(3, -0.2), o(1, 0.1)];
        // layer 1 averages 0.2
        assert_eq!(top_layers(&os, 2), vec![2, 1]);
        assert_eq!(top_layers(&os, 9).len(), 4);
    }
}
