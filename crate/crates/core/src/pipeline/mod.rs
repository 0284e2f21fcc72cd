//! Config-driven experiment graph with on-disk stage outputs under
//! `<output_dir>/<config hash>/<stage>/`.

pub mod config;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    apply_override, child_seed, Builtin, ConfigEdits, Diagnostic, ExperimentConfig, ModelSource, RsaSettings, SteeringSettings,
};
use store::{read_records, write_records, RecordIndex, StageDir, StageWriter};

use crate::error::{Error, Result};
use crate::patching::{aie, cross_format_aie, CrossFormatSummary, MeanActivationCache, Metric, PatchDataset, ScoreTable};
use crate::prompts::{encode_all, EncodedPrompt};
use crate::report::{write_line_chart, write_score_heatmap, write_similarity_heatmap, Series};
use crate::rsa::{
    build_design_matrix, build_rsm, compare_vector_rsa, concept_major_order, concept_rsa_all_heads, Attribute,
    PromptMeta, VectorKind,
};
use crate::runtime::{weights, ActivationRecord, Model};
use crate::steering::{
    hyperparameter_search, kl_consistency, steer_sweep, summarize, write_kl_csv, write_outcomes_jsonl,
    write_summary_csv, write_token_effects_csv, zero_shot_sweep, MarkerToken, SearchInputs, SteerPrompt,
    SweepOptions, SweepSummary,
};
use crate::tasks::{
    build_ambiguous_dataset, build_dataset, bundled, corrupt_prompt, distractor_pool, load_concept_pairs,
    write_prompt_dump, Concept, ConceptPairs, DatasetId, DatasetParams, FilterReport, Format, PromptSpec,
    RenderedPrompt, TranslationTable, MC_OPTIONS,
};
use crate::toy::PlantedModel;
use crate::vectors::{
    head_overlap, per_prompt_vector, steering_vector, vector_similarity_report, write_overlap_csv, HeadSelection,
    OverlapResult, SteeringVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Capture,
    Aie,
    Rsa,
    Select,
    Vectors,
    Steer,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Capture,
        Stage::Aie,
        Stage::Rsa,
        Stage::Select,
        Stage::Vectors,
        Stage::Steer,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Capture => "capture",
            Stage::Aie => "aie",
            Stage::Rsa => "rsa",
            Stage::Select => "select",
            Stage::Vectors => "vectors",
            Stage::Steer => "steer",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Capture => &[],
            Stage::Aie => &[Stage::Capture],
            Stage::Rsa => &[Stage::Capture, Stage::Aie],
            Stage::Select => &[Stage::Aie, Stage::Rsa],
            Stage::Vectors => &[Stage::Capture, Stage::Select],
            Stage::Steer => &[Stage::Capture, Stage::Aie, Stage::Rsa, Stage::Vectors],
            Stage::Report => &[Stage::Capture, Stage::Aie, Stage::Rsa, Stage::Select, Stage::Steer],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Everything loaded from the config's declared inputs.
pub struct Inputs {
    pub model: Model,
    /// In [`Concept::ALL`] order.
    pub concepts: Vec<ConceptPairs>,
    pub filter_reports: Vec<(Concept, FilterReport)>,
    pub table: TranslationTable,
    /// sha256 over the config and the bytes of every declared input file.
    pub fingerprint: String,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load the model and word pairs, hashing them as they are read.
pub fn load_inputs(config: &ExperimentConfig, base: &Path) -> Result<Inputs> {
    let mut h = Sha256::new();
    let mut hashed = config.clone();
    hashed.output_dir = PathBuf::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(serde_json::to_vec(&hashed).map_err(|e| Error::json("config", e))?);
    let mut file = |label: &str, path: &Path| -> Result<()> {
        let bytes = read_bytes(path)?;
        h.update(label.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        Ok(())
    };

    let mut concepts = Vec::new();
    let mut filter_reports = Vec::new();
    for c in Concept::ALL {
        let (pairs, report) = match config.datasets.get(&c) {
            Some(p) => {
                let path = resolve(base, p);
                file(&format!("dataset/{c}"), &path)?;
                let (pairs, report) = load_concept_pairs(&path)?;
                if pairs.concept != c {
                    return Err(Error::Dataset(format!(
                        "{} holds {} pairs, configured as {c}",
                        path.display(),
                        pairs.concept
                    )));
                }
                (pairs, report)
            }
            None => bundled::concept(c)?,
        };
        concepts.push(pairs);
        filter_reports.push((c, report));
    }
    let table = match &config.translation_table {
        Some(p) => {
            let path = resolve(base, p);
            file("translation_table", &path)?;
            TranslationTable::load(&path)?
        }
        None => bundled::translation_table()?,
    };
    let model = match &config.model {
        ModelSource::Path(p) => {
            let dir = resolve(base, p);
            for name in [weights::MANIFEST_FILE, weights::WEIGHTS_FILE, weights::VOCAB_FILE] {
                file(&format!("model/{name}"), &dir.join(name))?;
            }
            Model::load(&dir)?
        }
        ModelSource::Builtin(Builtin::Planted) => PlantedModel::build(&concepts, &table)?.model,
    };
    Ok(Inputs {
        model,
        concepts,
        filter_reports,
        table,
        fingerprint: hex::encode(h.finalize()),
    })
}

/// Schema and cross-field checks. An empty list means the config is usable.
pub fn validate_config(path: &Path) -> Result<Vec<Diagnostic>> {
    validate_config_with_edits(path, &ConfigEdits::default())
}

pub fn validate_config_with_edits(path: &Path, edits: &ConfigEdits) -> Result<Vec<Diagnostic>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => return Ok(vec![Diagnostic::new("", e.to_string())]),
    };
    if let Err(e) = edits.apply(&mut value) {
        return Ok(vec![Diagnostic::new("", e.to_string())]);
    }
    match ExperimentConfig::from_value(value) {
        Ok(c) => Ok(validate(&c, path.parent().unwrap_or(Path::new(".")))),
        Err(d) => Ok(vec![d]),
    }
}

/// Checks on a parsed config. Loads the declared inputs to check counts
/// against the model and the word pairs.
pub fn validate(config: &ExperimentConfig, base: &Path) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut err = |p: String, m: String| out.push(Diagnostic::new(p, m));
    if config.n_prompts == 0 {
        err("/n_prompts".into(), "must be at least 1".into());
    }
    if config.formats.is_empty() {
        err("/formats".into(), "at least one format is needed".into());
    }
    let mut seen = BTreeSet::new();
    for (i, f) in config.formats.iter().enumerate() {
        if !seen.insert(f) {
            err(format!("/formats/{i}"), format!("{f} listed twice"));
        }
    }
    for (f, &s) in &config.shots {
        if s == 0 {
            err(format!("/shots/{f}"), "must be at least 1".into());
        }
    }
    if config.k_grid.is_empty() {
        err("/k_grid".into(), "empty grid".into());
    }
    for (i, &k) in config.k_grid.iter().enumerate() {
        if k == 0 {
            err(format!("/k_grid/{i}"), "K must be at least 1".into());
        }
    }
    if config.alpha_grid.is_empty() {
        err("/alpha_grid".into(), "empty grid".into());
    }
    for (i, a) in config.alpha_grid.iter().enumerate() {
        if !a.is_finite() || *a <= 0.0 {
            err(format!("/alpha_grid/{i}"), format!("alpha must be finite and positive, got {a}"));
        }
    }
    if config.layers.is_empty() {
        err("/layers".into(), "no layers to steer".into());
    }
    let datasets = config.dataset_ids();
    for (i, d) in config.exclude_datasets.iter().enumerate() {
        if !datasets.contains(d) {
            err(format!("/exclude_datasets/{i}"), format!("{d} is not one of the configured datasets"));
        }
    }
    if datasets.iter().all(|d| config.exclude_datasets.contains(d)) {
        err("/exclude_datasets".into(), "every dataset is excluded".into());
    }
    for (i, &k) in config.rsa.k_values.iter().flatten().enumerate() {
        if k == 0 {
            err(format!("/rsa/k_values/{i}"), "K must be at least 1".into());
        }
    }
    for (i, &k) in config.rsa.matrix_k.iter().enumerate() {
        if k == 0 {
            err(format!("/rsa/matrix_k/{i}"), "K must be at least 1".into());
        }
    }
    let st = &config.steering;
    if st.n_prompts == 0 {
        err("/steering/n_prompts".into(), "must be at least 1".into());
    }
    if st.k == Some(0) {
        err("/steering/k".into(), "K must be at least 1".into());
    }
    if let Some(a) = st.alpha {
        if !a.is_finite() || a <= 0.0 {
            err("/steering/alpha".into(), format!("alpha must be finite and positive, got {a}"));
        }
    }
    for f in [st.id_format] {
        if !config.formats.contains(&f) {
            err("/steering/id_format".into(), format!("{f} is not among the configured formats"));
        }
    }
    if st.concepts().contains(&Concept::Translation) {
        err(
            "/steering/concepts".into(),
            "translation is the competing concept and cannot be steered toward".into(),
        );
    }
    if !st.concepts().contains(&st.search_concept) && st.search_concept == Concept::Translation {
        err("/steering/search_concept".into(), "translation cannot be steered toward".into());
    }
    for (c, p) in &config.datasets {
        if !resolve(base, p).is_file() {
            err(format!("/datasets/{c}"), format!("{} does not exist", p.display()));
        }
    }
    if let Some(p) = &config.translation_table {
        if !resolve(base, p).is_file() {
            err("/translation_table".into(), format!("{} does not exist", p.display()));
        }
    }
    if let ModelSource::Path(p) = &config.model {
        if !resolve(base, p).is_dir() {
            err("/model/path".into(), format!("{} is not a directory", p.display()));
        }
    }
    if !out.is_empty() {
        return out;
    }

    // Cross-field checks that need the inputs.
    let inputs = match load_inputs(config, base) {
        Ok(i) => i,
        Err(e) => return vec![Diagnostic::new("/model", e.to_string())],
    };
    let c = inputs.model.config();
    let total = c.total_heads();
    let mut err = |p: String, m: String| out.push(Diagnostic::new(p, m));
    let k_lists = [
        ("/k_grid", config.k_grid.clone()),
        ("/rsa/k_values", config.rsa.k_values.clone().unwrap_or_default()),
        ("/rsa/matrix_k", config.rsa.matrix_k.clone()),
        ("/steering/k", st.k.into_iter().collect()),
    ];
    for (ptr, ks) in k_lists {
        for (i, &k) in ks.iter().enumerate() {
            if k > total {
                let at = if ptr == "/steering/k" { ptr.to_string() } else { format!("{ptr}/{i}") };
                err(at, format!("K={k} exceeds the model's {total} heads"));
            }
        }
    }
    for (i, &l) in config.layers.iter().enumerate() {
        if l >= c.n_layers {
            err(format!("/layers/{i}"), format!("layer {l} is outside 0..{}", c.n_layers));
        }
    }
    for &f in &config.formats {
        let shots = config.shots(f);
        for pairs in &inputs.concepts {
            if pairs.pairs.len() <= shots {
                err(
                    format!("/shots/{f}"),
                    format!("{shots} shots need more than {shots} {} pairs, found {}", pairs.concept, pairs.pairs.len()),
                );
            }
            let outputs: BTreeSet<&str> = pairs.pairs.iter().map(|p| p.output.as_str()).collect();
            if f == Format::MultipleChoice && outputs.len() < MC_OPTIONS {
                err(
                    "/formats".into(),
                    format!("{} has {} distinct answers, MC needs {MC_OPTIONS}", pairs.concept, outputs.len()),
                );
            }
        }
    }
    for (f, toks) in &st.markers {
        for (i, t) in toks.iter().enumerate() {
            if inputs.model.tokenizer().id(t).is_none() {
                err(format!("/steering/markers/{f}/{i}"), format!("{t:?} is not a single token"));
            }
        }
    }
    out
}

/// Clean and corrupted prompts of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPrompts {
    pub id: DatasetId,
    pub clean: Vec<PromptSpec>,
    pub corrupted: Vec<PromptSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AieProvenance {
    datasets: Vec<DatasetId>,
    excluded: Vec<DatasetId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Selections {
    fv: Vec<HeadSelection>,
    cv: Vec<HeadSelection>,
    overlap: Vec<OverlapResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SteerChoice {
    k: usize,
    alpha: f64,
    searched: bool,
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub inputs: Inputs,
    root: PathBuf,
    hash: String,
}

const DATASETS_FILE: &str = "datasets.json";

impl Pipeline {
    /// Validate `config` and load its inputs. Relative paths resolve against `base_dir`.
    pub fn new(config: ExperimentConfig, base_dir: &Path) -> Result<Self> {
        let diags = validate(&config, base_dir);
        if !diags.is_empty() {
            let lines: Vec<String> = diags.iter().map(Diagnostic::to_string).collect();
            return Err(Error::Config(lines.join("; ")));
        }
        let inputs = load_inputs(&config, base_dir)?;
        let hash = inputs.fingerprint[..16].to_string();
        let root = resolve(base_dir, &config.output_dir).join(&hash);
        Ok(Self {
            config,
            base_dir: base_dir.to_path_buf(),
            inputs,
            root,
            hash,
        })
    }

    pub fn from_file(path: &Path, edits: &ConfigEdits) -> Result<Self> {
        let config = ExperimentConfig::load_with_edits(path, edits)?;
        Self::new(config, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    /// `<output_dir>/<config hash>`.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn model(&self) -> &Model {
        &self.inputs.model
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        StageDir::open(&self.root, stage.as_str()).is_ok()
    }

    /// Run one stage. Its upstream stages must already be on disk.
    pub fn run_stage(&self, stage: Stage) -> Result<PathBuf> {
        for &up in stage.upstream() {
            StageDir::open(&self.root, up.as_str())?;
        }
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let cfg_path = self.root.join("config.json");
        // Stored as hashed: where the run lives is not part of what it computed.
        let mut stored = self.config.clone();
        stored.output_dir = PathBuf::new();
        std::fs::write(&cfg_path, stored.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
        let w = StageWriter::begin(&self.root, stage.as_str(), &self.hash)?;
        match stage {
            Stage::Capture => self.capture(&w)?,
            Stage::Aie => self.aie(&w)?,
            Stage::Rsa => self.rsa(&w)?,
            Stage::Select => self.select(&w)?,
            Stage::Vectors => self.vectors(&w)?,
            Stage::Steer => self.steer(&w)?,
            Stage::Report => self.report(&w)?,
        }
        w.commit()
    }

    /// Run any missing upstream stages, then `stage`.
    pub fn run_with_upstream(&self, stage: Stage) -> Result<PathBuf> {
        let mut need = BTreeSet::new();
        let mut stack = vec![stage];
        while let Some(s) = stack.pop() {
            for &up in s.upstream() {
                if !self.is_done(up) && need.insert(up) {
                    stack.push(up);
                }
            }
        }
        for s in need {
            self.run_stage(s)?;
        }
        self.run_stage(stage)
    }

    pub fn run_all(&self) -> Result<()> {
        for s in Stage::ALL {
            self.run_stage(s)?;
        }
        Ok(())
    }

    fn stage(&self, stage: Stage) -> Result<StageDir> {
        StageDir::open(&self.root, stage.as_str())
    }

    fn pairs(&self, c: Concept) -> &ConceptPairs {
        &self.inputs.concepts[Concept::ALL.iter().position(|&x| x == c).expect("every concept")]
    }

    fn seed(&self, label: &str) -> u64 {
        child_seed(self.config.seed, label)
    }

    fn capture(&self, w: &StageWriter) -> Result<()> {
        let cfg = &self.config;
        let table = &self.inputs.table;
        let mut datasets = Vec::new();
        for id in cfg.dataset_ids() {
            let params = DatasetParams {
                n_prompts: cfg.n_prompts,
                shots: cfg.shots(id.format),
                seed: self.seed(&format!("clean/{id}")),
            };
            let clean = build_dataset(self.pairs(id.concept), id.format, &params, Some(table))?;
            let pool = distractor_pool(&self.inputs.concepts, id.concept, id.format, Some(table))?;
            let corrupted = clean
                .iter()
                .map(|s| corrupt_prompt(s, &pool, self.seed(&format!("corrupt/{}", s.prompt_id))))
                .collect::<Result<Vec<_>>>()?;
            datasets.push(DatasetPrompts { id, clean, corrupted });
        }
        w.write_json(DATASETS_FILE, &datasets)?;
        w.write_json("filter_report.json", &self.inputs.filter_reports)?;
        let rendered = |f: fn(&DatasetPrompts) -> &Vec<PromptSpec>| -> Vec<RenderedPrompt> {
            datasets.iter().flat_map(|d| f(d).iter().map(RenderedPrompt::from_spec)).collect()
        };
        write_prompt_dump(&w.path("prompts.jsonl")?, &rendered(|d| &d.clean))?;
        write_prompt_dump(&w.path("corrupted_prompts.jsonl")?, &rendered(|d| &d.corrupted))?;

        let model = self.model();
        let mut prompts = Vec::new();
        let mut ranges = Vec::new();
        for d in &datasets {
            ranges.push((d.id, prompts.len(), d.clean.len()));
            prompts.extend(d.clean.iter());
        }
        let records = prompts
            .par_iter()
            .map(|s| {
                let p = EncodedPrompt::new(model, s)?;
                model.capture(&p.prompt_id, &p.tokens, false)
            })
            .collect::<Result<Vec<_>>>()?;
        let index = RecordIndex {
            d_model: model.config().d_model,
            heads: model.config().heads().collect(),
            prompts: prompts.iter().map(|s| PromptMeta::from(*s)).collect(),
            datasets: ranges,
        };
        write_records(w, &index, &records)
    }

    fn load_capture(&self) -> Result<(Vec<DatasetPrompts>, RecordIndex, Vec<ActivationRecord>)> {
        let st = self.stage(Stage::Capture)?;
        let datasets = st.read_json(DATASETS_FILE)?;
        let (index, records) = read_records(&st)?;
        Ok((datasets, index, records))
    }

    fn aie(&self, w: &StageWriter) -> Result<()> {
        let model = self.model();
        let (datasets, index, records) = self.load_capture()?;
        let cache = MeanActivationCache::from_records(
            index
                .datasets
                .iter()
                .map(|&(id, start, len)| (id, &records[start..start + len])),
        )?;
        let patch = datasets
            .iter()
            .map(|d| {
                Ok(PatchDataset {
                    id: d.id,
                    corrupted: encode_all(model, &d.corrupted)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let result = aie(model, &patch, &cache, &self.config.exclude_datasets)?;
        result.table.write_csv(&w.path("aie.csv")?)?;
        result.table.write_json(&w.path("aie.json")?)?;
        result.table.write_histogram_csv(&w.path("aie_histogram.csv")?, 20)?;
        let mut pd = csv::Writer::from_path(w.path("aie_per_dataset.csv")?)?;
        pd.write_record(["dataset", "layer", "head", "score"])?;
        for (id, scores) in &result.per_dataset {
            for (h, s) in model.config().heads().zip(scores) {
                pd.write_record([id.to_string(), h.layer.to_string(), h.head.to_string(), crate::patching::format_score(*s)])?;
            }
        }
        pd.flush().map_err(|e| Error::io(w.path("aie_per_dataset.csv").unwrap(), e))?;
        w.write_json(
            "provenance.json",
            &AieProvenance {
                datasets: result.per_dataset.iter().map(|(id, _)| *id).collect(),
                excluded: self.config.exclude_datasets.clone(),
            },
        )?;
        for &src in &self.config.formats {
            for &tgt in &self.config.formats {
                if src != tgt {
                    let x = cross_format_aie(model, src, tgt, &patch, &cache)?;
                    x.table.write_csv(&w.path(&format!("cross_format/{src}-{tgt}.csv"))?)?;
                }
            }
        }
        Ok(())
    }

    fn read_table(&self, stage: Stage, name: &str) -> Result<ScoreTable> {
        ScoreTable::read_json(&self.stage(stage)?.path(name))
    }

    fn rsa(&self, w: &StageWriter) -> Result<()> {
        let (_, index, records) = self.load_capture()?;
        let config = self.model().config();
        let scores = concept_rsa_all_heads(config, &records, &index.prompts)?;
        scores.concept.write_csv(&w.path("concept_rsa.csv")?)?;
        scores.concept.write_json(&w.path("concept_rsa.json")?)?;
        scores.concept.write_histogram_csv(&w.path("concept_rsa_histogram.csv")?, 20)?;
        scores.question_type.write_csv(&w.path("question_type_rsa.csv")?)?;
        scores.question_type.write_json(&w.path("question_type_rsa.json")?)?;

        let order = concept_major_order(&index.prompts);
        let meta: Vec<PromptMeta> = order.iter().map(|&i| index.prompts[i].clone()).collect();
        let recs: Vec<ActivationRecord> = order.iter().map(|&i| records[i].clone()).collect();
        build_design_matrix(&meta, Attribute::Concept).write_csv(&w.path("dm_concept.csv")?)?;
        build_design_matrix(&meta, Attribute::QuestionType).write_csv(&w.path("dm_question_type.csv")?)?;
        w.write_json("prompt_order.json", &meta)?;

        let fv = self.read_table(Stage::Aie, "aie.json")?;
        let matrix_k: BTreeSet<usize> = self.config.rsa.matrix_k.iter().copied().collect();
        let mut ks = self.config.rsa_k_values();
        ks.extend(matrix_k.iter().copied());
        ks.sort_unstable();
        ks.dedup();
        let rows = compare_vector_rsa(&recs, &meta, &fv, &scores.concept, &ks, |k, kind, m| {
            if matrix_k.contains(&k) {
                m.write_csv(&w.path(&format!("rsm_{kind}_K{k}.csv"))?)?;
            }
            Ok(())
        })?;
        let mut out = csv::Writer::from_path(w.path("vector_rsa.csv")?)?;
        out.write_record(["K", "method", "concept_rsa", "question_type_rsa", "within_question_type_cosine"])?;
        let opt = |x: Option<f64>| x.map(crate::patching::format_score).unwrap_or_default();
        for r in &rows {
            out.write_record([
                r.k.to_string(),
                r.kind.to_string(),
                opt(r.concept_rsa),
                opt(r.question_type_rsa),
                crate::patching::format_score(r.within_question_type_cosine),
            ])?;
        }
        out.flush().map_err(|e| Error::io(w.path("vector_rsa.csv").unwrap(), e))?;
        w.write_json("vector_rsa.json", &rows)
    }

    fn select(&self, w: &StageWriter) -> Result<()> {
        let fv_table = self.read_table(Stage::Aie, "aie.json")?;
        let cv_table = self.read_table(Stage::Rsa, "concept_rsa.json")?;
        let mut sel = Selections {
            fv: Vec::new(),
            cv: Vec::new(),
            overlap: Vec::new(),
        };
        for &k in &self.config.k_grid {
            let fv = HeadSelection::top_k(VectorKind::Function, &fv_table, k)?;
            let cv = HeadSelection::top_k(VectorKind::Concept, &cv_table, k)?;
            sel.overlap.push(head_overlap(&fv, &cv)?);
            sel.fv.push(fv);
            sel.cv.push(cv);
        }
        write_overlap_csv(&w.path("overlap.csv")?, &sel.overlap)?;
        w.write_json("selections.json", &sel)
    }

    fn selections(&self) -> Result<Selections> {
        self.stage(Stage::Select)?.read_json("selections.json")
    }

    fn vectors(&self, w: &StageWriter) -> Result<()> {
        let (_, index, records) = self.load_capture()?;
        let sel = self.selections()?;
        let mut sims = csv::Writer::from_path(w.path("vector_similarity.csv")?)?;
        sims.write_record(["K", "method", "within_concept_cross_format", "within_format_cross_concept"])?;
        for s in sel.fv.iter().chain(&sel.cv) {
            for &(id, start, len) in &index.datasets {
                let v = steering_vector(&records[start..start + len], s, id)?;
                v.save(&w.path(&vector_file(s.k, s.method, id))?)?;
            }
            let per_prompt = records
                .iter()
                .map(|r| per_prompt_vector(r, &s.heads))
                .collect::<Result<Vec<_>>>()?;
            let rep = vector_similarity_report(&per_prompt, &index.prompts)?;
            let opt = |x: Option<f64>| x.map(crate::patching::format_score).unwrap_or_default();
            sims.write_record([
                s.k.to_string(),
                s.method.to_string(),
                opt(rep.within_concept_cross_format),
                opt(rep.within_format_cross_concept),
            ])?;
        }
        sims.flush().map_err(|e| Error::io(w.path("vector_similarity.csv").unwrap(), e))
    }

    fn markers(&self) -> Result<Vec<MarkerToken>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for toks in self.config.steering.markers.values() {
            for t in toks {
                if seen.insert(t.clone()) {
                    out.push(MarkerToken::new(self.model(), t)?);
                }
            }
        }
        Ok(out)
    }

    fn ambiguous_prompts(&self, concept: Concept) -> Result<(Vec<SteerPrompt>, Vec<SteerPrompt>)> {
        let table = &self.inputs.table;
        let translation = ConceptPairs::from_translation_table(table, table.iter().map(|(k, _)| k))?;
        let specs = build_ambiguous_dataset(
            self.pairs(concept),
            &translation,
            self.config.steering.n_prompts,
            self.seed(&format!("ambiguous/{concept}")),
        )?;
        let model = self.model();
        let few = specs.iter().map(|s| SteerPrompt::ambiguous(model, s)).collect::<Result<_>>()?;
        let zero = specs
            .iter()
            .map(|s| SteerPrompt::ambiguous_zero_shot(model, s))
            .collect::<Result<_>>()?;
        Ok((few, zero))
    }

    fn steer(&self, w: &StageWriter) -> Result<()> {
        let model = self.model();
        let st = &self.config.steering;
        let vectors_dir = self.stage(Stage::Vectors)?;

        let choice = match (st.k, st.alpha) {
            (Some(k), Some(alpha)) => SteerChoice {
                k,
                alpha,
                searched: false,
            },
            _ => {
                let (_, index, records) = self.load_capture()?;
                let fv = self.read_table(Stage::Aie, "aie.json")?;
                let cv = self.read_table(Stage::Rsa, "concept_rsa.json")?;
                let (prompts, _) = self.ambiguous_prompts(st.search_concept)?;
                let extraction = index
                    .datasets
                    .iter()
                    .filter(|(id, _, _)| id.concept == st.search_concept)
                    .map(|&(id, start, len)| (id, &records[start..start + len]))
                    .collect();
                let inputs = SearchInputs {
                    extraction,
                    fv_scores: &fv,
                    cv_scores: &cv,
                    prompts: &prompts,
                    layers: self.config.layers.clone(),
                };
                let ks: Vec<usize> = st.k.map_or_else(|| self.config.k_grid.clone(), |k| vec![k]);
                let alphas: Vec<f32> = st
                    .alpha
                    .map_or_else(|| self.config.alpha_grid.clone(), |a| vec![a])
                    .into_iter()
                    .map(|a| a as f32)
                    .collect();
                let g = hyperparameter_search(model, &inputs, &ks, &alphas)?;
                let mut out = csv::Writer::from_path(w.path("search.csv")?)?;
                out.write_record(["K", "alpha", "score"])?;
                for c in &g.cells {
                    out.write_record([c.k.to_string(), c.alpha.to_string(), crate::patching::format_score(c.score)])?;
                }
                out.flush().map_err(|e| Error::io(w.path("search.csv").unwrap(), e))?;
                SteerChoice {
                    k: g.best.k,
                    alpha: g.best.alpha as f64,
                    searched: true,
                }
            }
        };
        w.write_json("choice.json", &choice)?;

        let mut opts = SweepOptions::new(self.config.layers.clone(), choice.alpha as f32);
        opts.markers = self.markers()?;
        opts.top_n = st.top_n;
        let mut few_all = Vec::new();
        let mut zero_all = Vec::new();
        let mut kl_rows = Vec::new();
        for concept in st.concepts() {
            let (few, zero) = self.ambiguous_prompts(concept)?;
            for method in [VectorKind::Function, VectorKind::Concept] {
                let load = |f: Format| {
                    SteeringVector::load(&vectors_dir.path(&vector_file(choice.k, method, DatasetId::new(concept, f))))
                };
                let id_vec = load(st.id_format)?;
                let id_outcomes = steer_sweep(model, &few, &id_vec, &opts)?;
                for &f in &self.config.formats {
                    let v = if f == st.id_format { id_vec.clone() } else { load(f)? };
                    if f != st.id_format {
                        few_all.extend(steer_sweep(model, &few, &v, &opts)?);
                        kl_rows.push(kl_consistency(model, &few, &id_vec, &v, &id_outcomes, opts.alpha)?);
                    }
                    zero_all.extend(zero_shot_sweep(model, &zero, &v, &opts)?);
                }
                few_all.extend(id_outcomes);
            }
        }
        write_outcomes_jsonl(&w.path("outcomes.jsonl")?, &few_all)?;
        write_outcomes_jsonl(&w.path("zero_shot_outcomes.jsonl")?, &zero_all)?;
        let few_sum = summarize(&few_all);
        let zero_sum = summarize(&zero_all);
        write_summary_csv(&w.path("summary.csv")?, &few_sum)?;
        write_token_effects_csv(&w.path("token_effects.csv")?, &few_sum)?;
        write_summary_csv(&w.path("zero_shot_summary.csv")?, &zero_sum)?;
        w.write_json("summary.json", &few_sum)?;
        w.write_json("zero_shot_summary.json", &zero_sum)?;
        write_kl_csv(&w.path("kl.csv")?, &kl_rows)?;
        w.write_json("kl.json", &kl_rows)
    }

    fn report(&self, w: &StageWriter) -> Result<()> {
        let aie_table = self.read_table(Stage::Aie, "aie.json")?;
        let concept = self.read_table(Stage::Rsa, "concept_rsa.json")?;
        let qtype = self.read_table(Stage::Rsa, "question_type_rsa.json")?;
        write_score_heatmap(&aie_table, "AIE", &w.path("aie_heatmap.svg")?)?;
        write_score_heatmap(&concept, "Concept-RSA", &w.path("concept_rsa_heatmap.svg")?)?;
        write_score_heatmap(&qtype, "Question-type RSA", &w.path("question_type_rsa_heatmap.svg")?)?;

        let sel = self.selections()?;
        write_overlap_csv(&w.path("overlap.csv")?, &sel.overlap)?;

        // Cross-format patching against the within-format FV and the CV heads.
        let k = 5.min(aie_table.len());
        let fv_top = aie_table.top_k(k);
        let cv_top = concept.top_k(k);
        let aie_dir = self.stage(Stage::Aie)?;
        let mut cross = csv::Writer::from_path(w.path("cross_format.csv")?)?;
        cross.write_record(["source", "target", "top1", "top5", "overlap_fv", "overlap_cv"])?;
        for &src in &self.config.formats {
            for &tgt in &self.config.formats {
                if src == tgt {
                    continue;
                }
                let scope = format!("{src}->{tgt}");
                let t = ScoreTable::read_csv(
                    &aie_dir.path(&format!("cross_format/{src}-{tgt}.csv")),
                    Metric::Aie,
                    &scope,
                    self.model().config(),
                )?;
                let s = CrossFormatSummary::new(src, tgt, &t, k, &fv_top, &cv_top);
                let top: Vec<String> = s.top.iter().map(ToString::to_string).collect();
                cross.write_record([
                    src.to_string(),
                    tgt.to_string(),
                    s.top[0].to_string(),
                    top.join(";"),
                    s.overlap_fv.to_string(),
                    s.overlap_cv.to_string(),
                ])?;
            }
        }
        cross.flush().map_err(|e| Error::io(w.path("cross_format.csv").unwrap(), e))?;

        // Similarity matrices of the summed FV and CV vectors.
        let (_, index, records) = self.load_capture()?;
        let order = concept_major_order(&index.prompts);
        let labels: Vec<String> = index
            .prompts
            .iter()
            .map(|m| DatasetId::new(m.concept, m.format).to_string())
            .collect();
        for &k in &self.config.rsa.matrix_k {
            for (kind, table) in [(VectorKind::Function, &aie_table), (VectorKind::Concept, &concept)] {
                let heads = HeadSelection::top_k(kind, table, k)?.heads;
                let m = build_rsm(&records, &heads)?;
                write_similarity_heatmap(
                    &m,
                    &order,
                    &labels,
                    &format!("{kind} (K={k}) cosine similarity"),
                    self.config.rsa.heatmap_max_cells,
                    &w.path(&format!("rsm_{kind}_K{k}.svg"))?,
                )?;
            }
        }

        // Layer curves.
        let steer = self.stage(Stage::Steer)?;
        for (file, label) in [("summary.json", "delta_p"), ("zero_shot_summary.json", "zero_shot_delta_p")] {
            let rows: Vec<SweepSummary> = steer.read_json(file)?;
            let mut by_concept: BTreeMap<Concept, Vec<&SweepSummary>> = BTreeMap::new();
            for r in &rows {
                by_concept.entry(r.concept).or_default().push(r);
            }
            for (c, rs) in by_concept {
                let mut series: BTreeMap<(VectorKind, Format), Vec<(f64, f64)>> = BTreeMap::new();
                for r in rs {
                    series.entry((r.method, r.format)).or_default().push((r.layer as f64, r.mean_delta_p));
                }
                let series: Vec<Series> = series
                    .into_iter()
                    .map(|((m, f), points)| Series {
                        label: format!("{m} {f}"),
                        points,
                    })
                    .collect();
                write_line_chart(
                    &w.path(&format!("curves/{c}_{label}.svg"))?,
                    &format!("{c}: mean ΔP by layer"),
                    "layer",
                    "ΔP",
                    &series,
                )?;
            }
        }
        Ok(())
    }
}

/// Relative path of a saved steering vector.
pub fn vector_file(k: usize, method: VectorKind, id: DatasetId) -> String {
    format!("K{k}/{method}/{}_{}.f32", id.concept, id.format)
}
