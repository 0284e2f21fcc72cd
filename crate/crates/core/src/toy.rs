//! Small models for tests and examples.
//!
//! [`random_model`] draws every weight from a seeded generator.
//! [`PlantedModel`] is wired by hand so that one known head carries the task
//! from the demonstrations to the answer. A handful of other heads encode the
//! concept without affecting the output.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::runtime::{
    Activation, HeadLocator, LayerWeights, Model, ModelConfig, ModelWeights, NormKind, NormParams, PositionalKind,
    SpecialTokens, Tokenizer,
};
use crate::tasks::{label_letter, Concept, ConceptPairs, Format, TranslationTable};

pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";

fn special_tokens() -> SpecialTokens {
    SpecialTokens {
        bos: Some(BOS.into()),
        unk: Some(UNK.into()),
    }
}

/// 4 layers, 8 heads of width 8, layernorm, GELU.
pub fn random_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads_per_layer: 8,
        d_model: 64,
        d_head: 8,
        d_mlp: 256,
        vocab_size: random_vocab().len(),
        max_seq_len: 64,
        norm_epsilon: 1e-5,
        norm: NormKind::LayerNorm,
        positional: PositionalKind::Learned,
        activation: Activation::Gelu,
    }
}

fn random_vocab() -> Vec<String> {
    let mut v: Vec<String> = [BOS, UNK, "\n", " ", "Q:", "A:"].iter().map(|s| s.to_string()).collect();
    for c in 'a'..='z' {
        v.push(c.to_string());
        v.push(format!(" {c}"));
    }
    v
}

/// A model with uniformly random weights. `config.vocab_size` is overridden
/// to match the built-in character vocabulary.
pub fn random_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let vocab = random_vocab();
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..config.clone()
    };
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let mut uniform = |shape: (usize, usize), scale: f32| {
        Array2::from_shape_fn(shape, |_| rng.gen_range(-scale..scale))
    };
    let fan = |n: usize| 1.0 / (n as f32).sqrt();
    let tok_embed = uniform((config.vocab_size, d), 1.0);
    let pos_embed = match config.positional {
        PositionalKind::Learned => Some(uniform((config.max_seq_len, d), 0.5)),
        PositionalKind::None => None,
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let wq = uniform((d, d), fan(d));
        let wk = uniform((d, d), fan(d));
        let wv = uniform((d, d), fan(d));
        let wo = uniform((d, d), fan(d));
        let w_in = uniform((d, config.d_mlp), fan(d));
        let b_in = uniform((1, config.d_mlp), 0.1).row(0).to_owned();
        let w_out = uniform((config.d_mlp, d), fan(config.d_mlp));
        let b_out = uniform((1, d), 0.1).row(0).to_owned();
        let ln1 = random_norm(&mut uniform, config.norm, d);
        let ln2 = random_norm(&mut uniform, config.norm, d);
        layers.push(LayerWeights {
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2,
            w_in,
            b_in,
            w_out,
            b_out,
        });
    }
    let ln_f = random_norm(&mut uniform, config.norm, d);
    let unembed = uniform((d, config.vocab_size), 2.0 * fan(d));
    let weights = ModelWeights {
        tok_embed,
        pos_embed,
        layers,
        ln_f,
        unembed,
    };
    let tokenizer = Tokenizer::from_tokens(&vocab, &special_tokens())?;
    Model::new(config, weights, tokenizer, special_tokens())
}

fn random_norm(uniform: &mut impl FnMut((usize, usize), f32) -> Array2<f32>, kind: NormKind, d: usize) -> NormParams {
    let mut p = NormParams::for_kind(kind, d);
    if let Some(w) = p.weight.as_mut() {
        *w = uniform((1, d), 0.1).row(0).mapv(|x| 1.0 + x);
    }
    if let Some(b) = p.bias.as_mut() {
        *b = uniform((1, d), 0.1).row(0).to_owned();
    }
    p
}

/// Random token ids of length `len`, starting with BOS.
pub fn random_prompt(model: &Model, rng: &mut impl Rng, len: usize) -> Vec<u32> {
    let tok = model.tokenizer();
    let bos = tok.bos().unwrap_or(0);
    std::iter::once(bos)
        .chain((1..len).map(|_| rng.gen_range(2..tok.len() as u32)))
        .collect()
}

// ---------------------------------------------------------------------------
// Planted model

const N_LAYERS: usize = 4;
const N_HEADS: usize = 8;
const D_HEAD: usize = 48;
const MAX_SEQ: usize = 160;

/// MLP unit gain. Units sit at `A * (matches - threshold)`.
const GAIN: f32 = 10.0;
/// Format-flag weight in the function head's output.
const FORMAT_WEIGHT: f32 = 2.0;
const WORD_LOGIT: f32 = 8.0;
const LETTER_LOGIT: f32 = 30.0;
const BRACKET_LOGIT: f32 = 3.0;

const STRUCTURAL: [&str; 21] = [
    BOS,
    UNK,
    "Q:",
    " Q:",
    "A:",
    " A:",
    "\n",
    " ",
    " ?",
    "Instruction:",
    "Response:",
    " (",
    ")",
    "(a)",
    "(b)",
    "(c)",
    "(d)",
    "a",
    "b",
    "c",
    "d",
];

/// Residual-stream coordinates of the planted model.
#[derive(Debug, Clone)]
struct Layout {
    groups: usize,
    bias: usize,
    is_bos: usize,
    is_q: usize,
    is_a: usize,
    is_instr: usize,
    is_letter: usize,
    is_label: usize,
    is_l2: usize,
    pos: usize,
    pos_sq: usize,
    lex: usize,
    prev_q: usize,
    prev_a: usize,
    prev_label: usize,
    qtype: usize,
    xlex: usize,
    ylex: usize,
    rel: usize,
    task: usize,
    fmt: usize,
    cvout: usize,
    ans: usize,
    labelout: usize,
    width: usize,
}

impl Layout {
    fn new(groups: usize) -> Self {
        let mut next = 0;
        let mut take = |n: usize| {
            let at = next;
            next += n;
            at
        };
        let c = Concept::ALL.len();
        let code = 2 * groups;
        let mut l = Layout {
            groups,
            bias: take(1),
            is_bos: take(1),
            is_q: take(1),
            is_a: take(1),
            is_instr: take(1),
            is_letter: take(4),
            is_label: take(4),
            is_l2: take(1),
            pos: take(1),
            pos_sq: take(1),
            lex: take(code),
            prev_q: take(1),
            prev_a: take(1),
            prev_label: take(4),
            qtype: take(2),
            xlex: take(code),
            ylex: take(code),
            rel: take(c),
            task: take(c),
            fmt: take(3),
            cvout: take(c),
            ans: take(code),
            labelout: take(4),
            width: 0,
        };
        l.width = next;
        l
    }

    /// The two active coordinates of word `i`'s code, relative to a code block.
    fn code(&self, i: usize) -> [usize; 2] {
        [i / self.groups, self.groups + i % self.groups]
    }
}

fn concept_index(c: Concept) -> usize {
    Concept::ALL.iter().position(|&x| x == c).expect("concept in ALL")
}

fn format_index(f: Format) -> usize {
    match f {
        Format::OpenEndedEn => 0,
        Format::OpenEndedL2 => 1,
        Format::MultipleChoice => 2,
    }
}

/// A hand-wired model and the roles of its heads.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub model: Model,
    /// Reads the demonstrations and writes the task; the only head that matters for open-ended answers.
    pub function_head: HeadLocator,
    /// Encode the concept in a subspace nothing downstream reads.
    pub concept_heads: Vec<HeadLocator>,
    /// Turns the answer word into the option letter in multiple-choice prompts.
    pub match_head: HeadLocator,
    /// Writes whether the prompt is multiple choice, also unread.
    pub question_type_head: HeadLocator,
    pub relations: usize,
}

struct Relation {
    concept: usize,
    x: usize,
    y: usize,
}

/// Column range helper for head `j`.
fn col(head: usize, i: usize) -> usize {
    head * D_HEAD + i
}

impl PlantedModel {
    /// Build a model that solves every concept in every format for the given
    /// word pairs, plus English-to-second-language translation for every
    /// table entry.
    pub fn build(concepts: &[ConceptPairs], table: &TranslationTable) -> Result<Self> {
        // Words and relations.
        let mut words: BTreeMap<String, bool> = BTreeMap::new();
        let mut triples: BTreeSet<(usize, String, String)> = BTreeSet::new();
        for c in concepts {
            for f in [Format::OpenEndedEn, Format::OpenEndedL2] {
                for p in c.in_format(f, Some(table))? {
                    triples.insert((concept_index(c.concept), p.input, p.output));
                }
            }
            for p in &c.pairs {
                words.entry(p.input.clone()).or_insert(false);
                let l2_output = c.concept == Concept::Translation;
                *words.entry(p.output.clone()).or_insert(l2_output) |= l2_output;
            }
        }
        let tr = concept_index(Concept::Translation);
        for (en, l2) in table.iter() {
            words.entry(en.to_string()).or_insert(false);
            triples.insert((tr, en.to_string(), l2.to_string()));
        }
        for (_, l2) in table.iter() {
            words.insert(l2.to_string(), true);
        }
        let word_list: Vec<(&String, bool)> = words.iter().map(|(w, l2)| (w, *l2)).collect();
        let word_id: BTreeMap<&str, usize> = word_list.iter().enumerate().map(|(i, (w, _))| (w.as_str(), i)).collect();

        let mut keys: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut relations = Vec::with_capacity(triples.len());
        for (c, x, y) in &triples {
            let (x, y) = (word_id[x.as_str()], word_id[y.as_str()]);
            if let Some(&other) = keys.get(&(*c, x)) {
                if other != y {
                    return Err(Error::Dataset(format!(
                        "{} maps {:?} to both {:?} and {:?}",
                        Concept::ALL[*c],
                        word_list[x].0,
                        word_list[other].0,
                        word_list[y].0
                    )));
                }
            }
            keys.insert((*c, x), y);
            relations.push(Relation { concept: *c, x, y });
        }

        let groups = (word_list.len() as f64).sqrt().ceil().max(1.0) as usize;
        if 2 * groups > D_HEAD {
            return Err(Error::InvalidConfig(format!(
                "{} words need a code wider than one head ({D_HEAD})",
                word_list.len()
            )));
        }
        let lay = Layout::new(groups);
        let d_model = N_HEADS * D_HEAD;
        debug_assert!(lay.width <= d_model);

        // Vocabulary: structural tokens, then " w" and "w" per word.
        let mut vocab: Vec<String> = Vec::new();
        let seen: BTreeSet<&str> = STRUCTURAL.into_iter().collect();
        vocab.extend(STRUCTURAL.iter().map(|t| t.to_string()));
        let n_structural = vocab.len();
        let mut word_tokens = Vec::with_capacity(word_list.len());
        for (w, _) in &word_list {
            let spaced = format!(" {w}");
            for t in [&spaced, *w] {
                if seen.contains(t.as_str()) {
                    return Err(Error::Dataset(format!("word {w:?} collides with a prompt token")));
                }
            }
            word_tokens.push((vocab.len(), vocab.len() + 1));
            vocab.push(spaced);
            vocab.push((*w).clone());
        }
        debug_assert_eq!(vocab.len(), n_structural + 2 * word_list.len());

        let config = ModelConfig {
            n_layers: N_LAYERS,
            n_heads_per_layer: N_HEADS,
            d_model,
            d_head: D_HEAD,
            d_mlp: relations.len().max(1),
            vocab_size: vocab.len(),
            max_seq_len: MAX_SEQ,
            norm_epsilon: 1e-5,
            norm: NormKind::Identity,
            positional: PositionalKind::Learned,
            activation: Activation::Relu,
        };
        let mut w = ModelWeights::zeros(&config);
        let id = |t: &str| vocab.iter().position(|v| v == t).expect("structural token");

        // Embeddings.
        for r in 0..vocab.len() {
            w.tok_embed[[r, lay.bias]] = 1.0;
        }
        w.tok_embed[[id(BOS), lay.is_bos]] = 1.0;
        w.tok_embed[[id("Q:"), lay.is_q]] = 1.0;
        w.tok_embed[[id(" Q:"), lay.is_q]] = 1.0;
        w.tok_embed[[id("A:"), lay.is_a]] = 1.0;
        w.tok_embed[[id("Instruction:"), lay.is_instr]] = 1.0;
        for k in 0..4 {
            w.tok_embed[[id(&label_letter(k).to_string()), lay.is_letter + k]] = 1.0;
            w.tok_embed[[id(&format!("({})", label_letter(k))), lay.is_label + k]] = 1.0;
        }
        for (i, ((spaced, bare), (_, l2))) in word_tokens.iter().zip(&word_list).enumerate() {
            for &t in [spaced, bare] {
                for c in lay.code(i) {
                    w.tok_embed[[t, lay.lex + c]] = 1.0;
                }
                if *l2 {
                    w.tok_embed[[t, lay.is_l2]] = 1.0;
                }
            }
        }
        let pos = w.pos_embed.as_mut().expect("learned positions");
        for t in 0..MAX_SEQ {
            pos[[t, lay.pos]] = t as f32;
            pos[[t, lay.pos_sq]] = (t * t) as f32;
        }

        let s = (D_HEAD as f32).sqrt();
        let layers = &mut w.layers;

        // L0H0: previous token. score(s) = -b s^2 + 2 b (t - 1) s peaks at s = t - 1.
        {
            let (l, h, b) = (&mut layers[0], 0, 30.0 * s);
            l.wq[[lay.bias, col(h, 0)]] = -b;
            l.wk[[lay.pos_sq, col(h, 0)]] = 1.0;
            l.wq[[lay.pos, col(h, 1)]] = 2.0 * b;
            l.wq[[lay.bias, col(h, 1)]] = -2.0 * b;
            l.wk[[lay.pos, col(h, 1)]] = 1.0;
            let copies = [(lay.is_q, lay.prev_q), (lay.is_a, lay.prev_a)]
                .into_iter()
                .chain((0..4).map(|k| (lay.is_label + k, lay.prev_label + k)));
            for (i, (from, to)) in copies.enumerate() {
                l.wv[[from, col(h, i)]] = 1.0;
                l.wo[[col(h, i), to]] = 1.0;
            }
        }
        // L0H1: question type, from instruction tokens or BOS.
        {
            let (l, h) = (&mut layers[0], 1);
            l.wq[[lay.bias, col(h, 0)]] = 50.0 * s;
            l.wk[[lay.is_instr, col(h, 0)]] = 1.0;
            l.wk[[lay.is_bos, col(h, 0)]] = 0.5;
            l.wv[[lay.is_bos, col(h, 0)]] = 1.0;
            l.wo[[col(h, 0), lay.qtype]] = 1.0;
            l.wv[[lay.is_instr, col(h, 1)]] = 1.0;
            l.wo[[col(h, 1), lay.qtype + 1]] = 1.0;
        }
        // L1H0: copy the most recent word that follows "Q:".
        // L1H1: at an answer letter, copy the option word after the matching label.
        {
            let l = &mut layers[1];
            let copy = |l: &mut LayerWeights, h: usize, to: usize| {
                for i in 0..2 * groups {
                    l.wv[[lay.lex + i, col(h, i)]] = 1.0;
                    l.wo[[col(h, i), to + i]] = 1.0;
                }
            };
            let h = 0;
            l.wq[[lay.bias, col(h, 0)]] = 800.0 * s;
            l.wk[[lay.prev_q, col(h, 0)]] = 1.0;
            l.wq[[lay.bias, col(h, 1)]] = 400.0 * s;
            l.wk[[lay.is_bos, col(h, 1)]] = 1.0;
            l.wq[[lay.bias, col(h, 2)]] = s;
            l.wk[[lay.pos, col(h, 2)]] = 1.0;
            copy(l, h, lay.xlex);

            let h = 1;
            for k in 0..4 {
                l.wq[[lay.is_letter + k, col(h, k)]] = 800.0 * s;
                l.wk[[lay.prev_label + k, col(h, k)]] = 1.0;
            }
            l.wq[[lay.bias, col(h, 4)]] = 400.0 * s;
            l.wk[[lay.is_bos, col(h, 4)]] = 1.0;
            l.wq[[lay.bias, col(h, 5)]] = s;
            l.wk[[lay.pos, col(h, 5)]] = 1.0;
            copy(l, h, lay.ylex);

            // Relation units: fire where (x, y) of a known relation meet an answer slot.
            for (u, r) in relations.iter().enumerate() {
                for c in lay.code(r.x) {
                    l.w_in[[lay.xlex + c, u]] = GAIN;
                }
                for c in lay.code(r.y) {
                    l.w_in[[lay.lex + c, u]] = GAIN;
                    l.w_in[[lay.ylex + c, u]] = GAIN;
                }
                l.w_in[[lay.prev_a, u]] = GAIN;
                for k in 0..4 {
                    l.w_in[[lay.is_letter + k, u]] = GAIN;
                }
                l.b_in[u] = -4.5 * GAIN;
                l.w_out[[u, lay.rel + r.concept]] = 2.0 / GAIN;
            }
        }
        let n_concepts = Concept::ALL.len();
        // Attention onto relation slots, shared by the function head and the concept heads.
        let relation_attention = |l: &mut LayerWeights, h: usize, recency: f32| {
            l.wq[[lay.bias, col(h, 0)]] = 400.0 * s;
            for c in 0..n_concepts {
                l.wk[[lay.rel + c, col(h, 0)]] = 1.0;
            }
            l.wq[[lay.bias, col(h, 1)]] = recency * s;
            l.wk[[lay.pos, col(h, 1)]] = 1.0;
            l.wq[[lay.bias, col(h, 2)]] = 100.0 * s;
            l.wk[[lay.is_bos, col(h, 2)]] = 1.0;
        };
        let concept_value = |l: &mut LayerWeights, h: usize, to: usize, scale: f32| {
            for c in 0..n_concepts {
                l.wv[[lay.rel + c, col(h, c)]] = 1.0;
                l.wo[[col(h, c), to + c]] = scale;
            }
        };
        let function_head = HeadLocator::new(2, 3);
        let concept_heads: Vec<HeadLocator> = [2, 3]
            .into_iter()
            .flat_map(|l| (5..8).map(move |h| HeadLocator::new(l, h)))
            .collect();
        {
            let l = &mut layers[2];
            let h = function_head.head;
            relation_attention(l, h, 0.3);
            concept_value(l, h, lay.task, 1.0);
            let fmt = [
                (vec![lay.prev_a], format_index(Format::OpenEndedEn)),
                ((0..4).map(|k| lay.is_letter + k).collect(), format_index(Format::MultipleChoice)),
                (vec![lay.is_l2], format_index(Format::OpenEndedL2)),
            ];
            for (i, (from, f)) in fmt.into_iter().enumerate() {
                let c = col(h, n_concepts + i);
                for r in from {
                    l.wv[[r, c]] = 1.0;
                }
                l.wo[[c, lay.fmt + f]] = FORMAT_WEIGHT;
            }

            // Answer units: (concept, query word) -> answer word.
            for (u, (&(c, x), &y)) in keys.iter().enumerate() {
                for k in lay.code(x) {
                    l.w_in[[lay.xlex + k, u]] = GAIN;
                }
                l.w_in[[lay.task + c, u]] = GAIN;
                l.b_in[u] = -2.5 * GAIN;
                for k in lay.code(y) {
                    l.w_out[[u, lay.ans + k]] = 2.0 / GAIN;
                }
            }
        }
        for (i, head) in concept_heads.iter().enumerate() {
            let l = &mut layers[head.layer];
            let recency = [0.1, 0.3, 0.6][i % 3];
            relation_attention(l, head.head, recency);
            concept_value(l, head.head, lay.cvout, 1.0 + 0.5 * (i % 3) as f32);
        }
        // L3H0: find the option whose word matches the answer and copy its label.
        let match_head = HeadLocator::new(3, 0);
        {
            let (l, h) = (&mut layers[3], match_head.head);
            for i in 0..2 * groups {
                l.wq[[lay.ans + i, col(h, i)]] = 300.0 * s;
                l.wk[[lay.lex + i, col(h, i)]] = 1.0;
            }
            let b = 2 * groups;
            l.wq[[lay.bias, col(h, b)]] = 200.0 * s;
            l.wk[[lay.is_bos, col(h, b)]] = 1.0;
            l.wq[[lay.bias, col(h, b + 1)]] = s;
            l.wk[[lay.pos, col(h, b + 1)]] = 1.0;
            for k in 0..4 {
                l.wv[[lay.prev_label + k, col(h, k)]] = 1.0;
                l.wo[[col(h, k), lay.labelout + k]] = 1.0;
            }
        }

        // Unembedding.
        for (i, &(_, bare)) in word_tokens.iter().enumerate() {
            for c in lay.code(i) {
                w.unembed[[lay.ans + c, bare]] = WORD_LOGIT;
            }
        }
        for k in 0..4 {
            w.unembed[[lay.labelout + k, id(&label_letter(k).to_string())]] = LETTER_LOGIT;
        }
        w.unembed[[lay.fmt + format_index(Format::MultipleChoice), id(" (")]] = BRACKET_LOGIT;

        let tokenizer = Tokenizer::from_tokens(&vocab, &special_tokens())?;
        let model = Model::new(config, w, tokenizer, special_tokens())?;
        Ok(Self {
            model,
            function_head,
            concept_heads,
            match_head,
            question_type_head: HeadLocator::new(0, 1),
            relations: relations.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::HookSet;
    use crate::tasks::{bundled, render_prompt};

    #[test]
    fn random_model_is_deterministic() {
        let a = random_model(&random_config(), 7).unwrap();
        let b = random_model(&random_config(), 7).unwrap();
        assert_eq!(a.weights(), b.weights());
        let c = random_model(&random_config(), 8).unwrap();
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn layout_fits() {
        let l = Layout::new(24);
        assert!(l.width <= N_HEADS * D_HEAD);
    }

    #[test]
    fn planted_model_answers_every_format() {
        let concepts = bundled::concepts().unwrap();
        let table = bundled::translation_table().unwrap();
        let planted = PlantedModel::build(&concepts, &table).unwrap();
        let m = &planted.model;
        for c in &concepts {
            for f in Format::ALL {
                let params = crate::tasks::DatasetParams { n_prompts: 4, shots: f.default_shots(), seed: 1 };
                for spec in crate::tasks::build_dataset(c, f, &params, Some(&table)).unwrap() {
                    let text = render_prompt(&spec);
                    let tokens = m.tokenizer().encode_prompt(&text).unwrap();
                    let gold = m.tokenizer().first_token(&spec.gold).unwrap();
                    let out = m.forward(&tokens, &HookSet::new()).unwrap();
                    assert!(
                        out.probs[gold as usize] > 0.9,
                        "{} {}: p(gold)={}",
                        spec.prompt_id,
                        spec.gold,
                        out.probs[gold as usize]
                    );
                }
            }
        }
    }
}
