//! Pre-norm decoder-only transformer with final-position hooks.
//!
//! A forward pass is split in two: [`Model::prepare`] runs every position but
//! the last through the stack and keeps the per-layer keys and values, and
//! [`Model::run`] pushes the final token through with hooks applied. Hooks
//! only ever touch the final position, and causal attention means earlier
//! positions never see it, so one prepared prompt serves any number of hooked
//! passes. [`Model::forward`] is exactly `prepare` followed by `run`.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::config::{HeadLocator, ModelConfig, NormKind};
use super::hooks::HookSet;
use super::record::{ActivationRecord, ResidualState};
use super::tokenizer::Tokenizer;
use super::weights::{self, LayerWeights, ModelWeights, NormParams, SpecialTokens};
use crate::error::{Error, Result};

/// A loaded model. Immutable after construction and shareable across threads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
    tokenizer: Tokenizer,
    special_tokens: SpecialTokens,
}

/// Keys and values of every position except the last, per layer.
#[derive(Debug, Clone)]
pub struct PreparedPrompt {
    tokens: Vec<u32>,
    keys: Vec<Array2<f32>>,
    values: Vec<Array2<f32>>,
}

impl PreparedPrompt {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f32>,
    /// Softmax of `logits`.
    pub probs: Vec<f32>,
    /// Per-head outputs (after any patch) when head capture was requested.
    pub heads: Option<Vec<(HeadLocator, Vec<f32>)>>,
    pub residual: Option<ResidualState>,
}

impl ForwardOutput {
    /// Captured heads as an [`ActivationRecord`].
    pub fn into_record(self, prompt_id: impl Into<String>, d_model: usize) -> Result<ActivationRecord> {
        let heads = self.heads.unwrap_or_default();
        let mut locs = Vec::with_capacity(heads.len());
        let mut data = Vec::with_capacity(heads.len() * d_model);
        for (h, v) in heads {
            locs.push(h);
            data.extend(v);
        }
        ActivationRecord::new(prompt_id, d_model, locs, data, self.residual)
    }
}

impl Model {
    pub fn new(
        config: ModelConfig,
        weights: ModelWeights,
        tokenizer: Tokenizer,
        special_tokens: SpecialTokens,
    ) -> Result<Self> {
        config.validate()?;
        for (name, shape) in ModelWeights::tensor_layout(&config) {
            let found = weights_shape(&weights, &name);
            if found.as_deref() != Some(shape.as_slice()) {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: found.unwrap_or_default(),
                });
            }
        }
        if tokenizer.len() != config.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "tokenizer has {} entries but vocab_size is {}",
                tokenizer.len(),
                config.vocab_size
            )));
        }
        Ok(Self {
            config,
            weights,
            tokenizer,
            special_tokens,
        })
    }

    /// Load a model directory (`manifest.json`, `weights.bin`, `vocab.json`).
    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, weights) = weights::load_weights(dir)?;
        let tokenizer = Tokenizer::load(&dir.join(weights::VOCAB_FILE), &manifest.special_tokens)?;
        Self::new(manifest.config, weights, tokenizer, manifest.special_tokens)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        weights::save_weights(dir, &self.config, &self.special_tokens, &self.weights)?;
        self.tokenizer.save(&dir.join(weights::VOCAB_FILE))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, token: u32, position: usize) -> Vec<f32> {
        let mut x = self.weights.tok_embed.row(token as usize).to_vec();
        if let Some(pos) = &self.weights.pos_embed {
            for (a, b) in x.iter_mut().zip(pos.row(position)) {
                *a += b;
            }
        }
        x
    }

    /// Run every position but the last and keep per-layer keys and values.
    pub fn prepare(&self, tokens: &[u32]) -> Result<PreparedPrompt> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let p = tokens.len() - 1;
        let mut x = Array2::<f32>::zeros((p, c.d_model));
        for (t, &tok) in tokens[..p].iter().enumerate() {
            x.row_mut(t).assign(&Array1::from(self.embed(tok, t)));
        }
        let scale = 1.0 / (c.d_head as f32).sqrt();
        let mut keys = Vec::with_capacity(c.n_layers);
        let mut values = Vec::with_capacity(c.n_layers);
        for layer in &self.weights.layers {
            let xn = self.norm_rows(&x, &layer.ln1);
            let q = xn.dot(&layer.wq);
            let k = xn.dot(&layer.wk);
            let v = xn.dot(&layer.wv);
            let mut z = Array2::<f32>::zeros((p, c.d_model));
            let mut weights = vec![0.0f32; p];
            for j in 0..c.n_heads_per_layer {
                let cols = j * c.d_head..(j + 1) * c.d_head;
                for t in 0..p {
                    let qt = q.slice(s![t, cols.clone()]);
                    let w = &mut weights[..=t];
                    for (s_, w_s) in w.iter_mut().enumerate() {
                        *w_s = dot(qt, k.slice(s![s_, cols.clone()])) * scale;
                    }
                    softmax_in_place(w);
                    let mut zt = z.slice_mut(s![t, cols.clone()]);
                    for (s_, &w_s) in w.iter().enumerate() {
                        zt.scaled_add(w_s, &v.slice(s![s_, cols.clone()]));
                    }
                }
            }
            x += &z.dot(&layer.wo);
            let m = self.mlp_rows(&x, layer);
            x += &m;
            keys.push(k);
            values.push(v);
        }
        Ok(PreparedPrompt {
            tokens: tokens.to_vec(),
            keys,
            values,
        })
    }

    /// Push the final token through the stack with `hooks` applied.
    pub fn run(&self, prepared: &PreparedPrompt, hooks: &HookSet) -> Result<ForwardOutput> {
        hooks.validate(&self.config)?;
        let c = &self.config;
        let n = prepared.tokens.len();
        let p = n - 1;
        let scale = 1.0 / (c.d_head as f32).sqrt();

        let mut x = self.embed(prepared.tokens[p], p);
        let mut captured = Vec::new();
        let mut residual = hooks.residual.then(|| ResidualState {
            layers: vec![x.clone()],
            mlp: Vec::new(),
        });

        let mut weights = vec![0.0f32; n];
        for (l, layer) in self.weights.layers.iter().enumerate() {
            let xn = self.norm_vec(&x, &layer.ln1);
            let q = vec_mat(&xn, layer.wq.view());
            let k = vec_mat(&xn, layer.wk.view());
            let v = vec_mat(&xn, layer.wv.view());
            let pk = &prepared.keys[l];
            let pv = &prepared.values[l];
            let mut attn_sum = vec![0.0f32; c.d_model];
            for j in 0..c.n_heads_per_layer {
                let head = HeadLocator::new(l, j);
                let cols = j * c.d_head..(j + 1) * c.d_head;
                let out = match hooks.patches.iter().find(|pt| pt.head == head) {
                    Some(patch) => patch.value.clone(),
                    None => {
                        let qj = ArrayView1::from(&q[cols.clone()]);
                        for (s_, w_s) in weights[..p].iter_mut().enumerate() {
                            *w_s = dot(qj, pk.slice(s![s_, cols.clone()])) * scale;
                        }
                        weights[p] = dot(qj, ArrayView1::from(&k[cols.clone()])) * scale;
                        softmax_in_place(&mut weights);
                        let mut z = Array1::<f32>::zeros(c.d_head);
                        for (s_, &w_s) in weights[..p].iter().enumerate() {
                            z.scaled_add(w_s, &pv.slice(s![s_, cols.clone()]));
                        }
                        z.scaled_add(weights[p], &ArrayView1::from(&v[cols.clone()]));
                        vec_mat(z.as_slice().expect("contiguous"), layer.wo.slice(s![cols.clone(), ..]))
                    }
                };
                for (a, b) in attn_sum.iter_mut().zip(&out) {
                    *a += b;
                }
                if hooks.captures(head) {
                    captured.push((head, out));
                }
            }
            for (a, b) in x.iter_mut().zip(&attn_sum) {
                *a += b;
            }
            let m = self.mlp_vec(&x, layer);
            for (a, b) in x.iter_mut().zip(&m) {
                *a += b;
            }
            for inj in hooks.injections.iter().filter(|i| i.layer == l) {
                for (a, b) in x.iter_mut().zip(&inj.vector) {
                    *a += inj.alpha * b;
                }
            }
            if let Some(r) = residual.as_mut() {
                r.mlp.push(m);
                r.layers.push(x.clone());
            }
        }

        let xn = self.norm_vec(&x, &self.weights.ln_f);
        let logits = vec_mat(&xn, self.weights.unembed.view());
        let probs = softmax(&logits);
        Ok(ForwardOutput {
            logits,
            probs,
            heads: (!matches!(hooks.heads, super::hooks::HeadCapture::None)).then_some(captured),
            residual,
        })
    }

    /// Full forward pass: next-token distribution plus any requested captures.
    pub fn forward(&self, tokens: &[u32], hooks: &HookSet) -> Result<ForwardOutput> {
        let prepared = self.prepare(tokens)?;
        self.run(&prepared, hooks)
    }

    /// Distribution with each listed head's final-token output replaced.
    pub fn forward_with_patch(&self, tokens: &[u32], patches: &[(HeadLocator, Vec<f32>)]) -> Result<Vec<f32>> {
        let hooks = patches
            .iter()
            .fold(HookSet::new(), |h, (head, v)| h.patch(*head, v.clone()));
        Ok(self.forward(tokens, &hooks)?.probs)
    }

    /// Distribution after `h_layer += alpha * v` at the final token.
    pub fn forward_with_injection(&self, tokens: &[u32], layer: usize, v: &[f32], alpha: f32) -> Result<Vec<f32>> {
        let hooks = HookSet::new().inject(layer, v.to_vec(), alpha);
        Ok(self.forward(tokens, &hooks)?.probs)
    }

    /// Capture every head (and optionally the residual stream) for one prompt.
    pub fn capture(&self, prompt_id: &str, tokens: &[u32], residual: bool) -> Result<ActivationRecord> {
        let mut hooks = HookSet::new().capture_all_heads();
        hooks.residual = residual;
        self.forward(tokens, &hooks)?.into_record(prompt_id, self.config.d_model)
    }

    fn norm_vec(&self, x: &[f32], params: &NormParams) -> Vec<f32> {
        let eps = self.config.norm_epsilon;
        let n = x.len() as f32;
        let mut out: Vec<f32> = match self.config.norm {
            NormKind::Identity => return x.to_vec(),
            NormKind::LayerNorm => {
                let mean = x.iter().sum::<f32>() / n;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                x.iter().map(|v| (v - mean) * inv).collect()
            }
            NormKind::RmsNorm => {
                let ms = x.iter().map(|v| v * v).sum::<f32>() / n;
                let inv = 1.0 / (ms + eps).sqrt();
                x.iter().map(|v| v * inv).collect()
            }
        };
        if let Some(w) = &params.weight {
            for (o, w) in out.iter_mut().zip(w) {
                *o *= w;
            }
        }
        if let Some(b) = &params.bias {
            for (o, b) in out.iter_mut().zip(b) {
                *o += b;
            }
        }
        out
    }

    fn norm_rows(&self, x: &Array2<f32>, params: &NormParams) -> Array2<f32> {
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let normed = self.norm_vec(row.as_slice().expect("row-major"), params);
            row.assign(&Array1::from(normed));
        }
        out
    }

    fn mlp_vec(&self, x: &[f32], layer: &LayerWeights) -> Vec<f32> {
        let xn = self.norm_vec(x, &layer.ln2);
        let mut hidden = vec_mat(&xn, layer.w_in.view());
        for (h, b) in hidden.iter_mut().zip(&layer.b_in) {
            *h = self.config.activation.apply(*h + b);
        }
        let mut out = vec_mat(&hidden, layer.w_out.view());
        for (o, b) in out.iter_mut().zip(&layer.b_out) {
            *o += b;
        }
        out
    }

    fn mlp_rows(&self, x: &Array2<f32>, layer: &LayerWeights) -> Array2<f32> {
        let xn = self.norm_rows(x, &layer.ln2);
        let mut hidden = xn.dot(&layer.w_in) + &layer.b_in;
        hidden.mapv_inplace(|v| self.config.activation.apply(v));
        hidden.dot(&layer.w_out) + &layer.b_out
    }
}

fn weights_shape(w: &ModelWeights, name: &str) -> Option<Vec<usize>> {
    let parts: Vec<&str> = name.split('.').collect();
    let norm = |p: &NormParams, field: &str| match field {
        "weight" => p.weight.as_ref().map(|a| vec![a.len()]),
        _ => p.bias.as_ref().map(|a| vec![a.len()]),
    };
    match parts.as_slice() {
        ["embed", "tok"] => Some(w.tok_embed.shape().to_vec()),
        ["embed", "pos"] => w.pos_embed.as_ref().map(|a| a.shape().to_vec()),
        ["unembed"] => Some(w.unembed.shape().to_vec()),
        ["ln_f", f] => norm(&w.ln_f, f),
        ["blocks", l, rest @ ..] => {
            let layer = w.layers.get(l.parse::<usize>().ok()?)?;
            match rest {
                ["ln1", f] => norm(&layer.ln1, f),
                ["ln2", f] => norm(&layer.ln2, f),
                ["attn", "wq"] => Some(layer.wq.shape().to_vec()),
                ["attn", "wk"] => Some(layer.wk.shape().to_vec()),
                ["attn", "wv"] => Some(layer.wv.shape().to_vec()),
                ["attn", "wo"] => Some(layer.wo.shape().to_vec()),
                ["mlp", "w_in"] => Some(layer.w_in.shape().to_vec()),
                ["mlp", "b_in"] => Some(vec![layer.b_in.len()]),
                ["mlp", "w_out"] => Some(layer.w_out.shape().to_vec()),
                ["mlp", "b_out"] => Some(vec![layer.b_out.len()]),
                _ => None,
            }
        }
        _ => None,
    }
}

fn dot(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f32 {
    a.dot(&b)
}

/// `x . w` accumulated row by row, skipping zero entries of `x`.
fn vec_mat(x: &[f32], w: ArrayView2<f32>) -> Vec<f32> {
    let mut out = vec![0.0f32; w.ncols()];
    for (&xi, row) in x.iter().zip(w.rows()) {
        if xi == 0.0 {
            continue;
        }
        match row.as_slice() {
            Some(r) => out.iter_mut().zip(r).for_each(|(o, &v)| *o += xi * v),
            None => out.iter_mut().zip(row.iter()).for_each(|(o, &v)| *o += xi * v),
        }
    }
    out
}

fn softmax_in_place(w: &mut [f32]) {
    let max = w.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in w.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
}

/// Softmax with f64 accumulation.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}
