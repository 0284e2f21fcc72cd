use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization applied before attention, before the MLP and before the unembedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
    /// No normalization. Used by analytically constructed fixtures, whose
    /// weights are written against raw residual coordinates.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalKind {
    /// Learned absolute position embeddings added to the token embeddings.
    Learned,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub(crate) fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                // tanh approximation
                const C: f32 = 0.797_884_6;
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads_per_layer: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_epsilon: f32,
    pub norm: NormKind,
    pub positional: PositionalKind,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads_per_layer", self.n_heads_per_layer),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.n_heads_per_layer * self.d_head != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "n_heads_per_layer ({}) x d_head ({}) != d_model ({})",
                self.n_heads_per_layer, self.d_head, self.d_model
            )));
        }
        if !(self.norm_epsilon > 0.0 && self.norm_epsilon.is_finite()) {
            return Err(Error::InvalidConfig(
                "norm_epsilon must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads_per_layer
    }

    /// All heads in (layer, head) order.
    pub fn heads(&self) -> impl Iterator<Item = HeadLocator> + '_ {
        (0..self.n_layers)
            .flat_map(move |layer| (0..self.n_heads_per_layer).map(move |head| HeadLocator::new(layer, head)))
    }

    pub fn check_head(&self, head: HeadLocator) -> Result<()> {
        if head.layer >= self.n_layers || head.head >= self.n_heads_per_layer {
            return Err(Error::HeadOutOfBounds {
                head,
                n_layers: self.n_layers,
                n_heads: self.n_heads_per_layer,
            });
        }
        Ok(())
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.n_layers,
            });
        }
        Ok(())
    }

    /// Flat index of a head, `layer * n_heads_per_layer + head`.
    pub fn head_index(&self, head: HeadLocator) -> usize {
        head.layer * self.n_heads_per_layer + head.head
    }
}

/// Address of one attention head. Ordered lexicographically by (layer, head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadLocator {
    pub layer: usize,
    pub head: usize,
}

impl HeadLocator {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadLocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}
