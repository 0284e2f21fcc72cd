//! Per-call hook descriptions. Every hook acts on the final token position.

use std::collections::BTreeSet;

use super::config::{HeadLocator, ModelConfig};
use crate::error::{Error, Result};

/// Which per-head outputs a forward pass should record.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum HeadCapture {
    #[default]
    None,
    All,
    Only(Vec<HeadLocator>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub head: HeadLocator,
    pub value: Vec<f32>,
}

/// `h_layer <- h_layer + alpha * vector`, applied after block `layer` completes.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub layer: usize,
    pub vector: Vec<f32>,
    pub alpha: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookSet {
    pub heads: HeadCapture,
    pub residual: bool,
    pub patches: Vec<Patch>,
    pub injections: Vec<Injection>,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn capture_all_heads(mut self) -> Self {
        self.heads = HeadCapture::All;
        self
    }

    pub fn capture_heads(mut self, heads: Vec<HeadLocator>) -> Self {
        self.heads = HeadCapture::Only(heads);
        self
    }

    pub fn capture_residual(mut self) -> Self {
        self.residual = true;
        self
    }

    pub fn patch(mut self, head: HeadLocator, value: Vec<f32>) -> Self {
        self.patches.push(Patch { head, value });
        self
    }

    pub fn inject(mut self, layer: usize, vector: Vec<f32>, alpha: f32) -> Self {
        self.injections.push(Injection { layer, vector, alpha });
        self
    }

    pub(crate) fn validate(&self, config: &ModelConfig) -> Result<()> {
        if let HeadCapture::Only(heads) = &self.heads {
            for &h in heads {
                config.check_head(h)?;
            }
        }
        let mut seen = BTreeSet::new();
        for p in &self.patches {
            config.check_head(p.head)?;
            if !seen.insert(p.head) {
                return Err(Error::DuplicatePatch(p.head));
            }
            check_vector(&p.value, config.d_model, "patch vector")?;
        }
        for inj in &self.injections {
            config.check_layer(inj.layer)?;
            check_vector(&inj.vector, config.d_model, "injection vector")?;
            if !inj.alpha.is_finite() {
                return Err(Error::NonFinite("injection alpha".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn captures(&self, head: HeadLocator) -> bool {
        match &self.heads {
            HeadCapture::None => false,
            HeadCapture::All => true,
            HeadCapture::Only(list) => list.contains(&head),
        }
    }
}

pub(crate) fn check_vector(v: &[f32], d_model: usize, what: &str) -> Result<()> {
    if v.len() != d_model {
        return Err(Error::DimensionMismatch {
            expected: d_model,
            found: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}
