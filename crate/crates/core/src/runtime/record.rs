use serde::{Deserialize, Serialize};

use super::config::HeadLocator;
use crate::error::{Error, Result};

/// Final-token residual stream of one forward pass.
///
/// `layers[0]` is the embedding output and `layers[l + 1]` the residual after
/// block `l` (including any injection at `l`). `mlp[l]` is block `l`'s MLP
/// contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualState {
    pub layers: Vec<Vec<f32>>,
    pub mlp: Vec<Vec<f32>>,
}

/// Last-token per-head outputs for one prompt, in residual space.
///
/// Each vector is the head's post-output-projection contribution to the
/// residual stream. Records are immutable once captured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    prompt_id: String,
    d_model: usize,
    heads: Vec<HeadLocator>,
    data: Vec<f32>,
    residual: Option<ResidualState>,
}

impl ActivationRecord {
    /// `heads` must be sorted and unique; `data` holds one `d_model` vector per head in that order.
    pub fn new(
        prompt_id: impl Into<String>,
        d_model: usize,
        heads: Vec<HeadLocator>,
        data: Vec<f32>,
        residual: Option<ResidualState>,
    ) -> Result<Self> {
        if data.len() != heads.len() * d_model {
            return Err(Error::DimensionMismatch {
                expected: heads.len() * d_model,
                found: data.len(),
            });
        }
        if !heads.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Analysis("record heads must be sorted and unique".into()));
        }
        Ok(Self {
            prompt_id: prompt_id.into(),
            d_model,
            heads,
            data,
            residual,
        })
    }

    /// Build from (head, vector) pairs in any order.
    pub fn from_vectors(
        prompt_id: impl Into<String>,
        d_model: usize,
        mut vectors: Vec<(HeadLocator, Vec<f32>)>,
    ) -> Result<Self> {
        vectors.sort_by_key(|(h, _)| *h);
        let mut heads = Vec::with_capacity(vectors.len());
        let mut data = Vec::with_capacity(vectors.len() * d_model);
        for (h, v) in vectors {
            if v.len() != d_model {
                return Err(Error::DimensionMismatch {
                    expected: d_model,
                    found: v.len(),
                });
            }
            heads.push(h);
            data.extend(v);
        }
        Self::new(prompt_id, d_model, heads, data, None)
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn heads(&self) -> &[HeadLocator] {
        &self.heads
    }

    pub fn residual(&self) -> Option<&ResidualState> {
        self.residual.as_ref()
    }

    pub fn head(&self, head: HeadLocator) -> Option<&[f32]> {
        let i = self.heads.binary_search(&head).ok()?;
        Some(&self.data[i * self.d_model..(i + 1) * self.d_model])
    }

    pub fn require(&self, head: HeadLocator) -> Result<&[f32]> {
        self.head(head).ok_or_else(|| {
            Error::Analysis(format!("record {} has no capture for head {head}", self.prompt_id))
        })
    }

    /// Copy with a different prompt id (captures are shared between a spec and its render).
    pub fn with_prompt_id(mut self, prompt_id: impl Into<String>) -> Self {
        self.prompt_id = prompt_id.into();
        self
    }

    pub(crate) fn raw(&self) -> &[f32] {
        &self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_by_head() {
        let r = ActivationRecord::from_vectors(
            "p0",
            2,
            vec![
                (HeadLocator::new(1, 0), vec![3.0, 4.0]),
                (HeadLocator::new(0, 1), vec![1.0, 2.0]),
            ],
        )
        .unwrap();
        assert_eq!(r.head(HeadLocator::new(0, 1)), Some(&[1.0, 2.0][..]));
        assert_eq!(r.head(HeadLocator::new(1, 0)), Some(&[3.0, 4.0][..]));
        assert!(r.head(HeadLocator::new(2, 0)).is_none());
    }

    #[test]
    fn rejects_wrong_width() {
        let err = ActivationRecord::from_vectors("p", 3, vec![(HeadLocator::new(0, 0), vec![1.0])]);
        assert!(matches!(err, Err(Error::DimensionMismatch { expected: 3, found: 1 })));
    }
}
