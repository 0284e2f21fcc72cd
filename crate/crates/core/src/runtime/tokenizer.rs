//! Greedy longest-match tokenizer over a `vocab.json` string → id table.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::weights::SpecialTokens;

#[derive(Debug, Clone)]
pub struct Tokenizer {
    to_id: HashMap<String, u32>,
    to_str: Vec<String>,
    max_token_bytes: usize,
    bos: Option<u32>,
    unk: Option<u32>,
}

impl Tokenizer {
    /// Build from a token → id map. Ids must be exactly `0..len`.
    pub fn new(vocab: BTreeMap<String, u32>, special: &SpecialTokens) -> Result<Self> {
        let mut to_str = vec![None; vocab.len()];
        for (tok, &id) in &vocab {
            let slot = to_str
                .get_mut(id as usize)
                .ok_or_else(|| Error::InvalidConfig(format!("token id {id} for {tok:?} is not dense")))?;
            if slot.is_some() {
                return Err(Error::InvalidConfig(format!("duplicate token id {id}")));
            }
            *slot = Some(tok.clone());
        }
        let to_str: Vec<String> = to_str.into_iter().map(|s| s.expect("dense ids")).collect();
        let lookup = |name: &Option<String>| -> Result<Option<u32>> {
            name.as_ref()
                .map(|s| vocab.get(s).copied().ok_or_else(|| Error::UnknownToken(s.clone())))
                .transpose()
        };
        Ok(Self {
            max_token_bytes: to_str.iter().map(String::len).max().unwrap_or(0),
            bos: lookup(&special.bos)?,
            unk: lookup(&special.unk)?,
            to_id: vocab.into_iter().collect(),
            to_str,
        })
    }

    /// Build from tokens listed in id order.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], special: &SpecialTokens) -> Result<Self> {
        let vocab = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_ref().to_string(), i as u32))
            .collect::<BTreeMap<_, _>>();
        if vocab.len() != tokens.len() {
            return Err(Error::InvalidConfig("duplicate token strings".into()));
        }
        Self::new(vocab, special)
    }

    pub fn load(path: &Path, special: &SpecialTokens) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: BTreeMap<String, u32> =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        Self::new(vocab, special)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<&str, u32> = self.to_str.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();
        let text = serde_json::to_string_pretty(&map).map_err(|e| Error::json("vocab", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.to_str.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_str.is_empty()
    }

    pub fn bos(&self) -> Option<u32> {
        self.bos
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.to_str.get(id as usize).map(String::as_str)
    }

    /// Greedy longest-match encoding without special tokens. Unmatched
    /// characters map to the unknown token when one is declared.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let mut end = rest.len().min(self.max_token_bytes);
            let mut matched = None;
            while end > 0 {
                if rest.is_char_boundary(end) {
                    if let Some(&id) = self.to_id.get(&rest[..end]) {
                        matched = Some((id, end));
                        break;
                    }
                }
                end -= 1;
            }
            match (matched, self.unk) {
                (Some((id, len)), _) => {
                    out.push(id);
                    pos += len;
                }
                (None, Some(unk)) => {
                    out.push(unk);
                    pos += rest.chars().next().map_or(1, char::len_utf8);
                }
                (None, None) => {
                    return Err(Error::Untokenizable {
                        text: text.to_string(),
                        offset: pos,
                    })
                }
            }
        }
        Ok(out)
    }

    /// Encoding with the BOS token prepended when the model declares one.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids: Vec<u32> = self.bos.into_iter().collect();
        ids.extend(self.encode(text)?);
        Ok(ids)
    }

    /// First token of `text`, the convention used for gold answers. A text
    /// whose first character has no vocabulary entry is an error even when an
    /// unknown token is declared.
    pub fn first_token(&self, text: &str) -> Result<u32> {
        match self.encode(text)?.first() {
            Some(&id) if Some(id) != self.unk || self.token(id).is_some_and(|t| text.starts_with(t)) => Ok(id),
            _ => Err(Error::UnknownToken(text.to_string())),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().filter_map(|&id| self.token(id)).collect()
    }
}
