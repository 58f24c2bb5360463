use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::codec::{PointTokenVocab, TokenId};
use crate::error::{Error, Result};

/// Caption words layered on top of the fixed point-token id range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    words: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_words(r.words)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr { words: v.words }
    }
}

/// Lowercases and splits on whitespace; ASCII punctuation characters become
/// tokens of their own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() && !is_special_marker(chunk) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn is_special_marker(chunk: &str) -> bool {
    PointTokenVocab::SPECIAL_STRS.contains(&chunk)
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), PointTokenVocab::FIRST_WORD_ID + i as TokenId))
            .collect();
        Self { words, index }
    }

    /// Keeps the `max_words` most frequent words, ties broken
    /// lexicographically. Brackets and coordinate literals already have
    /// fixed ids and are not counted.
    pub fn build<'a, I>(corpus: I, max_words: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_words == 0 {
            return Err(Error::Config("max_words must be at least 1".into()));
        }
        let points = PointTokenVocab::standard();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut seen_any = false;
        for text in corpus {
            for w in split_words(text) {
                seen_any = true;
                if points.id_of(&w).is_none() {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        if !seen_any {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_words(
            ranked.into_iter().take(max_words).map(|(w, _)| w).collect(),
        ))
    }

    /// Total number of ids, specials and point tokens included.
    pub fn len(&self) -> usize {
        PointTokenVocab::FIRST_WORD_ID as usize + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, token: &str) -> TokenId {
        PointTokenVocab::standard()
            .id_of(token)
            .or_else(|| self.index.get(token).copied())
            .unwrap_or(PointTokenVocab::UNK)
    }

    pub fn token_str(&self, id: TokenId) -> Option<String> {
        let points = PointTokenVocab::standard();
        if points.contains(id) {
            return points.token_str(id);
        }
        self.words.get((id - PointTokenVocab::FIRST_WORD_ID) as usize).cloned()
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        split_words(text).iter().map(|w| self.id_of(w)).collect()
    }

    /// Joins tokens with single spaces, skipping pad/bos/eos.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PointTokenVocab::PAD | PointTokenVocab::BOS | PointTokenVocab::EOS))
            .map(|&id| {
                self.token_str(id)
                    .unwrap_or_else(|| PointTokenVocab::SPECIAL_STRS[3].to_string())
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id as usize) < self.len()
    }
}
