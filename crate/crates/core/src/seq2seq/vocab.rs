use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Reserved entries, in index order. Separators are single tokens so that
/// flattened schemas and demonstration contexts tokenize unambiguously.
pub const RESERVED: [&str; 9] = ["<pad>", "<bos>", "<eos>", "<unk>", ":", ",", ";", "|", "||"];

const PUNCT: &[char] = &['(', ')', ',', '\'', '=', '.', ':', ';', '*', '|', '_'];

/// Splits text into word tokens: whitespace-delimited, with punctuation and
/// the `|` / `||` separators standing alone.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let bytes = chunk.as_bytes();
        let mut start = 0;
        let mut i = 0;
        while i < chunk.len() {
            let c = bytes[i] as char;
            if c.is_ascii() && PUNCT.contains(&c) {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                let end = if c == '|' && bytes.get(i + 1) == Some(&b'|') {
                    i + 2
                } else {
                    i + 1
                };
                out.push(&chunk[i..end]);
                i = end;
                start = end;
            } else {
                i += chunk[i..].chars().next().map_or(1, char::len_utf8);
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

/// Canonical spacing: one space between tokens.
pub fn normalize_text(text: &str) -> String {
    split_tokens(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    /// Words that mapped to `<unk>`, in order of appearance.
    pub unknown: Vec<String>,
}

/// Bijective token ↔ index map with the reserved entries first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens.iter().skip(RESERVED.len()).map(String::as_str))
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in first-seen order; duplicates
    /// and reserved spellings are skipped.
    pub fn from_tokens<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        for w in words {
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        Self { tokens, index }
    }

    /// Builds the vocabulary over every token of the given texts, sorted so
    /// the result does not depend on text order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<&str> = texts.into_iter().flat_map(split_tokens).collect();
        words.sort_unstable();
        words.dedup();
        Self::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Tokenized {
        let mut unknown = Vec::new();
        let ids = split_tokens(text)
            .into_iter()
            .map(|w| {
                self.id(w).unwrap_or_else(|| {
                    unknown.push(w.to_string());
                    UNK
                })
            })
            .collect();
        if !unknown.is_empty() {
            log::warn!(
                "{} unknown token(s) in {text:?}: {unknown:?}",
                unknown.len()
            );
        }
        Tokenized { ids, unknown }
    }

    /// Target sequence for the decoder: tokens followed by `<eos>`.
    pub fn encode_target(&self, text: &str) -> Vec<usize> {
        let mut ids = self.tokenize(text).ids;
        ids.push(EOS);
        ids
    }

    /// Joins tokens with single spaces, stopping at `<eos>` and dropping
    /// `<pad>`/`<bos>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => words.push(self.token(id).unwrap_or("<unk>")),
            }
        }
        words.join(" ")
    }

    /// Stable digest of the token list; teacher and student must agree.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}
