//! Tokenization, sentence splitting and frequency-capped vocabularies.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;
use crate::io::{create_writer, open_reader};
use crate::{Error, Result};

/// Maximum number of tokens kept from a comment.
pub const DEFAULT_MAX_LEN: usize = 100;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const RESERVED: usize = 2;

/// A sequence of lowercase tokens, none empty and none containing whitespace.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    /// Wraps tokens that are already known to satisfy the invariants.
    ///
    /// Panics if a token is empty or contains whitespace.
    pub fn new(tokens: Vec<String>) -> Self {
        for token in &tokens {
            assert!(
                !token.is_empty() && !token.chars().any(char::is_whitespace),
                "invalid token {token:?}"
            );
        }
        TokenSeq(tokens)
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.0
    }

    pub fn join(&self) -> String {
        self.0.join(" ")
    }
}

impl Deref for TokenSeq {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

impl<S: AsRef<str>> FromIterator<S> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSeq::new(iter.into_iter().map(|s| s.as_ref().to_string()).collect())
    }
}

/// Splits text into lowercase tokens.
///
/// Maximal runs of alphanumeric characters form one token; every other
/// non-whitespace character is a token on its own.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            let special: String = ch.to_lowercase().collect();
            tokens.push(special);
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    TokenSeq(tokens)
}

/// Keeps the first `max_len` tokens.
pub fn truncate(seq: &TokenSeq, max_len: usize) -> TokenSeq {
    TokenSeq(seq.0.iter().take(max_len).cloned().collect())
}

/// Splits text after runs of `.`, `!`, `?` and at newlines.
///
/// Segments are trimmed and empty ones dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    let mut push = |current: &mut String| {
        let trimmed = current.trim();
        if !trimmed.is_empty() {
            sentences.push(trimmed.to_string());
        }
        current.clear();
    };
    while let Some(ch) = chars.next() {
        match ch {
            '\n' | '\r' => push(&mut current),
            '.' | '!' | '?' => {
                current.push(ch);
                while let Some(&next) = chars.peek() {
                    if matches!(next, '.' | '!' | '?') {
                        current.push(next);
                        chars.next();
                    } else {
                        break;
                    }
                }
                push(&mut current);
            }
            _ => current.push(ch),
        }
    }
    push(&mut current);
    sentences
}

/// Exact token counts, mergeable across shards.
#[derive(Clone, Debug, Default)]
pub struct TokenCounts(HashMap<String, u64>);

impl TokenCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, seq: &[String]) {
        for token in seq {
            if let Some(count) = self.0.get_mut(token.as_str()) {
                *count += 1;
            } else {
                self.0.insert(token.clone(), 1);
            }
        }
    }

    pub fn merge(&mut self, other: TokenCounts) {
        for (token, count) in other.0 {
            *self.0.entry(token).or_insert(0) += count;
        }
    }

    pub fn get(&self, token: &str) -> u64 {
        self.0.get(token).copied().unwrap_or(0)
    }

    pub fn distinct(&self) -> usize {
        self.0.len()
    }

    /// Keeps the `cap` most frequent tokens, ties broken lexicographically.
    pub fn into_vocabulary(self, cap: usize) -> Vocabulary {
        let mut ranked: Vec<(String, u64)> = self.0.into_iter().filter(|(t, _)| !t.is_empty()).collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        Vocabulary::from_ranked(ranked.into_iter().map(|(t, _)| t).collect())
            .expect("ranked tokens are distinct")
    }
}

/// Builds a vocabulary in one streaming pass over the corpus.
pub fn build_vocabulary<'a, I>(corpus: I, cap: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a TokenSeq>,
{
    if cap == 0 {
        return Err(Error::Config("vocabulary cap must be at least 1".into()));
    }
    let mut counts = TokenCounts::new();
    for seq in corpus {
        counts.add(seq);
    }
    Ok(counts.into_vocabulary(cap))
}

/// Token ↔ id mapping. Ids 0 and 1 are reserved for padding and unknowns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Creates a vocabulary from tokens in rank order.
    pub fn from_ranked(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (rank, token) in tokens.iter().enumerate() {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("invalid vocabulary token {token:?}")));
            }
            let id = u32::try_from(rank + RESERVED)
                .map_err(|_| Error::Config("vocabulary too large".into()))?;
            if ids.insert(token.clone(), id).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {token:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Total id count including the reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            UNK_ID => Some("<unk>"),
            _ => self.tokens.get(id as usize - RESERVED).map(String::as_str),
        }
    }

    pub fn encode(&self, seq: &[String]) -> Vec<u32> {
        seq.iter().map(|t| self.lookup(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token_of(id).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// Tokens in rank order, reserved ids excluded.
    pub fn ranked_tokens(&self) -> &[String] {
        &self.tokens
    }

    fn file_contents(&self) -> String {
        let mut text = String::new();
        for token in &self.tokens {
            text.push_str(token);
            text.push('\n');
        }
        text
    }

    /// Content hash of the on-disk representation.
    pub fn hash(&self) -> String {
        sha256_hex(self.file_contents().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = create_writer(path)?;
        out.write_all(self.file_contents().as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = open_reader(path)?;
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            tokens.push(line);
        }
        Self::from_ranked(tokens)
    }
}
