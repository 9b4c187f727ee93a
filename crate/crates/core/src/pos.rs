//! Coarse part-of-speech tagging backed by a word lexicon and suffix rules.
//!
//! Only the persona rule filter consumes these tags, and it only asks two
//! questions: is there a verb, and is there a noun, pronoun or adjective.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use crate::io::open_reader;
use crate::{Error, Result};

const SHIPPED_LEXICON: &str = include_str!("../data/lexicon.tsv");

const SUFFIX_RULES: &[(&str, CoarseTag)] = &[
    ("ing", CoarseTag::Verb),
    ("ed", CoarseTag::Verb),
    ("ize", CoarseTag::Verb),
    ("ness", CoarseTag::Noun),
    ("tion", CoarseTag::Noun),
    ("ment", CoarseTag::Noun),
    ("er", CoarseTag::Noun),
    ("ous", CoarseTag::Adj),
    ("ful", CoarseTag::Adj),
    ("ive", CoarseTag::Adj),
    ("able", CoarseTag::Adj),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CoarseTag {
    Verb,
    Noun,
    Pron,
    Adj,
    Other,
}

impl FromStr for CoarseTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VERB" => Ok(CoarseTag::Verb),
            "NOUN" => Ok(CoarseTag::Noun),
            "PRON" => Ok(CoarseTag::Pron),
            "ADJ" => Ok(CoarseTag::Adj),
            "OTHER" => Ok(CoarseTag::Other),
            _ => Err(Error::Invalid(format!("unknown tag {s:?}"))),
        }
    }
}

impl fmt::Display for CoarseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            CoarseTag::Verb => "VERB",
            CoarseTag::Noun => "NOUN",
            CoarseTag::Pron => "PRON",
            CoarseTag::Adj => "ADJ",
            CoarseTag::Other => "OTHER",
        };
        f.write_str(name)
    }
}

/// Anything that can assign one coarse tag per token.
pub trait PosTagger: Send + Sync {
    fn tag(&self, tokens: &[String]) -> Vec<CoarseTag>;
}

/// Immutable word → tag table.
#[derive(Clone, Debug, Default)]
pub struct TagLexicon {
    entries: HashMap<String, CoarseTag>,
}

impl TagLexicon {
    /// The lexicon bundled with the crate.
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_LEXICON, "<shipped>").expect("bundled lexicon is well formed")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = open_reader(path)?;
        let mut text = String::new();
        for line in reader.lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `token<TAB>TAG` lines; blank lines are ignored.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (index, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: source.to_string(),
                line: index + 1,
                message,
            };
            let (token, tag) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>TAG".into()))?;
            let tag = tag.trim().parse::<CoarseTag>().map_err(|e| parse_err(e.to_string()))?;
            entries.insert(token.to_lowercase(), tag);
        }
        Ok(TagLexicon { entries })
    }

    pub fn get(&self, token: &str) -> Option<CoarseTag> {
        self.entries.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lexicon lookup, then suffix heuristics, then NOUN for alphabetic words.
#[derive(Clone, Debug)]
pub struct LexiconTagger {
    lexicon: TagLexicon,
}

impl LexiconTagger {
    pub fn new(lexicon: TagLexicon) -> Self {
        LexiconTagger { lexicon }
    }

    pub fn shipped() -> Self {
        Self::new(TagLexicon::shipped())
    }

    pub fn tag_token(&self, token: &str) -> CoarseTag {
        if let Some(tag) = self.lexicon.get(token) {
            return tag;
        }
        if token.is_empty() || !token.chars().all(char::is_alphabetic) {
            return CoarseTag::Other;
        }
        let chars = token.chars().count();
        for (suffix, tag) in SUFFIX_RULES {
            // the suffix must leave at least a two-letter stem
            if chars >= suffix.len() + 2 && token.ends_with(suffix) {
                return *tag;
            }
        }
        CoarseTag::Noun
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, tokens: &[String]) -> Vec<CoarseTag> {
        tokens.iter().map(|t| self.tag_token(t)).collect()
    }
}

pub fn has_verb(tags: &[CoarseTag]) -> bool {
    tags.contains(&CoarseTag::Verb)
}

pub fn has_noun_pron_adj(tags: &[CoarseTag]) -> bool {
    tags.iter()
        .any(|t| matches!(t, CoarseTag::Noun | CoarseTag::Pron | CoarseTag::Adj))
}
