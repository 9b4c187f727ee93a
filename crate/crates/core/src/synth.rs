//! Deterministic synthetic corpora.
//!
//! Every user has a few interest topics. Their persona statements name words
//! from those topics and their responses use words from one of them, so the
//! persona carries information the context only sometimes does. Two surface
//! styles share the topic vocabulary: `Forum` (comment threads) and `Chat`
//! (persona dialogues), the latter with extra context aliases per topic.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{ExampleRecord, ExternalRecord};
use crate::eval::build_candidate_sets;
use crate::hashing::derive_seed;
use crate::ingest::ContextResponsePair;
use crate::io::create_writer;
use crate::text::{tokenize, TokenSeq};
use crate::{Error, Result};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const WORD_SPACE: usize = 70 * 70 * 70;

/// A pronounceable three-syllable pseudo-word; distinct for distinct `n`
/// below 343000.
pub fn pseudo_word(n: usize) -> String {
    // 7919 is coprime with the word space, so this is a permutation
    let mut code = (n * 7919 + 12345) % WORD_SPACE;
    let mut word = String::with_capacity(6);
    for _ in 0..3 {
        let syllable = code % 70;
        code /= 70;
        word.push(CONSONANTS[syllable / 5] as char);
        word.push(VOWELS[syllable % 5] as char);
    }
    word
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Forum,
    Chat,
}

/// Topic words and per-topic aliases.
#[derive(Clone, Debug)]
pub struct TopicLexicon {
    pub topics: Vec<Vec<String>>,
    pub aliases: Vec<String>,
}

impl TopicLexicon {
    pub fn new(topics: usize, words_per_topic: usize) -> Self {
        let topic_words = (0..topics)
            .map(|t| (0..words_per_topic).map(|w| pseudo_word(t * words_per_topic + w)).collect())
            .collect();
        let aliases = (0..topics).map(|t| pseudo_word(200_000 + t)).collect();
        TopicLexicon { topics: topic_words, aliases }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub users: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub interests: usize,
    pub responses_per_user: usize,
    /// Probability that a context names a word of the response topic.
    pub context_cue: f64,
    pub style: Style,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn forum(users: usize, seed: u64) -> Self {
        CorpusConfig {
            users,
            topics: 200,
            words_per_topic: 4,
            interests: 3,
            responses_per_user: 5,
            context_cue: 0.3,
            style: Style::Forum,
            seed,
        }
    }

    pub fn chat(users: usize, seed: u64) -> Self {
        CorpusConfig { style: Style::Chat, context_cue: 0.5, ..CorpusConfig::forum(users, seed) }
    }
}

/// Users' statements plus context/response pairs.
#[derive(Clone, Debug, Default)]
pub struct SynthCorpus {
    /// Sentences each user wrote outside the pairs: persona statements and
    /// chatter that fails the persona rules.
    pub statements: BTreeMap<String, Vec<TokenSeq>>,
    pub pairs: Vec<ContextResponsePair>,
}

struct Voice<'a> {
    lexicon: &'a TopicLexicon,
    style: Style,
}

const FORUM_OPENERS: &[&str] = &["honestly", "well", "yeah", "imo", "true", "hmm"];
const FORUM_LINKS: &[&str] = &["is great with", "goes well with", "beats", "pairs nicely with"];
const FORUM_QUESTIONS: &[&str] = &["what do you think about", "anyone here tried", "thoughts on", "is it worth getting into"];
const FORUM_CHATTER: &[&str] = &[
    "that was a great thread .",
    "thanks for sharing .",
    "source please .",
    "this is the way .",
    "came here to say this .",
];
const CHAT_QUESTIONS: &[&str] = &["hello ! how was your weekend", "hi there , what did you do today", "hey , anything fun lately"];
const CHAT_OPENERS: &[&str] = &["we spent the day on", "lately we have been doing", "just got back from"];

impl Voice<'_> {
    fn word<'r>(&'r self, topic: usize, rng: &mut ChaCha8Rng) -> &'r str {
        self.lexicon.topics[topic].choose(rng).expect("topics have words")
    }

    fn two_words(&self, topic: usize, rng: &mut ChaCha8Rng) -> (String, String) {
        let picked = sample(rng, self.lexicon.topics[topic].len(), 2);
        (
            self.lexicon.topics[topic][picked.index(0)].clone(),
            self.lexicon.topics[topic][picked.index(1)].clone(),
        )
    }

    fn statement(&self, topic: usize, rng: &mut ChaCha8Rng) -> String {
        let (a, b) = self.two_words(topic, rng);
        match self.style {
            Style::Forum => format!("i really love {a} and {b} ."),
            Style::Chat => format!("my favorite hobby is {a} , also {b} ."),
        }
    }

    fn context(&self, topic: usize, cue: bool, rng: &mut ChaCha8Rng) -> String {
        let shown = if cue { topic } else { rng.random_range(0..self.lexicon.topics.len()) };
        match self.style {
            Style::Forum => format!("{} {} ?", FORUM_QUESTIONS.choose(rng).unwrap(), self.word(shown, rng)),
            Style::Chat => {
                let question = CHAT_QUESTIONS.choose(rng).unwrap();
                if cue {
                    format!("{question} ? i heard {} was fun .", self.lexicon.aliases[topic])
                } else {
                    format!("{question} ?")
                }
            }
        }
    }

    fn response(&self, topic: usize, rng: &mut ChaCha8Rng) -> String {
        let (a, b) = self.two_words(topic, rng);
        match self.style {
            Style::Forum => format!(
                "{} , {a} {} {b} .",
                FORUM_OPENERS.choose(rng).unwrap(),
                FORUM_LINKS.choose(rng).unwrap()
            ),
            Style::Chat => format!("{} {a} , then some {b} with friends .", CHAT_OPENERS.choose(rng).unwrap()),
        }
    }
}

fn user_name(style: Style, index: usize) -> String {
    match style {
        Style::Forum => format!("user{index:05}"),
        Style::Chat => format!("speaker{index:05}"),
    }
}

/// Generates a corpus; identical configs give identical corpora.
pub fn generate_corpus(config: &CorpusConfig) -> Result<SynthCorpus> {
    if config.interests == 0 || config.interests > config.topics || config.words_per_topic < 2 {
        return Err(Error::Config("synthetic corpus needs 1..=topics interests and 2+ words per topic".into()));
    }
    let lexicon = TopicLexicon::new(config.topics, config.words_per_topic);
    let voice = Voice { lexicon: &lexicon, style: config.style };
    let mut corpus = SynthCorpus::default();
    for u in 0..config.users {
        let user = user_name(config.style, u);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &user));
        let interests = sample(&mut rng, config.topics, config.interests).into_vec();
        let mut statements: Vec<TokenSeq> = interests.iter().map(|&t| tokenize(&voice.statement(t, &mut rng))).collect();
        if config.style == Style::Forum {
            statements.push(tokenize(FORUM_CHATTER.choose(&mut rng).unwrap()));
        }
        corpus.statements.insert(user.clone(), statements);
        for r in 0..config.responses_per_user {
            let topic = *interests.choose(&mut rng).unwrap();
            let cue = rng.random::<f64>() < config.context_cue;
            corpus.pairs.push(ContextResponsePair {
                context_text: voice.context(topic, cue, &mut rng),
                response_text: voice.response(topic, &mut rng),
                responder: user.clone(),
                response_id: format!("{user}-r{r:03}"),
            });
        }
    }
    Ok(corpus)
}

/// Examples whose persona is the responder's statements verbatim.
pub fn records_with_statements(corpus: &SynthCorpus) -> Vec<ExampleRecord> {
    corpus
        .pairs
        .iter()
        .map(|pair| ExampleRecord {
            persona: corpus.statements.get(&pair.responder).cloned().unwrap_or_default(),
            context: tokenize(&pair.context_text),
            response: tokenize(&pair.response_text),
            responder: pair.responder.clone(),
            id: pair.response_id.clone(),
        })
        .collect()
}

fn record_to_external(record: &ExampleRecord, candidates: Option<Vec<String>>) -> ExternalRecord {
    ExternalRecord {
        persona: record.persona.iter().map(TokenSeq::join).collect(),
        context: record.context.join(),
        response: record.response.join(),
        candidates,
    }
}

/// Writes examples in the external persona-dialogue format, attaching
/// `candidate_count` candidates per line when given.
pub fn write_external(path: &Path, records: &[ExampleRecord], candidate_count: Option<usize>, seed: u64) -> Result<()> {
    let sets = match candidate_count {
        Some(k) => Some(build_candidate_sets(records, k, seed)?),
        None => None,
    };
    let mut w = create_writer(path)?;
    for (i, record) in records.iter().enumerate() {
        let candidates = sets
            .as_ref()
            .map(|sets| sets[i].candidates.iter().map(TokenSeq::join).collect());
        serde_json::to_writer(&mut w, &record_to_external(record, candidates))?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct DumpConfig {
    pub comments: usize,
    pub users: usize,
    pub shards: usize,
    /// Compress every other shard.
    pub gzip_alternate: bool,
    pub seed: u64,
}

impl DumpConfig {
    pub fn new(comments: usize, seed: u64) -> Self {
        DumpConfig { comments, users: (comments / 25).max(4), shards: 4, gzip_alternate: true, seed }
    }
}

#[derive(Serialize)]
struct DumpLine<'a> {
    id: String,
    parent_id: String,
    author: &'a str,
    body: String,
    subreddit: &'a str,
    created_utc: i64,
}

/// Writes a comment-dump fixture with threads of depth up to three.
///
/// About 1% of records are deleted or removed and a handful of lines are
/// malformed, so ingestion statistics are exercised. Returns the shard
/// paths in order.
pub fn write_dump(dir: &Path, config: &DumpConfig) -> Result<Vec<PathBuf>> {
    let lexicon = TopicLexicon::new(200, 4);
    let voice = Voice { lexicon: &lexicon, style: Style::Forum };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dump"));
    let users: Vec<(String, Vec<usize>)> = (0..config.users)
        .map(|u| (user_name(Style::Forum, u), sample(&mut rng, 200, 3).into_vec()))
        .collect();
    let subreddits = ["cooking", "games", "music", "outdoors"];
    let mut lines: Vec<String> = Vec::with_capacity(config.comments);
    let mut thread_parent: Option<(String, usize)> = None;
    let mut post = 0usize;
    for n in 0..config.comments {
        let (author, interests) = &users[rng.random_range(0..users.len())];
        let topic = *interests.choose(&mut rng).unwrap();
        let id = format!("{n:07x}");
        let depth_reset = thread_parent.as_ref().is_none_or(|(_, depth)| *depth >= 3) || rng.random::<f64>() < 0.25;
        let (parent_id, depth) = if depth_reset {
            post += 1;
            (format!("t3_p{post:06}"), 1)
        } else {
            let (parent, depth) = thread_parent.clone().unwrap();
            (format!("t1_{parent}"), depth + 1)
        };
        let mut body = if depth == 1 {
            voice.context(topic, rng.random::<f64>() < 0.5, &mut rng)
        } else {
            voice.response(topic, &mut rng)
        };
        if depth > 1 && rng.random::<f64>() < 0.3 {
            let statement_topic = *interests.choose(&mut rng).unwrap();
            body = format!("{} {body}", voice.statement(statement_topic, &mut rng));
        }
        let roll = rng.random::<f64>();
        let (author, body) = if roll < 0.005 {
            ("[deleted]", body)
        } else if roll < 0.01 {
            (author.as_str(), "[removed]".to_string())
        } else {
            (author.as_str(), body)
        };
        let line = DumpLine {
            id: id.clone(),
            parent_id,
            author,
            body,
            subreddit: subreddits[topic % subreddits.len()],
            created_utc: 1_400_000_000 + n as i64 * 7,
        };
        if n % 9973 == 4242 {
            lines.push("{\"id\": \"broken".to_string());
        } else {
            lines.push(serde_json::to_string(&line)?);
        }
        thread_parent = Some((id, depth));
    }

    let shards = config.shards.max(1);
    let per_shard = lines.len().div_ceil(shards).max(1);
    let mut paths = Vec::new();
    for (index, chunk) in lines.chunks(per_shard).enumerate() {
        let gz = config.gzip_alternate && index % 2 == 1;
        let path = dir.join(format!("dump-{index:02}.jsonl{}", if gz { ".gz" } else { "" }));
        let mut text = chunk.join("\n");
        text.push('\n');
        let file = create_writer(&path)?;
        if gz {
            let mut enc = GzEncoder::new(file, Compression::fast());
            enc.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
            enc.finish().map_err(|e| Error::io(&path, e))?.flush().map_err(|e| Error::io(&path, e))?;
        } else {
            let mut file = file;
            file.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
            file.flush().map_err(|e| Error::io(&path, e))?;
        }
        paths.push(path);
    }
    Ok(paths)
}
