//! Persona construction: the rule filter, the bag-of-words persona
//! classifier and the four selection setups.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hashing::derive_seed;
use crate::ingest::ContextResponsePair;
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::pos::{has_noun_pron_adj, has_verb, CoarseTag, PosTagger};
use crate::text::{split_sentences, tokenize, TokenSeq, Vocabulary, PAD_ID};
use crate::{Error, Result};

pub const MIN_SENTENCE_TOKENS: usize = 4;
pub const MAX_SENTENCE_TOKENS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaSetup {
    Rules,
    RulesClassifier,
    RandomFromUser,
    RandomFromDataset,
}

impl PersonaSetup {
    pub const ALL: [PersonaSetup; 4] = [
        PersonaSetup::Rules,
        PersonaSetup::RulesClassifier,
        PersonaSetup::RandomFromUser,
        PersonaSetup::RandomFromDataset,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PersonaSetup::Rules => "rules",
            PersonaSetup::RulesClassifier => "rules_classifier",
            PersonaSetup::RandomFromUser => "random_from_user",
            PersonaSetup::RandomFromDataset => "random_from_dataset",
        }
    }

    /// Human-readable label matching the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            PersonaSetup::Rules => "rules",
            PersonaSetup::RulesClassifier => "rules + classifier",
            PersonaSetup::RandomFromUser => "random from user",
            PersonaSetup::RandomFromDataset => "random from dataset",
        }
    }
}

impl fmt::Display for PersonaSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PersonaSetup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.replace('-', "_");
        PersonaSetup::ALL
            .into_iter()
            .find(|setup| setup.as_str() == normalized)
            .ok_or_else(|| Error::Config(format!("unknown persona setup {s:?}")))
    }
}

/// A user's selected persona sentences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub user: String,
    pub setup: PersonaSetup,
    pub sentences: Vec<TokenSeq>,
}

fn length_ok(seq: &[String]) -> bool {
    (MIN_SENTENCE_TOKENS..=MAX_SENTENCE_TOKENS).contains(&seq.len())
}

/// The four extraction rules: length, first person, a verb, and a noun,
/// pronoun or adjective.
pub fn passes_rules(seq: &[String], tags: &[CoarseTag]) -> bool {
    debug_assert_eq!(seq.len(), tags.len());
    length_ok(seq)
        && seq.iter().any(|t| t == "i" || t == "my")
        && has_verb(tags)
        && has_noun_pron_adj(tags)
}

/// Logistic regression over binary bag-of-words features.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonaClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    pub vocab_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub l2: f64,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            max_epochs: 50,
            lr: 0.1,
            l2: 1e-5,
            patience: 5,
            holdout_fraction: 0.2,
            seed: 0,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub held_out_accuracy: f64,
    pub epochs: usize,
    pub train_examples: usize,
    pub held_out_examples: usize,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    vocab_hash: String,
    vocab_size: usize,
    weights: Vec<(u32, f64)>,
    bias: f64,
    threshold: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn distinct_features(vocab: &Vocabulary, seq: &[String]) -> Vec<u32> {
    let mut ids: Vec<u32> = vocab.encode(seq).into_iter().filter(|&id| id != PAD_ID).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

impl PersonaClassifier {
    pub fn zeroed(vocab: &Vocabulary, threshold: f64) -> Self {
        PersonaClassifier {
            weights: vec![0.0; vocab.size()],
            bias: 0.0,
            threshold,
            vocab_hash: vocab.hash(),
        }
    }

    fn logit(&self, features: &[u32]) -> f64 {
        self.bias + features.iter().map(|&id| self.weights[id as usize]).sum::<f64>()
    }

    /// Probability that the sentence is persona-like.
    pub fn score(&self, vocab: &Vocabulary, seq: &[String]) -> f64 {
        sigmoid(self.logit(&distinct_features(vocab, seq)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ClassifierFile {
            vocab_hash: self.vocab_hash.clone(),
            vocab_size: self.weights.len(),
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(id, w)| (id as u32, *w))
                .collect(),
            bias: self.bias,
            threshold: self.threshold,
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let file: ClassifierFile = read_json(path)?;
        if file.vocab_hash != vocab.hash() {
            return Err(Error::VocabularyMismatch {
                expected: vocab.hash(),
                found: file.vocab_hash,
            });
        }
        let mut weights = vec![0.0; vocab.size()];
        for (id, w) in file.weights {
            let slot = weights
                .get_mut(id as usize)
                .ok_or_else(|| Error::Invalid(format!("classifier weight for id {id} out of range")))?;
            *slot = w;
        }
        Ok(PersonaClassifier {
            weights,
            bias: file.bias,
            threshold: file.threshold,
            vocab_hash: file.vocab_hash,
        })
    }
}

/// Trains the persona classifier with seeded SGD and early stopping on a
/// held-out slice.
pub fn train_persona_classifier(
    positives: &[TokenSeq],
    negatives: &[TokenSeq],
    vocab: &Vocabulary,
    config: &ClassifierConfig,
) -> Result<(PersonaClassifier, ClassifierReport)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Config(
            "persona classifier needs non-empty positive and negative sets".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
    }
    let mut labeled: Vec<(Vec<u32>, f64)> = positives
        .iter()
        .map(|s| (distinct_features(vocab, s), 1.0))
        .chain(negatives.iter().map(|s| (distinct_features(vocab, s), 0.0)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    labeled.shuffle(&mut rng);
    let held = ((labeled.len() as f64) * config.holdout_fraction).round() as usize;
    let held = held.min(labeled.len() - 1);
    let (held_out, train) = labeled.split_at(held);
    let mut train: Vec<&(Vec<u32>, f64)> = train.iter().collect();
    let eval_set: Vec<&(Vec<u32>, f64)> = if held_out.is_empty() {
        train.clone()
    } else {
        held_out.iter().collect()
    };

    let mut clf = PersonaClassifier::zeroed(vocab, config.threshold);
    let accuracy = |clf: &PersonaClassifier| {
        let correct = eval_set
            .iter()
            .filter(|(f, y)| (sigmoid(clf.logit(f)) >= clf.threshold) == (*y > 0.5))
            .count();
        correct as f64 / eval_set.len() as f64
    };
    let mut best = (accuracy(&clf), clf.clone(), 0);
    let mut stale = 0;
    let mut epochs = 0;
    for epoch in 1..=config.max_epochs {
        epochs = epoch;
        train.shuffle(&mut rng);
        for (features, label) in &train {
            let grad = sigmoid(clf.logit(features)) - label;
            for &id in features {
                let w = &mut clf.weights[id as usize];
                *w -= config.lr * (grad + config.l2 * *w);
            }
            clf.bias -= config.lr * grad;
        }
        let acc = accuracy(&clf);
        if acc > best.0 {
            best = (acc, clf.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience || acc >= 1.0 {
                break;
            }
        }
        if best.0 >= 1.0 {
            break;
        }
    }
    let report = ClassifierReport {
        held_out_accuracy: best.0,
        epochs,
        train_examples: train.len(),
        held_out_examples: held_out.len(),
    };
    Ok((best.1, report))
}

/// Settings for one persona build.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PersonaConfig {
    pub setup: PersonaSetup,
    /// Maximum sentences per persona.
    pub cap: usize,
    pub seed: u64,
    pub threshold: f64,
}

/// Collects each responder's sentences from training pairs, in pair order.
pub fn collect_user_sentences(pairs: &[ContextResponsePair]) -> BTreeMap<String, Vec<TokenSeq>> {
    let mut users: BTreeMap<String, Vec<TokenSeq>> = BTreeMap::new();
    for pair in pairs {
        let sentences = users.entry(pair.responder.clone()).or_default();
        for sentence in split_sentences(&pair.response_text) {
            let seq = tokenize(&sentence);
            if !seq.is_empty() {
                sentences.push(seq);
            }
        }
    }
    users
}

fn dedup_in_order(sentences: &[TokenSeq]) -> Vec<&TokenSeq> {
    let mut seen = HashSet::new();
    sentences.iter().filter(|s| seen.insert(*s)).collect()
}

/// Uniform sample of at most `cap` items, kept in their original order.
fn sample_in_order<T: Clone>(items: &[T], cap: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    let mut picked = index::sample(rng, items.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

/// Builds a persona for every user under the configured setup.
///
/// Each user's random draws come from a seed derived from the global seed
/// and the user name, so the output does not depend on thread count.
pub fn build_personas(
    user_sentences: &BTreeMap<String, Vec<TokenSeq>>,
    config: &PersonaConfig,
    tagger: &dyn PosTagger,
    classifier: Option<(&PersonaClassifier, &Vocabulary)>,
) -> Result<BTreeMap<String, Persona>> {
    if config.setup == PersonaSetup::RulesClassifier && classifier.is_none() {
        return Err(Error::Config("rules_classifier setup needs a trained classifier".into()));
    }
    if let Some((clf, vocab)) = classifier {
        if clf.vocab_hash != vocab.hash() {
            return Err(Error::VocabularyMismatch {
                expected: vocab.hash(),
                found: clf.vocab_hash.clone(),
            });
        }
    }

    // frozen before the parallel section
    let global_pool: Vec<TokenSeq> = if config.setup == PersonaSetup::RandomFromDataset {
        let mut seen = HashSet::new();
        user_sentences
            .values()
            .flatten()
            .filter(|s| length_ok(s) && seen.insert(*s))
            .cloned()
            .collect()
    } else {
        Vec::new()
    };

    let users: Vec<(&String, &Vec<TokenSeq>)> = user_sentences.iter().collect();
    let personas: Vec<Persona> = users
        .par_iter()
        .map(|(user, sentences)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, user));
            let pool = dedup_in_order(sentences);
            let rule_passing = || {
                pool.iter()
                    .filter(|s| passes_rules(s, &tagger.tag(s)))
                    .map(|s| (*s).clone())
                    .collect::<Vec<_>>()
            };
            let selected = match config.setup {
                PersonaSetup::Rules => sample_in_order(&rule_passing(), config.cap, &mut rng),
                PersonaSetup::RulesClassifier => {
                    let (clf, vocab) = classifier.expect("checked above");
                    let mut scored: Vec<(f64, usize, TokenSeq)> = rule_passing()
                        .into_iter()
                        .enumerate()
                        .map(|(i, s)| (clf.score(vocab, &s), i, s))
                        .filter(|(score, _, _)| *score >= config.threshold)
                        .collect();
                    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                    scored.into_iter().take(config.cap).map(|(_, _, s)| s).collect()
                }
                PersonaSetup::RandomFromUser => {
                    let eligible: Vec<TokenSeq> =
                        pool.iter().filter(|s| length_ok(s)).map(|s| (*s).clone()).collect();
                    sample_in_order(&eligible, config.cap, &mut rng)
                }
                PersonaSetup::RandomFromDataset => {
                    if pool.iter().any(|s| length_ok(s)) {
                        let n = config.cap.min(global_pool.len());
                        index::sample(&mut rng, global_pool.len(), n)
                            .into_iter()
                            .map(|i| global_pool[i].clone())
                            .collect()
                    } else {
                        Vec::new()
                    }
                }
            };
            Persona {
                user: (*user).clone(),
                setup: config.setup,
                sentences: selected,
            }
        })
        .collect();
    Ok(personas.into_iter().map(|p| (p.user.clone(), p)).collect())
}

/// Persona sentences that equal, token for token, a held-out response of
/// the same user.
pub fn leakage_audit(
    personas: &BTreeMap<String, Persona>,
    held_out: &[ContextResponsePair],
) -> Vec<(String, String)> {
    let mut hits = Vec::new();
    for pair in held_out {
        let Some(persona) = personas.get(&pair.responder) else { continue };
        let response = tokenize(&pair.response_text);
        if persona.sentences.contains(&response) {
            hits.push((pair.responder.clone(), pair.response_id.clone()));
        }
    }
    hits
}

pub fn save_personas(path: &Path, personas: &BTreeMap<String, Persona>) -> Result<()> {
    write_jsonl(path, personas.values())
}

pub fn load_personas(path: &Path) -> Result<BTreeMap<String, Persona>> {
    let records: Vec<Persona> = read_jsonl(path)?;
    Ok(records.into_iter().map(|p| (p.user.clone(), p)).collect())
}
