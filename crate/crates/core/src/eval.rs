//! Candidate sets, hits@k, the TF-IDF exact-match baseline and ablation
//! tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Example, ExampleRecord};
use crate::hashing::derive_seed;
use crate::io::{read_jsonl, write_jsonl};
use crate::model::{score, Model, PersonaMode, Side};
use crate::text::{TokenSeq, Vocabulary};
use crate::{Error, Result};

pub const REPORTED_K: [usize; 3] = [1, 3, 10];
const ENCODE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub id: String,
    pub candidates: Vec<TokenSeq>,
    pub gold_index: usize,
}

pub fn save_candidate_sets(path: &Path, sets: &[CandidateSet]) -> Result<()> {
    write_jsonl(path, sets)
}

pub fn load_candidate_sets(path: &Path) -> Result<Vec<CandidateSet>> {
    let sets: Vec<CandidateSet> = read_jsonl(path)?;
    for set in &sets {
        if set.gold_index >= set.candidates.len() {
            return Err(Error::Invalid(format!(
                "candidate set {} has gold_index {} but {} candidates",
                set.id,
                set.gold_index,
                set.candidates.len()
            )));
        }
    }
    Ok(sets)
}

/// One candidate set per example: the gold response plus `k - 1` distinct
/// responses from the other examples, never token-identical to the gold.
pub fn build_candidate_sets(examples: &[ExampleRecord], k: usize, seed: u64) -> Result<Vec<CandidateSet>> {
    if k == 0 {
        return Err(Error::Config("candidate count must be positive".into()));
    }
    let mut seen = HashSet::new();
    let mut pool: Vec<&TokenSeq> = Vec::new();
    for example in examples {
        if seen.insert(&example.response) {
            pool.push(&example.response);
        }
    }
    if pool.len() < k {
        return Err(Error::Invalid(format!(
            "need {k} distinct responses for candidate sets, the split has {}",
            pool.len()
        )));
    }
    let position: HashMap<&TokenSeq, usize> = pool.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    Ok(examples
        .par_iter()
        .map(|example| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &example.id));
            let gold_pos = position[&example.response];
            let mut candidates: Vec<TokenSeq> = sample(&mut rng, pool.len() - 1, k - 1)
                .into_iter()
                .map(|i| pool[if i >= gold_pos { i + 1 } else { i }].clone())
                .collect();
            let gold_index = rng.random_range(0..k);
            candidates.insert(gold_index, example.response.clone());
            CandidateSet { id: example.id.clone(), candidates, gold_index }
        })
        .collect())
}

/// Rank of the gold candidate; ties go to the lower index.
pub fn gold_rank(scores: &[f64], gold_index: usize) -> usize {
    let gold = scores[gold_index];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > gold || (j < gold_index && s == gold))
        .count()
}

pub fn hits_at_k(scores: &[f64], gold_index: usize, k: usize) -> bool {
    gold_rank(scores, gold_index) < k
}

/// Document frequencies over a training split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    pub documents: u64,
    pub df: BTreeMap<String, u64>,
}

impl IdfTable {
    pub fn build<'a, I>(documents: I) -> Self
    where
        I: IntoIterator<Item = &'a TokenSeq>,
    {
        let mut table = IdfTable::default();
        for doc in documents {
            table.documents += 1;
            let distinct: HashSet<&String> = doc.iter().collect();
            for token in distinct {
                *table.df.entry(token.clone()).or_insert(0) += 1;
            }
        }
        table
    }

    /// `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0);
        ((1 + self.documents) as f64 / (1 + df) as f64).ln() + 1.0
    }

    pub fn scaled(&self, factor: f64) -> ScaledIdf<'_> {
        ScaledIdf { table: self, factor }
    }
}

pub trait Idf {
    fn idf(&self, token: &str) -> f64;
}

impl Idf for IdfTable {
    fn idf(&self, token: &str) -> f64 {
        IdfTable::idf(self, token)
    }
}

/// An idf table with every weight multiplied by a constant.
pub struct ScaledIdf<'a> {
    table: &'a IdfTable,
    factor: f64,
}

impl Idf for ScaledIdf<'_> {
    fn idf(&self, token: &str) -> f64 {
        self.table.idf(token) * self.factor
    }
}

fn term_counts(seq: &[String]) -> BTreeMap<&str, f64> {
    let mut counts = BTreeMap::new();
    for token in seq {
        *counts.entry(token.as_str()).or_insert(0.0) += 1.0;
    }
    counts
}

fn weights<'a>(seq: &'a [String], idf: &dyn Idf) -> BTreeMap<&'a str, f64> {
    term_counts(seq).into_iter().map(|(t, tf)| (t, tf * idf.idf(t))).collect()
}

fn norm_sq(w: &BTreeMap<&str, f64>) -> f64 {
    w.values().map(|v| v * v).sum()
}

/// TF-IDF cosine between a context and each candidate.
pub fn tfidf_scores(context: &[String], candidates: &[TokenSeq], idf: &dyn Idf) -> Vec<f64> {
    let ctx = weights(context, idf);
    let ctx_norm = norm_sq(&ctx);
    candidates
        .iter()
        .map(|cand| {
            let cw = weights(cand, idf);
            let overlap: f64 = ctx
                .iter()
                .filter_map(|(t, a)| cw.get(t).map(|b| a * b))
                .sum();
            let denom = ctx_norm.sqrt() * norm_sq(&cw).sqrt();
            if overlap == 0.0 || denom == 0.0 {
                0.0
            } else {
                overlap / denom
            }
        })
        .collect()
}

/// Candidate indices by descending score, ties by lower index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn tfidf_rank(context: &[String], candidates: &[TokenSeq], idf: &dyn Idf) -> Vec<usize> {
    rank_by_score(&tfidf_scores(context, candidates, idf))
}

/// Hit counts before conversion to percentages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HitCounts {
    pub hits: [usize; 3],
    pub examples: usize,
}

impl HitCounts {
    fn add(&mut self, scores: &[f64], gold_index: usize) {
        let rank = gold_rank(scores, gold_index);
        for (slot, &k) in self.hits.iter_mut().zip(&REPORTED_K) {
            if rank < k.min(scores.len()) {
                *slot += 1;
            }
        }
        self.examples += 1;
    }

    fn merge(mut self, other: HitCounts) -> HitCounts {
        for (a, b) in self.hits.iter_mut().zip(other.hits) {
            *a += b;
        }
        self.examples += other.examples;
        self
    }

    pub fn percent(&self, slot: usize) -> f64 {
        if self.examples == 0 {
            0.0
        } else {
            100.0 * self.hits[slot] as f64 / self.examples as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
    pub k: usize,
    pub n_examples: usize,
    pub model: String,
    pub model_fingerprint: String,
    pub config_fingerprint: String,
    pub persona_setup: Option<String>,
    pub persona_mode: Option<PersonaMode>,
}

impl EvalReport {
    pub fn from_counts(counts: HitCounts, k: usize) -> Self {
        EvalReport {
            hits_at_1: counts.percent(0),
            hits_at_3: counts.percent(1),
            hits_at_10: counts.percent(2),
            k,
            n_examples: counts.examples,
            model: String::new(),
            model_fingerprint: String::new(),
            config_fingerprint: String::new(),
            persona_setup: None,
            persona_mode: None,
        }
    }

    /// Aligned one-row text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>8} {:>8} {:>8}", "model", "hits@1", "hits@3", "hits@10");
        let name = if self.model.is_empty() { "model" } else { &self.model };
        let _ = writeln!(
            out,
            "{:<24} {:>8.2} {:>8.2} {:>8.2}",
            name, self.hits_at_1, self.hits_at_3, self.hits_at_10
        );
        out
    }
}

fn common_k(sets: &[CandidateSet]) -> usize {
    sets.iter().map(|s| s.candidates.len()).max().unwrap_or(0)
}

/// TF-IDF baseline over candidate sets, scoring against the context alone.
pub fn evaluate_tfidf(idf: &IdfTable, examples: &[ExampleRecord], sets: &[CandidateSet]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &ExampleRecord> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let counts = sets
        .par_iter()
        .map(|set| {
            let example = by_id
                .get(set.id.as_str())
                .ok_or_else(|| Error::Invalid(format!("candidate set {} has no matching example", set.id)))?;
            let mut counts = HitCounts::default();
            counts.add(&tfidf_scores(&example.context, &set.candidates, idf), set.gold_index);
            Ok::<_, Error>(counts)
        })
        .try_reduce(HitCounts::default, |a, b| Ok(a.merge(b)))?;
    let mut report = EvalReport::from_counts(counts, common_k(sets));
    report.model = "tfidf".into();
    Ok(report)
}

fn encode_chunked(model: &Model, seqs: &[Vec<u32>], side: Side) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<Vec<f64>>> = seqs
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            model.encode_frozen(&refs, side)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn encode_joint_chunked(model: &Model, examples: &[&Example], mode: PersonaMode) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<Vec<f64>>> = examples
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| model.encode_joint_frozen(chunk, mode))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Scores every candidate set with a frozen model.
///
/// Sequences that map to no tokens are replaced by a single UNK so every
/// candidate receives a score.
pub fn evaluate_model(
    model: &Model,
    vocab: &Vocabulary,
    examples: &[ExampleRecord],
    sets: &[CandidateSet],
    mode: PersonaMode,
) -> Result<EvalReport> {
    if model.vocab_hash() != vocab.hash() {
        return Err(Error::VocabularyMismatch { expected: model.vocab_hash().to_string(), found: vocab.hash() });
    }
    let by_id: HashMap<&str, &ExampleRecord> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut encoded: Vec<Example> = Vec::with_capacity(sets.len());
    for set in sets {
        let record = by_id
            .get(set.id.as_str())
            .ok_or_else(|| Error::Invalid(format!("candidate set {} has no matching example", set.id)))?;
        let mut example = record.to_example(vocab);
        if example.context.is_empty() {
            example.context.push(crate::text::UNK_ID);
        }
        encoded.push(example);
    }
    let refs: Vec<&Example> = encoded.iter().collect();
    let joint = encode_joint_chunked(model, &refs, mode)?;

    let mut distinct: HashMap<&TokenSeq, usize> = HashMap::new();
    let mut unique: Vec<Vec<u32>> = Vec::new();
    let mut slots: Vec<Vec<usize>> = Vec::with_capacity(sets.len());
    for set in sets {
        let row = set
            .candidates
            .iter()
            .map(|c| {
                *distinct.entry(c).or_insert_with(|| {
                    let mut ids = vocab.encode(c);
                    if ids.is_empty() {
                        ids.push(crate::text::UNK_ID);
                    }
                    unique.push(ids);
                    unique.len() - 1
                })
            })
            .collect();
        slots.push(row);
    }
    let responses = encode_chunked(model, &unique, Side::Response)?;

    let counts = sets
        .par_iter()
        .zip(&slots)
        .zip(&joint)
        .map(|((set, row), q)| {
            let scores: Vec<f64> = row.iter().map(|&i| score(q, &responses[i])).collect();
            let mut counts = HitCounts::default();
            counts.add(&scores, set.gold_index);
            counts
        })
        .reduce(HitCounts::default, HitCounts::merge);
    let mut report = EvalReport::from_counts(counts, common_k(sets));
    report.persona_mode = Some(mode);
    Ok(report)
}

/// Percentage of examples whose own response scores first among all the
/// given examples' responses.
pub fn full_ranking_hits_at_1(model: &Model, examples: &[Example], mode: PersonaMode) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let joint = encode_joint_chunked(model, &refs, mode)?;
    let responses: Vec<Vec<u32>> = examples.iter().map(|e| e.response.clone()).collect();
    let encoded = encode_chunked(model, &responses, Side::Response)?;
    let hits: usize = joint
        .par_iter()
        .enumerate()
        .filter(|(i, q)| {
            let scores: Vec<f64> = encoded.iter().map(|r| score(q, r)).collect();
            gold_rank(&scores, *i) == 0
        })
        .count();
    Ok(100.0 * hits as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setup: String,
    pub cap: usize,
    pub hits_at_1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub warnings: Vec<String>,
}

impl AblationTable {
    /// Builds rows from `(setup, cap, report)`; missing reports become
    /// warnings instead of rows.
    pub fn from_reports(entries: Vec<(String, usize, Option<EvalReport>)>) -> Self {
        let mut table = AblationTable::default();
        for (setup, cap, report) in entries {
            match report {
                Some(report) => table.rows.push(AblationRow { setup, cap, hits_at_1: report.hits_at_1 }),
                None => table.warnings.push(format!("no checkpoint for setup {setup} (N={cap}), row omitted")),
            }
        }
        table
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>5} {:>8}", "persona setup", "N", "hits@1");
        for row in &self.rows {
            let _ = writeln!(out, "{:<22} {:>5} {:>8.2}", row.setup, row.cap, row.hits_at_1);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn record(id: &str, context: &str, response: &str) -> ExampleRecord {
        ExampleRecord {
            persona: Vec::new(),
            context: tokenize(context),
            response: tokenize(response),
            responder: format!("u-{id}"),
            id: id.into(),
        }
    }

    fn toy(n: usize) -> Vec<ExampleRecord> {
        (0..n).map(|i| record(&format!("e{i}"), &format!("context {i}"), &format!("reply number {i}"))).collect()
    }

    #[test]
    fn hits_cases() {
        assert!(hits_at_k(&[0.1, 0.9, 0.3], 1, 1));
        let second = [0.5, 0.9, 0.7];
        assert!(!hits_at_k(&second, 2, 1));
        assert!(hits_at_k(&second, 2, 3));
        assert!(hits_at_k(&[1.0; 5], 0, 1));
        assert!(!hits_at_k(&[1.0; 5], 3, 1));
        assert_eq!(gold_rank(&[1.0; 5], 3), 3);
    }

    #[test]
    fn candidate_sets_are_deterministic_and_exclude_gold_copies() {
        let mut examples = toy(10);
        let sets = build_candidate_sets(&examples, 2, 4).unwrap();
        assert_eq!(sets.len(), 10);
        for (set, ex) in sets.iter().zip(&examples) {
            assert_eq!(set.candidates.len(), 2);
            assert_eq!(set.candidates[set.gold_index], ex.response);
            assert_ne!(set.candidates[1 - set.gold_index], ex.response);
        }
        assert_eq!(sets, build_candidate_sets(&examples, 2, 4).unwrap());

        examples[3].response = examples[7].response.clone();
        let sets = build_candidate_sets(&examples, 9, 1).unwrap();
        for (set, ex) in sets.iter().zip(&examples) {
            let copies = set.candidates.iter().filter(|c| **c == ex.response).count();
            assert_eq!(copies, 1);
            let distinct: HashSet<_> = set.candidates.iter().collect();
            assert_eq!(distinct.len(), 9);
        }
        assert!(build_candidate_sets(&examples, 10, 1).is_err());
    }

    #[test]
    fn gold_positions_vary() {
        let sets = build_candidate_sets(&toy(50), 10, 3).unwrap();
        let positions: HashSet<usize> = sets.iter().map(|s| s.gold_index).collect();
        assert!(positions.len() > 3);
    }

    #[test]
    fn tfidf_cases() {
        let docs = [tokenize("the cat sat"), tokenize("the dog ran"), tokenize("a bird sang")];
        let idf = IdfTable::build(&docs);
        assert_eq!(idf.documents, 3);
        assert!((idf.idf("the") - ((4.0f64 / 3.0).ln() + 1.0)).abs() < 1e-15);
        assert!((idf.idf("zebra") - (4.0f64.ln() + 1.0)).abs() < 1e-15);

        let ctx = tokenize("the cat sat");
        let cands = vec![tokenize("a bird sang"), tokenize("the cat sat"), tokenize("the dog ran")];
        let scores = tfidf_scores(&ctx, &cands, &idf);
        assert_eq!(scores[0], 0.0);
        assert!((scores[1] - 1.0).abs() < 1e-12);
        assert_eq!(tfidf_rank(&ctx, &cands, &idf), vec![1, 2, 0]);
        assert_eq!(tfidf_scores(&[], &cands, &idf), vec![0.0; 3]);
    }

    #[test]
    fn tfidf_ranking_ignores_idf_scale() {
        let docs = [tokenize("the cat sat on the mat"), tokenize("the dog ran"), tokenize("cats and dogs")];
        let idf = IdfTable::build(&docs);
        let ctx = tokenize("the cat and the dog");
        let cands: Vec<TokenSeq> = docs.to_vec();
        assert_eq!(tfidf_rank(&ctx, &cands, &idf), tfidf_rank(&ctx, &cands, &idf.scaled(7.5)));
    }

    #[test]
    fn report_and_table() {
        let mut counts = HitCounts::default();
        counts.add(&[0.1, 0.5, 0.3], 2);
        counts.add(&[0.9, 0.5, 0.3], 0);
        let report = EvalReport::from_counts(counts, 3);
        assert_eq!((report.hits_at_1, report.hits_at_3, report.hits_at_10), (50.0, 100.0, 100.0));
        assert!(report.table().contains("hits@10"));

        let table = AblationTable::from_reports(vec![
            ("rules".into(), 20, Some(report.clone())),
            ("random_from_user".into(), 20, None),
        ]);
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.warnings.len(), 1);
        assert!(table.render().contains("rules"));
    }

    #[test]
    fn candidate_file_round_trip() {
        let sets = build_candidate_sets(&toy(6), 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_candidate_sets(&path, &sets).unwrap();
        assert_eq!(load_candidate_sets(&path).unwrap(), sets);
    }
}
