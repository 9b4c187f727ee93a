//! Splits, example assembly, coverage statistics and external
//! persona-dialogue files.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::CandidateSet;
use crate::hashing::{derive_seed, Fingerprint};
use crate::ingest::ContextResponsePair;
use crate::io::{open_reader, read_json, read_jsonl, write_json, write_jsonl};
use crate::persona::{Persona, PersonaSetup};
use crate::text::{tokenize, truncate, TokenSeq, Vocabulary, DEFAULT_MAX_LEN};
use crate::{Error, Result};

/// Raw pairs assigned to train, validation and test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPairs {
    pub train: Vec<ContextResponsePair>,
    pub valid: Vec<ContextResponsePair>,
    pub test: Vec<ContextResponsePair>,
    pub seed: u64,
}

impl SplitPairs {
    /// Identifies the exact partition; personas record it so a dataset can
    /// refuse personas built from a different split.
    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprint::new();
        fp.field(&self.seed.to_string());
        for (name, part) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            fp.field(name).field(&part.len().to_string());
            for pair in part {
                fp.field(&pair.response_id);
            }
        }
        fp.finish()
    }
}

/// Seeded random split with exact validation and test sizes.
///
/// Each pair is ranked by a hash of (seed, response id); the lowest ranks go
/// to validation, then test, and the rest to train. Input order and thread
/// count cannot change the assignment.
pub fn split_pairs(
    pairs: Vec<ContextResponsePair>,
    valid_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<SplitPairs> {
    if valid_size + test_size >= pairs.len() {
        return Err(Error::Config(format!(
            "valid ({valid_size}) + test ({test_size}) must leave a non-empty train split of {} pairs",
            pairs.len()
        )));
    }
    let mut keyed: Vec<(u64, ContextResponsePair)> = pairs
        .into_iter()
        .map(|p| (derive_seed(seed, &p.response_id), p))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.response_id.cmp(&b.1.response_id)));
    let mut ranked = keyed.into_iter().map(|(_, p)| p);
    let mut take = |n: usize| {
        let mut part: Vec<ContextResponsePair> = ranked.by_ref().take(n).collect();
        part.sort_by(|a, b| a.response_id.cmp(&b.response_id));
        part
    };
    let valid = take(valid_size);
    let test = take(test_size);
    let train = take(usize::MAX);
    Ok(SplitPairs { train, valid, test, seed })
}

/// One example in its stored token form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub persona: Vec<TokenSeq>,
    pub context: TokenSeq,
    pub response: TokenSeq,
    pub responder: String,
    pub id: String,
}

/// One example mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub persona: Vec<Vec<u32>>,
    pub context: Vec<u32>,
    pub response: Vec<u32>,
    pub responder: String,
    pub id: String,
}

impl ExampleRecord {
    pub fn to_example(&self, vocab: &Vocabulary) -> Example {
        Example {
            persona: self.persona.iter().map(|s| vocab.encode(s)).collect(),
            context: vocab.encode(&self.context),
            response: vocab.encode(&self.response),
            responder: self.responder.clone(),
            id: self.id.clone(),
        }
    }
}

pub fn to_examples(records: &[ExampleRecord], vocab: &Vocabulary) -> Vec<Example> {
    records.iter().map(|r| r.to_example(vocab)).collect()
}

/// Examples with every persona removed.
pub fn without_personas(examples: &[Example]) -> Vec<Example> {
    examples
        .iter()
        .map(|e| Example { persona: Vec::new(), ..e.clone() })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AssembledDataset {
    pub train: Vec<ExampleRecord>,
    pub valid: Vec<ExampleRecord>,
    pub test: Vec<ExampleRecord>,
    /// Pairs whose context or response tokenized to nothing.
    pub dropped: usize,
}

impl AssembledDataset {
    pub fn part(&self, name: &str) -> Option<&[ExampleRecord]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Joins pairs with their responder's persona.
///
/// `persona_split_fingerprint` is the fingerprint recorded when the persona
/// store was built; it must match this split.
pub fn assemble(
    split: &SplitPairs,
    personas: &BTreeMap<String, Persona>,
    persona_split_fingerprint: &str,
    max_len: usize,
) -> Result<AssembledDataset> {
    let expected = split.fingerprint();
    if persona_split_fingerprint != expected {
        return Err(Error::Leakage(format!(
            "persona store was built from split {persona_split_fingerprint}, dataset split is {expected}"
        )));
    }
    let mut dataset = AssembledDataset::default();
    let mut convert = |pairs: &[ContextResponsePair]| -> Vec<ExampleRecord> {
        let mut out = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let context = truncate(&tokenize(&pair.context_text), max_len);
            let response = truncate(&tokenize(&pair.response_text), max_len);
            if context.is_empty() || response.is_empty() {
                dataset.dropped += 1;
                continue;
            }
            let persona = personas
                .get(&pair.responder)
                .map(|p| p.sentences.clone())
                .unwrap_or_default();
            out.push(ExampleRecord {
                persona,
                context,
                response,
                responder: pair.responder.clone(),
                id: pair.response_id.clone(),
            });
        }
        out
    };
    let train = convert(&split.train);
    let valid = convert(&split.valid);
    let test = convert(&split.test);
    dataset.train = train;
    dataset.valid = valid;
    dataset.test = test;
    Ok(dataset)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coverage {
    Stats {
        persona_coverage: f64,
        users_with_persona: usize,
        mean_persona_len: f64,
        examples: usize,
    },
    Empty { empty: bool },
}

/// Fraction of examples whose responder has a non-empty persona.
///
/// `mean_persona_len` averages the sentence count over all examples.
pub fn coverage_stats(examples: &[ExampleRecord]) -> Coverage {
    if examples.is_empty() {
        return Coverage::Empty { empty: true };
    }
    let with_persona = examples.iter().filter(|e| !e.persona.is_empty()).count();
    let mut users: Vec<&str> = examples
        .iter()
        .filter(|e| !e.persona.is_empty())
        .map(|e| e.responder.as_str())
        .collect();
    users.sort_unstable();
    users.dedup();
    let total_len: usize = examples.iter().map(|e| e.persona.len()).sum();
    Coverage::Stats {
        persona_coverage: with_persona as f64 / examples.len() as f64,
        users_with_persona: users.len(),
        mean_persona_len: total_len as f64 / examples.len() as f64,
        examples: examples.len(),
    }
}

/// Provenance recorded next to the dataset shards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub sizes: BTreeMap<String, usize>,
    pub vocab_hash: String,
    pub persona_setup: PersonaSetup,
    pub persona_cap: usize,
    pub threshold: f64,
    pub split_fingerprint: String,
    pub persona_store_hash: String,
    pub max_len: usize,
    pub dropped: usize,
    pub shards: BTreeMap<String, Vec<String>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes sharded JSONL plus the manifest; `manifest.shards` and
/// `manifest.sizes` are filled in here.
pub fn save_dataset(
    dir: &Path,
    dataset: &AssembledDataset,
    mut manifest: DatasetManifest,
    shard_size: usize,
) -> Result<DatasetManifest> {
    let shard_size = shard_size.max(1);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.shards.clear();
    manifest.sizes.clear();
    for name in ["train", "valid", "test"] {
        let part = dataset.part(name).expect("known split");
        let mut files = Vec::new();
        for (index, chunk) in part.chunks(shard_size).enumerate() {
            let file = format!("{name}-{index:05}.jsonl");
            write_jsonl(&dir.join(&file), chunk)?;
            files.push(file);
        }
        if files.is_empty() {
            let file = format!("{name}-00000.jsonl");
            write_jsonl::<ExampleRecord, _>(&dir.join(&file), &[])?;
            files.push(file);
        }
        manifest.sizes.insert(name.to_string(), part.len());
        manifest.shards.insert(name.to_string(), files);
    }
    manifest.dropped = dataset.dropped;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

/// Loads one split ("train", "valid" or "test") from a dataset directory.
pub fn load_split(dir: &Path, name: &str) -> Result<Vec<ExampleRecord>> {
    let manifest = load_manifest(dir)?;
    let files = manifest
        .shards
        .get(name)
        .ok_or_else(|| Error::Config(format!("dataset has no split {name:?}")))?;
    let mut records = Vec::new();
    for file in files {
        records.extend(read_jsonl::<ExampleRecord>(&dir.join(file))?);
    }
    Ok(records)
}

/// A line of an external persona-dialogue file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExternalRecord {
    pub persona: Vec<String>,
    pub context: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Parsed external dialogues: every valid line becomes an example, and lines
/// with candidates also yield a fixed candidate set.
#[derive(Clone, Debug, Default)]
pub struct ExternalDataset {
    pub examples: Vec<ExampleRecord>,
    pub candidate_sets: Vec<CandidateSet>,
    pub errors: Vec<LineError>,
}

/// Reads the normalized external persona-dialogue JSONL format.
///
/// Bad lines are collected with their line numbers; more than 1% bad lines
/// aborts the load.
pub fn load_external_persona_dialogues(path: &Path, candidate_count: usize) -> Result<ExternalDataset> {
    let reader = open_reader(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "external".into());
    let mut out = ExternalDataset::default();
    let mut lines = 0usize;
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        let number = index + 1;
        match parse_external_line(&line, candidate_count) {
            Ok((record, candidates)) => {
                let id = format!("{stem}-{number:07}");
                let example = ExampleRecord {
                    persona: record.0,
                    context: record.1,
                    response: record.2,
                    responder: format!("{stem}-speaker-{number:07}"),
                    id: id.clone(),
                };
                if let Some((candidates, gold_index)) = candidates {
                    out.candidate_sets.push(CandidateSet { id, candidates, gold_index });
                }
                out.examples.push(example);
            }
            Err(message) => out.errors.push(LineError { line: number, message }),
        }
    }
    if out.errors.len() * 100 > lines {
        let first = &out.errors[0];
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: first.line,
            message: format!(
                "{} of {lines} lines invalid (more than 1%); first: {}",
                out.errors.len(),
                first.message
            ),
        });
    }
    Ok(out)
}

type ParsedExternal = ((Vec<TokenSeq>, TokenSeq, TokenSeq), Option<(Vec<TokenSeq>, usize)>);

fn parse_external_line(line: &str, candidate_count: usize) -> Result<ParsedExternal, String> {
    let record: ExternalRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let encode = |text: &str| truncate(&tokenize(text), DEFAULT_MAX_LEN);
    let context = encode(&record.context);
    let response = encode(&record.response);
    if context.is_empty() || response.is_empty() {
        return Err("context and response must contain tokens".into());
    }
    let persona: Vec<TokenSeq> = record
        .persona
        .iter()
        .map(|s| encode(s))
        .filter(|s| !s.is_empty())
        .collect();
    let candidates = match record.candidates {
        None => None,
        Some(raw) => {
            if raw.len() != candidate_count {
                return Err(format!("expected {candidate_count} candidates, found {}", raw.len()));
            }
            let candidates: Vec<TokenSeq> = raw.iter().map(|c| encode(c)).collect();
            if candidates.iter().any(|c| c.is_empty()) {
                return Err("empty candidate".into());
            }
            let gold = candidates
                .iter()
                .position(|c| *c == response)
                .ok_or("gold response is not among the candidates")?;
            Some((candidates, gold))
        }
    };
    Ok(((persona, context, response), candidates))
}

/// Paths of all shard files for a split, for hashing.
pub fn shard_paths(dir: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    manifest
        .shards
        .values()
        .flatten()
        .map(|f| dir.join(f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(n: usize) -> Vec<ContextResponsePair> {
        (0..n)
            .map(|i| ContextResponsePair {
                context_text: format!("context number {i}"),
                response_text: format!("response number {i}"),
                responder: format!("user{}", i % 7),
                response_id: format!("t1_{i:05}"),
            })
            .collect()
    }

    #[test]
    fn split_sizes_disjointness_and_determinism() {
        let split = split_pairs(pairs(1000), 100, 100, 3).unwrap();
        assert_eq!((split.train.len(), split.valid.len(), split.test.len()), (800, 100, 100));
        let mut ids: Vec<&str> = split
            .train
            .iter()
            .chain(&split.valid)
            .chain(&split.test)
            .map(|p| p.response_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 1000);

        let again = split_pairs(pairs(1000), 100, 100, 3).unwrap();
        assert_eq!(split, again);
        let mut reversed = pairs(1000);
        reversed.reverse();
        assert_eq!(split_pairs(reversed, 100, 100, 3).unwrap(), split);
        assert_ne!(split_pairs(pairs(1000), 100, 100, 4).unwrap().fingerprint(), split.fingerprint());

        assert!(split_pairs(pairs(10), 5, 5, 1).is_err());
    }

    fn persona(user: &str, sentences: &[&str]) -> (String, Persona) {
        (
            user.to_string(),
            Persona {
                user: user.to_string(),
                setup: PersonaSetup::Rules,
                sentences: sentences.iter().map(|s| tokenize(s)).collect(),
            },
        )
    }

    #[test]
    fn assembly_joins_personas_and_checks_fingerprint() {
        let split = split_pairs(pairs(50), 5, 5, 1).unwrap();
        let personas: BTreeMap<String, Persona> = [persona("user0", &["i like sport ."])].into_iter().collect();
        let dataset = assemble(&split, &personas, &split.fingerprint(), 100).unwrap();
        assert_eq!(dataset.train.len() + dataset.valid.len() + dataset.test.len(), 50);
        for example in dataset.train.iter().chain(&dataset.test) {
            if example.responder == "user0" {
                assert_eq!(example.persona, vec![tokenize("i like sport .")]);
            } else {
                assert!(example.persona.is_empty());
            }
        }
        let other = split_pairs(pairs(50), 5, 5, 2).unwrap();
        let err = assemble(&split, &personas, &other.fingerprint(), 100).unwrap_err();
        assert!(matches!(err, Error::Leakage(_)));
    }

    #[test]
    fn assembly_truncates_long_comments() {
        let mut long = pairs(3);
        long[0].response_text = (0..150).map(|i| format!("w{i} ")).collect();
        let split = split_pairs(long, 1, 1, 9).unwrap();
        let dataset = assemble(&split, &BTreeMap::new(), &split.fingerprint(), 100).unwrap();
        let all: Vec<&ExampleRecord> = dataset.train.iter().chain(&dataset.valid).chain(&dataset.test).collect();
        assert!(all.iter().any(|e| e.response.len() == 100));
        assert!(all.iter().all(|e| e.response.len() <= 100));
    }

    fn record(persona_len: usize, user: &str) -> ExampleRecord {
        ExampleRecord {
            persona: vec![tokenize("i run ."); persona_len],
            context: tokenize("hi"),
            response: tokenize("hello"),
            responder: user.to_string(),
            id: format!("{user}-{persona_len}"),
        }
    }

    #[test]
    fn coverage() {
        let all: Vec<ExampleRecord> = (0..4).map(|i| record(2, &format!("u{i}"))).collect();
        match coverage_stats(&all) {
            Coverage::Stats { persona_coverage, users_with_persona, mean_persona_len, .. } => {
                assert_eq!(persona_coverage, 1.0);
                assert_eq!(users_with_persona, 4);
                assert_eq!(mean_persona_len, 2.0);
            }
            other => panic!("{other:?}"),
        }
        let mixed: Vec<ExampleRecord> = (0..100).map(|i| record(usize::from(i < 97), "u")).collect();
        let Coverage::Stats { persona_coverage, .. } = coverage_stats(&mixed) else { panic!() };
        assert_eq!(persona_coverage, 0.97);
        assert_eq!(coverage_stats(&[]), Coverage::Empty { empty: true });
        assert_eq!(serde_json::to_string(&coverage_stats(&[])).unwrap(), r#"{"empty":true}"#);
    }

    #[test]
    fn dataset_shards_round_trip() {
        let split = split_pairs(pairs(40), 4, 4, 1).unwrap();
        let dataset = assemble(&split, &BTreeMap::new(), &split.fingerprint(), 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            seed: 1,
            sizes: BTreeMap::new(),
            vocab_hash: "v".into(),
            persona_setup: PersonaSetup::Rules,
            persona_cap: 100,
            threshold: 0.5,
            split_fingerprint: split.fingerprint(),
            persona_store_hash: "p".into(),
            max_len: 100,
            dropped: 0,
            shards: BTreeMap::new(),
        };
        let written = save_dataset(dir.path(), &dataset, manifest, 10).unwrap();
        assert_eq!(written.shards["train"].len(), 4);
        assert_eq!(load_split(dir.path(), "train").unwrap(), dataset.train);
        assert_eq!(load_split(dir.path(), "test").unwrap(), dataset.test);
        assert_eq!(load_manifest(dir.path()).unwrap(), written);
    }

    #[test]
    fn token_ids_round_trip_through_vocabulary() {
        let example = ExampleRecord {
            persona: vec![tokenize("i like sport .")],
            context: tokenize("I love running."),
            response: tokenize("Me too! But only on weekends."),
            responder: "u".into(),
            id: "x".into(),
        };
        let corpus = [example.context.clone(), example.response.clone(), example.persona[0].clone()];
        let vocab = crate::text::build_vocabulary(&corpus, 100).unwrap();
        let ids = example.to_example(&vocab);
        assert_eq!(vocab.decode(&ids.context), example.context.tokens());
        assert_eq!(vocab.decode(&ids.response), example.response.tokens());
        assert_eq!(vocab.decode(&ids.persona[0]), example.persona[0].tokens());
    }

    fn external_line(with_candidates: bool, include_gold: bool) -> String {
        let mut candidates: Vec<String> = (0..19).map(|i| format!("distractor {i}")).collect();
        if include_gold {
            candidates.insert(7, "I am a nurse.".into());
        } else {
            candidates.push("something else".into());
        }
        let record = ExternalRecord {
            persona: vec!["I work nights.".into(), "I have a cat.".into(), "I like tea.".into(), "I am tall.".into()],
            context: "What do you do?".into(),
            response: "I am a nurse.".into(),
            candidates: with_candidates.then_some(candidates),
        };
        serde_json::to_string(&record).unwrap()
    }

    #[test]
    fn external_dialogues() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pc.jsonl");
        std::fs::write(&path, format!("{}\n{}\n", external_line(true, true), external_line(false, true))).unwrap();
        let data = load_external_persona_dialogues(&path, 20).unwrap();
        assert_eq!(data.examples.len(), 2);
        assert_eq!(data.examples[0].persona.len(), 4);
        assert_eq!(data.candidate_sets.len(), 1);
        let set = &data.candidate_sets[0];
        assert_eq!(set.candidates.len(), 20);
        assert_eq!(set.gold_index, 7);
        assert_eq!(set.candidates[7], data.examples[0].response);
        assert_eq!(set.id, data.examples[0].id);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, format!("{}\n", external_line(true, false))).unwrap();
        let err = load_external_persona_dialogues(&bad, 20).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");

        // one bad line in two hundred is tolerated and reported
        let mut text = String::new();
        for i in 0..200 {
            text.push_str(&if i == 50 { "{oops".to_string() } else { external_line(true, true) });
            text.push('\n');
        }
        let mostly = dir.path().join("mostly.jsonl");
        std::fs::write(&mostly, text).unwrap();
        let data = load_external_persona_dialogues(&mostly, 20).unwrap();
        assert_eq!(data.examples.len(), 199);
        assert_eq!(data.errors, vec![LineError { line: 51, message: data.errors[0].message.clone() }]);
    }
}
