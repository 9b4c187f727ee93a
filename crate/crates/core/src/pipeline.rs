//! The staged on-disk pipeline.
//!
//! Every stage writes its outputs plus a manifest next to the primary
//! output (`<output>.manifest.json`). A stage that consumes another stage's
//! artifact first re-hashes it and compares against that manifest, so a
//! modified or foreign artifact is refused instead of silently used.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{
    assemble, coverage_stats, load_external_persona_dialogues, load_manifest, load_split, save_dataset,
    split_pairs, to_examples, DatasetManifest, ExampleRecord, SplitPairs,
};
use crate::eval::{
    build_candidate_sets, evaluate_model, evaluate_tfidf, load_candidate_sets, save_candidate_sets, AblationTable,
    CandidateSet, EvalReport, IdfTable,
};
use crate::hashing::{derive_seed, file_sha256, sha256_hex, Fingerprint};
use crate::ingest::{pair_successive, read_dump, ContextResponsePair, IngestStats};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::model::{Arch, EncoderConfig, Model, PersonaMode};
use crate::persona::{
    build_personas, collect_user_sentences, leakage_audit, load_personas, save_personas, train_persona_classifier,
    ClassifierConfig, PersonaClassifier, PersonaConfig, PersonaSetup,
};
use crate::pos::LexiconTagger;
use crate::text::{build_vocabulary, tokenize, TokenSeq, Vocabulary, DEFAULT_MAX_LEN};
use crate::training::{fine_tune, init_embeddings, train, TrainConfig, TrainOutputs};
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const MANIFEST_SUFFIX: &str = ".manifest.json";
const SPLIT_INFO: &str = "split.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub stage: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub config_hash: String,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wall_ms: u64,
    #[serde(default)]
    pub summary: Value,
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_os_string();
    name.push(MANIFEST_SUFFIX);
    PathBuf::from(name)
}

/// Content hash of a file, or of a directory's regular files by relative
/// name (manifests excluded).
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return file_sha256(path);
    }
    let mut names: Vec<String> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .filter(|name| !name.ends_with(MANIFEST_SUFFIX))
        .collect();
    names.sort();
    let mut fp = Fingerprint::new();
    for name in names {
        let hash = file_sha256(&path.join(&name))?;
        fp.field(&name).field(&hash);
    }
    Ok(fp.finish())
}

fn artifact(path: &Path) -> Result<Artifact> {
    Ok(Artifact { path: path.display().to_string(), sha256: hash_path(path)? })
}

/// Loads the manifest of a pipeline artifact and checks the artifact still
/// has the recorded hash and came from `stage`.
pub fn verify_artifact(path: &Path, stage: &str) -> Result<(Artifact, PipelineManifest)> {
    let mpath = manifest_path(path);
    if !mpath.exists() {
        return Err(Error::Provenance(format!(
            "{} has no manifest ({}); it was not produced by the pipeline",
            path.display(),
            mpath.display()
        )));
    }
    let manifest: PipelineManifest = read_json(&mpath)?;
    if manifest.stage != stage {
        return Err(Error::Provenance(format!(
            "{} was produced by stage {:?}, expected {stage:?}",
            path.display(),
            manifest.stage
        )));
    }
    let current = artifact(path)?;
    let recorded = manifest
        .outputs
        .first()
        .ok_or_else(|| Error::Provenance(format!("{} lists no outputs", mpath.display())))?;
    if recorded.sha256 != current.sha256 {
        return Err(Error::Provenance(format!(
            "{} changed since stage {stage:?} wrote it (recorded {}, found {})",
            path.display(),
            recorded.sha256,
            current.sha256
        )));
    }
    Ok((current, manifest))
}

struct StageRun {
    stage: &'static str,
    started: Instant,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<Artifact>,
}

impl StageRun {
    fn new(stage: &'static str, seed: Option<u64>, config: Value) -> Self {
        StageRun { stage, started: Instant::now(), seed, config, inputs: Vec::new() }
    }

    fn input(&mut self, artifact: Artifact) {
        self.inputs.push(artifact);
    }

    fn raw_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(artifact(path)?);
        Ok(())
    }

    /// Writes the manifest beside `outputs[0]`.
    fn finish(self, outputs: &[&Path], summary: Value) -> Result<PipelineManifest> {
        let outputs = outputs.iter().map(|p| artifact(p)).collect::<Result<Vec<_>>>()?;
        let config_hash = sha256_hex(serde_json::to_string(&self.config)?.as_bytes());
        let manifest = PipelineManifest {
            stage: self.stage.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            seed: self.seed,
            config: self.config,
            config_hash,
            inputs: self.inputs,
            outputs,
            wall_ms: self.started.elapsed().as_millis() as u64,
            summary,
        };
        write_json(&manifest_path(Path::new(&manifest.outputs[0].path)), &manifest)?;
        Ok(manifest)
    }
}

/// Parses dump shards and pairs each comment with its parent.
pub fn ingest(dumps: &[PathBuf], out: &Path) -> Result<PipelineManifest> {
    if dumps.is_empty() {
        return Err(Error::Config("ingest needs at least one dump file".into()));
    }
    let mut run = StageRun::new("ingest", None, json!({ "dumps": dumps.len() }));
    for dump in dumps {
        run.raw_input(dump)?;
    }
    let ingest = read_dump(dumps)?;
    let mut stats: IngestStats = ingest.stats;
    let pairs = pair_successive(&ingest.comments, &mut stats);
    write_jsonl(out, &pairs)?;
    run.finish(&[out], serde_json::to_value(&stats)?)
}

fn load_pairs(path: &Path) -> Result<(Artifact, Vec<ContextResponsePair>)> {
    let (art, _) = verify_artifact(path, "ingest")?;
    Ok((art, read_jsonl(path)?))
}

/// Frequency-capped vocabulary over every context and response.
pub fn build_vocab(pairs_path: &Path, out: &Path, cap: usize) -> Result<PipelineManifest> {
    let mut run = StageRun::new("build-vocab", None, json!({ "cap": cap }));
    let (art, pairs) = load_pairs(pairs_path)?;
    run.input(art);
    let seqs: Vec<TokenSeq> = pairs
        .par_iter()
        .flat_map_iter(|p| [tokenize(&p.context_text), tokenize(&p.response_text)])
        .collect();
    let vocab = build_vocabulary(&seqs, cap)?;
    vocab.save(out)?;
    run.finish(&[out], json!({ "size": vocab.size(), "hash": vocab.hash() }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SplitInfo {
    seed: u64,
    fingerprint: String,
    sizes: BTreeMap<String, usize>,
}

/// Seeded train/valid/test split of the pairs.
pub fn split(pairs_path: &Path, out_dir: &Path, valid: usize, test: usize, seed: u64) -> Result<PipelineManifest> {
    let mut run = StageRun::new("split", Some(seed), json!({ "valid": valid, "test": test }));
    let (art, pairs) = load_pairs(pairs_path)?;
    run.input(art);
    let parts = split_pairs(pairs, valid, test, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut sizes = BTreeMap::new();
    for (name, part) in [("train", &parts.train), ("valid", &parts.valid), ("test", &parts.test)] {
        write_jsonl(&out_dir.join(format!("{name}.jsonl")), part)?;
        sizes.insert(name.to_string(), part.len());
    }
    let info = SplitInfo { seed, fingerprint: parts.fingerprint(), sizes };
    write_json(&out_dir.join(SPLIT_INFO), &info)?;
    run.finish(&[out_dir], serde_json::to_value(&info)?)
}

/// Reads a split directory back, checking provenance and fingerprint.
pub fn load_split_dir(dir: &Path) -> Result<(Artifact, SplitPairs)> {
    let (art, _) = verify_artifact(dir, "split")?;
    let info: SplitInfo = read_json(&dir.join(SPLIT_INFO))?;
    let parts = SplitPairs {
        train: read_jsonl(&dir.join("train.jsonl"))?,
        valid: read_jsonl(&dir.join("valid.jsonl"))?,
        test: read_jsonl(&dir.join("test.jsonl"))?,
        seed: info.seed,
    };
    if parts.fingerprint() != info.fingerprint {
        return Err(Error::Provenance(format!("{} does not match its recorded fingerprint", dir.display())));
    }
    Ok((art, parts))
}

fn load_vocab(path: &Path) -> Result<(Artifact, Vocabulary)> {
    let (art, _) = verify_artifact(path, "build-vocab")?;
    Ok((art, Vocabulary::load(path)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierInput {
    pub classifier: PathBuf,
    pub vocab: PathBuf,
}

/// Builds the persona store from training responses only; sentences equal
/// to a held-out response of the same user are removed.
pub fn extract_personas(
    split_dir: &Path,
    out: &Path,
    config: &PersonaConfig,
    classifier: Option<&ClassifierInput>,
) -> Result<PipelineManifest> {
    let (split_art, parts) = load_split_dir(split_dir)?;
    let fingerprint = parts.fingerprint();
    let mut run = StageRun::new(
        "extract-personas",
        Some(config.seed),
        json!({
            "setup": config.setup,
            "cap": config.cap,
            "threshold": config.threshold,
            "split_fingerprint": fingerprint,
        }),
    );
    run.input(split_art);
    let loaded = match classifier {
        Some(input) => {
            let (vocab_art, vocab) = load_vocab(&input.vocab)?;
            let (clf_art, _) = verify_artifact(&input.classifier, "train-classifier")?;
            run.input(vocab_art);
            run.input(clf_art);
            let clf = PersonaClassifier::load(&input.classifier, &vocab)?;
            Some((clf, vocab))
        }
        None => None,
    };
    let users = collect_user_sentences(&parts.train);
    let tagger = LexiconTagger::shipped();
    let mut personas = build_personas(&users, config, &tagger, loaded.as_ref().map(|(c, v)| (c, v)))?;
    let held_out: Vec<ContextResponsePair> = parts.valid.iter().chain(&parts.test).cloned().collect();
    let leaks = leakage_audit(&personas, &held_out);
    let mut removed = 0usize;
    for (user, response_id) in &leaks {
        let response = held_out
            .iter()
            .find(|p| &p.response_id == response_id)
            .map(|p| tokenize(&p.response_text))
            .expect("audit reports known pairs");
        if let Some(persona) = personas.get_mut(user) {
            let before = persona.sentences.len();
            persona.sentences.retain(|s| *s != response);
            removed += before - persona.sentences.len();
        }
    }
    save_personas(out, &personas)?;
    let with_persona = personas.values().filter(|p| !p.sentences.is_empty()).count();
    run.finish(
        &[out],
        json!({ "users": personas.len(), "users_with_persona": with_persona, "leaked_sentences_removed": removed }),
    )
}

/// Persona sentences from an external dialogue file (the `persona` field).
fn external_persona_sentences(path: &Path) -> Result<Vec<TokenSeq>> {
    let data = load_external_persona_dialogues(path, 0)?;
    let mut sentences: Vec<TokenSeq> = data.examples.into_iter().flat_map(|e| e.persona).collect();
    sentences.sort();
    sentences.dedup();
    Ok(sentences)
}

/// Trains the persona classifier: positives are persona sentences from an
/// external dialogue file, negatives an equal-sized seeded sample of
/// training-response sentences.
pub fn train_classifier(
    positives_path: &Path,
    split_dir: &Path,
    vocab_path: &Path,
    out: &Path,
    config: &ClassifierConfig,
) -> Result<PipelineManifest> {
    let mut run = StageRun::new("train-classifier", Some(config.seed), serde_json::to_value(config)?);
    run.raw_input(positives_path)?;
    let (split_art, parts) = load_split_dir(split_dir)?;
    let (vocab_art, vocab) = load_vocab(vocab_path)?;
    run.input(split_art);
    run.input(vocab_art);
    let positives = external_persona_sentences(positives_path)?;
    let pool: Vec<TokenSeq> = collect_user_sentences(&parts.train).into_values().flatten().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "classifier-negatives"));
    let n = positives.len().min(pool.len());
    let mut picked = sample(&mut rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    let negatives: Vec<TokenSeq> = picked.into_iter().map(|i| pool[i].clone()).collect();
    let (clf, report) = train_persona_classifier(&positives, &negatives, &vocab, config)?;
    clf.save(out)?;
    run.finish(&[out], serde_json::to_value(report)?)
}

/// Joins split pairs with the persona store into sharded examples.
pub fn build_dataset(
    split_dir: &Path,
    personas_path: &Path,
    vocab_path: &Path,
    out_dir: &Path,
    max_len: usize,
    shard_size: usize,
) -> Result<PipelineManifest> {
    let mut run = StageRun::new("build-dataset", None, json!({ "max_len": max_len, "shard_size": shard_size }));
    let (split_art, parts) = load_split_dir(split_dir)?;
    let (persona_art, persona_manifest) = verify_artifact(personas_path, "extract-personas")?;
    let (vocab_art, vocab) = load_vocab(vocab_path)?;
    run.input(split_art);
    run.input(persona_art.clone());
    run.input(vocab_art);
    let cfg = &persona_manifest.config;
    let persona_fingerprint = cfg["split_fingerprint"].as_str().unwrap_or_default();
    let personas = load_personas(personas_path)?;
    let dataset = assemble(&parts, &personas, persona_fingerprint, max_len)?;
    let manifest = DatasetManifest {
        seed: parts.seed,
        sizes: BTreeMap::new(),
        vocab_hash: vocab.hash(),
        persona_setup: serde_json::from_value(cfg["setup"].clone())?,
        persona_cap: cfg["cap"].as_u64().unwrap_or(0) as usize,
        threshold: cfg["threshold"].as_f64().unwrap_or(0.0),
        split_fingerprint: parts.fingerprint(),
        persona_store_hash: persona_art.sha256,
        max_len,
        dropped: 0,
        shards: BTreeMap::new(),
    };
    let manifest = save_dataset(out_dir, &dataset, manifest, shard_size)?;
    run.finish(&[out_dir], json!({ "sizes": manifest.sizes, "dropped": manifest.dropped }))
}

fn load_dataset_split(dir: &Path, name: &str) -> Result<(Artifact, DatasetManifest, Vec<ExampleRecord>)> {
    let (art, _) = verify_artifact(dir, "build-dataset")?;
    Ok((art, load_manifest(dir)?, load_split(dir, name)?))
}

/// Candidate sets for one dataset split.
pub fn candidates(dataset_dir: &Path, split_name: &str, k: usize, seed: u64, out: &Path) -> Result<PipelineManifest> {
    let mut run = StageRun::new("candidates", Some(seed), json!({ "split": split_name, "k": k }));
    let (art, _, records) = load_dataset_split(dataset_dir, split_name)?;
    run.input(art);
    let sets = build_candidate_sets(&records, k, seed)?;
    save_candidate_sets(out, &sets)?;
    run.finish(&[out], json!({ "sets": sets.len() }))
}

/// Hyperparameters as they appear in a JSON config file; every key optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Option<Arch>,
    pub layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub embed_dim: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub persona_setup: Option<PersonaSetup>,
    pub persona_cap: Option<usize>,
    pub pretrained_embeddings_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Fields of `over` win over `self`.
    pub fn merged_under(self, over: RunConfig) -> RunConfig {
        RunConfig {
            arch: over.arch.or(self.arch),
            layers: over.layers.or(self.layers),
            hidden_dim: over.hidden_dim.or(self.hidden_dim),
            heads: over.heads.or(self.heads),
            dropout: over.dropout.or(self.dropout),
            embed_dim: over.embed_dim.or(self.embed_dim),
            batch_size: over.batch_size.or(self.batch_size),
            lr: over.lr.or(self.lr),
            epochs: over.epochs.or(self.epochs),
            seed: over.seed.or(self.seed),
            persona_setup: over.persona_setup.or(self.persona_setup),
            persona_cap: over.persona_cap.or(self.persona_cap),
            pretrained_embeddings_path: over.pretrained_embeddings_path.or(self.pretrained_embeddings_path),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Full,
    FineTune,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            "finetune" | "fine_tune" => Ok(Preset::FineTune),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected desk, full or finetune)"))),
        }
    }
}

/// Fully resolved model and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub preset: Preset,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub persona_setup: PersonaSetup,
    pub persona_cap: usize,
    pub pretrained_embeddings_path: Option<PathBuf>,
}

/// Preset defaults, overridden by the config file, overridden by flags.
pub fn resolve_run(preset: Preset, file: Option<RunConfig>, flags: RunConfig) -> Result<ResolvedRun> {
    let merged = file.unwrap_or_default().merged_under(flags);
    let arch = merged.arch.unwrap_or(Arch::Transformer);
    let mut model = match preset {
        Preset::Desk => EncoderConfig::desk(arch),
        Preset::Full => EncoderConfig::full_scale(arch),
        Preset::FineTune => EncoderConfig::fine_tune(arch),
    };
    let mut train = match preset {
        Preset::Full => TrainConfig::full_scale(),
        _ => TrainConfig::default(),
    };
    model.layers = merged.layers.unwrap_or(model.layers);
    model.hidden_dim = merged.hidden_dim.unwrap_or(model.hidden_dim);
    model.heads = merged.heads.unwrap_or(model.heads);
    model.dropout = merged.dropout.unwrap_or(model.dropout);
    model.embed_dim = merged.embed_dim.unwrap_or(model.embed_dim);
    train.batch_size = merged.batch_size.unwrap_or(train.batch_size);
    train.lr = merged.lr.unwrap_or(train.lr);
    train.epochs = merged.epochs.unwrap_or(train.epochs);
    train.seed = merged.seed.unwrap_or(train.seed);
    model.validate()?;
    train.validate()?;
    Ok(ResolvedRun {
        preset,
        model,
        train,
        persona_setup: merged.persona_setup.unwrap_or(PersonaSetup::Rules),
        persona_cap: merged.persona_cap.unwrap_or(20),
        pretrained_embeddings_path: merged.pretrained_embeddings_path,
    })
}

fn encoded_split(records: &[ExampleRecord], vocab: &Vocabulary) -> Vec<crate::dataset::Example> {
    to_examples(records, vocab)
        .into_iter()
        .filter(|e| !e.context.is_empty() && !e.response.is_empty())
        .collect()
}

/// Trains a model on a dataset directory.
pub fn train_stage(
    dataset_dir: &Path,
    vocab_path: &Path,
    out_dir: &Path,
    run_cfg: &ResolvedRun,
) -> Result<PipelineManifest> {
    let mut run = StageRun::new("train", Some(run_cfg.train.seed), serde_json::to_value(run_cfg)?);
    let (data_art, manifest, train_records) = load_dataset_split(dataset_dir, "train")?;
    let valid_records = load_split(dataset_dir, "valid")?;
    let (vocab_art, vocab) = load_vocab(vocab_path)?;
    run.input(data_art);
    run.input(vocab_art);
    if manifest.vocab_hash != vocab.hash() {
        return Err(Error::VocabularyMismatch { expected: manifest.vocab_hash, found: vocab.hash() });
    }
    let mut model = Model::new(run_cfg.model.clone(), vocab.size(), &vocab.hash(), run_cfg.train.seed)?;
    if let Some(path) = &run_cfg.pretrained_embeddings_path {
        run.raw_input(path)?;
        model.set_embeddings(init_embeddings(&vocab, run_cfg.model.embed_dim, run_cfg.train.seed, Some(path))?)?;
    }
    let outputs = TrainOutputs { dir: out_dir.to_path_buf() };
    let summary = train(
        &mut model,
        &encoded_split(&train_records, &vocab),
        &encoded_split(&valid_records, &vocab),
        &run_cfg.train,
        Some(&outputs),
    )?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    let ckpt = outputs.final_checkpoint();
    run.finish(&[&ckpt, &outputs.metrics()], json!({ "steps": summary.steps, "epochs": summary.epochs }))
}

fn load_checkpoint_artifact(path: &Path) -> Result<(Artifact, Model)> {
    let mpath = manifest_path(path);
    let manifest: PipelineManifest = read_json(&mpath)?;
    let (art, _) = verify_artifact(path, &manifest.stage)?;
    if manifest.stage != "train" && manifest.stage != "finetune" {
        return Err(Error::Provenance(format!("{} is not a model checkpoint", path.display())));
    }
    Ok((art, Model::load(path)?))
}

/// Continues training a checkpoint on an external persona-dialogue file.
pub fn finetune_stage(
    checkpoint: &Path,
    external_train: &Path,
    external_valid: Option<&Path>,
    vocab_path: &Path,
    out_dir: &Path,
    train_cfg: &TrainConfig,
) -> Result<PipelineManifest> {
    let mut run = StageRun::new("finetune", Some(train_cfg.seed), serde_json::to_value(train_cfg)?);
    let (ckpt_art, mut model) = load_checkpoint_artifact(checkpoint)?;
    let (vocab_art, vocab) = load_vocab(vocab_path)?;
    run.input(ckpt_art);
    run.input(vocab_art);
    run.raw_input(external_train)?;
    let train_data = load_external_persona_dialogues(external_train, 0)?;
    let valid_data = match external_valid {
        Some(path) => {
            run.raw_input(path)?;
            load_external_persona_dialogues(path, 0)?.examples
        }
        None => Vec::new(),
    };
    let outputs = TrainOutputs { dir: out_dir.to_path_buf() };
    let summary = fine_tune(
        &mut model,
        &vocab,
        &encoded_split(&train_data.examples, &vocab),
        &encoded_split(&valid_data, &vocab),
        train_cfg,
        Some(&outputs),
    )?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    let ckpt = outputs.final_checkpoint();
    run.finish(&[&ckpt, &outputs.metrics()], json!({ "steps": summary.steps, "epochs": summary.epochs }))
}

/// Where evaluation examples and candidate sets come from.
#[derive(Clone, Debug)]
pub enum EvalSource {
    /// A dataset split with a candidate file.
    Dataset { dir: PathBuf, split: String, candidates: PathBuf },
    /// An external dialogue file carrying its own candidates.
    External { path: PathBuf, k: usize },
}

fn load_eval_source(source: &EvalSource, run: &mut StageRun) -> Result<(Vec<ExampleRecord>, Vec<CandidateSet>)> {
    match source {
        EvalSource::Dataset { dir, split, candidates } => {
            let (art, _, records) = load_dataset_split(dir, split)?;
            let (cand_art, _) = verify_artifact(candidates, "candidates")?;
            run.input(art);
            run.input(cand_art);
            Ok((records, load_candidate_sets(candidates)?))
        }
        EvalSource::External { path, k } => {
            run.raw_input(path)?;
            let data = load_external_persona_dialogues(path, *k)?;
            if data.candidate_sets.is_empty() {
                return Err(Error::Invalid(format!("{} has no candidate lists", path.display())));
            }
            Ok((data.examples, data.candidate_sets))
        }
    }
}

fn config_fingerprint(value: &Value) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(value)?.as_bytes()))
}

/// Scores a checkpoint on candidate sets and writes a JSON report.
pub fn evaluate_stage(
    checkpoint: &Path,
    vocab_path: &Path,
    source: &EvalSource,
    mode: PersonaMode,
    out: &Path,
) -> Result<(PipelineManifest, EvalReport)> {
    let mut run = StageRun::new("evaluate", None, json!({ "persona_mode": mode }));
    let (ckpt_art, model) = load_checkpoint_artifact(checkpoint)?;
    let (vocab_art, vocab) = load_vocab(vocab_path)?;
    run.input(ckpt_art.clone());
    run.input(vocab_art);
    let (records, sets) = load_eval_source(source, &mut run)?;
    let mut report = evaluate_model(&model, &vocab, &records, &sets, mode)?;
    report.model = format!("{}", model.config().arch);
    report.model_fingerprint = ckpt_art.sha256;
    report.config_fingerprint = config_fingerprint(&json!({
        "model": model.config(),
        "persona_mode": mode,
        "inputs": run.inputs.iter().map(|a| &a.sha256).collect::<Vec<_>>(),
    }))?;
    report.persona_setup = dataset_persona_setup(source)?;
    write_json(out, &report)?;
    let manifest = run.finish(&[out], Value::Null)?;
    Ok((manifest, report))
}

fn dataset_persona_setup(source: &EvalSource) -> Result<Option<String>> {
    Ok(match source {
        EvalSource::Dataset { dir, .. } => Some(load_manifest(dir)?.persona_setup.to_string()),
        EvalSource::External { .. } => None,
    })
}

/// TF-IDF baseline; idf comes from the contexts and responses of the
/// dataset's training split.
pub fn baseline_stage(dataset_dir: &Path, source: &EvalSource, out: &Path) -> Result<(PipelineManifest, EvalReport)> {
    let mut run = StageRun::new("baseline", None, json!({ "idf": "train contexts and responses" }));
    let (art, _, train_records) = load_dataset_split(dataset_dir, "train")?;
    run.input(art);
    let idf = IdfTable::build(train_records.iter().flat_map(|r| [&r.context, &r.response]));
    let (records, sets) = load_eval_source(source, &mut run)?;
    let mut report = evaluate_tfidf(&idf, &records, &sets)?;
    report.config_fingerprint =
        config_fingerprint(&json!({ "inputs": run.inputs.iter().map(|a| &a.sha256).collect::<Vec<_>>() }))?;
    write_json(out, &report)?;
    let manifest = run.finish(&[out], Value::Null)?;
    Ok((manifest, report))
}

#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub setup: String,
    pub cap: usize,
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
}

impl std::str::FromStr for AblationEntry {
    type Err = Error;

    /// `setup,cap,checkpoint,dataset_dir`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.splitn(4, ',').collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!("ablation entry {s:?} is not setup,cap,checkpoint,dataset")));
        }
        Ok(AblationEntry {
            setup: parts[0].to_string(),
            cap: parts[1].parse().map_err(|e| Error::Config(format!("bad cap in {s:?}: {e}")))?,
            checkpoint: PathBuf::from(parts[2]),
            dataset: PathBuf::from(parts[3]),
        })
    }
}

/// One hits@1 row per (setup, cap) on shared candidate sets. Entries whose
/// checkpoint is missing are reported as warnings.
pub fn ablation_stage(
    entries: &[AblationEntry],
    vocab_path: &Path,
    candidates_path: &Path,
    out: &Path,
) -> Result<(PipelineManifest, AblationTable)> {
    let mut run = StageRun::new("ablation", None, json!({ "entries": entries.len() }));
    let (vocab_art, vocab) = load_vocab(vocab_path)?;
    let (cand_art, _) = verify_artifact(candidates_path, "candidates")?;
    run.input(vocab_art);
    run.input(cand_art);
    let sets = load_candidate_sets(candidates_path)?;
    let mut rows = Vec::new();
    for entry in entries {
        if !entry.checkpoint.exists() {
            rows.push((entry.setup.clone(), entry.cap, None));
            continue;
        }
        let (ckpt_art, model) = load_checkpoint_artifact(&entry.checkpoint)?;
        let (data_art, _, records) = load_dataset_split(&entry.dataset, "test")?;
        run.input(ckpt_art);
        run.input(data_art);
        let report = evaluate_model(&model, &vocab, &records, &sets, PersonaMode::With)?;
        rows.push((entry.setup.clone(), entry.cap, Some(report)));
    }
    let table = AblationTable::from_reports(rows);
    write_json(out, &table)?;
    let manifest = run.finish(&[out], Value::Null)?;
    Ok((manifest, table))
}

/// Persona coverage per split.
pub fn stats_stage(dataset_dir: &Path, out: &Path) -> Result<(PipelineManifest, Value)> {
    let mut run = StageRun::new("stats", None, Value::Null);
    let (art, _) = verify_artifact(dataset_dir, "build-dataset")?;
    run.input(art);
    let mut stats = serde_json::Map::new();
    for name in ["train", "valid", "test"] {
        stats.insert(name.to_string(), serde_json::to_value(coverage_stats(&load_split(dataset_dir, name)?))?);
    }
    let value = Value::Object(stats);
    write_json(out, &value)?;
    let manifest = run.finish(&[out], Value::Null)?;
    Ok((manifest, value))
}

pub const DEFAULT_SHARD_SIZE: usize = 10_000;

/// Settings for [`run_all`].
#[derive(Clone, Debug)]
pub struct FullPipeline {
    pub dumps: Vec<PathBuf>,
    pub work: PathBuf,
    pub vocab_cap: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
    pub persona: PersonaConfig,
    pub run: ResolvedRun,
    pub k: usize,
}

/// Paths produced by [`run_all`].
#[derive(Clone, Debug)]
pub struct PipelinePaths {
    pub pairs: PathBuf,
    pub vocab: PathBuf,
    pub split: PathBuf,
    pub personas: PathBuf,
    pub dataset: PathBuf,
    pub model_dir: PathBuf,
    pub candidates: PathBuf,
    pub report_with: PathBuf,
    pub report_without: PathBuf,
    pub baseline: PathBuf,
}

impl PipelinePaths {
    pub fn under(work: &Path) -> Self {
        PipelinePaths {
            pairs: work.join("pairs.jsonl"),
            vocab: work.join("vocab.txt"),
            split: work.join("split"),
            personas: work.join("personas.jsonl"),
            dataset: work.join("dataset"),
            model_dir: work.join("model"),
            candidates: work.join("candidates.jsonl"),
            report_with: work.join("report-persona.json"),
            report_without: work.join("report-no-persona.json"),
            baseline: work.join("report-tfidf.json"),
        }
    }
}

/// Runs every stage from dump to evaluation reports.
pub fn run_all(cfg: &FullPipeline) -> Result<PipelinePaths> {
    let p = PipelinePaths::under(&cfg.work);
    std::fs::create_dir_all(&cfg.work).map_err(|e| Error::io(&cfg.work, e))?;
    ingest(&cfg.dumps, &p.pairs)?;
    build_vocab(&p.pairs, &p.vocab, cfg.vocab_cap)?;
    split(&p.pairs, &p.split, cfg.valid, cfg.test, cfg.seed)?;
    extract_personas(&p.split, &p.personas, &cfg.persona, None)?;
    build_dataset(&p.split, &p.personas, &p.vocab, &p.dataset, DEFAULT_MAX_LEN, DEFAULT_SHARD_SIZE)?;
    train_stage(&p.dataset, &p.vocab, &p.model_dir, &cfg.run)?;
    candidates(&p.dataset, "test", cfg.k, cfg.seed, &p.candidates)?;
    let ckpt = p.model_dir.join(TrainOutputs::FINAL);
    let source = EvalSource::Dataset { dir: p.dataset.clone(), split: "test".into(), candidates: p.candidates.clone() };
    evaluate_stage(&ckpt, &p.vocab, &source, PersonaMode::With, &p.report_with)?;
    evaluate_stage(&ckpt, &p.vocab, &source, PersonaMode::Without, &p.report_without)?;
    baseline_stage(&p.dataset, &source, &p.baseline)?;
    Ok(p)
}
