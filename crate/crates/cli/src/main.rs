use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use persona_core::dataset::split_pairs;
use persona_core::model::{Arch, PersonaMode};
use persona_core::persona::{ClassifierConfig, PersonaConfig, PersonaSetup};
use persona_core::pipeline::{
    self, AblationEntry, ClassifierInput, EvalSource, PipelineManifest, Preset, ResolvedRun, RunConfig,
    DEFAULT_SHARD_SIZE,
};
use persona_core::synth::{self, CorpusConfig, DumpConfig};
use persona_core::text::DEFAULT_MAX_LEN;
use persona_core::{Error, Result};

#[derive(Parser)]
#[command(name = "persona", version, about = "Persona-conditioned next-utterance retrieval pipeline")]
struct Cli {
    /// Worker threads for parallel stages (outputs do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse comment dump shards and pair each comment with its parent.
    Ingest {
        #[arg(long = "dump", required = true, num_args = 1..)]
        dumps: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the frequency-capped vocabulary from ingested pairs.
    BuildVocab {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250_000)]
        cap: usize,
    },
    /// Split pairs into train, validation and test.
    Split {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        valid: usize,
        #[arg(long)]
        test: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Build a persona store from training responses.
    ExtractPersonas {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        setup: Option<PersonaSetup>,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Trained classifier (rules_classifier setup).
        #[arg(long, requires = "vocab")]
        classifier: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// JSON config providing persona_setup, persona_cap and seed.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Join split pairs with a persona store into dataset shards.
    BuildDataset {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        personas: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
        #[arg(long, default_value_t = DEFAULT_SHARD_SIZE)]
        shard_size: usize,
    },
    /// Train the persona-sentence classifier.
    TrainClassifier {
        /// External persona-dialogue file whose persona sentences are positives.
        #[arg(long)]
        positives: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 50)]
        max_epochs: usize,
    },
    /// Train a ranking model on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hp: Hyper,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Train without persona memories.
        #[arg(long)]
        no_persona: bool,
    },
    /// Fine-tune a checkpoint on an external persona-dialogue file.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        external: PathBuf,
        #[arg(long)]
        valid_external: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hp: Hyper,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        #[arg(long)]
        no_persona: bool,
    },
    /// Sample candidate sets for a dataset split.
    Candidates {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on candidate sets.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        /// Replace every persona with the empty set.
        #[arg(long)]
        no_persona: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also print an aligned text table.
        #[arg(long)]
        table: bool,
    },
    /// Score the TF-IDF exact-match baseline.
    Baseline {
        /// Dataset whose training split provides idf values (defaults to --dataset).
        #[arg(long)]
        idf_dataset: Option<PathBuf>,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// hits@1 per persona setup on shared candidate sets.
    Ablation {
        /// setup,cap,checkpoint,dataset_dir (repeatable)
        #[arg(long = "entry", required = true)]
        entries: Vec<AblationEntry>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Persona coverage statistics for a dataset.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write deterministic synthetic fixtures.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        comments: usize,
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Comment dump shards.
    Dump,
    /// Persona dialogues in the external format (train.jsonl, test.jsonl with 20 candidates).
    Chat,
}

#[derive(Args)]
struct Hyper {
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// JSON config file; explicit flags win over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pretrained_embeddings: Option<PathBuf>,
}

impl Hyper {
    fn resolve(&self) -> Result<ResolvedRun> {
        let file = self.config.as_deref().map(RunConfig::load).transpose()?;
        let flags = RunConfig {
            arch: self.arch,
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            heads: self.heads,
            dropout: self.dropout,
            embed_dim: self.embed_dim,
            batch_size: self.batch_size,
            lr: self.lr,
            epochs: self.epochs,
            seed: self.seed,
            persona_setup: None,
            persona_cap: None,
            pretrained_embeddings_path: self.pretrained_embeddings.clone(),
        };
        pipeline::resolve_run(self.preset, file, flags)
    }
}

#[derive(Args)]
struct SourceArgs {
    /// Dataset directory holding the examples named by the candidate sets.
    #[arg(long, conflicts_with = "external")]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, requires = "dataset")]
    candidates: Option<PathBuf>,
    /// External persona-dialogue file with its own candidate lists.
    #[arg(long)]
    external: Option<PathBuf>,
    /// Candidate count expected in the external file.
    #[arg(long, default_value_t = 20)]
    k: usize,
}

impl SourceArgs {
    fn source(&self) -> Result<EvalSource> {
        match (&self.dataset, &self.candidates, &self.external) {
            (Some(dir), Some(candidates), None) => Ok(EvalSource::Dataset {
                dir: dir.clone(),
                split: self.split.clone(),
                candidates: candidates.clone(),
            }),
            (None, None, Some(path)) => Ok(EvalSource::External { path: path.clone(), k: self.k }),
            _ => Err(Error::Config("give either --dataset with --candidates, or --external".into())),
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn print_manifest(manifest: &PipelineManifest) -> Result<()> {
    print_json(&json!({
        "stage": manifest.stage,
        "outputs": manifest.outputs,
        "summary": manifest.summary,
        "wall_ms": manifest.wall_ms,
    }))
}

fn print_resolved(run: &ResolvedRun) -> Result<()> {
    eprintln!("resolved configuration ({:?} preset):", run.preset);
    eprintln!("{}", serde_json::to_string_pretty(run)?);
    Ok(())
}

fn persona_mode(no_persona: bool) -> PersonaMode {
    if no_persona {
        PersonaMode::Without
    } else {
        PersonaMode::With
    }
}

fn write_synth(kind: SynthKind, out: &Path, comments: usize, users: usize, seed: u64) -> Result<serde_json::Value> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    match kind {
        SynthKind::Dump => {
            let paths = synth::write_dump(out, &DumpConfig::new(comments, seed))?;
            Ok(json!({ "shards": paths }))
        }
        SynthKind::Chat => {
            let corpus = synth::generate_corpus(&CorpusConfig::chat(users, seed))?;
            let test_size = corpus.pairs.len() / 5;
            let parts = split_pairs(corpus.pairs.clone(), 0, test_size, seed)?;
            let records = |pairs| {
                synth::records_with_statements(&synth::SynthCorpus { statements: corpus.statements.clone(), pairs })
            };
            let train = records(parts.train);
            let test = records(parts.test);
            synth::write_external(&out.join("train.jsonl"), &train, None, seed)?;
            synth::write_external(&out.join("test.jsonl"), &test, Some(20), seed)?;
            Ok(json!({ "train": train.len(), "test": test.len() }))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {threads} threads: {e}")))?;
    }
    match cli.command {
        Command::Ingest { dumps, out } => print_manifest(&pipeline::ingest(&dumps, &out)?),
        Command::BuildVocab { pairs, out, cap } => print_manifest(&pipeline::build_vocab(&pairs, &out, cap)?),
        Command::Split { pairs, out, valid, test, seed } => {
            print_manifest(&pipeline::split(&pairs, &out, valid, test, seed)?)
        }
        Command::ExtractPersonas { split, out, setup, cap, seed, threshold, classifier, vocab, config } => {
            let file = config.as_deref().map(RunConfig::load).transpose()?.unwrap_or_default();
            let persona = PersonaConfig {
                setup: setup.or(file.persona_setup).unwrap_or(PersonaSetup::Rules),
                cap: cap.or(file.persona_cap).unwrap_or(20),
                seed: seed
                    .or(file.seed)
                    .ok_or_else(|| Error::Config("extract-personas needs --seed".into()))?,
                threshold,
            };
            let classifier = match (classifier, vocab) {
                (Some(classifier), Some(vocab)) => Some(ClassifierInput { classifier, vocab }),
                _ => None,
            };
            print_manifest(&pipeline::extract_personas(&split, &out, &persona, classifier.as_ref())?)
        }
        Command::BuildDataset { split, personas, vocab, out, max_len, shard_size } => {
            print_manifest(&pipeline::build_dataset(&split, &personas, &vocab, &out, max_len, shard_size)?)
        }
        Command::TrainClassifier { positives, split, vocab, out, seed, threshold, max_epochs } => {
            let cfg = ClassifierConfig { seed, threshold, max_epochs, ..ClassifierConfig::default() };
            print_manifest(&pipeline::train_classifier(&positives, &split, &vocab, &out, &cfg)?)
        }
        Command::Train { dataset, vocab, out, hp, checkpoint_every, no_persona } => {
            let mut resolved = hp.resolve()?;
            resolved.train.checkpoint_every = checkpoint_every;
            resolved.train.persona_mode = persona_mode(no_persona);
            print_resolved(&resolved)?;
            print_manifest(&pipeline::train_stage(&dataset, &vocab, &out, &resolved)?)
        }
        Command::Finetune { checkpoint, external, valid_external, vocab, out, hp, checkpoint_every, no_persona } => {
            let mut resolved = hp.resolve()?;
            resolved.train.checkpoint_every = checkpoint_every;
            resolved.train.persona_mode = persona_mode(no_persona);
            print_resolved(&resolved)?;
            print_manifest(&pipeline::finetune_stage(
                &checkpoint,
                &external,
                valid_external.as_deref(),
                &vocab,
                &out,
                &resolved.train,
            )?)
        }
        Command::Candidates { dataset, split, k, seed, out } => {
            print_manifest(&pipeline::candidates(&dataset, &split, k, seed, &out)?)
        }
        Command::Evaluate { checkpoint, vocab, source, no_persona, out, table } => {
            let (_, report) =
                pipeline::evaluate_stage(&checkpoint, &vocab, &source.source()?, persona_mode(no_persona), &out)?;
            if table {
                print!("{}", report.table());
            }
            print_json(&report)
        }
        Command::Baseline { idf_dataset, source, out } => {
            let idf_dataset = idf_dataset
                .or_else(|| source.dataset.clone())
                .ok_or_else(|| Error::Config("baseline needs --idf-dataset or --dataset".into()))?;
            let (_, report) = pipeline::baseline_stage(&idf_dataset, &source.source()?, &out)?;
            print_json(&report)
        }
        Command::Ablation { entries, vocab, candidates, out } => {
            let (_, table) = pipeline::ablation_stage(&entries, &vocab, &candidates, &out)?;
            for warning in &table.warnings {
                eprintln!("warning: {warning}");
            }
            print!("{}", table.render());
            Ok(())
        }
        Command::Stats { dataset, out } => {
            let (_, stats) = pipeline::stats_stage(&dataset, &out)?;
            print_json(&stats)
        }
        Command::Synth { kind, out, comments, users, seed } => print_json(&write_synth(kind, &out, comments, users, seed)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let structured = json!({ "error": err.kind(), "message": err.to_string() });
            eprintln!("{structured}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                Error::Leakage(_) | Error::Provenance(_) | Error::VocabularyMismatch { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
