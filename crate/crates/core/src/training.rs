//! In-batch-negative training with Adamax, embedding initialization and
//! fine-tuning.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::eval::full_ranking_hits_at_1;
use crate::hashing::derive_seed;
use crate::io::{create_writer, open_reader};
use crate::model::{ForwardMode, Model, PersonaMode};
use crate::tensor::{Graph, Tensor};
use crate::text::Vocabulary;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub persona_mode: PersonaMode,
    /// Compute validation hits@1 after each epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 8e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 1,
            seed: 0,
            checkpoint_every: 0,
            persona_mode: PersonaMode::With,
            validate: true,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        TrainConfig { batch_size: 512, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 so every example has a negative, got {}",
                self.batch_size
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("Adamax constants need beta in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Adamax moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            u: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamaxParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamaxParams {
    fn from(c: &TrainConfig) -> Self {
        AdamaxParams { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps }
    }
}

/// One Adamax update. Gradients are checked before anything is modified.
pub fn adamax_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    hp: AdamaxParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape { op: "adamax_step", lhs: vec![params.len()], rhs: vec![grads.len()] });
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.numel() != g.len() {
            return Err(Error::Shape { op: "adamax_step", lhs: p.shape().to_vec(), rhs: vec![g.len()] });
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} has {} at element {i}", g[i])));
        }
    }
    state.t += 1;
    let step = hp.lr / (1.0 - hp.beta1.powi(state.t as i32));
    for (i, param) in params.iter_mut().enumerate() {
        let (m, u) = (&mut state.m[i], &mut state.u[i]);
        for (((theta, &g), m), u) in param.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(u.iter_mut()) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *u = (hp.beta2 * *u).max(g.abs());
            *theta -= step * *m / (*u + hp.eps);
        }
    }
    Ok(())
}

/// Embedding table: seeded uniform rows, overwritten by pretrained vectors
/// for tokens found in `pretrained` (text format: "count dim" header, then
/// "token v1 .. v_dim" lines).
pub fn init_embeddings(vocab: &Vocabulary, dim: usize, seed: u64, pretrained: Option<&Path>) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "embeddings"));
    let mut table = Tensor::uniform(&[vocab.size(), dim], 1.0 / (dim as f64).sqrt(), &mut rng);
    if let Some(path) = pretrained {
        let vectors = read_text_vectors(path)?;
        if vectors.dim != dim {
            return Err(Error::Config(format!(
                "{} has {}-dimensional vectors, the model expects {dim}",
                path.display(),
                vectors.dim
            )));
        }
        for (token, values) in vectors.rows {
            let id = vocab.lookup(&token) as usize;
            if id >= 2 {
                table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
            }
        }
    }
    Ok(table)
}

pub struct TextVectors {
    pub dim: usize,
    pub rows: Vec<(String, Vec<f64>)>,
}

pub fn read_text_vectors(path: &Path) -> Result<TextVectors> {
    let parse_err = |line: usize, message: String| Error::Parse { path: path.display().to_string(), line, message };
    let mut lines = open_reader(path)?.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing \"count dim\" header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let dim = match fields.as_slice() {
        [_, dim] => dim.parse::<usize>().map_err(|e| parse_err(1, format!("bad dimension: {e}")))?,
        _ => return Err(parse_err(1, format!("expected \"count dim\", got {header:?}"))),
    };
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (index, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap_or_default().to_string();
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        match values {
            Ok(v) if v.len() == dim => rows.push((token, v)),
            Ok(v) => bad.push((index + 2, format!("expected {dim} values, found {}", v.len()))),
            Err(e) => bad.push((index + 2, e.to_string())),
        }
    }
    if let Some((line, message)) = bad.first() {
        return Err(parse_err(*line, format!("{message} ({} malformed lines)", bad.len())));
    }
    Ok(TextVectors { dim, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_hits_at_1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: Vec<EpochSummary>,
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const FINAL: &'static str = "model.ckpt";

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(Self::METRICS)
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join(Self::FINAL)
    }
}

/// Mean loss of a frozen model over fixed batches in order.
pub fn mean_loss(model: &Model, examples: &[Example], batch_size: usize, mode: PersonaMode) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in examples.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let refs: Vec<&Example> = batch.iter().collect();
        let loss = model.batch_loss(&mut g, &bound, &refs, mode, ForwardMode::EVAL, &mut 0)?;
        total += g.value(loss).item() * batch.len() as f64;
        count += batch.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn one_step(
    model: &mut Model,
    batch: &[&Example],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    step: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let mode = ForwardMode { train: true, seed: derive_seed(cfg.seed, &format!("dropout-{step}")) };
    let loss = model.batch_loss(&mut g, &bound, batch, cfg.persona_mode, mode, &mut 0)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value} at step {step}")));
    }
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let names = model.param_names().to_vec();
    adamax_step(model.params_mut(), &names, &grads, state, cfg.into())?;
    Ok(value)
}

/// Trains `model` in place. With `outputs`, writes the metrics log,
/// cadence checkpoints and a final checkpoint.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let started = Instant::now();
    let mut metrics = match outputs {
        Some(out) => Some(create_writer(&out.metrics())?),
        None => None,
    };
    let mut state = OptimizerState::new(model.params());
    let mut summary = TrainSummary::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("epoch-{epoch}")));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let step = summary.steps + 1;
            let loss = one_step(model, &batch, &mut state, cfg, step)?;
            summary.steps = step;
            summary.losses.push(loss);
            epoch_loss += loss * batch.len() as f64;
            if let Some(w) = metrics.as_mut() {
                let record = StepMetrics {
                    step,
                    epoch,
                    loss,
                    lr: cfg.lr,
                    wall_ms: started.elapsed().as_millis() as u64,
                };
                serde_json::to_writer(&mut *w, &record)?;
                writeln!(w).map_err(|e| Error::io(outputs.unwrap().metrics(), e))?;
            }
            if let Some(out) = outputs {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
                    let path = out.dir.join(format!("checkpoint-{step:07}.ckpt"));
                    model.save(&path)?;
                    summary.checkpoints.push(path);
                }
            }
        }
        let valid_hits_at_1 = if cfg.validate && !valid_set.is_empty() {
            Some(full_ranking_hits_at_1(model, valid_set, cfg.persona_mode)?)
        } else {
            None
        };
        summary.epochs.push(EpochSummary { epoch, mean_loss: epoch_loss / train_set.len() as f64, valid_hits_at_1 });
    }
    if let (Some(mut w), Some(out)) = (metrics, outputs) {
        w.flush().map_err(|e| Error::io(out.metrics(), e))?;
        let path = out.final_checkpoint();
        model.save(&path)?;
        summary.checkpoints.push(path);
    }
    Ok(summary)
}

/// Continues training a pretrained model on another dataset tokenized with
/// the same vocabulary.
pub fn fine_tune(
    model: &mut Model,
    vocab: &Vocabulary,
    train_set: &[Example],
    valid_set: &[Example],
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainSummary> {
    let found = vocab.hash();
    if found != model.vocab_hash() {
        return Err(Error::VocabularyMismatch { expected: model.vocab_hash().to_string(), found });
    }
    train(model, train_set, valid_set, cfg, outputs)
}
