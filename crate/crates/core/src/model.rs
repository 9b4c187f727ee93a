//! The persona-conditioned ranker: context/response encoders, the persona
//! encoder, a one-hop residual memory over persona sentences, and
//! dot-product scoring.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::hashing::derive_seed;
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, Tensor, Var};
use crate::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Bow,
    Transformer,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bow" => Ok(Arch::Bow),
            "transformer" => Ok(Arch::Transformer),
            _ => Err(Error::Config(format!("unknown architecture {s:?}"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Bow => "bow",
            Arch::Transformer => "transformer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl EncoderConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk(arch: Arch) -> Self {
        EncoderConfig {
            arch,
            embed_dim: 64,
            hidden_dim: 64,
            layers: 2,
            heads: 2,
            dropout: 0.0,
            max_len: 100,
        }
    }

    /// Four layers, hidden size 300, six heads.
    pub fn full_scale(arch: Arch) -> Self {
        EncoderConfig {
            arch,
            embed_dim: 300,
            hidden_dim: 300,
            layers: 4,
            heads: 6,
            dropout: 0.0,
            max_len: 100,
        }
    }

    /// Reduced architecture for small persona-dialogue corpora.
    pub fn fine_tune(arch: Arch) -> Self {
        EncoderConfig {
            arch,
            embed_dim: 300,
            hidden_dim: 300,
            layers: 2,
            heads: 2,
            dropout: 0.2,
            max_len: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("dimensions and max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.arch == Arch::Transformer {
            if self.layers == 0 || self.heads == 0 {
                return Err(Error::Config("transformer needs at least one layer and head".into()));
            }
            if !self.hidden_dim.is_multiple_of(self.heads) {
                return Err(Error::Config(format!(
                    "hidden_dim {} is not divisible by heads {}",
                    self.hidden_dim, self.heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Context,
    Response,
}

impl Side {
    fn prefix(self) -> &'static str {
        match self {
            Side::Context => "context",
            Side::Response => "response",
        }
    }
}

/// Whether persona memories are consulted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaMode {
    With,
    Without,
}

/// Dropout switches and seed source for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardMode {
    pub train: bool,
    pub seed: u64,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode { train: false, seed: 0 };
}

/// Graph handles for every model parameter, in model order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    config: EncoderConfig,
    vocab_size: usize,
    vocab_hash: String,
}

/// Model parameters plus configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: EncoderConfig,
    vocab_size: usize,
    vocab_hash: String,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

struct Seeder<'a> {
    mode: ForwardMode,
    counter: &'a mut u64,
}

impl Seeder<'_> {
    fn next(&mut self) -> u64 {
        *self.counter += 1;
        self.mode.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(*self.counter)
    }
}

fn sinusoid(position: usize, dim: usize, width: usize) -> f64 {
    let pair = (dim / 2) as f64;
    let angle = position as f64 / 10000f64.powf(2.0 * pair / width as f64);
    if dim.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn offsets_of(lengths: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut offsets = vec![0];
    for len in lengths {
        offsets.push(offsets.last().unwrap() + len);
    }
    offsets
}

impl Model {
    /// Fresh model with seeded uniform(±1/√fan_in) weights.
    pub fn new(config: EncoderConfig, vocab_size: usize, vocab_hash: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary must include the reserved ids".into()));
        }
        let (de, d) = (config.embed_dim, config.hidden_dim);
        let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
            ("embeddings".into(), vec![vocab_size, de], Init::Uniform(de)),
            ("persona.proj".into(), vec![de, d], Init::Uniform(de)),
        ];
        for side in [Side::Context, Side::Response] {
            let p = side.prefix();
            match config.arch {
                Arch::Bow => {
                    specs.push((format!("{p}.bow.w1"), vec![de, d], Init::Uniform(de)));
                    specs.push((format!("{p}.bow.w2"), vec![d, d], Init::Uniform(d)));
                }
                Arch::Transformer => {
                    if de != d {
                        specs.push((format!("{p}.in_proj"), vec![de, d], Init::Uniform(de)));
                    }
                    for l in 0..config.layers {
                        for w in ["wq", "wk", "wv", "wo"] {
                            specs.push((format!("{p}.layer{l}.{w}"), vec![d, d], Init::Uniform(d)));
                            specs.push((format!("{p}.layer{l}.b{}", &w[1..]), vec![d], Init::Uniform(d)));
                        }
                        specs.push((format!("{p}.layer{l}.ln1.gamma"), vec![d], Init::Ones));
                        specs.push((format!("{p}.layer{l}.ln1.beta"), vec![d], Init::Zeros));
                        specs.push((format!("{p}.layer{l}.ff1"), vec![d, 4 * d], Init::Uniform(d)));
                        specs.push((format!("{p}.layer{l}.ff1.b"), vec![4 * d], Init::Uniform(d)));
                        specs.push((format!("{p}.layer{l}.ff2"), vec![4 * d, d], Init::Uniform(4 * d)));
                        specs.push((format!("{p}.layer{l}.ff2.b"), vec![d], Init::Uniform(4 * d)));
                        specs.push((format!("{p}.layer{l}.ln2.gamma"), vec![d], Init::Ones));
                        specs.push((format!("{p}.layer{l}.ln2.beta"), vec![d], Init::Zeros));
                    }
                }
            }
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let tensor = match init {
                Init::Uniform(fan_in) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &name));
                    Tensor::uniform(&shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
                }
                Init::Ones => Tensor::new(shape.clone(), vec![1.0; shape.iter().product()])?,
                Init::Zeros => Tensor::zeros(&shape),
            };
            names.push(name);
            params.push(tensor);
        }
        Ok(Self::from_parts(config, vocab_size, vocab_hash.to_string(), names, params))
    }

    fn from_parts(
        config: EncoderConfig,
        vocab_size: usize,
        vocab_hash: String,
        names: Vec<String>,
        params: Vec<Tensor>,
    ) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Model { config, vocab_size, vocab_hash, names, params, index }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    /// Replaces the embedding table, checking its shape.
    pub fn set_embeddings(&mut self, table: Tensor) -> Result<()> {
        let expected = [self.vocab_size, self.config.embed_dim];
        if table.shape() != expected {
            return Err(Error::Shape { op: "set_embeddings", lhs: expected.to_vec(), rhs: table.shape().to_vec() });
        }
        *self.param_mut("embeddings").expect("model has embeddings") = table;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Puts all parameters on the graph, tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[*self.index.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn flatten_ids(&self, seqs: &[&[u32]], what: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut ids = Vec::new();
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::Invalid(format!("cannot encode an empty {what}")));
            }
            for &id in *seq {
                if id as usize >= self.vocab_size {
                    return Err(Error::Invalid(format!("token id {id} outside vocabulary of {}", self.vocab_size)));
                }
                ids.push(id as usize);
            }
        }
        Ok((ids, offsets_of(seqs.iter().map(|s| s.len()))))
    }

    /// Encodes a batch of token sequences with one side's encoder: `[B, d]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        seqs: &[&[u32]],
        side: Side,
        mode: ForwardMode,
        counter: &mut u64,
    ) -> Result<Var> {
        let (ids, offsets) = self.flatten_ids(seqs, "sequence")?;
        let emb = g.embedding_gather(self.var(bound, "embeddings"), &ids)?;
        let p = side.prefix();
        let inv_sqrt: Vec<f64> = seqs.iter().map(|s| 1.0 / (s.len() as f64).sqrt()).collect();
        match self.config.arch {
            Arch::Bow => {
                let h = g.matmul(emb, self.var(bound, &format!("{p}.bow.w1")))?;
                let h = g.tanh(h);
                let h = g.matmul(h, self.var(bound, &format!("{p}.bow.w2")))?;
                let summed = g.segment_sum(h, &offsets)?;
                g.row_scale(summed, &inv_sqrt)
            }
            Arch::Transformer => {
                let mut seeder = Seeder { mode, counter };
                self.transformer_body(g, bound, emb, seqs, &offsets, p, &mut seeder)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn transformer_body(
        &self,
        g: &mut Graph,
        bound: &Bound,
        emb: Var,
        seqs: &[&[u32]],
        offsets: &[usize],
        p: &str,
        seeder: &mut Seeder<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        if let Some(too_long) = seqs.iter().find(|s| s.len() > cfg.max_len) {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens exceeds max_len {}",
                too_long.len(),
                cfg.max_len
            )));
        }
        let mut x = if cfg.embed_dim != d {
            g.matmul(emb, self.var(bound, &format!("{p}.in_proj")))?
        } else {
            emb
        };
        let mut positions = Vec::with_capacity(offsets[offsets.len() - 1] * d);
        for seq in seqs {
            for pos in 0..seq.len() {
                positions.extend((0..d).map(|i| sinusoid(pos, i, d)));
            }
        }
        let pe = g.constant(Tensor::matrix(positions.len() / d, d, positions)?);
        x = g.add(x, pe)?;
        x = g.dropout(x, cfg.dropout, seeder.mode.train, seeder.next())?;
        for l in 0..cfg.layers {
            let name = |w: &str| format!("{p}.layer{l}.{w}");
            let linear = |g: &mut Graph, input: Var, w: &str, b: &str| -> Result<Var> {
                let h = g.matmul(input, self.var(bound, &name(w)))?;
                g.add(h, self.var(bound, &name(b)))
            };
            let q = linear(g, x, "wq", "bq")?;
            let k = linear(g, x, "wk", "bk")?;
            let v = linear(g, x, "wv", "bv")?;
            let att = g.segment_attention(q, k, v, offsets, cfg.heads)?;
            let att = linear(g, att, "wo", "bo")?;
            let att = g.dropout(att, cfg.dropout, seeder.mode.train, seeder.next())?;
            let res = g.add(x, att)?;
            x = g.layer_norm(res, self.var(bound, &name("ln1.gamma")), self.var(bound, &name("ln1.beta")), LAYER_NORM_EPS)?;
            let ff = linear(g, x, "ff1", "ff1.b")?;
            let ff = g.relu(ff);
            let ff = linear(g, ff, "ff2", "ff2.b")?;
            let ff = g.dropout(ff, cfg.dropout, seeder.mode.train, seeder.next())?;
            let res = g.add(x, ff)?;
            x = g.layer_norm(res, self.var(bound, &name("ln2.gamma")), self.var(bound, &name("ln2.beta")), LAYER_NORM_EPS)?;
        }
        let summed = g.segment_sum(x, offsets)?;
        let inv_len: Vec<f64> = seqs.iter().map(|s| 1.0 / s.len() as f64).collect();
        g.row_scale(summed, &inv_len)
    }

    /// Persona sentence encodings `Σ_t W_p e_t`: `[S, d]`.
    pub fn encode_persona_sentences(&self, g: &mut Graph, bound: &Bound, sentences: &[&[u32]]) -> Result<Var> {
        let (ids, offsets) = self.flatten_ids(sentences, "persona sentence")?;
        let emb = g.embedding_gather(self.var(bound, "embeddings"), &ids)?;
        // the projection is linear, so summing first is equivalent and cheaper
        let summed = g.segment_sum(emb, &offsets)?;
        g.matmul(summed, self.var(bound, "persona.proj"))
    }

    /// Joint context/persona representations for a batch: `[B, d]`.
    pub fn encode_joint(
        &self,
        g: &mut Graph,
        bound: &Bound,
        examples: &[&Example],
        persona_mode: PersonaMode,
        mode: ForwardMode,
        counter: &mut u64,
    ) -> Result<Var> {
        let contexts: Vec<&[u32]> = examples.iter().map(|e| e.context.as_slice()).collect();
        let query = self.encode(g, bound, &contexts, Side::Context, mode, counter)?;
        if persona_mode == PersonaMode::Without {
            return Ok(query);
        }
        let mut sentences: Vec<&[u32]> = Vec::new();
        let mut owners = Vec::new();
        let mut lengths = Vec::new();
        for (i, example) in examples.iter().enumerate() {
            let before = sentences.len();
            sentences.extend(example.persona.iter().filter(|s| !s.is_empty()).map(Vec::as_slice));
            if sentences.len() > before {
                owners.push(i);
                lengths.push(sentences.len() - before);
            }
        }
        if sentences.is_empty() {
            return Ok(query);
        }
        let memory = self.encode_persona_sentences(g, bound, &sentences)?;
        memory_combine(g, query, memory, &owners, &lengths)
    }

    /// Loss of one batch with in-batch negatives.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        bound: &Bound,
        examples: &[&Example],
        persona_mode: PersonaMode,
        mode: ForwardMode,
        counter: &mut u64,
    ) -> Result<Var> {
        let joint = self.encode_joint(g, bound, examples, persona_mode, mode, counter)?;
        let responses: Vec<&[u32]> = examples.iter().map(|e| e.response.as_slice()).collect();
        let encoded = self.encode(g, bound, &responses, Side::Response, mode, counter)?;
        batch_loss(g, joint, encoded)
    }

    /// Frozen-parameter encoding of sequences, one vector per sequence.
    pub fn encode_frozen(&self, seqs: &[&[u32]], side: Side) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.encode(&mut g, &bound, seqs, side, ForwardMode::EVAL, &mut 0)?;
        Ok(rows_of(g.value(out)))
    }

    /// Frozen-parameter joint encodings.
    pub fn encode_joint_frozen(&self, examples: &[&Example], persona_mode: PersonaMode) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.encode_joint(&mut g, &bound, examples, persona_mode, ForwardMode::EVAL, &mut 0)?;
        Ok(rows_of(g.value(out)))
    }

    pub fn bow_encode(&self, ids: &[u32], side: Side) -> Result<Vec<f64>> {
        if self.config.arch != Arch::Bow {
            return Err(Error::Config("model is not a bag-of-words model".into()));
        }
        Ok(self.encode_frozen(&[ids], side)?.remove(0))
    }

    pub fn transformer_encode(&self, ids: &[u32], side: Side) -> Result<Vec<f64>> {
        if self.config.arch != Arch::Transformer {
            return Err(Error::Config("model is not a transformer model".into()));
        }
        Ok(self.encode_frozen(&[ids], side)?.remove(0))
    }

    pub fn persona_encode(&self, sentence: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let out = self.encode_persona_sentences(&mut g, &bound, &[sentence])?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            vocab_hash: self.vocab_hash.clone(),
        };
        let tensors: Vec<(String, &Tensor)> = self.names.iter().cloned().zip(&self.params).collect();
        save_checkpoint(path, serde_json::to_value(meta)?, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = load_checkpoint(path)?;
        let meta: ModelMeta = serde_json::from_value(header.meta)?;
        let reference = Model::new(meta.config.clone(), meta.vocab_size, &meta.vocab_hash, 0)?;
        let (names, params): (Vec<String>, Vec<Tensor>) = tensors.into_iter().unzip();
        if names != reference.names {
            return Err(Error::Invalid(format!("{} does not match the model layout", path.display())));
        }
        for (loaded, expected) in params.iter().zip(&reference.params) {
            if loaded.shape() != expected.shape() {
                return Err(Error::Shape { op: "load", lhs: expected.shape().to_vec(), rhs: loaded.shape().to_vec() });
            }
        }
        Ok(Self::from_parts(meta.config, meta.vocab_size, meta.vocab_hash, names, params))
    }
}

enum Init {
    Uniform(usize),
    Ones,
    Zeros,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// One-hop residual memory: `q + Σ softmax(q·p_i) p_i` per example.
///
/// `memory` rows are grouped by example: `owners[m]` is the batch row of the
/// m-th group and `lengths[m]` its sentence count. Rows without memories are
/// passed through untouched.
pub fn memory_combine(g: &mut Graph, query: Var, memory: Var, owners: &[usize], lengths: &[usize]) -> Result<Var> {
    let (qs, ms) = (g.shape(query).to_vec(), g.shape(memory).to_vec());
    if qs.len() != 2 || ms.len() != 2 || qs[1] != ms[1] || lengths.iter().sum::<usize>() != ms[0] {
        return Err(Error::Shape { op: "memory_combine", lhs: qs, rhs: ms });
    }
    let owner_of_row: Vec<usize> = owners
        .iter()
        .zip(lengths)
        .flat_map(|(&o, &n)| std::iter::repeat_n(o, n))
        .collect();
    let offsets = offsets_of(lengths.iter().copied());
    let expanded = g.embedding_gather(query, &owner_of_row)?;
    let products = g.mul(expanded, memory)?;
    let logits = g.sum(products, 1)?;
    let weights = g.segment_softmax(logits, &offsets)?;
    let weighted = g.row_mul(memory, weights)?;
    let attended = g.segment_sum(weighted, &offsets)?;
    g.index_add_rows(query, attended, owners)
}

/// Attention weights of one query over its persona vectors.
pub fn memory_attention(query: &[f64], persona: &[Vec<f64>]) -> Vec<f64> {
    if persona.is_empty() {
        return Vec::new();
    }
    let mut g = Graph::new();
    let logits: Vec<f64> = persona.iter().map(|p| score(query, p)).collect();
    let x = g.constant(Tensor::vector(logits));
    let w = g.segment_softmax(x, &[0, persona.len()]).expect("single segment");
    g.value(w).data().to_vec()
}

/// Vector form of [`memory_combine`] for a single example.
pub fn memory_combine_vectors(query: &[f64], persona: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = query.len();
    if persona.is_empty() {
        return Ok(query.to_vec());
    }
    if let Some(bad) = persona.iter().find(|p| p.len() != d) {
        return Err(Error::Shape { op: "memory_combine", lhs: vec![d], rhs: vec![bad.len()] });
    }
    let mut g = Graph::new();
    let q = g.constant(Tensor::matrix(1, d, query.to_vec())?);
    let m = g.constant(Tensor::matrix(persona.len(), d, persona.concat())?);
    let out = memory_combine(&mut g, q, m, &[0], &[persona.len()])?;
    Ok(g.value(out).data().to_vec())
}

/// Dot-product relevance of a response to a joint representation.
pub fn score(joint: &[f64], response: &[f64]) -> f64 {
    joint.iter().zip(response).map(|(a, b)| a * b).sum()
}

/// `−(1/B) Σ_i log softmax(J Rᵀ)_{i,i}`: each row's own response against
/// the other responses in the batch.
pub fn batch_loss(g: &mut Graph, joint: Var, responses: Var) -> Result<Var> {
    let (js, rs) = (g.shape(joint).to_vec(), g.shape(responses).to_vec());
    if js.len() != 2 || js != rs || js[0] == 0 {
        return Err(Error::Shape { op: "batch_loss", lhs: js, rhs: rs });
    }
    let rt = g.transpose(responses)?;
    let scores = g.matmul(joint, rt)?;
    let targets: Vec<usize> = (0..js[0]).collect();
    g.cross_entropy(scores, &targets)
}
