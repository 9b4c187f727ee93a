#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use persona_core::dataset::{assemble, split_pairs, to_examples, Example, ExampleRecord};
use persona_core::eval::{build_candidate_sets, evaluate_model};
use persona_core::model::{Arch, EncoderConfig, ForwardMode, Model, PersonaMode};
use persona_core::persona::{build_personas, collect_user_sentences, PersonaConfig, PersonaSetup};
use persona_core::pos::LexiconTagger;
use persona_core::synth::{generate_corpus, records_with_statements, CorpusConfig, SynthCorpus};
use persona_core::tensor::{Graph, Tensor, Var};
use persona_core::text::{build_vocabulary, TokenSeq, Vocabulary};
use persona_core::training::{fine_tune, train, TrainConfig};
use persona_core::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const TRIALS: u64 = 10;
/// Gradients below this are compared absolutely; it sits above the
/// roundoff of a unit-scale loss divided by `2h`.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// `f` applied to fresh leaves for `inputs`.
pub type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero so relu stays off its kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let magnitude = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

fn partition(rng: &mut ChaCha8Rng, total: usize) -> Vec<usize> {
    let mut offsets = vec![0];
    while *offsets.last().unwrap() < total {
        let left = total - offsets.last().unwrap();
        offsets.push(offsets.last().unwrap() + rng.random_range(1..=left.min(4)));
    }
    offsets
}

/// Loss `Σ out ⊙ R` for a fixed random `R`, so every output element
/// contributes to the gradient.
fn projected_loss(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let r = g.constant(rand_tensor(&mut rng, &shape));
    let prod = g.mul(out, r)?;
    Ok(g.sum_all(prod))
}

/// Largest relative error between backward and central differences over
/// every input element.
pub fn gradcheck(case: &OpCase, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.f)(&mut g, &vars)?;
    let loss = projected_loss(&mut g, out, seed)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.f)(&mut g, &vars)?;
        let loss = projected_loss(&mut g, out, seed)?;
        Ok(g.value(loss).item())
    };
    let mut worst: f64 = 0.0;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

pub type CaseBuilder = fn(&mut ChaCha8Rng) -> OpCase;

/// Every differentiable tensor op with seeded random shapes up to 8.
pub fn op_cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            OpCase {
                inputs: vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])],
                f: Box::new(|g, v| g.matmul(v[0], v[1])),
            }
        }),
        ("add_broadcast", |rng| {
            let (m, n) = (dim(rng), dim(rng));
            OpCase {
                inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n])],
                f: Box::new(|g, v| g.add(v[0], v[1])),
            }
        }),
        ("add", |rng| {
            let (m, n) = (dim(rng), dim(rng));
            OpCase {
                inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])],
                f: Box::new(|g, v| g.add(v[0], v[1])),
            }
        }),
        ("mul", |rng| {
            let (m, n) = (dim(rng), dim(rng));
            OpCase {
                inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])],
                f: Box::new(|g, v| g.mul(v[0], v[1])),
            }
        }),
        ("row_mul", |rng| {
            let (m, n) = (dim(rng), dim(rng));
            OpCase {
                inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m])],
                f: Box::new(|g, v| g.row_mul(v[0], v[1])),
            }
        }),
        ("tanh", |rng| {
            let shape = [dim(rng), dim(rng)];
            OpCase { inputs: vec![rand_tensor(rng, &shape)], f: Box::new(|g, v| Ok(g.tanh(v[0]))) }
        }),
        ("relu", |rng| {
            let shape = [dim(rng), dim(rng)];
            OpCase { inputs: vec![off_kink(rng, &shape)], f: Box::new(|g, v| Ok(g.relu(v[0]))) }
        }),
        ("scale", |rng| {
            let shape = [dim(rng)];
            OpCase { inputs: vec![rand_tensor(rng, &shape)], f: Box::new(|g, v| Ok(g.scale(v[0], -2.5))) }
        }),
        ("softmax_rows", |rng| {
            let shape = [dim(rng), dim(rng)];
            OpCase { inputs: vec![rand_tensor(rng, &shape)], f: Box::new(|g, v| g.softmax(v[0], 1)) }
        }),
        ("softmax_cols", |rng| {
            let shape = [dim(rng), dim(rng)];
            OpCase { inputs: vec![rand_tensor(rng, &shape)], f: Box::new(|g, v| g.softmax(v[0], 0)) }
        }),
        ("sum_axis", |rng| {
            let shape = [dim(rng), dim(rng)];
            let axis = rng.random_range(0..2);
            OpCase { inputs: vec![rand_tensor(rng, &shape)], f: Box::new(move |g, v| g.sum(v[0], axis)) }
        }),
        ("mean_axis", |rng| {
            let shape = [dim(rng), dim(rng)];
            let axis = rng.random_range(0..2);
            OpCase { inputs: vec![rand_tensor(rng, &shape)], f: Box::new(move |g, v| g.mean(v[0], axis)) }
        }),
        ("sum_all", |rng| {
            let shape = [dim(rng), dim(rng)];
            OpCase { inputs: vec![rand_tensor(rng, &shape)], f: Box::new(|g, v| Ok(g.sum_all(v[0]))) }
        }),
        ("embedding_gather", |rng| {
            let (vocab, d, n) = (dim(rng), dim(rng), dim(rng));
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
            OpCase {
                inputs: vec![rand_tensor(rng, &[vocab, d])],
                f: Box::new(move |g, v| g.embedding_gather(v[0], &ids)),
            }
        }),
        ("concat_rows", |rng| {
            let (a, b, n) = (dim(rng), dim(rng), dim(rng));
            OpCase {
                inputs: vec![rand_tensor(rng, &[a, n]), rand_tensor(rng, &[b, n])],
                f: Box::new(|g, v| g.concat(&[v[0], v[1]], 0)),
            }
        }),
        ("concat_cols", |rng| {
            let (m, a, b) = (dim(rng), dim(rng), dim(rng));
            OpCase {
                inputs: vec![rand_tensor(rng, &[m, a]), rand_tensor(rng, &[m, b])],
                f: Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
            }
        }),
        ("dropout", |rng| {
            let shape = [dim(rng), dim(rng)];
            let seed = rng.random::<u64>();
            OpCase {
                inputs: vec![rand_tensor(rng, &shape)],
                f: Box::new(move |g, v| g.dropout(v[0], 0.3, true, seed)),
            }
        }),
        ("layer_norm", |rng| {
            let (m, n) = (dim(rng), rng.random_range(2..=8));
            OpCase {
                inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n]), rand_tensor(rng, &[n])],
                f: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
            }
        }),
        ("masked_fill_softmax", |rng| {
            let (m, n) = (dim(rng), dim(rng));
            let mask: Vec<bool> = (0..m * n).map(|i| i % n != 0 && rng.random::<bool>()).collect();
            OpCase {
                inputs: vec![rand_tensor(rng, &[m, n])],
                f: Box::new(move |g, v| {
                    let filled = g.masked_fill(v[0], &mask, -1e4)?;
                    g.softmax(filled, 1)
                }),
            }
        }),
        ("transpose", |rng| {
            let shape = [dim(rng), dim(rng)];
            OpCase { inputs: vec![rand_tensor(rng, &shape)], f: Box::new(|g, v| g.transpose(v[0])) }
        }),
        ("reshape", |rng| {
            let (m, n) = (dim(rng), dim(rng));
            OpCase {
                inputs: vec![rand_tensor(rng, &[m, n])],
                f: Box::new(move |g, v| g.reshape(v[0], &[n, m])),
            }
        }),
        ("segment_sum", |rng| {
            let (t, d) = (dim(rng), dim(rng));
            let offsets = partition(rng, t);
            OpCase {
                inputs: vec![rand_tensor(rng, &[t, d])],
                f: Box::new(move |g, v| g.segment_sum(v[0], &offsets)),
            }
        }),
        ("row_scale", |rng| {
            let (m, d) = (dim(rng), dim(rng));
            let coeffs: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            OpCase {
                inputs: vec![rand_tensor(rng, &[m, d])],
                f: Box::new(move |g, v| g.row_scale(v[0], &coeffs)),
            }
        }),
        ("segment_softmax", |rng| {
            let t = dim(rng);
            let offsets = partition(rng, t);
            OpCase {
                inputs: vec![rand_tensor(rng, &[t])],
                f: Box::new(move |g, v| g.segment_softmax(v[0], &offsets)),
            }
        }),
        ("index_add_rows", |rng| {
            let (m, r, d) = (dim(rng), dim(rng), dim(rng));
            let idx: Vec<usize> = (0..r).map(|_| rng.random_range(0..m)).collect();
            OpCase {
                inputs: vec![rand_tensor(rng, &[m, d]), rand_tensor(rng, &[r, d])],
                f: Box::new(move |g, v| g.index_add_rows(v[0], v[1], &idx)),
            }
        }),
        ("segment_attention", |rng| {
            let heads = rng.random_range(1..=2);
            let cols = heads * rng.random_range(1..=4);
            let t = dim(rng);
            let offsets = partition(rng, t);
            OpCase {
                inputs: (0..3).map(|_| rand_tensor(rng, &[t, cols])).collect(),
                f: Box::new(move |g, v| g.segment_attention(v[0], v[1], v[2], &offsets, heads)),
            }
        }),
        ("cross_entropy", |rng| {
            let (b, k) = (dim(rng), dim(rng));
            let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            OpCase {
                inputs: vec![rand_tensor(rng, &[b, k])],
                f: Box::new(move |g, v| g.cross_entropy(v[0], &targets)),
            }
        }),
    ]
}

/// Worst relative error of one op over the seeded trials.
pub fn op_gradcheck(builder: CaseBuilder, base_seed: u64) -> f64 {
    (0..TRIALS)
        .map(|trial| {
            let seed = base_seed * 1000 + trial;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let case = builder(&mut rng);
            gradcheck(&case, seed).unwrap()
        })
        .fold(0.0, f64::max)
}

fn toy_examples(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<Example> {
    let mut seq = |len: usize| -> Vec<u32> { (0..len).map(|_| rng.random_range(2..vocab as u32)).collect() };
    (0..3)
        .map(|i| Example {
            persona: if i == 1 { Vec::new() } else { vec![seq(3), seq(2)] },
            context: seq(4),
            response: seq(3 + i),
            responder: format!("u{i}"),
            id: format!("e{i}"),
        })
        .collect::<Vec<_>>()
}

pub struct ModelCheck {
    pub worst: f64,
    pub checked: usize,
    /// Elements whose perturbation interval straddles a relu kink.
    pub kinked: usize,
}

/// End-to-end check of the persona-conditioned model: the batch loss
/// gradient against central differences on randomly chosen parameter
/// elements.
///
/// Central differences are only an oracle where the loss is smooth over
/// `[x - h, x + h]`. An element whose estimates at `h` and `h / 4` disagree
/// sits within `h` of a relu kink; it is counted and replaced by another
/// sample rather than judged.
pub fn model_gradcheck(arch: Arch, trial: u64, elements: usize) -> ModelCheck {
    let vocab = 12;
    let model = Model::new(EncoderConfig::desk(arch), vocab, "gradcheck", trial).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(trial);
    let examples = toy_examples(&mut rng, vocab);
    let refs: Vec<&Example> = examples.iter().collect();
    let loss_of = |m: &Model| {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let loss = m.batch_loss(&mut g, &bound, &refs, PersonaMode::With, ForwardMode::EVAL, &mut 0).unwrap();
        g.value(loss).item()
    };
    let central = |p: usize, e: usize, h: f64| {
        let mut plus = model.clone();
        plus.params_mut()[p].data_mut()[e] += h;
        let mut minus = model.clone();
        minus.params_mut()[p].data_mut()[e] -= h;
        (loss_of(&plus) - loss_of(&minus)) / (2.0 * h)
    };
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let loss = model.batch_loss(&mut g, &bound, &refs, PersonaMode::With, ForwardMode::EVAL, &mut 0).unwrap();
    g.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut check = ModelCheck { worst: 0.0, checked: 0, kinked: 0 };
    let count = model.params().len();
    while check.checked < elements {
        let p = rng.random_range(0..count);
        let e = rng.random_range(0..model.params()[p].numel());
        let numeric = central(p, e, FD_STEP);
        let err = relative_error(grads[p][e], numeric);
        if err >= GRAD_TOLERANCE && relative_error(central(p, e, FD_STEP / 4.0), numeric) >= GRAD_TOLERANCE {
            check.kinked += 1;
            continue;
        }
        check.worst = check.worst.max(err);
        check.checked += 1;
    }
    check
}

/// Parameters that actually received gradient in the model check, used to
/// make sure the sampled elements are not all trivially zero.
pub fn nonzero_grad_fraction(arch: Arch) -> f64 {
    let model = Model::new(EncoderConfig::desk(arch), 12, "gradcheck", 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let examples = toy_examples(&mut rng, 12);
    let refs: Vec<&Example> = examples.iter().collect();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let loss = model.batch_loss(&mut g, &bound, &refs, PersonaMode::With, ForwardMode::EVAL, &mut 0).unwrap();
    g.backward(loss).unwrap();
    let with_grad = bound.vars().iter().filter(|&&v| g.grad(v).is_some_and(|d| d.iter().any(|x| *x != 0.0))).count();
    with_grad as f64 / bound.vars().len() as f64
}

/// Records for one persona setup on a shared split.
pub struct PersonaExperiment {
    pub vocab: Vocabulary,
    pub train_by_setup: BTreeMap<PersonaSetup, Vec<ExampleRecord>>,
    pub test_by_setup: BTreeMap<PersonaSetup, Vec<ExampleRecord>>,
}

/// The synthetic persona corpus split once, with datasets for the rules and
/// random-from-dataset setups. The vocabulary covers contexts, responses
/// and every user statement, so it does not depend on the setup.
pub fn persona_experiment(users: usize, seed: u64) -> PersonaExperiment {
    let corpus = generate_corpus(&CorpusConfig::forum(users, seed)).unwrap();
    let test = (corpus.pairs.len() / 5).max(1);
    let split = split_pairs(corpus.pairs.clone(), corpus.pairs.len() / 20, test, seed).unwrap();
    let mut sentences: BTreeMap<String, Vec<TokenSeq>> = corpus.statements.clone();
    for (user, own) in collect_user_sentences(&split.train) {
        sentences.entry(user).or_default().extend(own);
    }
    let tagger = LexiconTagger::shipped();
    let mut train_by_setup = BTreeMap::new();
    let mut test_by_setup = BTreeMap::new();
    for setup in [PersonaSetup::Rules, PersonaSetup::RandomFromDataset] {
        let cfg = PersonaConfig { setup, cap: 20, seed, threshold: 0.5 };
        let personas = build_personas(&sentences, &cfg, &tagger, None).unwrap();
        let data = assemble(&split, &personas, &split.fingerprint(), 100).unwrap();
        train_by_setup.insert(setup, data.train);
        test_by_setup.insert(setup, data.test);
    }
    let rules_train = &train_by_setup[&PersonaSetup::Rules];
    let vocab = build_vocabulary(
        rules_train
            .iter()
            .flat_map(|e| [&e.context, &e.response])
            .chain(corpus.statements.values().flatten()),
        250_000,
    )
    .unwrap();
    PersonaExperiment { vocab, train_by_setup, test_by_setup }
}

pub struct TrainedScore {
    pub hits_at_1: f64,
    pub seconds: f64,
}

/// Trains a desk BOW model and scores it on K=100 test candidate sets.
pub fn train_and_score(
    exp: &PersonaExperiment,
    setup: PersonaSetup,
    mode: PersonaMode,
    epochs: usize,
    seed: u64,
) -> TrainedScore {
    let started = Instant::now();
    let vocab = &exp.vocab;
    let mut model = Model::new(EncoderConfig::desk(Arch::Bow), vocab.size(), &vocab.hash(), seed).unwrap();
    let cfg = TrainConfig { epochs, seed, persona_mode: mode, validate: false, ..TrainConfig::default() };
    train(&mut model, &to_examples(&exp.train_by_setup[&setup], vocab), &[], &cfg, None).unwrap();
    let test = &exp.test_by_setup[&setup];
    let sets = build_candidate_sets(test, 100, seed).unwrap();
    let report = evaluate_model(&model, vocab, test, &sets, mode).unwrap();
    TrainedScore { hits_at_1: report.hits_at_1, seconds: started.elapsed().as_secs_f64() }
}

pub struct TransferOutcome {
    pub pretrained_only: f64,
    pub fine_tuned: f64,
    pub scratch: f64,
}

/// Pretrain on the forum corpus, fine-tune on the chat corpus, and compare
/// on the chat corpus' 20-candidate sets.
pub fn transfer_experiment(seed: u64, pretrain_epochs: usize, finetune_epochs: usize) -> TransferOutcome {
    let a = generate_corpus(&CorpusConfig::forum(2000, seed)).unwrap();
    let b = generate_corpus(&CorpusConfig::chat(300, seed + 100)).unwrap();
    let split = split_pairs(a.pairs.clone(), 200, 200, seed).unwrap();
    let mut sentences: BTreeMap<String, Vec<TokenSeq>> = a.statements.clone();
    for (user, own) in collect_user_sentences(&split.train) {
        sentences.entry(user).or_default().extend(own);
    }
    let cfg = PersonaConfig { setup: PersonaSetup::Rules, cap: 20, seed, threshold: 0.5 };
    let personas = build_personas(&sentences, &cfg, &LexiconTagger::shipped(), None).unwrap();
    let a_data = assemble(&split, &personas, &split.fingerprint(), 100).unwrap();

    let b_split = split_pairs(b.pairs.clone(), 0, b.pairs.len() / 5, seed).unwrap();
    let b_records =
        |pairs| records_with_statements(&SynthCorpus { statements: b.statements.clone(), pairs });
    let (b_train, b_test) = (b_records(b_split.train), b_records(b_split.test));

    let vocab = build_vocabulary(
        a_data
            .train
            .iter()
            .chain(&b_train)
            .flat_map(|e| [&e.context, &e.response].into_iter().chain(e.persona.iter())),
        250_000,
    )
    .unwrap();
    let sets = build_candidate_sets(&b_test, 20, seed).unwrap();
    let score = |m: &Model| evaluate_model(m, &vocab, &b_test, &sets, PersonaMode::With).unwrap().hits_at_1;

    let model_cfg = EncoderConfig::desk(Arch::Bow);
    let mut pretrained = Model::new(model_cfg.clone(), vocab.size(), &vocab.hash(), seed).unwrap();
    let pre_cfg = TrainConfig { epochs: pretrain_epochs, seed, validate: false, ..TrainConfig::default() };
    train(&mut pretrained, &to_examples(&a_data.train, &vocab), &[], &pre_cfg, None).unwrap();

    let b_examples = to_examples(&b_train, &vocab);
    let ft_cfg = TrainConfig { epochs: finetune_epochs, seed, validate: false, ..TrainConfig::default() };
    let mut tuned = pretrained.clone();
    fine_tune(&mut tuned, &vocab, &b_examples, &[], &ft_cfg, None).unwrap();
    let mut scratch = Model::new(model_cfg, vocab.size(), &vocab.hash(), seed).unwrap();
    train(&mut scratch, &b_examples, &[], &ft_cfg, None).unwrap();

    TransferOutcome { pretrained_only: score(&pretrained), fine_tuned: score(&tuned), scratch: score(&scratch) }
}

/// `(expected_pass, sentence)` rows of the hand-labeled rule fixture.
pub fn rule_goldens() -> Vec<(bool, String)> {
    let text = std::fs::read_to_string(fixture("rule_goldens.tsv")).unwrap();
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|line| {
            let (label, sentence) = line.split_once('\t').expect("label<TAB>sentence");
            let pass = match label {
                "pass" => true,
                "fail" => false,
                other => panic!("bad label {other:?}"),
            };
            (pass, sentence.to_string())
        })
        .collect()
}

/// Independent TF-IDF cosine: dense vectors over the sorted corpus vocabulary.
pub fn brute_force_tfidf(docs: &[TokenSeq], context: &TokenSeq, candidates: &[TokenSeq]) -> Vec<f64> {
    let mut terms: Vec<&String> = docs.iter().chain(candidates).chain([context]).flat_map(|d| d.iter()).collect();
    terms.sort();
    terms.dedup();
    let n = docs.len() as f64;
    let idf: Vec<f64> = terms
        .iter()
        .map(|t| {
            let df = docs.iter().filter(|d| d.iter().any(|x| x == *t)).count() as f64;
            ((1.0 + n) / (1.0 + df)).ln() + 1.0
        })
        .collect();
    let vector = |doc: &TokenSeq| -> Vec<f64> {
        terms
            .iter()
            .zip(&idf)
            .map(|(t, w)| doc.iter().filter(|x| x == t).count() as f64 * w)
            .collect()
    };
    let c = vector(context);
    let c_norm: f64 = c.iter().map(|x| x * x).sum();
    candidates
        .iter()
        .map(|cand| {
            let d = vector(cand);
            let dot: f64 = c.iter().zip(&d).filter(|(a, b)| **a != 0.0 && **b != 0.0).map(|(a, b)| a * b).sum();
            let d_norm: f64 = d.iter().map(|x| x * x).sum();
            let denom = c_norm.sqrt() * d_norm.sqrt();
            if dot == 0.0 || denom == 0.0 {
                0.0
            } else {
                dot / denom
            }
        })
        .collect()
}

pub fn brute_force_rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // selection by repeated max, first index wins ties
    let mut ranked = Vec::new();
    while !order.is_empty() {
        let mut best = 0;
        for (pos, &i) in order.iter().enumerate() {
            if scores[i] > scores[order[best]] {
                best = pos;
            }
        }
        ranked.push(order.remove(best));
    }
    ranked
}

/// A random small corpus of at most `max_docs` documents over a tiny alphabet.
pub fn random_corpus(rng: &mut ChaCha8Rng, max_docs: usize) -> Vec<TokenSeq> {
    let alphabet = ["a", "b", "c", "d", "e", "f", "g"];
    let docs = rng.random_range(1..=max_docs);
    (0..docs)
        .map(|_| {
            let len = rng.random_range(1..=6);
            let idx = sample(rng, alphabet.len(), len.min(alphabet.len())).into_vec();
            let mut tokens: Vec<String> = idx.iter().map(|&i| alphabet[i].to_string()).collect();
            if rng.random::<bool>() {
                tokens.push(tokens[0].clone());
            }
            TokenSeq::new(tokens)
        })
        .collect()
}
