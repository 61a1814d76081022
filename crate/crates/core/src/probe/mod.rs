//! Small synthetic downstream tasks standing in for GLUE, plus fine-tuning
//! and the metric set used to score them.
//!
//! All three tasks are generated from the same grammar as the pre-training
//! corpus, so every probe token is in the training vocabulary:
//!
//! * `acceptability`: one sentence, possibly with two adjacent tokens
//!   swapped. Label 1 means untouched. Scored by Matthews correlation.
//! * `agreement`: `[CLS] a [SEP] b [SEP]`, positive when both clauses have
//!   the same subject. Scored by accuracy and F1.
//! * `similarity`: the same pair layout, target = fraction of the three
//!   content slots (subject, verb, object) the clauses share. Scored by
//!   Pearson and Spearman correlation.

mod finetune;
mod metrics;

pub use finetune::{
    evaluate, finetune, grid_search, Classifier, FinetuneConfig, FinetuneOutcome, GridPoint, GridResult, SeedScore,
};
pub use metrics::{
    accuracy, average_ranks, composite, f1_score, matthews_corr, pearson, spearman, Confusion, Correlation, Metric,
};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::grammar::{self, Clause, ANIMALS, VERBS};
use crate::data::{TokenSequence, Vocabulary, CLS, SEP, UNK};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    BinaryCls,
    MultiCls(usize),
    Regression,
}

impl TaskKind {
    /// Width of the output layer.
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::BinaryCls => 2,
            TaskKind::MultiCls(c) => c,
            TaskKind::Regression => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Score(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: TokenSequence,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTask {
    pub name: String,
    pub kind: TaskKind,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub metrics: Vec<Metric>,
}

impl ProbeTask {
    /// Checks that every label fits the task kind and every id the vocabulary.
    pub fn validate(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        for ex in self.train.iter().chain(&self.dev) {
            match (self.kind, ex.label) {
                (TaskKind::BinaryCls, Label::Class(c)) if c < 2 => {}
                (TaskKind::MultiCls(n), Label::Class(c)) if c < n => {}
                (TaskKind::Regression, Label::Score(s)) if s.is_finite() => {}
                (kind, label) => {
                    return Err(Error::Config(format!(
                        "task `{}`: label {label:?} invalid for {kind:?}",
                        self.name
                    )))
                }
            }
            if let Some(&id) = ex.tokens.ids().iter().find(|&&id| id >= vocab_size) {
                return Err(Error::Vocab { id, size: vocab_size });
            }
            if ex.tokens.len() > max_len {
                return Err(Error::Length {
                    len: ex.tokens.len(),
                    max: max_len,
                });
            }
        }
        Ok(())
    }
}

/// Sizes and seed of the generated probe sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            seed: 0,
            train_size: 1000,
            dev_size: 500,
        }
    }
}

pub const PROBE_NAMES: [&str; 3] = ["acceptability", "agreement", "similarity"];

fn encode_checked(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>> {
    let ids = vocab.encode(text);
    if ids.contains(&UNK) {
        return Err(Error::Config(format!(
            "vocabulary of {} tokens cannot spell probe text `{text}`",
            vocab.len()
        )));
    }
    Ok(ids)
}

fn single(ids: &[usize]) -> Result<TokenSequence> {
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(CLS);
    out.extend_from_slice(ids);
    out.push(SEP);
    TokenSequence::new(out)
}

fn pair(a: &[usize], b: &[usize]) -> Result<TokenSequence> {
    let mut out = Vec::with_capacity(a.len() + b.len() + 3);
    out.push(CLS);
    out.extend_from_slice(a);
    out.push(SEP);
    out.extend_from_slice(b);
    out.push(SEP);
    TokenSequence::new(out)
}

/// Swaps one random pair of adjacent, distinct ids. `None` if every
/// adjacent pair is equal.
pub fn swap_adjacent<R: Rng + ?Sized>(ids: &[usize], rng: &mut R) -> Option<Vec<usize>> {
    let spots: Vec<usize> = (0..ids.len().saturating_sub(1)).filter(|&i| ids[i] != ids[i + 1]).collect();
    let &i = spots.choose(rng)?;
    let mut out = ids.to_vec();
    out.swap(i, i + 1);
    Some(out)
}

/// Clause rendering without the adjective, to keep sentence pairs short.
fn short(c: &Clause) -> String {
    let [_, _, verb, object] = c.content();
    let subject = if c.plural {
        if c.subject.ends_with('x') {
            format!("{}es", c.subject)
        } else {
            format!("{}s", c.subject)
        }
    } else {
        c.subject.to_string()
    };
    format!("the {subject} {verb} the {object}.")
}

/// Content slots compared by the similarity task.
fn slots(c: &Clause) -> [&'static str; 3] {
    let [_, subject, verb, object] = c.content();
    [subject, verb, object]
}

/// A clause that keeps each slot of `a` with probability one half.
fn perturb<R: Rng + ?Sized>(a: &Clause, rng: &mut R) -> Clause {
    let mut b = a.clone();
    if rng.random_bool(0.5) {
        b.subject = *ANIMALS.iter().filter(|&&s| s != a.subject).collect::<Vec<_>>().choose(rng).unwrap();
    }
    if rng.random_bool(0.5) {
        b.verb = (a.verb + rng.random_range(1..VERBS.len())) % VERBS.len();
    }
    let words = VERBS[b.verb].2.words();
    if VERBS[b.verb].2 != VERBS[a.verb].2 || rng.random_bool(0.5) {
        b.object = *words.iter().filter(|&&w| w != a.object).collect::<Vec<_>>().choose(rng).unwrap();
    }
    b
}

pub fn acceptability_example<R: Rng + ?Sized>(vocab: &Vocabulary, rng: &mut R) -> Result<Example> {
    let protagonist = ANIMALS.choose(rng).unwrap();
    let ids = encode_checked(vocab, &grammar::sentence(protagonist, rng))?;
    let swapped = if rng.random_bool(0.5) {
        swap_adjacent(&ids, rng)
    } else {
        None
    };
    Ok(match swapped {
        Some(s) => Example {
            tokens: single(&s)?,
            label: Label::Class(0),
        },
        None => Example {
            tokens: single(&ids)?,
            label: Label::Class(1),
        },
    })
}

pub fn agreement_example<R: Rng + ?Sized>(vocab: &Vocabulary, rng: &mut R) -> Result<Example> {
    let a = Clause::random(rng);
    let positive = rng.random_bool(0.5);
    let subject = if positive {
        a.subject
    } else {
        ANIMALS.iter().filter(|&&s| s != a.subject).collect::<Vec<_>>().choose(rng).unwrap()
    };
    let b = Clause::about(subject, rng);
    Ok(Example {
        tokens: pair(&encode_checked(vocab, &short(&a))?, &encode_checked(vocab, &short(&b))?)?,
        label: Label::Class(positive as usize),
    })
}

pub fn similarity_example<R: Rng + ?Sized>(vocab: &Vocabulary, rng: &mut R) -> Result<Example> {
    let a = Clause::random(rng);
    let b = perturb(&a, rng);
    let shared = slots(&a).iter().zip(slots(&b)).filter(|(x, y)| *x == y).count();
    Ok(Example {
        tokens: pair(&encode_checked(vocab, &short(&a))?, &encode_checked(vocab, &short(&b))?)?,
        label: Label::Score(shared as f64 / 3.0),
    })
}

fn build_task(
    name: &str,
    kind: TaskKind,
    metrics: Vec<Metric>,
    spec: &ProbeSpec,
    stream: u64,
    vocab: &Vocabulary,
    gen: fn(&Vocabulary, &mut ChaCha8Rng) -> Result<Example>,
) -> Result<ProbeTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut all = (0..spec.train_size + spec.dev_size)
        .map(|_| gen(vocab, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    all.shuffle(&mut rng);
    let dev = all.split_off(spec.train_size);
    Ok(ProbeTask {
        name: name.to_string(),
        kind,
        train: all,
        dev,
        metrics,
    })
}

/// The three built-in probes, deterministic in `spec.seed`.
pub fn builtin_probes(vocab: &Vocabulary, spec: &ProbeSpec) -> Result<Vec<ProbeTask>> {
    if spec.train_size == 0 || spec.dev_size == 0 {
        return Err(Error::Config("probe train and dev sets must be non-empty".into()));
    }
    Ok(vec![
        build_task(
            PROBE_NAMES[0],
            TaskKind::BinaryCls,
            vec![Metric::Matthews],
            spec,
            1,
            vocab,
            acceptability_example,
        )?,
        build_task(
            PROBE_NAMES[1],
            TaskKind::BinaryCls,
            vec![Metric::Accuracy, Metric::F1],
            spec,
            2,
            vocab,
            agreement_example,
        )?,
        build_task(
            PROBE_NAMES[2],
            TaskKind::Regression,
            vec![Metric::Pearson, Metric::Spearman],
            spec,
            3,
            vocab,
            similarity_example,
        )?,
    ])
}

/// One probe by name.
pub fn builtin_probe(name: &str, vocab: &Vocabulary, spec: &ProbeSpec) -> Result<ProbeTask> {
    builtin_probes(vocab, spec)?
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Config(format!("unknown probe `{name}` (known: {})", PROBE_NAMES.join(", "))))
}
