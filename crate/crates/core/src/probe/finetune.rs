use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, composite, f1_score, matthews_corr, pearson, spearman, Metric};
use super::{Example, Label, ProbeTask, TaskKind};
use crate::autograd::{Scalar, Tape, Tensor, Var};
use crate::data::TokenSequence;
use crate::encoder::{decays, init_leaf, Dropout, EncoderParams, Linear, TokenBatch};
use crate::error::{Error, Result};
use crate::trainer::{adam_update, epoch_permutation, linear_schedule, stream_rng, AdamConfig, Model, Stream};

/// Fine-tuning search space and shared hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub max_epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropout: f64,
    /// Train the head alone, keeping the encoder and embedding fixed.
    #[serde(default)]
    pub freeze_encoder: bool,
}

impl FinetuneConfig {
    /// Batch {16, 32} × lr {1e-5, …, 8e-5}, 10 epochs, warmup ratio 0.06,
    /// weight decay 0.1, ten seeds.
    pub fn paper() -> Self {
        FinetuneConfig {
            batch_sizes: vec![16, 32],
            learning_rates: (1..=8).map(|i| i as f64 * 1e-5).collect(),
            max_epochs: 10,
            warmup_ratio: 0.06,
            weight_decay: 0.1,
            seeds: (0..10).collect(),
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            dropout: 0.1,
            freeze_encoder: false,
        }
    }

    /// The same grid with learning rates scaled by the ratio of desk to
    /// full-size pre-training peak rates (5e-4 / 1e-4), since the tiny
    /// encoders barely move at 1e-5 within ten short epochs.
    pub fn desk() -> Self {
        FinetuneConfig {
            learning_rates: (1..=8).map(|i| i as f64 * 5e-5).collect(),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() || self.learning_rates.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("fine-tuning grid and seed list must be non-empty".into()));
        }
        if self.batch_sizes.contains(&0) || self.max_epochs == 0 {
            return Err(Error::Config("batch sizes and epochs must be positive".into()));
        }
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("warmup ratio and dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Grid points sorted by learning rate, then batch size.
    pub fn grid(&self) -> Vec<GridPoint> {
        let mut lrs = self.learning_rates.clone();
        lrs.sort_by(f64::total_cmp);
        lrs.dedup();
        let mut bss = self.batch_sizes.clone();
        bss.sort_unstable();
        bss.dedup();
        lrs.iter()
            .flat_map(|&lr| bss.iter().map(move |&batch_size| GridPoint { batch_size, lr }))
            .collect()
    }

    pub const KEYS: [&'static str; 11] = [
        "batch_sizes",
        "learning_rates",
        "max_epochs",
        "warmup_ratio",
        "weight_decay",
        "seeds",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "dropout",
        "freeze_encoder",
    ];

    /// Whether `key` names a fine-tuning setting.
    pub fn has_key(key: &str) -> bool {
        Self::KEYS.contains(&key)
    }

    /// Sets one key from its text form; lists are comma-separated.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').filter(|s| !s.trim().is_empty()).map(|s| one(key, s)).collect()
        }
        match key {
            "batch_sizes" => self.batch_sizes = list(key, value)?,
            "learning_rates" => self.learning_rates = list(key, value)?,
            "max_epochs" => self.max_epochs = one(key, value)?,
            "warmup_ratio" => self.warmup_ratio = one(key, value)?,
            "weight_decay" => self.weight_decay = one(key, value)?,
            "seeds" => self.seeds = list(key, value)?,
            "adam_beta1" => self.adam_beta1 = one(key, value)?,
            "adam_beta2" => self.adam_beta2 = one(key, value)?,
            "adam_eps" => self.adam_eps = one(key, value)?,
            "dropout" => self.dropout = one(key, value)?,
            "freeze_encoder" => self.freeze_encoder = one(key, value)?,
            other => return Err(Error::Config(format!("unknown fine-tuning key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fn join<T: ToString>(xs: &[T]) -> String {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        Some(match key {
            "batch_sizes" => join(&self.batch_sizes),
            "learning_rates" => join(&self.learning_rates),
            "max_epochs" => self.max_epochs.to_string(),
            "warmup_ratio" => self.warmup_ratio.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "seeds" => join(&self.seeds),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "dropout" => self.dropout.to_string(),
            "freeze_encoder" => self.freeze_encoder.to_string(),
            _ => return None,
        })
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub batch_size: usize,
    pub lr: f64,
}

impl std::fmt::Display for GridPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "bs{}-lr{:e}", self.batch_size, self.lr)
    }
}

/// Encoder, its token embedding and a linear head on the `[CLS]` state.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<P> {
    pub embedding: P,
    pub encoder: EncoderParams<P>,
    pub head: Linear<P>,
}

impl<P> Classifier<P> {
    pub fn map<'a, Q>(&'a self, f: &mut dyn FnMut(&str, &'a P) -> Q) -> Classifier<Q> {
        Classifier {
            embedding: f("embedding", &self.embedding),
            encoder: self.encoder.map("encoder", f),
            head: self.head.map("head", f),
        }
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.map(&mut |_, p| out.push(p));
        out
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut P)) {
        f("embedding", &mut self.embedding);
        self.encoder.visit_mut("encoder", f);
        self.head.visit_mut("head", f);
    }
}

impl<T: Scalar> Classifier<Tensor<T>> {
    /// Takes the main encoder of a pre-trained model and adds a fresh head
    /// seeded by `seed`.
    pub fn from_model(model: &Model<Tensor<T>>, outputs: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0, Stream::Init);
        let hidden = model.main.config.hidden_size;
        let head = Linear::shape(hidden, outputs).map("head", &mut |n, s| init_leaf(n, s, &mut rng));
        Classifier {
            embedding: model.embedding.clone(),
            encoder: model.main.clone(),
            head,
        }
    }

    /// Leaves for the parameters named by `trainable`, constants elsewhere.
    fn bind(&self, tape: &mut Tape<T>, trainable: &dyn Fn(&str) -> bool) -> Classifier<Var> {
        self.map(&mut |n, t| if trainable(n) { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
    }
}

impl Classifier<Var> {
    /// `[batch, outputs]` head values for the `[CLS]` row of each sequence.
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        seqs: &[&TokenSequence],
        dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let ids: Vec<&[usize]> = seqs.iter().map(|s| s.ids()).collect();
        let batch = TokenBatch::pad(&ids)?;
        let (rate, mut rng) = match dropout {
            Some(d) => (d.rate, Some(d.rng)),
            None => (0.0, None),
        };
        let d = rng.as_deref_mut().map(|rng| Dropout { rate, rng });
        let h = self.encoder.forward(tape, &batch, Some(self.embedding), d)?;
        let rows: Vec<usize> = (0..batch.batch).map(|s| s * batch.seq_len).collect();
        let mut cls = tape.gather_rows(h, &rows)?;
        if let Some(rng) = rng {
            cls = tape.dropout(cls, rate, rng)?;
        }
        self.head.apply(tape, cls)
    }
}

fn task_loss<T: Scalar>(tape: &mut Tape<T>, out: Var, kind: TaskKind, labels: &[Label]) -> Result<Var> {
    match kind {
        TaskKind::Regression => {
            let target: Vec<f64> = labels
                .iter()
                .map(|l| match l {
                    Label::Score(s) => Ok(*s),
                    Label::Class(_) => Err(Error::Config("class label in a regression task".into())),
                })
                .collect::<Result<_>>()?;
            let t = tape.constant(Tensor::from_f64(&[labels.len(), 1], &target)?);
            let d = tape.sub(out, t)?;
            let sq = tape.mul(d, d)?;
            tape.mean(sq)
        }
        _ => {
            let picks: Vec<(usize, usize)> = labels
                .iter()
                .enumerate()
                .map(|(r, l)| match l {
                    Label::Class(c) => Ok((r, *c)),
                    Label::Score(_) => Err(Error::Config("score label in a classification task".into())),
                })
                .collect::<Result<_>>()?;
            let lp = tape.log_softmax(out, 1)?;
            let picked = tape.pick(lp, &picks)?;
            let m = tape.mean(picked)?;
            tape.scale(m, -1.0)
        }
    }
}

/// Metric values of one fine-tuned model on the dev split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub scores: Vec<(Metric, f64)>,
    /// Mean of `scores`.
    pub composite: f64,
    /// Set when a correlation was computed against constant predictions.
    pub degenerate: bool,
}

/// Head outputs on `examples` in eval mode, batched by 64.
fn predict<T: Scalar>(clf: &Classifier<Tensor<T>>, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let mut tape = Tape::new();
        let vars = clf.bind(&mut tape, &|_| false);
        let seqs: Vec<&TokenSequence> = chunk.iter().map(|e| &e.tokens).collect();
        let y = vars.forward(&mut tape, &seqs, None)?;
        let v = tape.value(y);
        out.extend((0..v.rows()).map(|r| v.row(r).iter().map(|x| x.as_f64()).collect::<Vec<_>>()));
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores `clf` on the dev split of `task`.
pub fn evaluate<T: Scalar>(clf: &Classifier<Tensor<T>>, task: &ProbeTask) -> Result<FinetuneOutcome> {
    let outputs = predict(clf, &task.dev)?;
    let mut degenerate = false;
    let mut scores = Vec::new();
    for &metric in &task.metrics {
        let value = match task.kind {
            TaskKind::Regression => {
                let p: Vec<f64> = outputs.iter().map(|r| r[0]).collect();
                let l: Vec<f64> = task.dev.iter().map(|e| label_value(e.label)).collect();
                let c = match metric {
                    Metric::Pearson => pearson(&p, &l)?,
                    Metric::Spearman => spearman(&p, &l)?,
                    other => return Err(Error::Config(format!("{other} is not a regression metric"))),
                };
                degenerate |= c.degenerate;
                c.value
            }
            _ => {
                let p: Vec<usize> = outputs.iter().map(|r| argmax(r)).collect();
                let l: Vec<usize> = task.dev.iter().map(|e| label_value(e.label) as usize).collect();
                let pb: Vec<bool> = p.iter().map(|&c| c == 1).collect();
                let lb: Vec<bool> = l.iter().map(|&c| c == 1).collect();
                match metric {
                    Metric::Accuracy => accuracy(&p, &l)?,
                    Metric::Matthews => matthews_corr(&pb, &lb)?,
                    Metric::F1 => f1_score(&pb, &lb)?,
                    other => return Err(Error::Config(format!("{other} is not a classification metric"))),
                }
            }
        };
        scores.push((metric, value));
    }
    let composite = composite(&scores.iter().map(|s| s.1).collect::<Vec<_>>())?;
    Ok(FinetuneOutcome {
        scores,
        composite,
        degenerate,
    })
}

fn label_value(l: Label) -> f64 {
    match l {
        Label::Class(c) => c as f64,
        Label::Score(s) => s,
    }
}

/// Fine-tunes `model`'s main encoder (frozen with `freeze_encoder`) plus a
/// fresh head on `task` at one grid point. Deterministic in `(model, task, point, cfg, seed)`.
pub fn finetune<T: Scalar>(
    model: &Model<Tensor<T>>,
    task: &ProbeTask,
    point: GridPoint,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(Classifier<Tensor<T>>, FinetuneOutcome)> {
    cfg.validate()?;
    let enc = &model.main.config;
    task.validate(enc.vocab_size, enc.max_seq_len)?;
    if task.train.is_empty() || task.dev.is_empty() {
        return Err(Error::Empty(format!("task `{}` split", task.name)));
    }
    let mut clf = Classifier::from_model(model, task.kind.outputs(), seed);
    let names: Vec<String> = {
        let mut v = Vec::new();
        clf.map(&mut |n, _| v.push(n.to_string()));
        v
    };
    let mut m: Vec<Vec<T>> = clf.leaves().iter().map(|t| vec![T::zero(); t.len()]).collect();
    let mut v = m.clone();
    let n = task.train.len();
    let per_epoch = n.div_ceil(point.batch_size) as u64;
    let total = per_epoch * cfg.max_epochs as u64;
    let warmup = (cfg.warmup_ratio * total as f64).round() as u64;
    let hp = cfg.adam();
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs as u64 {
        let order = epoch_permutation(seed, epoch, n);
        for chunk in order.chunks(point.batch_size) {
            let seqs: Vec<&TokenSequence> = chunk.iter().map(|&i| &task.train[i].tokens).collect();
            let labels: Vec<Label> = chunk.iter().map(|&i| task.train[i].label).collect();
            let mut tape = Tape::new();
            let vars = clf.bind(&mut tape, &|n| !cfg.freeze_encoder || n.starts_with("head"));
            let mut rng = stream_rng(seed, step, Stream::Dropout);
            let dropout = Dropout {
                rate: cfg.dropout,
                rng: &mut rng,
            };
            let out = vars.forward(&mut tape, &seqs, Some(dropout))?;
            let loss = task_loss(&mut tape, out, task.kind, &labels)?;
            let lv = tape.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "fine-tuning loss on `{}` at step {}",
                    task.name,
                    step + 1
                )));
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Vec<T>>> = vars.leaves().iter().map(|&&v| tape.grad(v).map(|g| g.to_vec())).collect();
            drop(tape);
            if let Some(bad) = grads.iter().zip(&names).find(|(g, _)| g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
                return Err(Error::NonFinite(format!("fine-tuning gradient of `{}`", bad.1)));
            }
            step += 1;
            let lr = linear_schedule(step, warmup, total, point.lr);
            let mut j = 0;
            clf.visit_mut(&mut |name, p| {
                if let Some(g) = &grads[j] {
                    adam_update(p.data_mut(), g, &mut m[j], &mut v[j], step, lr, &hp, decays(name));
                }
                j += 1;
            });
        }
    }
    let outcome = evaluate(&clf, task)?;
    Ok((clf, outcome))
}


/// Dev score of one `(grid point, seed)` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub point: GridPoint,
    pub seed: u64,
    pub outcome: FinetuneOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub task: String,
    pub runs: Vec<SeedScore>,
    /// Mean composite over seeds for each grid point, in grid order.
    pub means: Vec<(GridPoint, f64)>,
    pub best: GridPoint,
    pub best_score: f64,
}

/// Every grid point × seed, fanned out over `threads` workers. Results come
/// back in (grid point, seed) order whatever the thread count. The best
/// point maximizes the seed-mean composite; ties go to the smaller learning
/// rate, then the smaller batch.
pub fn grid_search<T: Scalar>(
    model: &Model<Tensor<T>>,
    task: &ProbeTask,
    cfg: &FinetuneConfig,
    threads: usize,
) -> Result<GridResult> {
    cfg.validate()?;
    let jobs: Vec<(GridPoint, u64)> = cfg
        .grid()
        .into_iter()
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FinetuneOutcome>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(point, seed)) = jobs.get(i) else { break };
                let r = finetune(model, task, point, cfg, seed).map(|(_, o)| o);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let mut runs = Vec::with_capacity(jobs.len());
    for (slot, &(point, seed)) in slots.into_inner().expect("no worker panicked").into_iter().zip(&jobs) {
        let outcome = slot.ok_or_else(|| Error::Internal("fine-tuning job did not run".into()))??;
        runs.push(SeedScore { point, seed, outcome });
    }
    let means: Vec<(GridPoint, f64)> = cfg
        .grid()
        .into_iter()
        .map(|p| {
            let s: Vec<f64> = runs.iter().filter(|r| r.point == p).map(|r| r.outcome.composite).collect();
            (p, s.iter().sum::<f64>() / s.len() as f64)
        })
        .collect();
    let (best, best_score) = means
        .iter()
        .copied()
        .fold(None, |acc: Option<(GridPoint, f64)>, (p, s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((p, s)),
        })
        .expect("grid is non-empty");
    Ok(GridResult {
        task: task.name.clone(),
        runs,
        means,
        best,
        best_score,
    })
}
