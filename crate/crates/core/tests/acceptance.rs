//! Acceptance criteria, one verdict line each.
//!
//! Built without the libtest harness so the verdict lines appear even when
//! everything passes. `ACCEPTANCE_ONLY=5,6` restricts a run to some
//! criteria. Desk-scale pre-training runs are cached under the target's tmp
//! directory by manifest hash, so an interrupted run resumes and a repeated
//! one is reused.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mcbert_core::autograd::gradcheck::{check_gradients, check_gradients_at};
use mcbert_core::autograd::{AttentionSpec, Tape, Tensor, Var};
use mcbert_core::data::grammar::generate_corpus;
use mcbert_core::data::{
    is_unsamplable, MaskedSequence, TokenSequence, VocabMode, Vocabulary, CLS, MASK, NOTA, NUM_SPECIALS, SEP,
};
use mcbert_core::entropy::{verify_inequality, ToyLanguage};
use mcbert_core::harness::{self, finetune_checkpoint, CacheStatus, Corpus, PretrainRun, RunManifest, RunStatus};
use mcbert_core::objectives::{build_candidates, replace, CorruptedSequence, TokenDistributions};
use mcbert_core::probe::{
    builtin_probe, f1_score, finetune, matthews_corr, pearson, spearman, FinetuneConfig, GridPoint, ProbeSpec,
};
use mcbert_core::trainer::{
    bind_model, init_model, joint_forward, MetricsRecord, Sampling, TrainConfig, Variant, ALL_VARIANTS,
};
use mcbert_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn say(line: &str) {
    // Straight to the process stream: libtest-style capture never hides it.
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    /// Soft criterion not met: reported, not failed.
    Flagged,
}

struct Verdict {
    status: Status,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict {
        status: if pass { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache")
}

// ---------------------------------------------------------------- criterion 1

fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

type OpFn<'a> = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a>;

/// Worst relative error of every differentiable op over a few random shapes.
fn op_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + seed);
        let r = 1 + rng.random_range(0..4usize);
        let c = 3 + rng.random_range(0..4usize);
        let k = 1 + rng.random_range(0..4usize);
        let mut t = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut rng);
        let rc = || -> Vec<Tensor<f64>> { Vec::new() };
        let _ = rc;
        let x = t(&[r, c]);
        let y = t(&[r, c]);
        let a = t(&[r, k]);
        let b = t(&[k, c]);
        let bt = t(&[c, k]);
        let bias = t(&[c]);
        let (g, beta) = (t(&[c]), t(&[c]));
        let gd = t(&[r * k, c]);
        let ids: Vec<usize> = (0..k + 2).map(|i| (i * 7 + seed as usize) % r).collect();
        let picks: Vec<(usize, usize)> = (0..k + 1).map(|i| (i % r, (i * 3 + 1) % c)).collect();
        let probs: Vec<f64> = (0..r * c).map(|i| 0.1 + 0.8 * ((i * 37 + 11) % 97) as f64 / 97.0).collect();
        let labels: Vec<bool> = (0..r * c).map(|i| (i + seed as usize).is_multiple_of(3)).collect();
        let (heads, dh, len, batch) = (1 + seed as usize % 2, 2 + seed as usize % 3, 2 + r, 1 + seed as usize % 2);
        let mut key_valid = vec![true; batch * len];
        key_valid[len - 1] = seed % 2 == 0;
        let spec = AttentionSpec {
            batch,
            seq_len: len,
            heads,
            head_size: dh,
            key_valid,
        };
        let qkv: Vec<Tensor<f64>> = (0..3).map(|_| t(&[batch * len, heads * dh])).collect();

        let cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = vec![
            ("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, seed) })),
            ("matmul_t", vec![a.clone(), bt.clone()], Box::new(|t, v| { let y = t.matmul_t(v[0], v[1])?; weighted_sum(t, y, seed) })),
            ("add", vec![x.clone(), y.clone()], Box::new(|t, v| { let o = t.add(v[0], v[1])?; weighted_sum(t, o, seed) })),
            ("sub", vec![x.clone(), y.clone()], Box::new(|t, v| { let o = t.sub(v[0], v[1])?; weighted_sum(t, o, seed) })),
            ("mul", vec![x.clone(), y.clone()], Box::new(|t, v| { let o = t.mul(v[0], v[1])?; weighted_sum(t, o, seed) })),
            ("add_bias", vec![x.clone(), bias.clone()], Box::new(|t, v| { let o = t.add_bias(v[0], v[1])?; weighted_sum(t, o, seed) })),
            ("scale", vec![x.clone()], Box::new(|t, v| { let o = t.scale(v[0], -1.7)?; weighted_sum(t, o, seed) })),
            ("gelu", vec![x.clone()], Box::new(|t, v| { let o = t.gelu(v[0])?; weighted_sum(t, o, seed) })),
            ("sigmoid", vec![x.clone()], Box::new(|t, v| { let o = t.sigmoid(v[0])?; weighted_sum(t, o, seed) })),
            ("tanh", vec![x.clone()], Box::new(|t, v| { let o = t.tanh(v[0])?; weighted_sum(t, o, seed) })),
            ("sum", vec![x.clone()], Box::new(|t, v| t.sum(v[0]))),
            ("mean", vec![x.clone()], Box::new(|t, v| t.mean(v[0]))),
            ("softmax", vec![x.clone()], Box::new(|t, v| { let o = t.softmax(v[0], 1)?; weighted_sum(t, o, seed) })),
            ("log_softmax", vec![x.clone()], Box::new(|t, v| { let o = t.log_softmax(v[0], 0)?; weighted_sum(t, o, seed) })),
            ("reshape", vec![x.clone()], Box::new(move |t, v| { let o = t.reshape(v[0], &[r * c])?; weighted_sum(t, o, seed) })),
            ("dropout", vec![x.clone()], Box::new(|t, v| {
                let mut d = ChaCha8Rng::seed_from_u64(seed);
                let o = t.dropout(v[0], 0.25, &mut d)?;
                weighted_sum(t, o, seed)
            })),
            ("layer_norm", vec![x.clone(), g.clone(), beta.clone()], Box::new(|t, v| { let o = t.layer_norm(v[0], v[1], v[2], 1e-12)?; weighted_sum(t, o, seed) })),
            ("gather_rows", vec![x.clone()], Box::new(|t, v| { let o = t.gather_rows(v[0], &ids)?; weighted_sum(t, o, seed) })),
            ("pick", vec![x.clone()], Box::new(|t, v| { let o = t.pick(v[0], &picks)?; weighted_sum(t, o, seed) })),
            ("group_dot", vec![gd.clone(), x.clone()], Box::new(move |t, v| { let o = t.group_dot(v[0], v[1], k)?; weighted_sum(t, o, seed) })),
            ("binary_nll", vec![Tensor::from_f64(&[r, c], &probs)?], Box::new(|t, v| { let o = t.binary_nll(v[0], &labels, 1e-12)?; weighted_sum(t, o, seed) })),
            ("attention", qkv.clone(), Box::new(|t, v| { let o = t.attention(v[0], v[1], v[2], spec.clone())?; weighted_sum(t, o, seed) })),
        ];
        for (name, inputs, f) in cases {
            let e = check_gradients(&inputs, 1e-5, |t, v| f(t, v))?.max_rel_error();
            match worst.iter_mut().find(|w| w.0 == name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((name, e)),
            }
        }
    }
    Ok(worst)
}

/// Joint multi-choice objective of a tiny encoder + tiny controller with the
/// sampled plan held fixed; relative error per parameter tensor.
fn joint_error() -> Result<(f64, usize, usize)> {
    let mut cfg = TrainConfig::desk(Variant::McBert);
    cfg.max_seq_len = 16;
    cfg.dropout = 0.0;
    let vocab = 64;
    let model = init_model::<f64>(&cfg, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seqs: Vec<TokenSequence> = (0..2)
        .map(|_| {
            let mut ids = vec![CLS];
            ids.extend((0..14).map(|_| rng.random_range(NUM_SPECIALS..vocab)));
            ids.push(SEP);
            TokenSequence::new(ids)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let plans = {
        let mut tape = Tape::<f64>::new();
        let vars = bind_model(&mut tape, &model);
        let (mut m, mut s) = (ChaCha8Rng::seed_from_u64(1), ChaCha8Rng::seed_from_u64(2));
        let sampling = Sampling::Draw {
            mask: &mut m,
            sample: &mut s,
        };
        joint_forward(&mut tape, &vars, &cfg, &refs, sampling, None)?.plans
    };
    let leaves: Vec<Tensor<f64>> = model.leaves().into_iter().cloned().collect();
    let coords: Vec<Vec<usize>> = leaves
        .iter()
        .map(|t| {
            let n = t.len();
            let mut idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..n)).collect();
            idx.sort_unstable();
            idx.dedup();
            idx
        })
        .collect();
    let report = check_gradients_at(&leaves, &coords, 1e-4, |tape, vars| {
        let bound = model.rebuild(vars);
        let out = joint_forward(tape, &bound, &cfg, &refs, Sampling::Fixed(&plans), None)?;
        if out.task.is_none() {
            return Err(mcbert_core::Error::Internal("no task loss".into()));
        }
        Ok(out.loss)
    })?;
    // Tensors whose gradient vanishes identically (key biases) are judged
    // by absolute discrepancy.
    let zero = report.per_input.len() - report.abs_error.iter().filter(|&&a| a > 1e-10).count();
    Ok((report.max_rel_error_above(1e-10), report.coordinates, zero))
}

fn criterion_1() -> Result<Verdict> {
    let start = Instant::now();
    let ops = op_errors()?;
    let (worst_op, op_err) = ops.iter().fold(("", 0.0), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let (joint, coords, zero) = joint_error()?;
    let secs = start.elapsed().as_secs_f64();
    let pass = op_err < 1e-4 && joint < 1e-4 && secs < 60.0;
    Ok(verdict(
        pass,
        format!(
            "{} ops, worst {worst_op} rel err {op_err:.2e}; joint objective rel err {joint:.2e} over {coords} coordinates ({zero} zero-gradient tensors); {secs:.1}s",
            ops.len()
        ),
    ))
}

// ---------------------------------------------------------------- criterion 2

fn random_probs(v: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p: Vec<f64> = (0..v)
        .map(|_| if rng.random_bool(0.25) { 0.0 } else { Exp1.sample(rng) })
        .collect();
    let s: f64 = p.iter().sum();
    if s == 0.0 {
        p[v - 1] = 1.0;
    } else {
        p.iter_mut().for_each(|x| *x /= s);
    }
    p
}

fn criterion_2() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0usize;
    let mut first: Option<String> = None;
    let mut built = 0usize;
    for k in [2usize, 5, 10, 20] {
        let mut sets = 0usize;
        while sets < 100_000 {
            let v = rng.random_range(NUM_SPECIALS + k + 1..=NUM_SPECIALS + k + 24);
            let len = 4;
            let x: Vec<usize> = std::iter::once(CLS)
                .chain((0..len).map(|_| rng.random_range(SEP + 1..v)))
                .chain(std::iter::once(SEP))
                .collect();
            let xr_ids: Vec<usize> = x
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    if i == 0 || i == len + 1 || rng.random_bool(0.5) {
                        t
                    } else {
                        let mut c = rng.random_range(SEP + 1..v);
                        while c == t {
                            c = rng.random_range(SEP + 1..v);
                        }
                        c
                    }
                })
                .collect();
            let xs = TokenSequence::new(x.clone())?;
            let xr = CorruptedSequence {
                replaced: xr_ids.iter().zip(&x).map(|(a, b)| a != b).collect(),
                ids: xr_ids.clone(),
                masked_positions: (1..=len).collect(),
            };
            let probs: Vec<f64> = (0..len + 2).flat_map(|_| random_probs(v, &mut rng)).collect();
            let dist = TokenDistributions::new(v, probs)?;
            let positions: Vec<usize> = (1..=len).collect();
            for set in build_candidates(&xs, &xr, &dist, k, &positions, &mut rng)? {
                sets += 1;
                let (orig, corr) = (x[set.position], xr_ids[set.position]);
                let c = &set.candidates;
                let distinct: BTreeSet<usize> = c.iter().copied().collect();
                let problem = if c.len() != k {
                    Some("size")
                } else if distinct.len() != k {
                    Some("duplicate")
                } else if c.iter().filter(|&&t| t == NOTA).count() != 1 {
                    Some("[NOTA] count")
                } else if set.target >= k {
                    Some("target index")
                } else if set.negatives.contains(&orig) {
                    Some("x_i drawn as a negative")
                } else if set.negatives.iter().any(|&t| is_unsamplable(t) || !c.contains(&t)) {
                    Some("bad negative")
                } else if orig != corr && !(c.contains(&orig) && c[set.target] == orig && set.negatives.len() == k - 2) {
                    Some("replaced branch")
                } else if orig == corr && (c.contains(&orig) || c[set.target] != NOTA || set.negatives.len() != k - 1) {
                    Some("unreplaced branch")
                } else {
                    None
                };
                if let Some(p) = problem {
                    violations += 1;
                    first.get_or_insert_with(|| format!("k={k}: {p} in {set:?}"));
                }
            }
        }
        built += sets;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        violations == 0 && secs < 30.0,
        format!(
            "{built} candidate sets over k in {{2,5,10,20}}, {violations} violations{}; {secs:.1}s",
            first.map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    ))
}

// ---------------------------------------------------------------- criterion 3

/// Pearson chi-square p-value of observed counts against expected
/// probabilities (categories with zero expectation must be empty).
fn chi_square_p(counts: &[u64], expected: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut df = 0usize;
    for (&o, &p) in counts.iter().zip(expected) {
        if p > 0.0 {
            let e = p * n as f64;
            stat += (o as f64 - e).powi(2) / e;
            df += 1;
        } else if o > 0 {
            return 0.0;
        }
    }
    1.0 - ChiSquared::new((df - 1) as f64).expect("df >= 1").cdf(stat)
}

fn renormalized(row: &[f64], eligible: impl Fn(usize) -> bool) -> Vec<f64> {
    let mass: f64 = (0..row.len()).filter(|&t| eligible(t)).map(|t| row[t]).sum();
    (0..row.len()).map(|t| if eligible(t) { row[t] / mass } else { 0.0 }).collect()
}

fn criterion_3() -> Result<Verdict> {
    const V: usize = 10;
    const DRAWS: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Mass on special ids too, so the renormalization is exercised.
    let rows: Vec<f64> = (0..5).flat_map(|_| {
        let r: Vec<f64> = (0..V).map(|_| Exp1.sample(&mut rng)).collect();
        let s: f64 = r.iter().sum();
        r.into_iter().map(move |x| x / s)
    }).collect();
    let dist = TokenDistributions::new(V, rows.clone())?;
    let row = &rows[2 * V..3 * V];
    let x = TokenSequence::new(vec![CLS, 6, 7, 8, SEP])?;
    let xm = MaskedSequence {
        ids: vec![CLS, 6, MASK, 8, SEP],
        masked_positions: vec![2],
    };

    let mut counts = vec![0u64; V];
    for _ in 0..DRAWS {
        counts[replace(&x, &xm, &dist, &mut rng)?.ids[2]] += 1;
    }
    let p_replace = chi_square_p(&counts, &renormalized(row, |t| !is_unsamplable(t)));

    let mut first_negative = |corrupted: usize| -> Result<f64> {
        let mut ids = x.ids().to_vec();
        ids[2] = corrupted;
        let xr = CorruptedSequence {
            replaced: ids.iter().zip(x.ids()).map(|(a, b)| a != b).collect(),
            ids,
            masked_positions: vec![2],
        };
        let mut counts = vec![0u64; V];
        for _ in 0..DRAWS {
            let set = build_candidates(&x, &xr, &dist, 4, &[2], &mut rng)?.remove(0);
            counts[set.negatives[0]] += 1;
        }
        Ok(chi_square_p(&counts, &renormalized(row, |t| t != 7 && !is_unsamplable(t))))
    };
    let p_kept = first_negative(7)?;
    let p_replaced = first_negative(9)?;
    let worst = p_replace.min(p_kept).min(p_replaced);
    Ok(verdict(
        worst > 0.001,
        format!("chi-square p: replace {p_replace:.4}, candidates (unreplaced) {p_kept:.4}, candidates (replaced) {p_replaced:.4}; {DRAWS} draws each"),
    ))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = Vec::new();
    let mut strict = 0;
    for i in 0..100 {
        let lang = ToyLanguage::random(5, 3, &mut rng);
        assert!(lang.v <= 5 && lang.n <= 3 && lang.p > 0.0 && lang.p < 1.0);
        let r = verify_inequality(&lang)?;
        let ok = r.h_z_given_x_xr == 0.0
            && (r.h_x_given_xr - r.h_xz_given_xr).abs() <= 1e-9
            // Equal in exact arithmetic when v = 2 (the replacement is
            // forced); both sides then differ only by summation round-off.
            && r.h_x_given_xr >= r.h_z_given_xr - 1e-9;
        strict += usize::from(r.h_x_given_xr - r.h_z_given_xr > 1e-9);
        if !ok {
            bad.push(i);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        bad.is_empty() && secs < 120.0,
        format!("100 languages, {} violations {bad:?}, {strict} strict; {secs:.1}s", bad.len()),
    ))
}

// ------------------------------------------------------- criteria 5, 6 and 7

const SEEDS: [u64; 3] = [0, 1, 2];

fn desk_corpus() -> Result<Corpus> {
    let docs = generate_corpus(120_000, &mut ChaCha8Rng::seed_from_u64(1));
    let vocab = Vocabulary::build(&docs, 256, VocabMode::Char)?;
    Corpus::from_docs(&docs, vocab, 64)
}

fn desk_config(variant: Variant, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk(variant);
    cfg.seed = seed;
    cfg.log_every = 10;
    cfg.checkpoint_fractions = vec![0.1, 0.25, 0.5, 0.75, 1.0];
    cfg
}

fn desk_run(corpus: &Corpus, variant: Variant, seed: u64, stop_after: Option<u64>) -> Result<PretrainRun> {
    let cfg = desk_config(variant, seed);
    let dir = cache_dir().join(format!("{variant}-seed{seed}"));
    let start = Instant::now();
    let every = 500;
    let run = harness::pretrain(&dir, &cfg, corpus, stop_after, &mut |r| {
        if r.step % every == 0 {
            say(&format!(
                "    {variant} seed {seed}: step {} mlm {:.3} ({:.0}s)",
                r.step,
                r.stats.losses.mlm_loss,
                start.elapsed().as_secs_f64()
            ));
        }
    })?;
    if run.status != CacheStatus::Hit {
        say(&format!("    {variant} seed {seed}: trained in {:.0}s", start.elapsed().as_secs_f64()));
    }
    Ok(run)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn tail_mean(metrics: &[MetricsRecord], n: usize, f: impl Fn(&MetricsRecord) -> f64) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(n)..];
    mean(&tail.iter().map(f).collect::<Vec<_>>())
}

fn criterion_5(corpus: &Corpus) -> Result<Verdict> {
    let entropy = corpus.unigram_entropy();
    let mut lines = Vec::new();
    let mut pass = corpus.bytes >= 100_000;
    let mut mc_acc = Vec::new();
    let mut k = 0;
    for variant in [Variant::Roberta, Variant::Electra, Variant::ElectraComplex, Variant::McBert] {
        let seeds: &[u64] = if variant == Variant::Roberta { &SEEDS[..1] } else { &SEEDS };
        let mut finals = Vec::new();
        for &seed in seeds {
            let run = desk_run(corpus, variant, seed, None)?;
            let last = run.metrics.last().map_or(0, |m| m.step);
            let mlm = tail_mean(&run.metrics, 10, |m| m.mlm_loss);
            pass &= last == 5000 && mlm < entropy;
            finals.push(format!("{mlm:.3}"));
            if variant == Variant::McBert {
                mc_acc.push(tail_mean(&run.metrics, 10, |m| m.replaced_accuracy));
                k = desk_config(variant, seed).k;
            }
        }
        lines.push(format!("{variant} mlm [{}]", finals.join(", ")));
    }
    let chance = 1.0 / k as f64;
    let se = sample_sd(&mc_acc) / (mc_acc.len() as f64).sqrt();
    let margin = mean(&mc_acc) - chance;
    pass &= margin >= 3.0 * se;
    Ok(verdict(
        pass,
        format!(
            "unigram entropy {entropy:.3} nats over {} kB; {}; mc-bert replaced acc {:.3} vs 1/k {chance:.2}, margin {margin:.3} vs 3·SE {:.4}",
            corpus.bytes / 1000,
            lines.join("; "),
            mean(&mc_acc),
            3.0 * se
        ),
    ))
}

fn criterion_6(corpus: &Corpus) -> Result<Verdict> {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let leaky = desk_run(corpus, Variant::McBertLeaky, seed, Some(500))?;
        let proper = desk_run(corpus, Variant::McBert, seed, None)?;
        let window = |m: &[MetricsRecord], lo: u64, f: fn(&MetricsRecord) -> f64| {
            mean(&m.iter().filter(|r| r.step > lo && r.step <= 500).map(f).collect::<Vec<_>>())
        };
        let kept = window(&leaky.metrics, 400, |r| r.kept_accuracy);
        let leaky_rep = window(&leaky.metrics, 0, |r| r.replaced_accuracy);
        let proper_rep = window(&proper.metrics, 0, |r| r.replaced_accuracy);
        pass &= kept >= 0.99 && leaky_rep < proper_rep;
        parts.push(format!(
            "seed {seed}: leaky kept acc {kept:.4}, replaced acc leaky {leaky_rep:.3} vs proper {proper_rep:.3}"
        ));
    }
    Ok(verdict(pass, format!("steps 1-500; {}", parts.join("; "))))
}

const PROBE_SPEC: ProbeSpec = ProbeSpec {
    seed: 0,
    train_size: 1000,
    dev_size: 500,
};

/// One point of the desk grid, three seeds: 27 checkpoints are fine-tuned.
fn probe_budget() -> FinetuneConfig {
    let mut f = FinetuneConfig::desk();
    f.learning_rates = vec![4e-4];
    f.batch_sizes = vec![32];
    f.seeds = vec![0, 1, 2];
    f
}

fn criterion_7(corpus: &Corpus) -> Result<Verdict> {
    let fcfg = probe_budget();
    let task = builtin_probe("acceptability", &corpus.vocab, &PROBE_SPEC)?;
    let cache = cache_dir().join("finetune");
    let fractions = [0.25, 0.5, 1.0];
    let variants = [Variant::Electra, Variant::ElectraSample, Variant::ElectraComplex];
    // score[variant][seed][fraction]
    let mut score = vec![vec![vec![0.0; fractions.len()]; SEEDS.len()]; variants.len()];
    for (vi, &variant) in variants.iter().enumerate() {
        for (si, &seed) in SEEDS.iter().enumerate() {
            let run = desk_run(corpus, variant, seed, None)?;
            for (fi, &f) in fractions.iter().enumerate() {
                let (_, _, path) = run
                    .checkpoints
                    .iter()
                    .find(|c| c.0 == f)
                    .ok_or_else(|| mcbert_core::Error::Internal(format!("no checkpoint at fraction {f}")))?;
                let start = Instant::now();
                let rep = finetune_checkpoint(path, &corpus.vocab, std::slice::from_ref(&task), &fcfg, 1, Some(&cache))?;
                score[vi][si][fi] = rep.results[0].best_score;
                if rep.cached == 0 {
                    say(&format!(
                        "    {variant} seed {seed} fraction {f}: matthews {:.4} ({:.0}s)",
                        score[vi][si][fi],
                        start.elapsed().as_secs_f64()
                    ));
                }
            }
        }
    }
    let (e, s, c) = (&score[0], &score[1], &score[2]);
    let wins: Vec<usize> = (0..SEEDS.len())
        .map(|si| (0..fractions.len()).filter(|&fi| e[si][fi] >= c[si][fi]).count())
        .collect();
    let majority = wins.iter().filter(|&&w| w >= 2).count() >= 2;
    let avg = |m: &Vec<Vec<f64>>| mean(&m.iter().flatten().copied().collect::<Vec<_>>());
    let (me, ms, mc) = (avg(e), avg(s), avg(c));
    let ordering = (me - ms).abs() < (me - mc).abs();
    let per_fraction: Vec<String> = fractions
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let m = |v: &Vec<Vec<f64>>| mean(&v.iter().map(|r| r[fi]).collect::<Vec<_>>());
            format!("{f}: E {:.3} S {:.3} C {:.3}", m(e), m(s), m(c))
        })
        .collect();
    Ok(Verdict {
        status: if majority && ordering { Status::Pass } else { Status::Flagged },
        detail: format!(
            "acceptability matthews by fraction [{}]; electra >= complex wins per seed {wins:?}; |E-S| {:.4} vs |E-C| {:.4}",
            per_fraction.join("; "),
            (me - ms).abs(),
            (me - mc).abs()
        ),
    })
}

/// Pretrained encoder against a frozen random one on the agreement probe,
/// paired over ten fine-tuning seeds.
fn pretrained_vs_random(corpus: &Corpus) -> Result<Verdict> {
    // Agreement stays at chance for every encoder within ten epochs.
    let mut fcfg = FinetuneConfig::desk();
    fcfg.learning_rates = vec![3e-4];
    fcfg.batch_sizes = vec![32];
    fcfg.max_epochs = 40;
    fcfg.seeds = (0..10).collect();
    let task = builtin_probe("agreement", &corpus.vocab, &PROBE_SPEC)?;
    let run = desk_run(corpus, Variant::McBert, 0, None)?;
    let path = &run.checkpoints.last().expect("final checkpoint").2;
    let bytes = fs::read(path)?;
    let key = harness::sha256_hex(format!("{}\n{}", harness::sha256_hex(&bytes), serde_json::to_string(&fcfg)?).as_bytes());
    let cached = cache_dir().join("finetune").join(format!("vs-random-{key}.json"));
    let pairs: Vec<(f64, f64)> = match fs::read_to_string(&cached) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => {
            let pretrained = mcbert_core::trainer::Checkpoint::<f32>::from_bytes(&bytes)?.model()?;
            let random = init_model::<f32>(&desk_config(Variant::McBert, 0), corpus.vocab.len())?;
            let point = GridPoint {
                batch_size: fcfg.batch_sizes[0],
                lr: fcfg.learning_rates[0],
            };
            let mut frozen = fcfg.clone();
            frozen.freeze_encoder = true;
            let mut pairs = Vec::new();
            for &seed in &fcfg.seeds {
                let (_, p) = finetune(&pretrained, &task, point, &fcfg, seed)?;
                let (_, r) = finetune(&random, &task, point, &frozen, seed)?;
                say(&format!("    agreement seed {seed}: pretrained {:.4}, frozen random {:.4}", p.composite, r.composite));
                pairs.push((p.composite, r.composite));
            }
            fs::create_dir_all(cached.parent().expect("parent"))?;
            fs::write(&cached, serde_json::to_string(&pairs)?)?;
            pairs
        }
    };
    let diffs: Vec<f64> = pairs.iter().map(|(p, r)| p - r).collect();
    let d = mean(&diffs);
    Ok(verdict(
        d >= 0.0,
        format!(
            "agreement composite, pretrained minus frozen random: mean {d:.4} over 10 seeds ({} of 10 positive)",
            diffs.iter().filter(|&&x| x > 0.0).count()
        ),
    ))
}

// ---------------------------------------------------------------- criterion 8

fn copy_run(from: &Path, to: &Path, keep_checkpoints: &[PathBuf]) -> Result<()> {
    fs::create_dir_all(to.join(harness::CHECKPOINTS))?;
    for f in [harness::METRICS, "throughput.jsonl"] {
        fs::copy(from.join(f), to.join(f))?;
    }
    for c in keep_checkpoints {
        fs::copy(c, to.join(harness::CHECKPOINTS).join(c.file_name().expect("file")))?;
    }
    let mut m = RunManifest::load(from)?.expect("manifest");
    m.status = RunStatus::Running;
    m.save(to)
}

fn criterion_8() -> Result<Verdict> {
    let docs = generate_corpus(8_000, &mut ChaCha8Rng::seed_from_u64(8));
    let vocab = Vocabulary::build(&docs, 64, VocabMode::Char)?;
    let corpus = Corpus::from_docs(&docs, vocab, 24)?;
    let tmp = tempfile::tempdir()?;
    let mut problems = Vec::new();
    let mut resumes = 0;
    for variant in ALL_VARIANTS {
        let mut cfg = TrainConfig::desk(variant);
        cfg.batch_size = 4;
        cfg.max_seq_len = 24;
        cfg.total_steps = 24;
        cfg.warmup_steps = 4;
        cfg.log_every = 2;
        cfg.k = 5;
        cfg.checkpoint_fractions = vec![0.25, 0.5, 0.75, 1.0];
        let a_dir = tmp.path().join(format!("{variant}-a"));
        let a = harness::pretrain(&a_dir, &cfg, &corpus, None, &mut |_| {})?;
        let b = harness::pretrain(&tmp.path().join(format!("{variant}-b")), &cfg, &corpus, None, &mut |_| {})?;
        let bytes = |p: &Path| fs::read(p).unwrap_or_default();
        let same_files = |x: &PretrainRun, y: &PretrainRun| {
            bytes(&x.dir.join(harness::METRICS)) == bytes(&y.dir.join(harness::METRICS))
                && x.checkpoints.iter().zip(&y.checkpoints).all(|(p, q)| bytes(&p.2) == bytes(&q.2))
        };
        if a.manifest.input_hash != b.manifest.input_hash || !same_files(&a, &b) {
            problems.push(format!("{variant}: reruns differ"));
        }
        for cut in 0..a.checkpoints.len() - 1 {
            let dir = tmp.path().join(format!("{variant}-resume{cut}"));
            let keep: Vec<PathBuf> = a.checkpoints[..=cut].iter().map(|c| c.2.clone()).collect();
            copy_run(&a_dir, &dir, &keep)?;
            let r = harness::pretrain(&dir, &cfg, &corpus, None, &mut |_| {})?;
            resumes += 1;
            if r.status != CacheStatus::Resumed(a.checkpoints[cut].1) || !same_files(&a, &r) {
                problems.push(format!("{variant}: resume from fraction {} differs", a.checkpoints[cut].0));
            }
        }
    }
    Ok(verdict(
        problems.is_empty(),
        format!(
            "{} variants rerun byte-identically and {resumes} resumes match the uninterrupted run{}",
            ALL_VARIANTS.len(),
            if problems.is_empty() { String::new() } else { format!("; problems: {problems:?}") }
        ),
    ))
}

// ---------------------------------------------------------------- criterion 9

fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for i in 0..a.len() {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Rank = 1 + #smaller + (#equal − 1) / 2, by direct counting.
fn brute_ranks(a: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|&x| {
            let less = a.iter().filter(|&&y| y < x).count() as f64;
            let equal = a.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn brute_f1(p: &[bool], l: &[bool]) -> f64 {
    let tp = p.iter().zip(l).filter(|(&a, &b)| a && b).count() as f64;
    let pp = p.iter().filter(|&&a| a).count() as f64;
    let ap = l.iter().filter(|&&b| b).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let (precision, recall) = (tp / pp, tp / ap);
    2.0 * precision * recall / (precision + recall)
}

fn criterion_9() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let flip = rng.random_range(0.0..1.0);
        let preds: Vec<bool> = labels.iter().map(|&l| if rng.random_bool(flip) { !l } else { l }).collect();
        // MCC is the Pearson correlation of the two 0/1 vectors.
        let as_f = |v: &[bool]| v.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>();
        let mcc = brute_pearson(&as_f(&preds), &as_f(&labels));
        worst = worst.max((matthews_corr(&preds, &labels)? - mcc).abs());
        worst = worst.max((f1_score(&preds, &labels)? - brute_f1(&preds, &labels)).abs());

        let levels = rng.random_range(2..12) as f64;
        let a: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..levels)).floor()).collect();
        let b: Vec<f64> = a.iter().map(|x| x * rng.random_range(-1.0..2.0) + rng.random_range(0.0..3.0)).collect();
        worst = worst.max((pearson(&a, &b)?.value - brute_pearson(&a, &b)).abs());
        let rs = brute_pearson(&brute_ranks(&a), &brute_ranks(&b));
        worst = worst.max((spearman(&a, &b)?.value - rs).abs());
    }
    Ok(verdict(worst <= 1e-10, format!("1000 random vector pairs, max abs difference {worst:.2e}")))
}

// ---------------------------------------------------------------------- main

fn main() {
    let only: Option<BTreeSet<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.contains(id));
    let corpus = std::cell::OnceCell::new();
    let corpus = || corpus.get_or_init(|| desk_corpus().expect("desk corpus builds"));

    type Check<'a> = (&'static str, &'static str, Box<dyn Fn() -> Result<Verdict> + 'a>);
    let checks: Vec<Check> = vec![
        ("1", "gradient suite", Box::new(criterion_1)),
        ("2", "candidate-set structure", Box::new(criterion_2)),
        ("3", "sampling fidelity", Box::new(criterion_3)),
        ("4", "entropy oracle", Box::new(criterion_4)),
        ("5", "training sanity", Box::new(|| criterion_5(corpus()))),
        ("6", "label leaking", Box::new(|| criterion_6(corpus()))),
        ("7", "directional probe comparison (soft)", Box::new(|| criterion_7(corpus()))),
        ("8", "determinism and resume", Box::new(criterion_8)),
        ("9", "metric formulas", Box::new(criterion_9)),
        ("probe", "pretrained vs frozen random on agreement", Box::new(|| pretrained_vs_random(corpus()))),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        if !wanted(id) {
            continue;
        }
        let v = check().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let tag = match v.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Flagged => "FLAGGED",
        };
        failed += usize::from(v.status == Status::Fail);
        say(&format!("criterion {id} ({name}): {tag} - {}", v.detail));
    }
    if failed > 0 {
        say(&format!("{failed} acceptance criteria failed"));
        std::process::exit(1);
    }
}
