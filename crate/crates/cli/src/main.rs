//! `mcbert`: pre-train, fine-tune, compare variants and check the entropy
//! claims from the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use mcbert_core::data::grammar::generate_corpus;
use mcbert_core::data::{VocabMode, Vocabulary};
use mcbert_core::entropy::{verify_inequality, EntropyReport, ToyLanguage};
use mcbert_core::harness::{
    self, compare, finetune_checkpoint, pretrain, summarize, write_results, CacheStatus, CompareSpec, Corpus,
    RunManifest,
};
use mcbert_core::probe::{builtin_probes, FinetuneConfig, ProbeSpec, ProbeTask, PROBE_NAMES};
use mcbert_core::trainer::{Checkpoint, TrainConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "mcbert", version, about = "Multi-choice cloze pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train one variant into a run directory.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint on the probe tasks over a grid of settings.
    Finetune(FinetuneArgs),
    /// Matched-budget pre-training of several variants plus probe fine-tuning.
    Compare(CompareArgs),
    /// Verify the entropy identities on enumerable toy languages.
    EntropyCheck(EntropyArgs),
    /// Write a synthetic grammar corpus, one document per line.
    GenCorpus(GenCorpusArgs),
    /// Build a vocabulary file from a corpus.
    BuildVocab(BuildVocabArgs),
}

#[derive(Args)]
struct TrainFlags {
    /// Flat key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scale preset the configuration starts from.
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    scale: String,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Any training key, e.g. `--set warmup_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    /// End the run early after this many steps.
    #[arg(long)]
    stop_after: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct GridFlags {
    /// Fine-tuning key=value file.
    #[arg(long = "finetune-config")]
    finetune_config: Option<PathBuf>,
    /// `paper`: lr 1e-5..8e-5; `desk`: lr 5e-5..4e-4.
    #[arg(long, default_value = "paper", value_parser = ["paper", "desk"])]
    grid: String,
    /// Comma-separated fine-tuning learning rates.
    #[arg(long, value_delimiter = ',')]
    ft_lr: Vec<f64>,
    /// Comma-separated fine-tuning batch sizes.
    #[arg(long, value_delimiter = ',')]
    ft_batch_size: Vec<usize>,
    /// Number of fine-tuning seeds (0..N).
    #[arg(long)]
    ft_seeds: Option<u64>,
    #[arg(long)]
    ft_epochs: Option<usize>,
    /// Probe tasks to run; all when omitted.
    #[arg(long = "task", value_parser = PROBE_NAMES)]
    tasks: Vec<String>,
    /// Seed of the probe example generator.
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
    #[arg(long, default_value_t = 1000)]
    train_size: usize,
    #[arg(long, default_value_t = 500)]
    dev_size: usize,
    /// Worker threads (capped by MC_PRETRAIN_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridFlags,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variants, at least two.
    #[arg(long, value_delimiter = ',', required = true)]
    variants: Vec<Variant>,
    /// Comma-separated pre-training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Comma-separated checkpoint fractions of the budget.
    #[arg(long, value_delimiter = ',')]
    fractions: Vec<f64>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    grid: GridFlags,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["random", "spec"])))]
struct EntropyArgs {
    /// Check this many random languages.
    #[arg(long)]
    random: Option<usize>,
    /// JSON file with one language or a list of them.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    max_v: usize,
    #[arg(long, default_value_t = 3)]
    max_n: usize,
    /// Write the per-language reports here as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    /// Minimum corpus size in bytes.
    #[arg(long, default_value_t = 120_000)]
    bytes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "char")]
    mode: VocabMode,
    #[arg(long, default_value_t = 256)]
    max_size: usize,
}

/// Exit status of a command that ran to completion.
enum Outcome {
    Ok,
    Violations,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Compare(a) => cmd_compare(a),
        Command::EntropyCheck(a) => cmd_entropy_check(a),
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::BuildVocab(a) => cmd_build_vocab(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violations) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<mcbert_core::Error>()) {
        Some(core) if core.is_numerical() => 3,
        Some(mcbert_core::Error::Internal(_)) => 1,
        _ => 2,
    }
}

fn threads(flag: Option<usize>) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var("MC_PRETRAIN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(usize::MAX);
    flag.unwrap_or(available).min(cap).max(1)
}

fn read_text(path: &Path, role: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {role} {}", path.display()))
}

/// The `variant` line of a config file, if any.
fn variant_in(text: &str) -> Result<Option<Variant>> {
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "variant" {
                return Ok(Some(v.trim().parse()?));
            }
        }
    }
    Ok(None)
}

/// Splits a config file into training lines and `finetune.`-prefixed
/// fine-tuning lines (prefix removed).
fn split_config(text: &str) -> (String, String) {
    let (mut train, mut tune) = (String::new(), String::new());
    for line in text.lines() {
        match line.trim_start().strip_prefix("finetune.") {
            Some(rest) => {
                tune.push_str(rest);
                tune.push('\n');
            }
            None => {
                train.push_str(line);
                train.push('\n');
            }
        }
    }
    (train, tune)
}

fn apply_kv_finetune(cfg: &mut FinetuneConfig, text: &str) -> Result<()> {
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').with_context(|| format!("line {}: expected key=value", n + 1))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(())
}

/// Flags > config file > variant preset > global defaults.
fn resolve_train(
    flags: &TrainFlags,
    variant: Option<Variant>,
    seed: Option<u64>,
) -> Result<(TrainConfig, Option<String>)> {
    let text = flags.config.as_deref().map(|p| read_text(p, "config file")).transpose()?;
    let (train_text, tune_text) = text.as_deref().map(split_config).unzip();
    let file_variant = train_text.as_deref().map(variant_in).transpose()?.flatten();
    let variant = variant.or(file_variant).unwrap_or(Variant::McBert);
    let mut cfg = TrainConfig::preset(&flags.scale, variant)?;
    if let Some(t) = &train_text {
        cfg.apply_kv(t)?;
    }
    cfg.variant = variant;
    if let Some(k) = flags.k {
        cfg.k = k;
    }
    if let Some(l) = flags.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = flags.steps {
        cfg.total_steps = s;
        cfg.warmup_steps = cfg.warmup_steps.min(s);
    }
    if let Some(b) = flags.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = flags.lr {
        cfg.peak_lr = lr;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for kv in &flags.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set `{kv}`: expected KEY=VALUE"))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok((cfg, tune_text.filter(|t| !t.trim().is_empty())))
}

fn resolve_grid(flags: &GridFlags, file_text: Option<&str>) -> Result<FinetuneConfig> {
    let mut cfg = if flags.grid == "desk" { FinetuneConfig::desk() } else { FinetuneConfig::paper() };
    if let Some(t) = file_text {
        apply_kv_finetune(&mut cfg, t)?;
    }
    if let Some(p) = &flags.finetune_config {
        apply_kv_finetune(&mut cfg, &read_text(p, "fine-tuning config")?)?;
    }
    if !flags.ft_lr.is_empty() {
        cfg.learning_rates = flags.ft_lr.clone();
    }
    if !flags.ft_batch_size.is_empty() {
        cfg.batch_sizes = flags.ft_batch_size.clone();
    }
    if let Some(n) = flags.ft_seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(e) = flags.ft_epochs {
        cfg.max_epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn probe_tasks(flags: &GridFlags, vocab: &Vocabulary) -> Result<Vec<ProbeTask>> {
    let spec = ProbeSpec {
        seed: flags.probe_seed,
        train_size: flags.train_size,
        dev_size: flags.dev_size,
    };
    let all = builtin_probes(vocab, &spec)?;
    if flags.tasks.is_empty() {
        return Ok(all);
    }
    Ok(all.into_iter().filter(|t| flags.tasks.contains(&t.name)).collect())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<Outcome> {
    let (cfg, tune) = resolve_train(&a.train, a.variant, a.seed)?;
    if tune.is_some() {
        bail!("fine-tuning keys are not accepted by `pretrain`");
    }
    let corpus = Corpus::load(&a.corpus, &a.vocab, &cfg)?;
    eprintln!(
        "pretrain {} seed {}: {} sequences, vocabulary {}",
        cfg.variant,
        cfg.seed,
        corpus.sequences.len(),
        corpus.vocab.len()
    );
    let every = cfg.log_every.max(1);
    let run = pretrain(&a.out, &cfg, &corpus, a.stop_after, &mut |r| {
        if r.step % every == 0 {
            eprintln!(
                "step {:>6}  loss {:.4}  mlm {:.4}  lr {:.2e}",
                r.step, r.stats.losses.combined, r.stats.losses.mlm_loss, r.lr
            );
        }
    })?;
    match run.status {
        CacheStatus::Hit => eprintln!("manifest hash matches a finished run; nothing to do"),
        CacheStatus::Resumed(s) => eprintln!("resumed from step {s}"),
        CacheStatus::Fresh => {}
    }
    if let Some(m) = run.metrics.last() {
        println!("final step {} mlm_loss {:.4} combined {:.4}", m.step, m.mlm_loss, m.combined);
    }
    for (f, s, p) in &run.checkpoints {
        println!("checkpoint {f} step {s} {}", p.display());
    }
    Ok(Outcome::Ok)
}

fn cmd_finetune(a: FinetuneArgs) -> Result<Outcome> {
    let fcfg = resolve_grid(&a.grid, None)?;
    if !a.checkpoint.is_file() {
        bail!(mcbert_core::Error::Config(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let ck_bytes = fs::read(&a.checkpoint)?;
    let train = Checkpoint::<f32>::from_bytes(&ck_bytes)?.train_config()?;
    if !a.vocab.is_file() {
        bail!(mcbert_core::Error::Config(format!("vocabulary {} does not exist", a.vocab.display())));
    }
    let vocab = Vocabulary::load(&a.vocab, train.vocab_mode)?;
    let tasks = probe_tasks(&a.grid, &vocab)?;

    let mut config: BTreeMap<String, String> = FinetuneConfig::KEYS
        .iter()
        .map(|&k| (k.to_string(), fcfg.get(k).expect("every key has a value")))
        .collect();
    config.insert("tasks".into(), tasks.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(","));
    config.insert("probe_seed".into(), a.grid.probe_seed.to_string());
    config.insert("train_size".into(), a.grid.train_size.to_string());
    config.insert("dev_size".into(), a.grid.dev_size.to_string());
    let inputs = BTreeMap::from([
        ("checkpoint".to_string(), harness::sha256_hex(&ck_bytes)),
        ("vocab".to_string(), harness::file_hash(&a.vocab)?),
    ]);
    let mut manifest = RunManifest::new("finetune", config, fcfg.seeds[0], inputs);
    manifest.save(&a.out)?;

    let jobs = fcfg.grid().len() * fcfg.seeds.len();
    eprintln!("{} tasks x {jobs} jobs", tasks.len());
    let report = finetune_checkpoint(&a.checkpoint, &vocab, &tasks, &fcfg, threads(a.grid.threads), None)?;
    let rows = report.rows();
    write_results(&a.out.join("results.csv"), &rows)?;
    let summary = summarize(&rows);
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    for s in &summary {
        println!("{}: best {} score {:.4} (mean of {} seeds)", s.task, s.best_config, s.best_score, s.seeds);
    }
    manifest.finish(vec!["results.csv".into(), "summary.json".into()]);
    manifest.save(&a.out)?;
    Ok(Outcome::Ok)
}

fn cmd_compare(a: CompareArgs) -> Result<Outcome> {
    let mut runs = Vec::new();
    let mut tune_text = None;
    for &v in &a.variants {
        for &s in &a.seeds {
            let (mut cfg, t) = resolve_train(&a.train, Some(v), Some(s))?;
            if !a.fractions.is_empty() {
                cfg.checkpoint_fractions = a.fractions.clone();
                cfg.validate()?;
            }
            tune_text = t;
            runs.push(cfg);
        }
    }
    let first = runs.first().context("no runs requested")?;
    let corpus = Corpus::load(&a.corpus, &a.vocab, first)?;
    let spec = CompareSpec {
        tasks: probe_tasks(&a.grid, &corpus.vocab)?,
        finetune: resolve_grid(&a.grid, tune_text.as_deref())?,
        threads: threads(a.grid.threads),
        runs,
    };
    let report = compare(&a.out, &spec, &corpus)?;
    eprintln!(
        "{} of {} pre-training runs reused, {} fine-tuning results reused",
        report.pretrain_hits,
        report.runs.len(),
        report.finetune_hits
    );
    print!("{}", fs::read_to_string(a.out.join("report.csv"))?);
    Ok(Outcome::Ok)
}

fn cmd_entropy_check(a: EntropyArgs) -> Result<Outcome> {
    let langs: Vec<ToyLanguage> = match (&a.random, &a.spec) {
        (Some(n), _) => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            (0..*n).map(|_| ToyLanguage::random(a.max_v, a.max_n, &mut rng)).collect()
        }
        (None, Some(path)) => {
            let text = read_text(path, "language spec")?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(mcbert_core::Error::from)?;
            let parsed = if value.is_array() {
                serde_json::from_value(value)
            } else {
                serde_json::from_value(value).map(|l| vec![l])
            };
            parsed.map_err(mcbert_core::Error::from)?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let mut reports: Vec<EntropyReport> = Vec::with_capacity(langs.len());
    let mut failed = 0;
    for (i, lang) in langs.iter().enumerate() {
        lang.validate()?;
        let r = verify_inequality(lang)?;
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{verdict} language {i}: v={} n={} p={:.4} H(X|XR)={:.9} H(X,Z|XR)={:.9} H(Z|XR)={:.9} H(Z|X,XR)={}{}",
            r.v,
            r.n,
            r.p,
            r.h_x_given_xr,
            r.h_xz_given_xr,
            r.h_z_given_xr,
            r.h_z_given_x_xr,
            if r.holds_strictly { "" } else { " [non-strict]" }
        );
        reports.push(r);
    }
    if let Some(path) = &a.report {
        fs::write(path, serde_json::to_string_pretty(&reports)? + "\n")?;
    }
    eprintln!("{} of {} languages passed", langs.len() - failed, langs.len());
    Ok(if failed == 0 { Outcome::Ok } else { Outcome::Violations })
}

fn cmd_gen_corpus(a: GenCorpusArgs) -> Result<Outcome> {
    let docs = generate_corpus(a.bytes, &mut ChaCha8Rng::seed_from_u64(a.seed));
    harness::write_corpus(&a.out, &docs)?;
    println!("{} documents, {} bytes", docs.len(), fs::metadata(&a.out)?.len());
    Ok(Outcome::Ok)
}

fn cmd_build_vocab(a: BuildVocabArgs) -> Result<Outcome> {
    if !a.corpus.is_file() {
        bail!(mcbert_core::Error::Config(format!("corpus {} does not exist", a.corpus.display())));
    }
    let docs = harness::read_corpus(&a.corpus)?;
    let vocab = Vocabulary::build(&docs, a.max_size, a.mode)?;
    vocab.save(&a.out)?;
    println!("{} tokens ({} mode)", vocab.len(), a.mode);
    Ok(Outcome::Ok)
}
