//! Run directories, manifests and the cached experiment drivers shared by
//! the command-line tool and the acceptance suite.
//!
//! Every run directory holds one `manifest.json`. Its `input_hash` covers
//! the command, the fully resolved configuration and the content hashes of
//! every input file, so two runs with the same hash produce the same bytes.
//! A pre-training run whose manifest hash matches and whose checkpoints are
//! present is reused instead of recomputed; one that was interrupted resumes
//! from its latest checkpoint.

mod compare;
mod plot;
mod results;

pub use compare::{compare, CompareReport, CompareSpec, ScoreCell};
pub use plot::line_chart_svg;
pub use results::{
    checkpoint_fraction, finetune_checkpoint, grid_rows, read_results, summarize, write_results, FinetuneReport,
    ResultRow, TaskSummary,
};

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::grammar::unigram_entropy;
use crate::data::{is_structural, pack_sequences, tokenize_corpus, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::trainer::{
    checkpoint_name, checkpoint_steps, run_pretraining, vocab_hash, Checkpoint, MetricsRecord, RunOptions,
    StepRecord, TrainConfig, Trainer,
};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINTS: &str = "checkpoints";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Resolved configuration, every default materialized.
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    /// Content hashes of input files by role.
    pub inputs: BTreeMap<String, String>,
    pub input_hash: String,
    pub started: String,
    pub finished: Option<String>,
    pub status: RunStatus,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>, seed: u64, inputs: BTreeMap<String, String>) -> Self {
        let version = env!("CARGO_PKG_VERSION").to_string();
        let input_hash = Self::hash_inputs(command, &version, &config, &inputs);
        RunManifest {
            command: command.to_string(),
            version,
            config,
            seed,
            inputs,
            input_hash,
            started: now(),
            finished: None,
            status: RunStatus::Running,
            artifacts: Vec::new(),
        }
    }

    pub fn hash_inputs(
        command: &str,
        version: &str,
        config: &BTreeMap<String, String>,
        inputs: &BTreeMap<String, String>,
    ) -> String {
        let mut text = format!("command {command}\nversion {version}\n");
        for (k, v) in config {
            text.push_str(&format!("config {k}={v}\n"));
        }
        for (k, v) in inputs {
            text.push_str(&format!("input {k}={v}\n"));
        }
        sha256_hex(text.as_bytes())
    }

    /// `None` when the directory has no manifest.
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let tmp = dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        fs::rename(tmp, dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn finish(&mut self, artifacts: Vec<String>) {
        self.finished = Some(now());
        self.status = RunStatus::Complete;
        self.artifacts = artifacts;
    }
}

/// Configuration map of a pre-training run as recorded in its manifest.
pub fn config_map(cfg: &TrainConfig) -> BTreeMap<String, String> {
    TrainConfig::KEYS
        .iter()
        .map(|&k| (k.to_string(), cfg.get(k).expect("every key has a value")))
        .collect()
}

/// Corpus files hold one document per line.
pub fn write_corpus(path: &Path, docs: &[String]) -> Result<()> {
    let mut text = docs.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let docs: Vec<String> = fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if docs.is_empty() {
        return Err(Error::Empty(format!("corpus {}", path.display())));
    }
    Ok(docs)
}

/// A tokenized, packed training corpus and the hashes that identify it.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub sequences: Vec<TokenSequence>,
    pub corpus_hash: String,
    pub vocab_hash: [u8; 32],
    pub bytes: usize,
}

impl Corpus {
    pub fn from_docs(docs: &[String], vocab: Vocabulary, max_len: usize) -> Result<Self> {
        let sequences = pack_sequences(&tokenize_corpus(docs, &vocab), max_len)?;
        let mut text = docs.join("\n");
        text.push('\n');
        Ok(Corpus {
            vocab_hash: vocab_hash(&vocab),
            vocab,
            sequences,
            corpus_hash: sha256_hex(text.as_bytes()),
            bytes: text.len(),
        })
    }

    /// Reads a corpus file and a vocabulary file of the mode named in `cfg`.
    pub fn load(corpus: &Path, vocab: &Path, cfg: &TrainConfig) -> Result<Self> {
        for (role, p) in [("corpus", corpus), ("vocabulary", vocab)] {
            if !p.is_file() {
                return Err(Error::Config(format!("{role} file {} does not exist", p.display())));
            }
        }
        let v = Vocabulary::load(vocab, cfg.vocab_mode)?;
        Self::from_docs(&read_corpus(corpus)?, v, cfg.max_seq_len)
    }

    /// Unigram entropy (nats) of the content tokens of the packed sequences.
    pub fn unigram_entropy(&self) -> f64 {
        unigram_entropy(self.sequences.iter().flat_map(|s| s.ids().iter().copied()).filter(|&id| !is_structural(id)))
    }

    fn inputs(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("corpus".to_string(), self.corpus_hash.clone()),
            ("vocab".to_string(), hex::encode(self.vocab_hash)),
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    /// Reused a finished run with the same manifest hash.
    Hit,
    /// Continued an interrupted run from this step.
    Resumed(u64),
    Fresh,
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub dir: PathBuf,
    pub status: CacheStatus,
    pub manifest: RunManifest,
    pub metrics: Vec<MetricsRecord>,
    /// `(fraction, step, path)` of every checkpoint of the run.
    pub checkpoints: Vec<(f64, u64, PathBuf)>,
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let path = dir.join(METRICS);
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn expected_checkpoints(dir: &Path, cfg: &TrainConfig, fps: f64, limit: u64) -> Vec<(f64, u64, PathBuf)> {
    checkpoint_steps(cfg, fps)
        .into_iter()
        .filter(|&(_, s)| s <= limit)
        .map(|(f, s)| (f, s, dir.join(CHECKPOINTS).join(checkpoint_name(f))))
        .collect()
}

/// Pre-trains `cfg` into `dir`, reusing or resuming earlier work with the
/// same manifest hash. `stop_after` ends the run early (it is part of the
/// hash). `on_step` sees every step computed in this call.
pub fn pretrain(
    dir: &Path,
    cfg: &TrainConfig,
    corpus: &Corpus,
    stop_after: Option<u64>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<PretrainRun> {
    cfg.validate()?;
    let mut config = config_map(cfg);
    if let Some(s) = stop_after {
        config.insert("stop_after".into(), s.to_string());
    }
    let mut manifest = RunManifest::new("pretrain", config, cfg.seed, corpus.inputs());
    let limit = stop_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut trainer =
        Trainer::<f32>::new(cfg.clone(), corpus.vocab.len(), corpus.vocab_hash, corpus.sequences.clone())?;
    let expected = expected_checkpoints(dir, cfg, trainer.flops_per_step(), limit);

    let previous = RunManifest::load(dir)?.filter(|m| m.input_hash == manifest.input_hash);
    let mut status = CacheStatus::Fresh;
    if let Some(prev) = &previous {
        if prev.status == RunStatus::Complete && expected.iter().all(|c| c.2.is_file()) && dir.join(METRICS).is_file() {
            return Ok(PretrainRun {
                dir: dir.to_path_buf(),
                status: CacheStatus::Hit,
                manifest: prev.clone(),
                metrics: read_metrics(dir)?,
                checkpoints: expected,
            });
        }
        // Interrupted: continue from the latest readable checkpoint.
        for (_, _, path) in expected.iter().rev() {
            let resumed = Checkpoint::<f32>::load(path).and_then(|ck| {
                Trainer::from_checkpoint(&ck, cfg.clone(), corpus.vocab_hash, corpus.sequences.clone())
            });
            if let Ok(t) = resumed {
                status = CacheStatus::Resumed(t.step);
                trainer = t;
                manifest.started = prev.started.clone();
                break;
            }
        }
    }
    if status == CacheStatus::Fresh && dir.join(CHECKPOINTS).exists() {
        fs::remove_dir_all(dir.join(CHECKPOINTS))?;
    }
    manifest.save(dir)?;
    let opts = RunOptions { stop_after };
    run_pretraining(dir, &mut trainer, &opts, on_step)?;
    let mut artifacts = vec![METRICS.to_string(), "throughput.jsonl".to_string()];
    artifacts.extend(expected.iter().map(|(f, _, _)| format!("{CHECKPOINTS}/{}", checkpoint_name(*f))));
    manifest.finish(artifacts);
    manifest.save(dir)?;
    Ok(PretrainRun {
        dir: dir.to_path_buf(),
        status,
        manifest,
        metrics: read_metrics(dir)?,
        checkpoints: expected,
    })
}
