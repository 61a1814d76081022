use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sha256_hex;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::probe::{grid_search, FinetuneConfig, GridResult, ProbeTask};
use crate::trainer::{vocab_hash, Checkpoint, Variant};

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub checkpoint_fraction: f64,
    pub task: String,
    pub config: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Every metric of every run, plus a `composite` row per run.
pub fn grid_rows(variant: Variant, fraction: f64, grid: &GridResult) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for run in &grid.runs {
        let named = run
            .outcome
            .scores
            .iter()
            .map(|(m, v)| (m.name(), *v))
            .chain([("composite", run.outcome.composite)]);
        for (metric, value) in named {
            rows.push(ResultRow {
                variant: variant.to_string(),
                checkpoint_fraction: fraction,
                task: grid.task.clone(),
                config: run.point.to_string(),
                seed: run.seed,
                metric: metric.to_string(),
                value,
            });
        }
    }
    rows
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("results file: {e}"))
}

/// Best configuration of one (variant, fraction, task), recomputed from rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub variant: String,
    pub checkpoint_fraction: f64,
    pub task: String,
    pub best_config: String,
    pub best_score: f64,
    /// Seed-mean composite per configuration.
    pub config_means: BTreeMap<String, f64>,
    pub seeds: usize,
}

/// Groups `composite` rows and picks, per group, the configuration with the
/// highest seed mean. Ties keep the configuration listed first (the grid
/// lists smaller learning rates, then smaller batches, first).
pub fn summarize(rows: &[ResultRow]) -> Vec<TaskSummary> {
    let mut groups: Vec<TaskSummary> = Vec::new();
    let mut order: Vec<Vec<String>> = Vec::new();
    let mut sums: Vec<BTreeMap<String, (f64, usize)>> = Vec::new();
    for r in rows.iter().filter(|r| r.metric == "composite") {
        let i = match groups
            .iter()
            .position(|g| g.variant == r.variant && g.checkpoint_fraction == r.checkpoint_fraction && g.task == r.task)
        {
            Some(i) => i,
            None => {
                groups.push(TaskSummary {
                    variant: r.variant.clone(),
                    checkpoint_fraction: r.checkpoint_fraction,
                    task: r.task.clone(),
                    best_config: String::new(),
                    best_score: f64::NEG_INFINITY,
                    config_means: BTreeMap::new(),
                    seeds: 0,
                });
                order.push(Vec::new());
                sums.push(BTreeMap::new());
                groups.len() - 1
            }
        };
        if !order[i].contains(&r.config) {
            order[i].push(r.config.clone());
        }
        let e = sums[i].entry(r.config.clone()).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    for ((g, ord), s) in groups.iter_mut().zip(&order).zip(&sums) {
        for c in ord {
            let (sum, n) = s[c];
            let mean = sum / n as f64;
            g.config_means.insert(c.clone(), mean);
            g.seeds = g.seeds.max(n);
            if mean > g.best_score {
                g.best_score = mean;
                g.best_config = c.clone();
            }
        }
    }
    groups
}

/// The budget fraction a checkpoint file stands for: taken from its
/// `frac-{f}.ckpt` name when present, else step / total steps.
pub fn checkpoint_fraction(path: &Path, step: u64, total_steps: u64) -> f64 {
    path.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("frac-"))
        .and_then(|n| n.strip_suffix(".ckpt"))
        .and_then(|f| f.parse().ok())
        .unwrap_or(step as f64 / total_steps.max(1) as f64)
}

/// Grid results of one checkpoint on several tasks.
#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub variant: Variant,
    pub fraction: f64,
    pub results: Vec<GridResult>,
    /// Tasks answered from the cache directory.
    pub cached: usize,
}

impl FinetuneReport {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.results
            .iter()
            .flat_map(|g| grid_rows(self.variant, self.fraction, g))
            .collect()
    }
}

/// Loads a checkpoint, checks it against `vocab`, and runs the grid on
/// every task. With `cache`, each task's grid result is stored under a key
/// hashing the checkpoint bytes, the task and the fine-tuning settings.
pub fn finetune_checkpoint(
    path: &Path,
    vocab: &Vocabulary,
    tasks: &[ProbeTask],
    cfg: &FinetuneConfig,
    threads: usize,
    cache: Option<&Path>,
) -> Result<FinetuneReport> {
    let bytes = fs::read(path)?;
    let ck = Checkpoint::<f32>::from_bytes(&bytes)?;
    if ck.vocab_hash != vocab_hash(vocab) {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different vocabulary",
            path.display()
        )));
    }
    let train = ck.train_config()?;
    let model = ck.model()?;
    let ck_hash = sha256_hex(&bytes);
    let mut results = Vec::new();
    let mut cached = 0;
    for task in tasks {
        let key = {
            let mut text = format!("{ck_hash}\n{}\n", task.name);
            for e in task.train.iter().chain(&task.dev) {
                text.push_str(&format!("{:?} {:?}\n", e.tokens.ids(), e.label));
            }
            text.push_str(&serde_json::to_string(cfg)?);
            sha256_hex(text.as_bytes())
        };
        let file = cache.map(|c| c.join(format!("{key}.json")));
        if let Some(f) = file.as_ref().filter(|f| f.is_file()) {
            results.push(serde_json::from_str(&fs::read_to_string(f)?)?);
            cached += 1;
            continue;
        }
        let g = grid_search(&model, task, cfg, threads)?;
        if let Some(f) = &file {
            fs::create_dir_all(f.parent().expect("cache file has a directory"))?;
            fs::write(f, serde_json::to_string(&g)?)?;
        }
        results.push(g);
    }
    Ok(FinetuneReport {
        variant: train.variant,
        fraction: checkpoint_fraction(path, ck.step, train.total_steps),
        results,
        cached,
    })
}
