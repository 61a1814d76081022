//! On-disk run loop: `metrics.jsonl`, `throughput.jsonl` and
//! `checkpoints/` inside a run directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{checkpoint_steps, StepRecord, Trainer};
use crate::autograd::Scalar;
use crate::error::Result;

/// One line of `metrics.jsonl`: the statistics of the step at a logging
/// boundary. Contains nothing time-dependent, so reruns are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub flops: f64,
    pub lr: f64,
    pub mlm_loss: f64,
    pub task_loss: f64,
    pub combined: f64,
    pub grad_norm: f64,
    pub mlm_accuracy: f64,
    pub replaced_accuracy: f64,
    pub kept_accuracy: f64,
    pub masked: usize,
    pub replaced: usize,
    pub task_positions: usize,
    pub flagged: usize,
}

impl From<&StepRecord> for MetricsRecord {
    fn from(r: &StepRecord) -> Self {
        let s = &r.stats;
        MetricsRecord {
            step: r.step,
            flops: r.flops,
            lr: r.lr,
            mlm_loss: s.losses.mlm_loss,
            task_loss: s.losses.task_loss,
            combined: s.losses.combined,
            grad_norm: r.grad_norm,
            mlm_accuracy: s.mlm_accuracy(),
            replaced_accuracy: s.replaced_accuracy(),
            kept_accuracy: s.kept_accuracy(),
            masked: s.losses.masked,
            replaced: s.losses.replaced,
            task_positions: s.losses.task_positions,
            flagged: s.flagged,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
struct Throughput {
    step: u64,
    seconds: f64,
    tokens_per_sec: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop (without finishing) once this many steps are complete.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub final_step: u64,
    /// `(fraction, step, path)` of checkpoints written in this session.
    pub checkpoints: Vec<(f64, u64, PathBuf)>,
    pub metrics: Vec<MetricsRecord>,
}

/// File name of the checkpoint for budget fraction `f`.
pub fn checkpoint_name(f: f64) -> String {
    format!("frac-{f}.ckpt")
}

/// Keeps the JSONL lines whose `step` is at most `step`.
fn truncate_jsonl(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn open_log(path: &Path, step: u64) -> Result<File> {
    if step == 0 {
        Ok(File::create(path)?)
    } else {
        truncate_jsonl(path, step)?;
        Ok(OpenOptions::new().create(true).append(true).open(path)?)
    }
}

/// Trains until the budget (or `stop_after`) is reached, logging every
/// `log_every` steps and checkpointing at the configured fractions.
/// `on_step` sees every step's record.
pub fn run_pretraining<T: Scalar>(
    dir: &Path,
    trainer: &mut Trainer<T>,
    opts: &RunOptions,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<RunSummary> {
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let mut metrics = open_log(&dir.join("metrics.jsonl"), trainer.step)?;
    let mut throughput = open_log(&dir.join("throughput.jsonl"), trainer.step)?;
    let schedule = checkpoint_steps(&trainer.config, trainer.flops_per_step());
    let total = trainer.config.total_steps;
    let every = trainer.config.log_every;
    let mut summary = RunSummary::default();
    let mut clock = Instant::now();
    let mut tokens = 0usize;

    while !trainer.done() && opts.stop_after.is_none_or(|s| trainer.step < s) {
        let rec = trainer.train_step()?;
        on_step(&rec);
        tokens += rec.tokens;
        if rec.step % every == 0 || rec.step == total {
            let m = MetricsRecord::from(&rec);
            writeln!(metrics, "{}", serde_json::to_string(&m)?)?;
            metrics.flush()?;
            let seconds = clock.elapsed().as_secs_f64();
            let t = Throughput {
                step: rec.step,
                seconds,
                tokens_per_sec: tokens as f64 / seconds.max(1e-9),
            };
            writeln!(throughput, "{}", serde_json::to_string(&t)?)?;
            summary.metrics.push(m);
            clock = Instant::now();
            tokens = 0;
        }
        for &(f, s) in &schedule {
            if s == rec.step {
                let path = ck_dir.join(checkpoint_name(f));
                trainer.checkpoint().save(&path)?;
                summary.checkpoints.push((f, s, path));
            }
        }
    }
    summary.final_step = trainer.step;
    Ok(summary)
}
