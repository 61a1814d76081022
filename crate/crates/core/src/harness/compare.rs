use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{
    finetune_checkpoint, line_chart_svg, pretrain, summarize, write_results, CacheStatus, Corpus, PretrainRun,
    ResultRow, RunManifest,
};
use crate::error::{Error, Result};
use crate::probe::{FinetuneConfig, ProbeTask};
use crate::trainer::TrainConfig;

/// Matched-budget pre-training runs followed by probe fine-tuning of every
/// checkpoint.
#[derive(Clone, Debug)]
pub struct CompareSpec {
    /// One resolved configuration per (variant, seed).
    pub runs: Vec<TrainConfig>,
    pub tasks: Vec<ProbeTask>,
    pub finetune: FinetuneConfig,
    /// Worker threads for pre-training runs and fine-tuning jobs.
    pub threads: usize,
}

/// Best-configuration score of one checkpoint on one task.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreCell {
    pub variant: String,
    pub seed: u64,
    pub fraction: f64,
    pub task: String,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub runs: Vec<PretrainRun>,
    pub rows: Vec<ResultRow>,
    pub cells: Vec<ScoreCell>,
    pub fractions: Vec<f64>,
    pub pretrain_hits: usize,
    pub finetune_hits: usize,
}

impl CompareReport {
    /// Seed-mean score of a variant at a fraction.
    pub fn mean_score(&self, variant: &str, fraction: f64, task: &str) -> Option<f64> {
        let s: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant && c.fraction == fraction && c.task == task)
            .map(|c| c.score)
            .collect();
        (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
    }

    pub fn score(&self, variant: &str, seed: u64, fraction: f64, task: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.seed == seed && c.fraction == fraction && c.task == task)
            .map(|c| c.score)
    }
}

fn run_dir_name(cfg: &TrainConfig) -> String {
    format!("{}-seed{}", cfg.variant, cfg.seed)
}

/// Runs `jobs` over up to `threads` workers, keeping results in job order.
fn fan_out<J: Sync, R: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = f(job);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|s| s.ok_or_else(|| Error::Internal("job did not run".into()))?)
        .collect()
}

/// Writes `pretrain/`, `results.csv`, `report.csv`, `plots/` and
/// `manifest.json` under `out`.
pub fn compare(out: &Path, spec: &CompareSpec, corpus: &Corpus) -> Result<CompareReport> {
    let mut variants: Vec<String> = Vec::new();
    for c in &spec.runs {
        c.validate()?;
        if !variants.contains(&c.variant.to_string()) {
            variants.push(c.variant.to_string());
        }
    }
    if variants.len() < 2 {
        return Err(Error::Config("compare needs at least two variants".into()));
    }
    let names: Vec<String> = spec.runs.iter().map(run_dir_name).collect();
    if let Some(d) = names.iter().enumerate().find(|(i, n)| names[..*i].contains(n)) {
        return Err(Error::Config(format!("run `{}` listed twice", d.1)));
    }
    spec.finetune.validate()?;
    if spec.tasks.is_empty() {
        return Err(Error::Config("compare needs at least one probe task".into()));
    }
    fs::create_dir_all(out)?;

    let mut config = BTreeMap::from([
        ("variants".to_string(), variants.join(",")),
        ("tasks".to_string(), spec.tasks.iter().map(|t| t.name.clone()).collect::<Vec<_>>().join(",")),
        ("finetune".to_string(), serde_json::to_string(&spec.finetune)?),
    ]);
    for (n, c) in names.iter().zip(&spec.runs) {
        config.insert(format!("run.{n}"), hex::encode(c.hash()));
    }
    let seed = spec.runs[0].seed;
    let mut manifest = RunManifest::new("compare", config, seed, corpus.inputs());
    manifest.save(out)?;

    let runs = fan_out(&spec.runs, spec.threads, |cfg| {
        pretrain(&out.join("pretrain").join(run_dir_name(cfg)), cfg, corpus, None, &mut |_| {})
    })?;
    let pretrain_hits = runs.iter().filter(|r| r.status == CacheStatus::Hit).count();

    let jobs: Vec<(usize, std::path::PathBuf)> = runs
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.checkpoints.iter().map(move |c| (i, c.2.clone())))
        .collect();
    let cache = out.join("finetune-cache");
    let reports = fan_out(&jobs, 1, |(_, path)| {
        finetune_checkpoint(path, &corpus.vocab, &spec.tasks, &spec.finetune, spec.threads, Some(&cache))
    })?;
    let finetune_hits = reports.iter().map(|r| r.cached).sum();

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for ((i, _), rep) in jobs.iter().zip(&reports) {
        rows.extend(rep.rows());
        for g in &rep.results {
            cells.push(ScoreCell {
                variant: rep.variant.to_string(),
                seed: spec.runs[*i].seed,
                fraction: rep.fraction,
                task: g.task.clone(),
                score: g.best_score,
            });
        }
    }
    write_results(&out.join("results.csv"), &rows)?;
    let mut fractions: Vec<f64> = cells.iter().map(|c| c.fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let report = CompareReport {
        runs,
        rows,
        cells,
        fractions,
        pretrain_hits,
        finetune_hits,
    };

    let mut table = String::from("variant,task");
    for f in &report.fractions {
        let _ = write!(table, ",{f}");
    }
    table.push('\n');
    let plots = out.join("plots");
    fs::create_dir_all(&plots)?;
    for task in &spec.tasks {
        let mut csv = String::from("flops_fraction");
        for v in &variants {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
        for &f in &report.fractions {
            let _ = write!(csv, "{f}");
            for v in &variants {
                let s = report.mean_score(v, f, &task.name);
                let _ = write!(csv, ",{}", s.map_or(String::new(), |s| s.to_string()));
            }
            csv.push('\n');
        }
        fs::write(plots.join(format!("{}.csv", task.name)), csv)?;
        let series: Vec<(String, Vec<(f64, f64)>)> = variants
            .iter()
            .map(|v| {
                let pts = report
                    .fractions
                    .iter()
                    .filter_map(|&f| report.mean_score(v, f, &task.name).map(|s| (f, s)))
                    .collect();
                (v.clone(), pts)
            })
            .collect();
        let svg = line_chart_svg(&task.name, "pre-training FLOPs fraction", "dev score", &series);
        fs::write(plots.join(format!("{}.svg", task.name)), svg)?;
        for v in &variants {
            let _ = write!(table, "{v},{}", task.name);
            for &f in &report.fractions {
                let s = report.mean_score(v, f, &task.name);
                let _ = write!(table, ",{}", s.map_or(String::new(), |s| format!("{s:.4}")));
            }
            table.push('\n');
        }
    }
    fs::write(out.join("report.csv"), table)?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summarize(&report.rows))? + "\n")?;

    let mut artifacts = vec![
        "results.csv".to_string(),
        "report.csv".to_string(),
        "summary.json".to_string(),
    ];
    for t in &spec.tasks {
        artifacts.push(format!("plots/{}.csv", t.name));
        artifacts.push(format!("plots/{}.svg", t.name));
    }
    artifacts.extend(names.iter().map(|n| format!("pretrain/{n}")));
    manifest.finish(artifacts);
    manifest.save(out)?;
    Ok(report)
}
