//! Run directories, job execution, and the shake-versus-baseline trend
//! comparison over a synthetic corpus.
//!
//! A run lives at `<runs>/<name>/fold<k>/seed<s>/` and holds `config.txt`
//! (the hyperparameters plus model and fold), `report.jsonl` (one record per
//! epoch), `run.json` (wall clock, best epoch, step count) and `best.ckpt`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::data::{
    featurize_corpus, generate_synthetic_corpus, make_folds, parallel_for, partition_actors, ActorPartition, Fold,
    OnError, SynthSpec, UtteranceRecord,
};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::models::{save_checkpoint, shallow_spec, ModelSpec};
use crate::shake::ShakeMode;
use crate::train::{
    paired_t_test_one_sided, read_json_lines, sweep_patience, train, Dataset, EpochRecord, HyperParams,
    SweepResult, TTest, TrainReport,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "report.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const PARTITION_FILE: &str = "partition.txt";

pub fn run_dir(runs_root: &Path, name: &str, fold: usize, seed: u64) -> PathBuf {
    runs_root.join(name).join(format!("fold{fold}")).join(format!("seed{seed}"))
}

/// One (model, fold, seed) training run.
#[derive(Debug, Clone)]
pub struct Job {
    pub name: String,
    pub spec: ModelSpec,
    pub fold: usize,
    pub hyper: HyperParams,
}

/// Trains one job on the fold's split of `data` (indexed like the manifest)
/// and writes its run directory.
pub fn execute_job(job: &Job, data: &Dataset, folds: &[Fold], runs_root: &Path, verbose: bool) -> Result<TrainReport> {
    let fold = folds
        .get(job.fold)
        .ok_or_else(|| Error::Config(format!("fold {} out of range ({} folds)", job.fold, folds.len())))?;
    let dir = run_dir(runs_root, &job.name, job.fold, job.hyper.seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let config = format!(
        "name={}\nmodel={}\nfold={}\n{}",
        job.name,
        job.spec.name,
        job.fold,
        job.hyper.echo()
    );
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, config).map_err(|e| Error::io(&config_path, e))?;

    let train_set = data.subset(&fold.train);
    let valid_set = data.subset(&fold.valid);
    let mut model = job.spec.build(job.hyper.seed);
    let tag = format!("{} fold{} seed{}", job.name, job.fold, job.hyper.seed);
    let outcome = train(&mut model, &train_set, &valid_set, &job.hyper, |r| {
        if verbose {
            eprintln!(
                "[{tag}] epoch {:>3} loss {:.4} train UA {:.2} valid UA {:.2}",
                r.epoch, r.train_loss, r.train_ua, r.valid_ua
            );
        }
    })?;
    let report = outcome.report;
    report.write_json_lines(&dir.join(REPORT_FILE))?;
    let run = serde_json::json!({
        "wall_clock_secs": report.wall_clock_secs,
        "best_epoch": report.best_epoch,
        "steps": report.steps,
        "epochs": report.epochs.len(),
    });
    let run_path = dir.join(RUN_FILE);
    fs::write(&run_path, run.to_string() + "\n").map_err(|e| Error::io(&run_path, e))?;
    save_checkpoint(&outcome.best, &dir.join(CHECKPOINT_FILE))?;
    Ok(report)
}

/// Runs jobs on up to `jobs` threads; reports come back in job order.
pub fn execute_jobs(
    list: &[Job],
    data: &Dataset,
    folds: &[Fold],
    runs_root: &Path,
    jobs: usize,
    verbose: bool,
) -> Result<Vec<TrainReport>> {
    let slots: Vec<Mutex<Option<TrainReport>>> = list.iter().map(|_| Mutex::new(None)).collect();
    parallel_for(list.len(), jobs, |i| {
        let report = execute_job(&list[i], data, folds, runs_root, verbose)?;
        *slots[i].lock().expect("unpoisoned") = Some(report);
        Ok(())
    })?;
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().expect("unpoisoned").expect("filled"))
        .collect())
}

/// Every `fold<k>/seed<s>/report.jsonl` under `<runs>/<name>`, ordered by
/// fold then seed.
pub fn load_curves(runs_root: &Path, name: &str) -> Result<Vec<((usize, u64), Vec<EpochRecord>)>> {
    let base = runs_root.join(name);
    let numbered = |dir: &Path, prefix: &str| -> Result<Vec<(u64, PathBuf)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let n = path
                .file_name()
                .and_then(|f| f.to_str())
                .and_then(|f| f.strip_prefix(prefix))
                .and_then(|n| n.parse().ok());
            if let (Some(n), true) = (n, path.is_dir()) {
                out.push((n, path));
            }
        }
        out.sort();
        Ok(out)
    };
    let mut curves = Vec::new();
    for (fold, fold_dir) in numbered(&base, "fold")? {
        for (seed, seed_dir) in numbered(&fold_dir, "seed")? {
            let path = seed_dir.join(REPORT_FILE);
            if path.exists() {
                curves.push(((fold as usize, seed), read_json_lines(&path)?));
            }
        }
    }
    if curves.is_empty() {
        return Err(Error::Consistency(format!("no reports under {}", base.display())));
    }
    Ok(curves)
}

/// Sweeps several named models; their (fold, seed) grids must match.
pub fn sweep_runs(runs_root: &Path, names: &[String], patience: &[usize]) -> Result<SweepResult> {
    let mut models = Vec::with_capacity(names.len());
    let mut grid: Option<Vec<(usize, u64)>> = None;
    for name in names {
        let curves = load_curves(runs_root, name)?;
        let keys: Vec<(usize, u64)> = curves.iter().map(|(k, _)| *k).collect();
        match &grid {
            Some(g) if *g != keys => {
                return Err(Error::Consistency(format!(
                    "model {name} has (fold, seed) grid {keys:?}, expected {g:?}"
                )))
            }
            _ => grid = Some(keys),
        }
        models.push((name.clone(), curves.into_iter().map(|(_, c)| c).collect()));
    }
    sweep_patience(&models, patience)
}

/// Pairwise one-sided tests between models at one patience column.
#[derive(Debug)]
pub struct PairwiseStats {
    pub models: Vec<String>,
    pub patience: usize,
    /// `ua[i][j]`: test that model i's selected validation UA exceeds model j's.
    pub ua: Vec<Vec<Result<TTest>>>,
    /// `gap[i][j]`: test that model i's gap is smaller than model j's.
    pub gap: Vec<Vec<Result<TTest>>>,
}

/// Runs every ordered pair at the patience column `column` of `sweep`.
pub fn pairwise_stats(sweep: &SweepResult, column: usize) -> Result<PairwiseStats> {
    if sweep.rows.len() < 2 {
        return Err(Error::Consistency("statistics need at least two models".into()));
    }
    let patience = *sweep
        .patience
        .get(column)
        .ok_or_else(|| Error::Config(format!("patience column {column} out of range")))?;
    let per_run = |i: usize, f: fn(&crate::train::Selection) -> f64| -> Vec<f64> {
        sweep.rows[i].selections.iter().map(|s| f(&s[column])).collect()
    };
    let n = sweep.rows.len();
    let mut ua = Vec::with_capacity(n);
    let mut gap = Vec::with_capacity(n);
    for i in 0..n {
        ua.push(
            (0..n)
                .map(|j| paired_t_test_one_sided(&per_run(i, |s| s.valid_ua), &per_run(j, |s| s.valid_ua)))
                .collect(),
        );
        gap.push(
            (0..n)
                .map(|j| paired_t_test_one_sided(&per_run(j, |s| s.gap), &per_run(i, |s| s.gap)))
                .collect(),
        );
    }
    Ok(PairwiseStats {
        models: sweep.rows.iter().map(|r| r.model.clone()).collect(),
        patience,
        ua,
        gap,
    })
}

impl PairwiseStats {
    fn table(&self, title: &str, cells: &[Vec<Result<TTest>>]) -> String {
        let width = self.models.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut out = format!("{title}\n{:<width$}", "");
        for m in &self.models {
            out.push_str(&format!(" {m:>width$}"));
        }
        out.push('\n');
        for (i, row) in cells.iter().enumerate() {
            out.push_str(&format!("{:<width$}", self.models[i]));
            for (j, cell) in row.iter().enumerate() {
                let s = match cell {
                    _ if i == j => "-".to_string(),
                    Ok(t) => format!("{:.4}", t.p),
                    Err(Error::DegenerateVariance) => "degen".to_string(),
                    Err(_) => "error".to_string(),
                };
                out.push_str(&format!(" {s:>width$}"));
            }
            out.push('\n');
        }
        out
    }

    /// Two p-value matrices (row model versus column model) plus the
    /// degrees of freedom.
    pub fn to_text(&self) -> String {
        let df = self
            .ua
            .iter()
            .flatten()
            .find_map(|t| t.as_ref().ok().map(|t| t.df))
            .map_or("n/a".to_string(), |d| d.to_string());
        format!(
            "patience {}, df = {df}\n{}\n{}",
            self.patience,
            self.table("p-value: row validation UA > column", &self.ua),
            self.table("p-value: row gap < column", &self.gap)
        )
    }
}

/// Configuration of the shake-versus-baseline comparison.
#[derive(Debug, Clone)]
pub struct TrendConfig {
    pub synth: SynthSpec,
    pub features: FeatureConfig,
    pub model: fn(ShakeMode) -> ModelSpec,
    pub modes: Vec<ShakeMode>,
    pub seeds: Vec<u64>,
    /// Fold indices to run (out of 4).
    pub folds: Vec<usize>,
    pub partition_seed: u64,
    /// Template; `mode` and `seed` are set per job.
    pub hyper: HyperParams,
    pub patience: Vec<usize>,
    pub jobs: usize,
    pub verbose: bool,
}

impl Default for TrendConfig {
    fn default() -> Self {
        TrendConfig {
            synth: SynthSpec::default(),
            features: FeatureConfig::default(),
            model: shallow_spec,
            modes: vec![ShakeMode::None, ShakeMode::Full, ShakeMode::Both],
            seeds: vec![0, 1, 2],
            folds: vec![0, 1, 2, 3],
            partition_seed: 0,
            hyper: HyperParams {
                max_epochs: 150,
                ..HyperParams::default()
            },
            patience: crate::train::DEFAULT_PATIENCE.to_vec(),
            jobs: 1,
            verbose: false,
        }
    }
}

#[derive(Debug)]
pub struct TrendOutcome {
    pub sweep: SweepResult,
    /// Per mode, per seed: fold-averaged gap at the largest patience.
    pub gap_by_seed: Vec<(ShakeMode, Vec<f64>)>,
    /// Per shaken mode: seeds in which its gap is below the baseline's.
    pub wins: Vec<(ShakeMode, usize)>,
    /// Every shaken mode beats the baseline gap in a strict majority of seeds.
    pub directional_pass: bool,
    /// Both versus baseline validation UA over (fold, seed) pairs.
    pub both_vs_baseline: Option<Result<TTest>>,
}

impl TrendOutcome {
    pub fn summary(&self) -> String {
        let mut out = self.sweep.to_text();
        out.push_str("\nGap at largest patience by seed\n");
        for (mode, gaps) in &self.gap_by_seed {
            let cells: Vec<String> = gaps.iter().map(|g| format!("{g:.2}")).collect();
            out.push_str(&format!("{:<8} {}\n", mode.as_str(), cells.join(" ")));
        }
        for (mode, wins) in &self.wins {
            out.push_str(&format!(
                "{} gap below baseline in {wins}/{} seeds\n",
                mode.as_str(),
                self.gap_by_seed.first().map_or(0, |g| g.1.len())
            ));
        }
        match &self.both_vs_baseline {
            Some(Ok(t)) => out.push_str(&format!(
                "both vs none validation UA: t = {:.3}, df = {}, one-sided p = {:.4}\n",
                t.t, t.df, t.p
            )),
            Some(Err(e)) => out.push_str(&format!("both vs none validation UA: {e}\n")),
            None => {}
        }
        out
    }
}

/// Generates and featurizes the corpus under `work_dir`, trains every
/// (mode, fold, seed), and compares each shaken mode's gap with the
/// baseline's at the largest patience.
pub fn run_trend(cfg: &TrendConfig, work_dir: &Path) -> Result<TrendOutcome> {
    let corpus = work_dir.join("corpus");
    let records = generate_synthetic_corpus(&cfg.synth, &corpus, cfg.jobs)?;
    featurize_corpus(&corpus, &records, &cfg.features, false, OnError::FailFast)?;
    let (data, partition, folds) = prepare(&corpus, &records, cfg.partition_seed)?;

    let runs = work_dir.join("runs");
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    let part_path = runs.join(PARTITION_FILE);
    fs::write(&part_path, partition.to_text()).map_err(|e| Error::io(&part_path, e))?;
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let mut fold_ids = cfg.folds.clone();
    fold_ids.sort_unstable();
    fold_ids.dedup();
    let mut list = Vec::new();
    for &mode in &cfg.modes {
        for &fold in &fold_ids {
            for &seed in &seeds {
                list.push(Job {
                    name: mode.as_str().to_string(),
                    spec: (cfg.model)(mode),
                    fold,
                    hyper: HyperParams {
                        mode,
                        seed,
                        ..cfg.hyper.clone()
                    },
                });
            }
        }
    }
    execute_jobs(&list, &data, &folds, &runs, cfg.jobs, cfg.verbose)?;

    let names: Vec<String> = cfg.modes.iter().map(|m| m.as_str().to_string()).collect();
    let sweep = sweep_runs(&runs, &names, &cfg.patience)?;
    let last = cfg.patience.len() - 1;
    // Runs are ordered fold-major, seed-minor within each row.
    let gap_by_seed: Vec<(ShakeMode, Vec<f64>)> = cfg
        .modes
        .iter()
        .zip(&sweep.rows)
        .map(|(&mode, row)| {
            let gaps = (0..seeds.len())
                .map(|s| {
                    let per_fold: Vec<f64> = (0..fold_ids.len())
                        .map(|f| row.selections[f * seeds.len() + s][last].gap)
                        .collect();
                    per_fold.iter().sum::<f64>() / per_fold.len() as f64
                })
                .collect();
            (mode, gaps)
        })
        .collect();

    let baseline = gap_by_seed.iter().find(|(m, _)| *m == ShakeMode::None);
    let mut wins = Vec::new();
    if let Some((_, base)) = baseline {
        for (mode, gaps) in gap_by_seed.iter().filter(|(m, _)| *m != ShakeMode::None) {
            wins.push((*mode, gaps.iter().zip(base).filter(|(g, b)| g < b).count()));
        }
    }
    let directional_pass = !wins.is_empty() && wins.iter().all(|&(_, w)| 2 * w > seeds.len());

    let row_of = |m: ShakeMode| cfg.modes.iter().position(|&x| x == m);
    let both_vs_baseline = match (row_of(ShakeMode::Both), row_of(ShakeMode::None)) {
        (Some(b), Some(n)) => {
            let ua = |r: usize| -> Vec<f64> { sweep.rows[r].selections.iter().map(|s| s[last].valid_ua).collect() };
            Some(paired_t_test_one_sided(&ua(b), &ua(n)))
        }
        _ => None,
    };

    Ok(TrendOutcome {
        sweep,
        gap_by_seed,
        wins,
        directional_pass,
        both_vs_baseline,
    })
}

/// Loads every manifest row's features and builds the 4 speaker-independent
/// folds.
pub fn prepare(
    corpus_dir: &Path,
    records: &[UtteranceRecord],
    partition_seed: u64,
) -> Result<(Dataset, ActorPartition, Vec<Fold>)> {
    let partition = partition_actors(records, 4, partition_seed)?;
    let folds = make_folds(&partition, records)?;
    let all: Vec<usize> = (0..records.len()).collect();
    let data = Dataset::load(corpus_dir, records, &all)?;
    Ok((data, partition, folds))
}
