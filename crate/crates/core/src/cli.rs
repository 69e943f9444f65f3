//! Command-line interface.
//!
//! Every option can also come from a flat `key=value` config file passed with
//! `--config`; a flag given on the command line wins over the file. Keys use
//! the flag names with `-` replaced by `_` (for example `batch_size=64`).
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::data::{
    featurize_corpus, generate_synthetic_corpus, read_manifest, OnError, SynthSpec, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::experiment::{execute_jobs, pairwise_stats, prepare, sweep_runs, Job, PARTITION_FILE};
use crate::features::FeatureConfig;
use crate::models::{deep_spec, shallow_spec, ModelSpec};
use crate::shake::{Granularity, ShakeMode};
use crate::train::{HyperParams, DEFAULT_PATIENCE};

pub const SEED_ENV: &str = "SUBBAND_SHAKE_SEED";

/// Every key the config file may set.
pub const CONFIG_KEYS: &[&str] = &[
    "actors", "at_patience", "batch_size", "corpora", "corpus", "csv", "epochs", "eval_batch", "folds",
    "force", "granularity", "jobs", "lr", "max_secs", "micro_batch", "min_secs", "mode", "model", "models",
    "name", "noise", "normalize_unshaken", "out", "partition_seed", "patience", "per_class", "runs", "seed",
    "seeds", "skip_errors",
];

#[derive(Debug, Parser)]
#[command(name = "subband-shake", version, about = "Sub-band Shake-Shake experiments on synthetic emotion corpora")]
pub struct Cli {
    /// key=value config file; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root seed.
    #[arg(long, global = true, env = SEED_ENV)]
    pub seed: Option<u64>,

    /// Maximum parallel workers.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus: WAV files plus manifest.csv.
    SynthData(SynthArgs),
    /// Extract spliced spectrogram features for every manifest row.
    Featurize(FeaturizeArgs),
    /// Train every (fold, seed) of one model configuration.
    Train(TrainArgs),
    /// Early-stopping patience sweep over finished runs.
    SweepPatience(SweepArgs),
    /// Pairwise one-sided paired t-tests between models.
    Stats(StatsArgs),
    /// Print a model's layer and parameter summary.
    InspectModel(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub actors: Option<usize>,
    /// Utterances per actor per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Number of corpus tags to spread actors over.
    #[arg(long)]
    pub corpora: Option<usize>,
    /// Shortest utterance in seconds.
    #[arg(long)]
    pub min_secs: Option<f64>,
    /// Longest utterance in seconds.
    #[arg(long)]
    pub max_secs: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    /// Corpus directory holding manifest.csv.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Recompute features that already exist.
    #[arg(long)]
    pub force: bool,
    /// Report unreadable utterances and continue instead of stopping.
    #[arg(long)]
    pub skip_errors: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Root of the run directories.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Run name; defaults to the shake mode.
    #[arg(long)]
    pub name: Option<String>,
    /// shallow or deep.
    #[arg(long)]
    pub model: Option<String>,
    /// none, full, upper, lower or both.
    #[arg(long)]
    pub mode: Option<String>,
    /// batch, sample or frame.
    #[arg(long)]
    pub granularity: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated seeds; defaults to the root seed.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated fold indices (0-3).
    #[arg(long)]
    pub folds: Option<String>,
    #[arg(long)]
    pub partition_seed: Option<u64>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub eval_batch: Option<usize>,
    /// Average rather than sum the branches of an unshaken sub-band.
    #[arg(long)]
    pub normalize_unshaken: Option<bool>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Comma-separated run names, one table row each.
    #[arg(long)]
    pub models: Option<String>,
    /// Comma-separated, strictly increasing patience values.
    #[arg(long)]
    pub patience: Option<String>,
    /// CSV output path; defaults to `<runs>/sweep.csv`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub models: Option<String>,
    /// Patience at which selections are compared; defaults to the largest in
    /// the patience list.
    #[arg(long)]
    pub at_patience: Option<usize>,
    #[arg(long)]
    pub patience: Option<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
}

/// Values from the config file, consumed by key.
#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            let key = k.trim().replace('-', "_");
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", i + 1)));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Settings { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => Settings::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        }
    }

    /// The flag if given, else the file's value, else `None`.
    pub fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("config key {key}={v:?}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(flag, key)?
            .ok_or_else(|| Error::Config(format!("missing --{} (or {key}= in the config file)", key.replace('_', "-"))))
    }
}

pub fn parse_list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| Error::Config(format!("bad {what} {s:?}: {e}"))))
        .collect()
}

pub fn model_spec(name: &str, mode: ShakeMode) -> Result<ModelSpec> {
    match name {
        "shallow" => Ok(shallow_spec(mode)),
        "deep" => Ok(deep_spec(mode)),
        other => Err(Error::Config(format!("unknown model {other:?} (expected shallow or deep)"))),
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Param(m) => Error::Config(m),
        other => other,
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Wav { .. } | Error::Csv { .. } | Error::Format { .. } | Error::MissingFeatures { .. } => 3,
        Error::Consistency(_) => 4,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let seed = settings.get_or(cli.seed, "seed", 0u64)?;
    let jobs = settings.get_or(cli.jobs, "jobs", 1usize)?.max(1);
    match cli.command {
        Command::SynthData(a) => synth_data(&settings, a, seed, jobs),
        Command::Featurize(a) => featurize(&settings, a),
        Command::Train(a) => train_cmd(&settings, a, seed, jobs),
        Command::SweepPatience(a) => sweep_cmd(&settings, a),
        Command::Stats(a) => stats_cmd(&settings, a),
        Command::InspectModel(a) => inspect(&settings, a),
    }
}

fn synth_data(s: &Settings, a: SynthArgs, seed: u64, jobs: usize) -> Result<()> {
    let out: PathBuf = s.require(a.out, "out")?;
    let defaults = SynthSpec::default();
    let per_class = s.get_or(a.per_class, "per_class", defaults.per_class[0])?;
    let spec = SynthSpec {
        actor_count: s.get_or(a.actors, "actors", defaults.actor_count)?,
        per_class: [per_class; 4],
        noise_level: s.get_or(a.noise, "noise", defaults.noise_level)?,
        corpora: s.get_or(a.corpora, "corpora", defaults.corpora)?,
        min_secs: s.get_or(a.min_secs, "min_secs", defaults.min_secs)?,
        max_secs: s.get_or(a.max_secs, "max_secs", defaults.max_secs)?,
        seed,
        ..defaults
    };
    let records = generate_synthetic_corpus(&spec, &out, jobs).map_err(config_err)?;
    let echo = out.join("synth_config.txt");
    let text = format!(
        "actors={}\nper_class={per_class}\nnoise={}\ncorpora={}\nmin_secs={}\nmax_secs={}\nseed={seed}\n",
        spec.actor_count, spec.noise_level, spec.corpora, spec.min_secs, spec.max_secs
    );
    fs::write(&echo, text).map_err(|e| Error::io(&echo, e))?;
    println!("wrote {} utterances to {}", records.len(), out.join(MANIFEST_FILE).display());
    Ok(())
}

fn featurize(s: &Settings, a: FeaturizeArgs) -> Result<()> {
    let corpus: PathBuf = s.require(a.corpus, "corpus")?;
    let force = a.force || s.get_or(None, "force", false)?;
    let skip = a.skip_errors || s.get_or(None, "skip_errors", false)?;
    let records = read_manifest(&corpus.join(MANIFEST_FILE))?;
    let config = FeatureConfig::default();
    let summary = featurize_corpus(
        &corpus,
        &records,
        &config,
        force,
        if skip { OnError::Skip } else { OnError::FailFast },
    )?;
    for line in summary.shape_lines(&config) {
        println!("{line}");
    }
    for (id, err) in &summary.failed {
        eprintln!("failed {id}: {err}");
    }
    println!(
        "featurized {}, skipped {} existing, {} failed",
        summary.written,
        summary.skipped_existing,
        summary.failed.len()
    );
    if summary.failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Consistency(format!("{} utterance(s) could not be featurized", summary.failed.len())))
    }
}

fn train_cmd(s: &Settings, a: TrainArgs, seed: u64, jobs: usize) -> Result<()> {
    let corpus: PathBuf = s.require(a.corpus, "corpus")?;
    let runs: PathBuf = s.get_or(a.runs, "runs", PathBuf::from("runs"))?;
    let mode: ShakeMode = s.get_or(a.mode, "mode", "both".to_string())?.parse().map_err(config_err)?;
    let granularity: Granularity = s
        .get_or(a.granularity, "granularity", "frame".to_string())?
        .parse()
        .map_err(config_err)?;
    let model_name: String = s.get_or(a.model, "model", "shallow".to_string())?;
    let spec = model_spec(&model_name, mode)?;
    let name: String = s.get_or(a.name, "name", mode.as_str().to_string())?;
    let seeds: Vec<u64> = match s.get(a.seeds, "seeds")? {
        Some(list) => parse_list::<u64>(&list, "seed")?,
        None => vec![seed],
    };
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    let folds: Vec<usize> = parse_list(&s.get_or(a.folds, "folds", "0,1,2,3".to_string())?, "fold")?;
    if let Some(&f) = folds.iter().find(|&&f| f >= 4) {
        return Err(Error::Config(format!("fold {f} out of range 0-3")));
    }
    let defaults = HyperParams::default();
    let hyper = HyperParams {
        lr: s.get_or(a.lr, "lr", defaults.lr)?,
        batch_size: s.get_or(a.batch_size, "batch_size", defaults.batch_size)?,
        max_epochs: s.get_or(a.epochs, "epochs", defaults.max_epochs)?,
        mode,
        granularity,
        seed,
        normalize_unshaken: s.get_or(a.normalize_unshaken, "normalize_unshaken", false)?,
        micro_batch: s.get(a.micro_batch, "micro_batch")?,
        eval_batch: s.get_or(a.eval_batch, "eval_batch", defaults.eval_batch)?,
    };
    hyper.validate().map_err(config_err)?;
    let partition_seed = s.get_or(a.partition_seed, "partition_seed", seed)?;

    let records = read_manifest(&corpus.join(MANIFEST_FILE))?;
    let (data, partition, fold_splits) = prepare(&corpus, &records, partition_seed).map_err(config_err)?;
    let base = runs.join(&name);
    fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    let part_path = base.join(PARTITION_FILE);
    fs::write(&part_path, partition.to_text()).map_err(|e| Error::io(&part_path, e))?;

    let list: Vec<Job> = folds
        .iter()
        .flat_map(|&fold| {
            let spec = &spec;
            let name = &name;
            let hyper = &hyper;
            seeds.iter().map(move |&seed| Job {
                name: name.clone(),
                spec: spec.clone(),
                fold,
                hyper: HyperParams { seed, ..hyper.clone() },
            })
        })
        .collect();
    let reports = execute_jobs(&list, &data, &fold_splits, &runs, jobs, !a.quiet)?;
    for (job, r) in list.iter().zip(&reports) {
        let best = r.epochs[r.best_epoch - 1];
        println!(
            "{} fold{} seed{}: best epoch {} valid UA {:.2} train UA {:.2} ({:.1} s)",
            job.name, job.fold, job.hyper.seed, r.best_epoch, best.valid_ua, best.train_ua, r.wall_clock_secs
        );
    }
    Ok(())
}

fn patience_list(s: &Settings, flag: Option<String>) -> Result<Vec<usize>> {
    match s.get(flag, "patience")? {
        Some(text) => parse_list(&text, "patience"),
        None => Ok(DEFAULT_PATIENCE.to_vec()),
    }
}

fn model_names(s: &Settings, flag: Option<String>) -> Result<Vec<String>> {
    let names: Vec<String> = parse_list(&s.require(flag, "models")?, "model name")?;
    if names.is_empty() {
        return Err(Error::Config("model list is empty".into()));
    }
    Ok(names)
}

fn sweep_cmd(s: &Settings, a: SweepArgs) -> Result<()> {
    let runs: PathBuf = s.get_or(a.runs, "runs", PathBuf::from("runs"))?;
    let names = model_names(s, a.models)?;
    let patience = patience_list(s, a.patience)?;
    let sweep = sweep_runs(&runs, &names, &patience).map_err(config_err)?;
    print!("{}", sweep.to_text());
    let csv = s.get_or(a.csv, "csv", runs.join("sweep.csv"))?;
    fs::write(&csv, sweep.to_csv()).map_err(|e| Error::io(&csv, e))?;
    println!("csv: {}", csv.display());
    Ok(())
}

fn stats_cmd(s: &Settings, a: StatsArgs) -> Result<()> {
    let runs: PathBuf = s.get_or(a.runs, "runs", PathBuf::from("runs"))?;
    let names = model_names(s, a.models)?;
    let mut patience = patience_list(s, a.patience)?;
    if let Some(p) = s.get(a.at_patience, "at_patience")? {
        patience = vec![p];
    }
    let sweep = sweep_runs(&runs, &names, &patience).map_err(config_err)?;
    let stats = pairwise_stats(&sweep, patience.len() - 1)?;
    print!("{}", stats.to_text());
    let degenerate: Vec<String> = (0..names.len())
        .flat_map(|i| (0..names.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && matches!(stats.ua[i][j], Err(Error::DegenerateVariance)))
        .map(|(i, j)| format!("{} vs {}", names[i], names[j]))
        .collect();
    if degenerate.is_empty() {
        Ok(())
    } else {
        Err(Error::Consistency(format!(
            "degenerate variance (identical selections) for {}",
            degenerate.join(", ")
        )))
    }
}

fn inspect(s: &Settings, a: InspectArgs) -> Result<()> {
    let mode: ShakeMode = s.get_or(a.mode, "mode", "both".to_string())?.parse().map_err(config_err)?;
    let spec = model_spec(&s.get_or(a.model, "model", "shallow".to_string())?, mode)?;
    print!("{}", spec.summary());
    Ok(())
}
