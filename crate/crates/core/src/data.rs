//! Synthetic emotion corpus, CSV manifest, and speaker-independent folds.
//!
//! A corpus directory holds `manifest.csv`, the waveforms under
//! `wav/<utterance_id>.wav`, and (once featurized) the feature files at the
//! manifest's `feature_path`, which is relative to the manifest directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::container::{read_tensor, write_tensor, Dtype};
use crate::features::{extract_features, read_wav, write_wav, FeatureConfig, Waveform, DEFAULT_SAMPLE_RATE};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const WAV_DIR: &str = "wav";
pub const FEATURE_DIR: &str = "features";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Joy,
    Anger,
    Sadness,
    Fear,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [Emotion::Joy, Emotion::Anger, Emotion::Sadness, Emotion::Fear];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Joy => "joy",
            Emotion::Anger => "anger",
            Emotion::Sadness => "sadness",
            Emotion::Fear => "fear",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown emotion label {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub actor_id: String,
    pub gender: Gender,
    pub corpus: String,
    pub label: Emotion,
    pub feature_path: PathBuf,
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a manifest, rejecting duplicate utterance ids.
pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let records = r
        .deserialize()
        .collect::<std::result::Result<Vec<UtteranceRecord>, _>>()
        .map_err(csv_err)?;
    let mut seen = BTreeSet::new();
    for rec in &records {
        if !seen.insert(&rec.utterance_id) {
            return Err(Error::format(
                path,
                format!("duplicate utterance id {}", rec.utterance_id),
            ));
        }
    }
    Ok(records)
}

/// Frequency band in Hz where a class concentrates its energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandProfile {
    pub low_hz: f64,
    pub high_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub actor_count: usize,
    /// Utterances per actor for each class, indexed by [`Emotion::index`].
    pub per_class: [usize; 4],
    /// Class bands, indexed by [`Emotion::index`].
    pub profiles: [BandProfile; 4],
    /// Standard deviation of additive white noise relative to the tone level.
    pub noise_level: f64,
    /// Number of corpus tags actors are dealt across.
    pub corpora: usize,
    pub min_secs: f64,
    pub max_secs: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            actor_count: 8,
            per_class: [20; 4],
            // Joy and anger in the upper half-band, sadness and fear in the lower.
            profiles: [
                BandProfile { low_hz: 4400.0, high_hz: 5600.0 },
                BandProfile { low_hz: 5800.0, high_hz: 7400.0 },
                BandProfile { low_hz: 300.0, high_hz: 1300.0 },
                BandProfile { low_hz: 1700.0, high_hz: 3500.0 },
            ],
            noise_level: 0.3,
            corpora: 1,
            min_secs: 1.0,
            max_secs: 3.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
        }
    }
}

/// Identity of one synthetic actor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Actor {
    pub id: String,
    pub gender: Gender,
    pub corpus: String,
}

impl SynthSpec {
    pub fn utterance_count(&self) -> usize {
        self.actor_count * self.per_class.iter().sum::<usize>()
    }

    /// Actors alternate F/M and are dealt across corpus tags in order.
    pub fn actors(&self) -> Vec<Actor> {
        (0..self.actor_count)
            .map(|i| Actor {
                id: format!("A{:02}", i + 1),
                gender: if i % 2 == 0 { Gender::F } else { Gender::M },
                corpus: if self.corpora <= 1 {
                    "synth".into()
                } else {
                    format!("synth{}", (b'A' + (i % self.corpora) as u8) as char)
                },
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.actor_count == 0 {
            return Err(Error::Param("synthetic corpus needs at least one actor".into()));
        }
        if !(self.min_secs > 0.0 && self.min_secs <= self.max_secs) {
            return Err(Error::Param(format!(
                "bad duration range {}..{} s",
                self.min_secs, self.max_secs
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for p in &self.profiles {
            if !(0.0 < p.low_hz && p.low_hz < p.high_hz && p.high_hz < nyquist) {
                return Err(Error::Param(format!("band {p:?} outside (0, {nyquist}) Hz")));
            }
        }
        if self.noise_level < 0.0 {
            return Err(Error::Param("noise level must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-actor timbre: a frequency scale and an output gain.
    fn timbre(&self, actor: usize) -> (f64, f64) {
        let mut rng = stream(self.seed, Purpose::Synth, (actor as u64) << 32 | 0xFFFF_FFFF);
        (rng.gen_range(0.9..1.1), rng.gen_range(0.6..1.0))
    }

    /// Deterministic waveform for utterance `k` of `label` by actor `actor`.
    pub fn synthesize(&self, actor: usize, label: Emotion, k: usize) -> Waveform {
        let (scale, level) = self.timbre(actor);
        let index = (actor as u64) << 32 | (label.index() as u64) << 24 | k as u64;
        let mut rng = stream(self.seed, Purpose::Synth, index);
        let sr = self.sample_rate as f64;
        let secs = rng.gen_range(self.min_secs..=self.max_secs);
        let n = (secs * sr).round() as usize;
        let band = self.profiles[label.index()];
        let nyquist = sr / 2.0;

        struct Tone {
            freq: f64,
            amp: f64,
            phase: f64,
            am_rate: f64,
            am_phase: f64,
        }
        let mut tones = Vec::new();
        for _ in 0..5 {
            let f = (rng.gen_range(band.low_hz..band.high_hz) * scale).min(nyquist - 50.0);
            tones.push(Tone {
                freq: f,
                amp: rng.gen_range(0.5..1.0),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                am_rate: rng.gen_range(2.0..6.0),
                am_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            });
        }
        // Class-independent distractors anywhere in the spectrum.
        for _ in 0..3 {
            tones.push(Tone {
                freq: rng.gen_range(100.0..nyquist - 100.0),
                amp: rng.gen_range(0.3..0.8),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                am_rate: rng.gen_range(1.0..4.0),
                am_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            });
        }

        let mut samples: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                tones
                    .iter()
                    .map(|tone| {
                        let env = 0.6 + 0.4 * (std::f64::consts::TAU * tone.am_rate * t + tone.am_phase).sin();
                        tone.amp * env * (std::f64::consts::TAU * tone.freq * t + tone.phase).sin()
                    })
                    .sum::<f64>()
            })
            .collect();
        let rms = (samples.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
        for s in &mut samples {
            let noise: f64 = rng.sample(StandardNormal);
            *s = *s / rms + self.noise_level * noise;
        }
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let gain = 0.9 * level / peak;
        for s in &mut samples {
            *s *= gain;
        }
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    /// Manifest rows in generation order (actor, class, index).
    pub fn records(&self) -> Vec<UtteranceRecord> {
        let mut out = Vec::with_capacity(self.utterance_count());
        for actor in self.actors() {
            for label in Emotion::ALL {
                for k in 0..self.per_class[label.index()] {
                    let utterance_id = format!("{}_{}_{k:03}", actor.id, label);
                    out.push(UtteranceRecord {
                        feature_path: Path::new(FEATURE_DIR).join(format!("{utterance_id}.feat")),
                        utterance_id,
                        actor_id: actor.id.clone(),
                        gender: actor.gender,
                        corpus: actor.corpus.clone(),
                        label,
                    });
                }
            }
        }
        out
    }
}

pub fn wav_path(corpus_dir: &Path, utterance_id: &str) -> PathBuf {
    corpus_dir.join(WAV_DIR).join(format!("{utterance_id}.wav"))
}

/// Writes every waveform and the manifest under `out_dir`, synthesizing on
/// up to `jobs` threads. Output does not depend on `jobs`.
pub fn generate_synthetic_corpus(
    spec: &SynthSpec,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<UtteranceRecord>> {
    spec.validate()?;
    let wav_dir = out_dir.join(WAV_DIR);
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let records = spec.records();
    let mut work = Vec::with_capacity(records.len());
    for actor in 0..spec.actor_count {
        for label in Emotion::ALL {
            for k in 0..spec.per_class[label.index()] {
                work.push((actor, label, k));
            }
        }
    }
    let write_one = |i: usize| {
        let (actor, label, k) = work[i];
        let w = spec.synthesize(actor, label, k);
        write_wav(&wav_path(out_dir, &records[i].utterance_id), &w)
    };
    parallel_for(work.len(), jobs, write_one)?;
    write_manifest(&out_dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

/// Runs `f(0..n)` on up to `jobs` threads, returning the first error by index.
pub(crate) fn parallel_for<F>(n: usize, jobs: usize, f: F) -> Result<()>
where
    F: Fn(usize) -> Result<()> + Sync,
{
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).try_for_each(f);
    }
    let mut results: Vec<Result<()>> = Vec::with_capacity(n);
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..jobs)
            .map(|j| scope.spawn(move || (j..n).step_by(jobs).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        let mut all: Vec<(usize, Result<()>)> = handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect();
        all.sort_by_key(|(i, _)| *i);
        results.extend(all.into_iter().map(|(_, r)| r));
    });
    results.into_iter().collect()
}

/// What to do when one utterance fails to featurize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnError {
    Skip,
    FailFast,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeaturizeSummary {
    pub written: usize,
    pub skipped_existing: usize,
    /// Utterance id and error message for each failure under [`OnError::Skip`].
    pub failed: Vec<(String, String)>,
    /// Kept-frame count per written utterance.
    pub frame_counts: Vec<(String, usize)>,
}

impl FeaturizeSummary {
    /// `T×16×257` style shape lines for each written utterance.
    pub fn shape_lines(&self, config: &FeatureConfig) -> Vec<String> {
        self.frame_counts
            .iter()
            .map(|(id, t)| format!("{id}: {t}\u{d7}{}\u{d7}{}", config.context(), config.bins()))
            .collect()
    }
}

pub fn feature_path(corpus_dir: &Path, record: &UtteranceRecord) -> PathBuf {
    corpus_dir.join(&record.feature_path)
}

/// Extracts features for every record whose file is missing (or all of them
/// with `force`), storing each as an f32 tensor container.
pub fn featurize_corpus(
    corpus_dir: &Path,
    records: &[UtteranceRecord],
    config: &FeatureConfig,
    force: bool,
    on_error: OnError,
) -> Result<FeaturizeSummary> {
    let mut summary = FeaturizeSummary::default();
    for r in records {
        let out = feature_path(corpus_dir, r);
        if !force && out.exists() {
            summary.skipped_existing += 1;
            continue;
        }
        let result = read_wav(&wav_path(corpus_dir, &r.utterance_id))
            .and_then(|w| extract_features(&w, config))
            .and_then(|f| {
                if let Some(dir) = out.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                write_tensor(&out, &f.frames, Dtype::F32)?;
                Ok(f.len())
            });
        match result {
            Ok(t) => {
                summary.written += 1;
                summary.frame_counts.push((r.utterance_id.clone(), t));
            }
            Err(e) if on_error == OnError::Skip => summary.failed.push((r.utterance_id.clone(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}

/// Loads one utterance's `[T, context, bins]` features.
pub fn load_features(corpus_dir: &Path, record: &UtteranceRecord) -> Result<Tensor> {
    let path = feature_path(corpus_dir, record);
    if !path.exists() {
        return Err(Error::MissingFeatures {
            utterance_id: record.utterance_id.clone(),
            path,
        });
    }
    let t = read_tensor(&path)?;
    if t.rank() != 3 {
        return Err(Error::format(&path, format!("expected rank-3 features, got {:?}", t.dims())));
    }
    Ok(t)
}

/// Disjoint actor sets, one per cross-validation partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActorPartition {
    pub sets: Vec<Vec<String>>,
}

impl ActorPartition {
    pub fn partition_of(&self, actor: &str) -> Option<usize> {
        self.sets.iter().position(|s| s.iter().any(|a| a == actor))
    }

    /// `[partition k]` sections listing actor ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, set) in self.sets.iter().enumerate() {
            out.push_str(&format!("[partition {}]\n", i + 1));
            for a in set {
                out.push_str(a);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut sets: Vec<Vec<String>> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line.starts_with("[partition") {
                sets.push(Vec::new());
            } else {
                sets.last_mut()
                    .ok_or_else(|| Error::Param("actor listed before any partition header".into()))?
                    .push(line.to_string());
            }
        }
        Ok(ActorPartition { sets })
    }
}

/// Actor metadata gathered from a manifest, failing if an actor's gender or
/// corpus is inconsistent across rows.
fn actor_table(records: &[UtteranceRecord]) -> Result<BTreeMap<String, (String, Gender)>> {
    let mut actors: BTreeMap<String, (String, Gender)> = BTreeMap::new();
    for r in records {
        let entry = actors
            .entry(r.actor_id.clone())
            .or_insert_with(|| (r.corpus.clone(), r.gender));
        if *entry != (r.corpus.clone(), r.gender) {
            return Err(Error::Consistency(format!(
                "actor {} appears with differing corpus/gender",
                r.actor_id
            )));
        }
    }
    Ok(actors)
}

/// Splits actors into `k` sets balanced per (corpus, gender).
///
/// Within each cell (in sorted order) actors are shuffled by `seed` and dealt
/// round-robin; the dealing position carries over between cells so the
/// remainders spread across partitions.
pub fn partition_actors(records: &[UtteranceRecord], k: usize, seed: u64) -> Result<ActorPartition> {
    let actors = actor_table(records)?;
    if k == 0 || actors.len() < k {
        return Err(Error::Param(format!(
            "need at least {k} actors for {k} partitions, got {}",
            actors.len()
        )));
    }
    let mut cells: BTreeMap<(String, Gender), Vec<String>> = BTreeMap::new();
    for (id, (corpus, gender)) in actors {
        cells.entry((corpus, gender)).or_default().push(id);
    }
    let mut rng = stream(seed, Purpose::Partition, 0);
    let mut sets = vec![Vec::new(); k];
    let mut next = 0;
    for (_, mut ids) in cells {
        ids.shuffle(&mut rng);
        for id in ids {
            sets[next].push(id);
            next = (next + 1) % k;
        }
    }
    for s in &mut sets {
        s.sort();
    }
    Ok(ActorPartition { sets })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    /// Manifest row indices.
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Fold `i` validates on partition `i` and trains on the rest.
pub fn make_folds(partition: &ActorPartition, records: &[UtteranceRecord]) -> Result<Vec<Fold>> {
    let mut owner = Vec::with_capacity(records.len());
    for r in records {
        owner.push(partition.partition_of(&r.actor_id).ok_or_else(|| {
            Error::Consistency(format!("actor {} is in no partition", r.actor_id))
        })?);
    }
    let folds: Vec<Fold> = (0..partition.sets.len())
        .map(|i| Fold {
            index: i,
            train: (0..records.len()).filter(|&r| owner[r] != i).collect(),
            valid: (0..records.len()).filter(|&r| owner[r] == i).collect(),
        })
        .collect();
    for f in &folds {
        let train: BTreeSet<&str> = f.train.iter().map(|&r| records[r].actor_id.as_str()).collect();
        assert!(
            f.valid.iter().all(|&r| !train.contains(records[r].actor_id.as_str())),
            "fold {} leaks a speaker across train and validation",
            f.index
        );
    }
    Ok(folds)
}
