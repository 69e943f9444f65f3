//! Training loop, accuracy metrics, early-stopping analysis, and the paired
//! significance test.

mod metrics;
mod stats;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use metrics::{
    early_stop_select, sweep_patience, unweighted_accuracy, Selection, SweepResult, SweepRow,
    DEFAULT_PATIENCE,
};
pub use stats::{paired_t_test_one_sided, TTest};

use crate::autodiff::{Graph, Phase};
use crate::data::{load_features, UtteranceRecord};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::optim::{adam_step, AdamState};
use crate::rng::{stream, Purpose};
use crate::shake::{FrameLayout, Granularity, ShakeMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub mode: ShakeMode,
    pub granularity: Granularity,
    /// Root seed for initialization, batch order, shake and dropout.
    pub seed: u64,
    pub normalize_unshaken: bool,
    /// Split each mini-batch into chunks of at most this many utterances for
    /// the forward/backward pass, accumulating gradients. Batch-norm
    /// statistics are then per chunk. `None` runs whole batches.
    pub micro_batch: Option<usize>,
    /// Utterances per eval-phase forward pass; results do not depend on it.
    pub eval_batch: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            mode: ShakeMode::Both,
            granularity: Granularity::Frame,
            seed: 0,
            normalize_unshaken: false,
            micro_batch: None,
            eval_batch: 8,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_batch == 0 {
            return Err(Error::Param(
                "batch_size, max_epochs and eval_batch must be at least 1".into(),
            ));
        }
        if self.micro_batch == Some(0) {
            return Err(Error::Param("micro_batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Param(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// `key=value` lines, the same keys the config file accepts.
    pub fn echo(&self) -> String {
        format!(
            "lr={}\nbatch_size={}\nepochs={}\nmode={}\ngranularity={}\nseed={}\nnormalize_unshaken={}\nmicro_batch={}\neval_batch={}\n",
            self.lr,
            self.batch_size,
            self.max_epochs,
            self.mode,
            self.granularity.as_str(),
            self.seed,
            self.normalize_unshaken,
            self.micro_batch.map_or("none".to_string(), |m| m.to_string()),
            self.eval_batch,
        )
    }
}

/// Features and labels for a set of utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    /// `[T_i, context, bins]` per utterance, shared between subsets.
    pub frames: Vec<Arc<Tensor>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(ids: Vec<String>, frames: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if ids.len() != frames.len() || ids.len() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} entries", ids.len()),
                format!("{} frame sets / {} labels", frames.len(), labels.len()),
            ));
        }
        if let Some(i) = frames.iter().position(|f| f.rank() != 3 || f.dims()[0] == 0) {
            return Err(Error::shape("dataset", "[T>0, context, bins]", format!("{:?}", frames[i].dims())));
        }
        Ok(Dataset {
            ids,
            frames: frames.into_iter().map(Arc::new).collect(),
            labels,
        })
    }

    /// The entries at `indices`, sharing feature storage.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            frames: indices.iter().map(|&i| Arc::clone(&self.frames[i])).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Loads the rows `indices` of a manifest.
    pub fn load(corpus_dir: &Path, records: &[UtteranceRecord], indices: &[usize]) -> Result<Self> {
        let mut frames = Vec::with_capacity(indices.len());
        for &i in indices {
            frames.push(load_features(corpus_dir, &records[i])?);
        }
        Dataset::new(
            indices.iter().map(|&i| records[i].utterance_id.clone()).collect(),
            frames,
            indices.iter().map(|&i| records[i].label.index()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// All frames of `items` stacked along the leading axis.
    pub fn batch(&self, items: &[usize]) -> Result<(Tensor, FrameLayout, Vec<usize>)> {
        let parts: Vec<&Tensor> = items.iter().map(|&i| &*self.frames[i]).collect();
        let stacked = Tensor::concat(&parts, 0)?;
        let layout = FrameLayout::from_frame_counts(&parts.iter().map(|t| t.dims()[0]).collect::<Vec<_>>())?;
        Ok((stacked, layout, items.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ua: f64,
    pub valid_ua: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub hyper: HyperParams,
    pub wall_clock_secs: f64,
    /// 1-based epoch with the highest validation UA (earliest on ties).
    pub best_epoch: usize,
    /// Optimizer steps taken.
    pub steps: usize,
}

impl TrainReport {
    pub fn train_ua(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_ua).collect()
    }

    pub fn valid_ua(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.valid_ua).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record") + "\n")
            .collect()
    }

    pub fn write_json_lines(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json_lines().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads the per-epoch curve written by [`TrainReport::write_json_lines`].
pub fn read_json_lines(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}

/// Eval-phase predictions for every utterance.
pub fn predict_dataset(model: &mut Model, data: &Dataset, chunk: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let order: Vec<usize> = (0..data.len()).collect();
    for items in order.chunks(chunk.max(1)) {
        let (frames, layout, _) = data.batch(items)?;
        preds.extend(model.predict(&frames, &layout)?);
    }
    Ok(preds)
}

pub fn evaluate_ua(model: &mut Model, data: &Dataset, chunk: usize) -> Result<f64> {
    let preds = predict_dataset(model, data, chunk)?;
    unweighted_accuracy(&preds, &data.labels)
}

/// One optimizer step on `items`, returning the mean loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    data: &Dataset,
    items: &[usize],
    micro_batch: Option<usize>,
) -> Result<f64> {
    model.params_mut().zero_grads();
    let chunk = micro_batch.unwrap_or(items.len()).max(1);
    let mut loss = 0.0;
    for part in items.chunks(chunk) {
        let (frames, layout, labels) = data.batch(part)?;
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &frames, &layout, Phase::Train)?;
        let ce = g.cross_entropy(logits, &labels)?;
        let weight = part.len() as f64 / items.len() as f64;
        let weighted = g.scale(ce, weight);
        loss += g.value(weighted).item();
        g.backward(weighted)?;
        model.accumulate_grads(&g);
    }
    let (values, grads) = model.params_mut().values_and_grads_mut();
    adam_step(values, grads, adam)?;
    Ok(loss)
}

/// Result of [`train`]: the curve plus the model at its best epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: Model,
}

/// Trains `model` for `hp.max_epochs`, shuffling with the seed's data-order
/// stream and recording eval-phase UA on both sides after every epoch.
///
/// `on_epoch` sees each record as it is produced.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    valid_set: &Dataset,
    hp: &HyperParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    hp.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Param("training and validation sets must be non-empty".into()));
    }
    if model.shake_mode() != hp.mode {
        return Err(Error::Config(format!(
            "model is built for shake mode {} but hyperparameters say {}",
            model.shake_mode(),
            hp.mode
        )));
    }
    let start = Instant::now();
    model.set_granularity(hp.granularity);
    model.set_normalize_unshaken(hp.normalize_unshaken);
    model.reseed(hp.seed);
    let mut adam = AdamState::new(model.params().values().iter().map(Tensor::dims)).with_lr(hp.lr);
    let mut order_rng = stream(hp.seed, Purpose::DataOrder, 0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut epochs = Vec::with_capacity(hp.max_epochs);
    let mut best: Option<(f64, Model)> = None;
    let mut best_epoch = 0;
    let mut steps = 0;
    for epoch in 1..=hp.max_epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hp.batch_size) {
            loss_sum += train_step(model, &mut adam, train_set, batch, hp.micro_batch)? * batch.len() as f64;
            steps += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_ua: evaluate_ua(model, train_set, hp.eval_batch)?,
            valid_ua: evaluate_ua(model, valid_set, hp.eval_batch)?,
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(ua, _)| record.valid_ua > *ua) {
            best = Some((record.valid_ua, model.clone()));
            best_epoch = epoch;
        }
        epochs.push(record);
    }
    Ok(TrainOutcome {
        report: TrainReport {
            epochs,
            hyper: hp.clone(),
            wall_clock_secs: start.elapsed().as_secs_f64(),
            best_epoch,
            steps,
        },
        best: best.expect("at least one epoch").1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BlockSpec, BranchSpec, ConvSpec, HeadLayer, ModelSpec, PrelimSpec, StageSpec};

    pub(crate) fn small_spec(mode: ShakeMode) -> ModelSpec {
        let branch = BranchSpec::conv_bn_relu_conv_bn(ConvSpec::new(3, 2, 3), ConvSpec::new(3, 2, 3));
        ModelSpec {
            name: "small".into(),
            frame_dims: (4, 10),
            prelim: PrelimSpec {
                conv: ConvSpec::new(3, 2, 3),
                batchnorm: true,
                relu: true,
            },
            stages: vec![StageSpec {
                name: "res".into(),
                blocks: vec![BlockSpec::new(3, branch, mode)],
            }],
            head: vec![
                HeadLayer::Flatten,
                HeadLayer::TemporalMeanPool,
                HeadLayer::Linear { out: 4, bias: true },
            ],
            class_count: 4,
        }
    }

    /// Each class lights up a different quarter of the spectral axis.
    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, Purpose::Synth, 0);
        let mut frames = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 4;
            let t = 2 + i % 3;
            let f = Tensor::from_fn(&[t, 4, 10], |j| {
                let col = j % 10;
                let on = (label * 10 / 4..(label + 1) * 10 / 4).contains(&col);
                (if on { 1.0 } else { 0.0 }) + 0.3 * rand::Rng::gen_range(&mut rng, -1.0..1.0)
            });
            frames.push(f);
            labels.push(label);
        }
        Dataset::new((0..n).map(|i| format!("u{i}")).collect(), frames, labels).unwrap()
    }

    fn hp(mode: ShakeMode, epochs: usize) -> HyperParams {
        HyperParams {
            mode,
            max_epochs: epochs,
            batch_size: 8,
            lr: 0.01,
            ..HyperParams::default()
        }
    }

    #[test]
    fn one_underfull_batch_is_one_step() {
        let data = toy_dataset(4, 0);
        let mut model = small_spec(ShakeMode::Both).build(0);
        let out = train(&mut model, &data, &data, &HyperParams { max_epochs: 1, ..HyperParams::default() }, |_| {}).unwrap();
        assert_eq!(out.report.steps, 1);
        assert_eq!(out.report.epochs.len(), 1);
    }

    #[test]
    fn mode_mismatch_is_config_error() {
        let data = toy_dataset(4, 0);
        let mut model = small_spec(ShakeMode::Full).build(0);
        let e = train(&mut model, &data, &data, &hp(ShakeMode::Both, 1), |_| {}).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let data = toy_dataset(16, 1);
        let mut model = small_spec(ShakeMode::Full).build(1);
        model.reseed(1);
        let mut adam = AdamState::new(model.params().values().iter().map(Tensor::dims)).with_lr(0.01);
        let items: Vec<usize> = (0..16).collect();
        let first = train_step(&mut model, &mut adam, &data, &items, None).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = train_step(&mut model, &mut adam, &data, &items, None).unwrap();
        }
        assert!(last < 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn identical_seeds_identical_curves() {
        let data = toy_dataset(12, 2);
        let run = || {
            let mut model = small_spec(ShakeMode::Both).build(5);
            train(&mut model, &data, &data, &hp(ShakeMode::Both, 3), |_| {}).unwrap().report
        };
        let (a, b) = (run(), run());
        assert_eq!(a.epochs, b.epochs);
        let bits = |r: &TrainReport| r.losses().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn best_model_reproduces_best_validation_ua() {
        let train_set = toy_dataset(16, 3);
        let valid_set = toy_dataset(8, 4);
        let mut model = small_spec(ShakeMode::None).build(0);
        let mut out = train(&mut model, &train_set, &valid_set, &hp(ShakeMode::None, 4), |_| {}).unwrap();
        let best = out.report.epochs[out.report.best_epoch - 1].valid_ua;
        assert_eq!(evaluate_ua(&mut out.best, &valid_set, 3).unwrap(), best);
        let max = out.report.valid_ua().into_iter().fold(f64::MIN, f64::max);
        assert_eq!(best, max);
    }

    #[test]
    fn eval_chunking_does_not_change_predictions() {
        let data = toy_dataset(10, 5);
        let mut model = small_spec(ShakeMode::Both).build(3);
        let a = predict_dataset(&mut model, &data, 1).unwrap();
        let b = predict_dataset(&mut model, &data, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn micro_batch_loss_is_weighted_mean_of_chunks() {
        let data = toy_dataset(4, 6);
        let fresh = || {
            let m = small_spec(ShakeMode::None).build(2);
            let s = AdamState::new(m.params().values().iter().map(Tensor::dims));
            (m, s)
        };
        let (mut a, mut sa) = fresh();
        let whole = train_step(&mut a, &mut sa, &data, &[0, 1, 2, 3], Some(2)).unwrap();
        let mut manual = 0.0;
        for part in [[0, 1], [2, 3]] {
            let (mut m, mut s) = fresh();
            manual += 0.5 * train_step(&mut m, &mut s, &data, &part, None).unwrap();
        }
        assert!((whole - manual).abs() < 1e-12);
    }

    #[test]
    fn json_lines_round_trip() {
        let data = toy_dataset(4, 7);
        let mut model = small_spec(ShakeMode::Upper).build(0);
        let out = train(&mut model, &data, &data, &hp(ShakeMode::Upper, 2), |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        out.report.write_json_lines(&path).unwrap();
        assert_eq!(read_json_lines(&path).unwrap(), out.report.epochs);
        let first = out.report.to_json_lines().lines().next().unwrap().to_string();
        assert!(first.starts_with("{\"epoch\":1,\"train_loss\":"));
    }
}
