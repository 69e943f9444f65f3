use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::train::EpochRecord;

pub const DEFAULT_PATIENCE: [usize; 13] = [9, 11, 13, 15, 17, 19, 21, 26, 31, 36, 41, 46, 51];

/// Mean per-class recall over the classes present in `truth`, in percent.
pub fn unweighted_accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(Error::shape(
            "unweighted_accuracy",
            format!("{} predictions", truth.len()),
            preds.len(),
        ));
    }
    if truth.is_empty() {
        return Err(Error::Param("unweighted accuracy of an empty set".into()));
    }
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in preds.iter().zip(truth) {
        let e = per_class.entry(t).or_default();
        e.0 += (p == t) as usize;
        e.1 += 1;
    }
    let recall_sum: f64 = per_class.values().map(|&(hit, n)| hit as f64 / n as f64).sum();
    Ok(100.0 * recall_sum / per_class.len() as f64)
}

/// An early-stopping decision on one validation curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    /// 1-based epoch of the incumbent best when training stopped.
    pub epoch: usize,
    pub valid_ua: f64,
    pub train_ua: f64,
    /// `train_ua - valid_ua` at the selected epoch.
    pub gap: f64,
    /// 1-based epoch at which patience ran out.
    pub stopped_at: Option<usize>,
    /// The curve ended before patience ran out; the selection is the global
    /// best.
    pub truncated: bool,
}

/// Stops at the first epoch `patience` epochs past the incumbent best
/// without a strict improvement and selects that incumbent.
pub fn early_stop_select(curve: &[EpochRecord], patience: usize) -> Result<Selection> {
    if patience == 0 {
        return Err(Error::Param("patience must be at least 1".into()));
    }
    if curve.is_empty() {
        return Err(Error::EmptySequence("early_stop_select"));
    }
    let mut best = 0;
    let mut stopped_at = None;
    for e in 1..curve.len() {
        if curve[e].valid_ua > curve[best].valid_ua {
            best = e;
        } else if e - best >= patience {
            stopped_at = Some(e + 1);
            break;
        }
    }
    let r = curve[best];
    Ok(Selection {
        epoch: best + 1,
        valid_ua: r.valid_ua,
        train_ua: r.train_ua,
        gap: r.train_ua - r.valid_ua,
        stopped_at,
        truncated: stopped_at.is_none(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    /// Fold/seed-averaged selected validation UA per patience.
    pub ua: Vec<f64>,
    /// Fold/seed-averaged gap per patience.
    pub gap: Vec<f64>,
    /// Per-run selections, `[run][patience]`.
    pub selections: Vec<Vec<Selection>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub patience: Vec<usize>,
    pub rows: Vec<SweepRow>,
}

/// Applies [`early_stop_select`] to every run of every model at each
/// patience and averages over runs. All models must have the same number of
/// runs.
pub fn sweep_patience(models: &[(String, Vec<Vec<EpochRecord>>)], patience: &[usize]) -> Result<SweepResult> {
    if patience.is_empty() || patience.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Param(format!(
            "patience list must be non-empty and strictly increasing, got {patience:?}"
        )));
    }
    let runs = models.first().map_or(0, |(_, r)| r.len());
    let mut rows = Vec::with_capacity(models.len());
    for (name, curves) in models {
        if curves.is_empty() {
            return Err(Error::Consistency(format!("model {name} has no runs")));
        }
        if curves.len() != runs {
            return Err(Error::Consistency(format!(
                "model {name} has {} runs, expected {runs}",
                curves.len()
            )));
        }
        let selections = curves
            .iter()
            .map(|c| patience.iter().map(|&p| early_stop_select(c, p)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let mean = |f: fn(&Selection) -> f64, j: usize| {
            selections.iter().map(|s| f(&s[j])).sum::<f64>() / selections.len() as f64
        };
        rows.push(SweepRow {
            model: name.clone(),
            ua: (0..patience.len()).map(|j| mean(|s| s.valid_ua, j)).collect(),
            gap: (0..patience.len()).map(|j| mean(|s| s.gap, j)).collect(),
            selections,
        });
    }
    Ok(SweepResult {
        patience: patience.to_vec(),
        rows,
    })
}

impl SweepResult {
    fn table(&self, title: &str, values: impl Fn(&SweepRow) -> &[f64]) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{title}\n{:<width$}", "model");
        for p in &self.patience {
            let _ = write!(out, " {p:>7}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<width$}", row.model);
            for v in values(row) {
                let _ = write!(out, " {v:>7.2}");
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text: a UA table followed by a gap table, models as rows and
    /// patience values as columns.
    pub fn to_text(&self) -> String {
        format!(
            "{}\n{}",
            self.table("Selected validation UA (%)", |r| &r.ua),
            self.table("Train-validation UA gap (%)", |r| &r.gap)
        )
    }

    /// `model,metric,<p1>,<p2>,...` with one `ua` and one `gap` row per model.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,metric");
        for p in &self.patience {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
        for metric in ["ua", "gap"] {
            for row in &self.rows {
                let vals = if metric == "ua" { &row.ua } else { &row.gap };
                let _ = write!(out, "{},{metric}", row.model);
                for v in vals {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }
}
