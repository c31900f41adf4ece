//! Classification metrics, bootstrap intervals and mean reciprocal rank.

use std::io::{Read, Write};

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_labels(pred: &[usize], truth: &[usize], classes: usize) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("metrics need at least one row".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    if classes < 2 {
        return Err(Error::InvalidInput("metrics need at least two classes".into()));
    }
    for &l in pred.iter().chain(truth) {
        if l >= classes {
            return Err(Error::Index { what: "classes", index: l, len: classes });
        }
    }
    Ok(())
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

/// Accuracy plus precision/recall/F1: positive class 1 when `classes == 2`,
/// support-weighted averages otherwise. Zero denominators give 0.
pub fn confusion_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<Confusion> {
    check_labels(pred, truth, classes)?;
    let n = truth.len() as f64;
    let mut tp = vec![0.0; classes];
    let mut pred_count = vec![0.0; classes];
    let mut support = vec![0.0; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        pred_count[p] += 1.0;
        support[t] += 1.0;
        if p == t {
            tp[p] += 1.0;
        }
    }
    let accuracy = tp.iter().sum::<f64>() / n;
    let per_class = |c: usize| {
        let prec = ratio(tp[c], pred_count[c]);
        let rec = ratio(tp[c], support[c]);
        (prec, rec, harmonic(prec, rec))
    };
    let (precision, recall, f1) = if classes == 2 {
        per_class(1)
    } else {
        let mut acc = (0.0, 0.0, 0.0);
        for (c, s) in support.iter().enumerate() {
            let (p, r, f) = per_class(c);
            acc.0 += s * p / n;
            acc.1 += s * r / n;
            acc.2 += s * f / n;
        }
        acc
    };
    Ok(Confusion { accuracy, precision, recall, f1 })
}

/// Weighted F1, the model-selection score.
pub fn weighted_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    Ok(confusion_metrics(pred, truth, classes)?.f1)
}

/// Mann-Whitney AUC of real scores against binary truth, ties half-credit.
pub fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape(positive.len(), scores.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes in the truth".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&r| positive[r]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// AUC from class-probability rows: column 1 for binary problems,
/// support-weighted one-vs-rest otherwise.
pub fn roc_auc(probs: ArrayView2<'_, f64>, truth: &[usize]) -> Result<f64> {
    let classes = probs.ncols();
    if probs.nrows() != truth.len() {
        return Err(Error::shape(truth.len(), probs.nrows()));
    }
    if let Some(&bad) = truth.iter().find(|&&t| t >= classes) {
        return Err(Error::Index { what: "classes", index: bad, len: classes });
    }
    if classes == 2 {
        let pos: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        return roc_auc_binary(&probs.column(1).to_vec(), &pos);
    }
    let n = truth.len() as f64;
    let mut present = 0;
    let mut total = 0.0;
    for c in 0..classes {
        let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let support = pos.iter().filter(|&&p| p).count();
        if support == 0 {
            continue;
        }
        present += 1;
        if support == truth.len() {
            break;
        }
        total += support as f64 / n * roc_auc_binary(&probs.column(c).to_vec(), &pos)?;
    }
    if present < 2 {
        return Err(Error::UndefinedMetric("ROC-AUC needs at least two classes in the truth".into()));
    }
    Ok(total)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over `n` test rows. `metric` receives the row
/// indices of one resample (the identity resample for the point estimate);
/// resamples it cannot score ([`Error::UndefinedMetric`]) are skipped.
/// Resample `b` draws from stream `b` of a ChaCha8 generator seeded with
/// `seed`, so results do not depend on scheduling.
pub fn bootstrap_ci<F>(n: usize, metric: F, resamples: usize, seed: u64) -> Result<(Interval, usize)>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if resamples < 100 {
        return Err(Error::InvalidInput(format!("{resamples} bootstrap resamples; at least 100 required")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("bootstrap over an empty test set".into()));
    }
    let identity: Vec<usize> = (0..n).collect();
    let point = metric(&identity)?;
    let draws: Vec<Option<f64>> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            match metric(&idx) {
                Ok(v) => Ok(Some(v)),
                Err(Error::UndefinedMetric(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut values: Vec<f64> = draws.iter().flatten().copied().collect();
    let skipped = resamples - values.len();
    if values.is_empty() {
        return Err(Error::UndefinedMetric("every bootstrap resample was undefined".into()));
    }
    values.sort_by(f64::total_cmp);
    let low = percentile(&values, 0.025).min(point);
    let high = percentile(&values, 0.975).max(point);
    Ok((Interval { point, ci_low: low, ci_high: high }, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: Interval,
    /// Absent when the test labels hold a single class.
    pub roc_auc: Option<Interval>,
    pub f1: Interval,
    pub precision: Interval,
    pub recall: Interval,
    pub n: usize,
    pub resamples: usize,
    pub skipped_auc_resamples: usize,
}

impl MetricReport {
    pub fn rows(&self) -> Vec<(&'static str, Option<Interval>)> {
        vec![
            ("accuracy", Some(self.accuracy)),
            ("roc_auc", self.roc_auc),
            ("f1", Some(self.f1)),
            ("precision", Some(self.precision)),
            ("recall", Some(self.recall)),
        ]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "point", "ci_low", "ci_high"])?;
        for (name, iv) in self.rows() {
            match iv {
                Some(iv) => {
                    w.write_record([name, &iv.point.to_string(), &iv.ci_low.to_string(), &iv.ci_high.to_string()])?
                }
                None => w.write_record([name, "", "", ""])?,
            }
        }
        w.flush().map_err(|e| Error::io("<metric report csv>", e))?;
        Ok(())
    }
}

/// Full report from probability rows; predictions are the row argmax.
pub fn metric_report(probs: ArrayView2<'_, f64>, truth: &[usize], resamples: usize, seed: u64) -> Result<MetricReport> {
    let classes = probs.ncols();
    if probs.nrows() != truth.len() {
        return Err(Error::shape(truth.len(), probs.nrows()));
    }
    let pred: Vec<usize> = probs.rows().into_iter().map(|r| argmax(&r.to_vec())).collect();
    let conf = |idx: &[usize]| {
        let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
        let t: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
        confusion_metrics(&p, &t, classes)
    };
    let pick = |f: fn(&Confusion) -> f64| {
        bootstrap_ci(truth.len(), |idx| conf(idx).map(|c| f(&c)), resamples, seed).map(|r| r.0)
    };
    let auc = bootstrap_ci(
        truth.len(),
        |idx| {
            let sub = probs.select(ndarray::Axis(0), idx);
            let t: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
            roc_auc(sub.view(), &t)
        },
        resamples,
        seed,
    );
    let (roc_auc, skipped) = match auc {
        Ok((iv, s)) => (Some(iv), s),
        Err(Error::UndefinedMetric(_)) => (None, resamples),
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        accuracy: pick(|c| c.accuracy)?,
        roc_auc,
        f1: pick(|c| c.f1)?,
        precision: pick(|c| c.precision)?,
        recall: pick(|c| c.recall)?,
        n: truth.len(),
        resamples,
        skipped_auc_resamples: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    /// Tied models share the mean of their ranks.
    #[default]
    Average,
    /// Tied models all take the best rank of the group.
    Min,
}

/// Tasks by models; `None` marks a model not evaluated on a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub tasks: Vec<String>,
    pub models: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    pub higher_is_better: bool,
}

impl RankTable {
    pub fn new(
        tasks: Vec<String>,
        models: Vec<String>,
        values: Vec<Vec<Option<f64>>>,
        higher_is_better: bool,
    ) -> Result<Self> {
        if values.len() != tasks.len() {
            return Err(Error::shape(tasks.len(), values.len()));
        }
        for (t, row) in values.iter().enumerate() {
            if row.len() != models.len() {
                return Err(Error::shape(models.len(), row.len()));
            }
            if !row.iter().flatten().any(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!("task {} has no finite entry", tasks[t])));
            }
        }
        Ok(RankTable { tasks, models, values, higher_is_better })
    }

    /// CSV with a `task` column followed by one column per model; empty
    /// cells mark absent models.
    pub fn read_csv<R: Read>(input: R, higher_is_better: bool) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let models: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
        let mut tasks = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            tasks.push(rec.get(0).unwrap_or_default().to_owned());
            let row = rec
                .iter()
                .skip(1)
                .map(|cell| {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>()
                            .map(Some)
                            .map_err(|_| Error::InvalidInput(format!("rank table cell {cell:?} is not a number")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        RankTable::new(tasks, models, values, higher_is_better)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["task".to_owned()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for (task, row) in self.tasks.iter().zip(&self.values) {
            let mut rec = vec![task.clone()];
            rec.extend(row.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<rank table csv>", e))?;
        Ok(())
    }
}

/// Mean reciprocal rank per model, in `table.models` order.
pub fn mrr(table: &RankTable, ties: TiePolicy) -> Result<Vec<f64>> {
    if table.tasks.is_empty() {
        return Err(Error::InvalidInput("rank table has no tasks".into()));
    }
    let m = table.models.len();
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for row in &table.values {
        let present: Vec<(usize, f64)> =
            row.iter().enumerate().filter_map(|(j, v)| v.filter(|v| v.is_finite()).map(|v| (j, v))).collect();
        for &(j, v) in &present {
            let better = present.iter().filter(|(_, o)| if table.higher_is_better { *o > v } else { *o < v }).count();
            let tied = present.iter().filter(|(_, o)| *o == v).count();
            let rank = match ties {
                TiePolicy::Average => better as f64 + (tied as f64 + 1.0) / 2.0,
                TiePolicy::Min => better as f64 + 1.0,
            };
            sums[j] += 1.0 / rank;
            counts[j] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .zip(&table.models)
        .map(|((s, &c), name)| {
            if c == 0 {
                Err(Error::InvalidInput(format!("model {name} is absent from every task")))
            } else {
                Ok(s / c as f64)
            }
        })
        .collect()
}
