//! Explanations computed from logit matrices: importance, partial
//! dependence, probability radar, nearest patients and prediction bars.

use std::collections::BTreeMap;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kaam::{AverageContribution, Kaam, LogitMatrix};
use crate::spline::sigmoid;

pub const DEFAULT_PDP_POINTS: usize = 101;
pub const DEFAULT_NEIGHBORS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    /// Population variance of the feature's logit column.
    pub score: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub features: Vec<FeatureImportance>,
    /// Always 0: the bias column is constant and is not ranked.
    pub bias_score: f64,
    /// Feature indices by descending score, ties by index.
    pub ranking: Vec<usize>,
}

impl ImportanceVector {
    pub fn top(&self, n: usize) -> Vec<&str> {
        self.ranking.iter().take(n).map(|&j| self.features[j].feature.as_str()).collect()
    }
}

pub fn feature_importance(delta: &LogitMatrix) -> Result<ImportanceVector> {
    let n = delta.nrows();
    if n < 2 {
        return Err(Error::InvalidInput("feature importance needs at least two rows".into()));
    }
    let values = delta.values();
    let scores: Vec<f64> = (0..delta.feature_count())
        .map(|j| {
            let col = values.column(j);
            let mean = col.sum() / n as f64;
            col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
        })
        .collect();
    let total: f64 = scores.iter().sum();
    let features = delta
        .feature_names()
        .iter()
        .zip(&scores)
        .map(|(name, &score)| FeatureImportance {
            feature: name.clone(),
            score,
            share: if total > 0.0 { score / total } else { 0.0 },
        })
        .collect();
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(ImportanceVector { features, bias_score: 0.0, ranking })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdpCurve {
    pub feature: usize,
    pub feature_name: String,
    /// `None` for the binary differential curve `g^1 - g^0`.
    pub class: Option<usize>,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub patient: Option<Marker>,
    pub cohort: Vec<Marker>,
    pub neighbors: Vec<Marker>,
}

/// What a PDP evaluates and which overlay points it carries.
#[derive(Debug, Clone, Default)]
pub struct PdpRequest<'a> {
    pub feature: usize,
    pub class: usize,
    pub grid_size: usize,
    /// Observed training range of the feature.
    pub range: (f64, f64),
    /// Plot `g^1 - g^0` instead of `g^class` (binary models only).
    pub differential: bool,
    pub patient: Option<f64>,
    pub cohort: &'a [f64],
    pub neighbors: &'a [f64],
}

pub fn pdp(model: &Kaam, req: &PdpRequest<'_>) -> Result<PdpCurve> {
    model.check_feature(req.feature)?;
    model.check_class(req.class)?;
    if req.grid_size < 2 {
        return Err(Error::InvalidInput("a PDP grid needs at least two points".into()));
    }
    let (lo, hi) = req.range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::InvalidInput(format!("invalid PDP range [{lo}, {hi}]")));
    }
    if req.differential && !model.is_binary() {
        return Err(Error::Arity { expected: 2, actual: model.class_labels().len() });
    }
    for v in req.patient.iter().chain(req.cohort).chain(req.neighbors) {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("marker value {v} is not finite")));
        }
    }
    let j = req.feature;
    let g = |x: f64| {
        if req.differential {
            model.differential_contribution(j, x)
        } else {
            model.contribution(j, req.class, x)
        }
    };
    let grid: Vec<f64> = (0..req.grid_size)
        .map(|i| if i + 1 == req.grid_size { hi } else { lo + (hi - lo) * i as f64 / (req.grid_size - 1) as f64 })
        .collect();
    let values = grid.iter().map(|&x| g(x)).collect();
    let marker = |x: f64| Marker { x, y: g(x) };
    Ok(PdpCurve {
        feature: j,
        feature_name: model.feature_names()[j].clone(),
        class: (!req.differential).then_some(req.class),
        grid,
        values,
        patient: req.patient.map(marker),
        cohort: req.cohort.iter().map(|&x| marker(x)).collect(),
        neighbors: req.neighbors.iter().map(|&x| marker(x)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarData {
    /// `None` when the radar uses binary differential quantities.
    pub class: Option<usize>,
    pub features: Vec<String>,
    pub axes: Vec<f64>,
    pub baseline: f64,
    /// Axes computed from the mean logit row of the neighbours, if given.
    pub neighbor_axes: Option<Vec<f64>>,
}

/// Axis `j` is `sigmoid(sum_k delta_k - delta_j + row_j)`: the average
/// patient with feature `j` swapped for the patient's own contribution.
/// `row` and `delta` are explanation rows (features then bias).
pub fn radar_axes(row: &[f64], delta: &AverageContribution) -> Result<(Vec<f64>, f64)> {
    if row.len() != delta.delta.len() {
        return Err(Error::shape(delta.delta.len(), row.len()));
    }
    let m = row.len() - 1;
    let base: f64 = delta.delta.iter().sum();
    let axes = (0..m).map(|j| sigmoid(base - delta.delta[j] + row[j])).collect();
    Ok((axes, sigmoid(base)))
}

/// Probability radar for one patient. `delta` must come from the same
/// model's explanation matrix for `class`.
pub fn radar(
    model: &Kaam,
    delta: &AverageContribution,
    x: &[f64],
    class: usize,
    neighbor_rows: Option<&[Vec<f64>]>,
) -> Result<RadarData> {
    let row = model.explanation_row(x, class)?;
    let (axes, baseline) = radar_axes(&row, delta)?;
    let neighbor_axes = match neighbor_rows {
        Some(rows) if !rows.is_empty() => {
            let width = row.len();
            let mut mean = vec![0.0; width];
            for r in rows {
                if r.len() != width {
                    return Err(Error::shape(width, r.len()));
                }
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v / rows.len() as f64;
                }
            }
            Some(radar_axes(&mean, delta)?.0)
        }
        _ => None,
    };
    Ok(RadarData {
        class: (!model.is_binary()).then_some(class),
        features: model.feature_names().to_vec(),
        axes,
        baseline,
        neighbor_axes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub row: usize,
    pub id: String,
    pub distance: f64,
    pub probability: Option<f64>,
    pub label: Option<String>,
    pub covariates: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborResult {
    /// The query's logit row `delta_*` (features then bias).
    pub query: Vec<f64>,
    pub neighbors: Vec<Neighbor>,
}

/// Per-row facts about the training cohort attached to neighbours.
#[derive(Debug, Clone, Copy)]
pub struct CohortView<'a> {
    pub probabilities: &'a [f64],
    pub labels: &'a [String],
    pub covariates: &'a [BTreeMap<String, String>],
}

/// The `k` rows of `delta_train` closest to `query` in Euclidean distance
/// over all columns, ascending, ties by row index.
pub fn nearest_patients(delta_train: &LogitMatrix, query: &[f64], k: usize) -> Result<NeighborResult> {
    let n = delta_train.nrows();
    if query.len() != delta_train.feature_count() + 1 {
        return Err(Error::shape(delta_train.feature_count() + 1, query.len()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k = {k} must lie in 1..={n}")));
    }
    let mut dist: Vec<(f64, usize)> = delta_train
        .values()
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, r)| (r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < n {
        dist.select_nth_unstable_by(k - 1, cmp);
        dist.truncate(k);
    }
    dist.sort_by(cmp);
    let ids = delta_train.row_ids();
    Ok(NeighborResult {
        query: query.to_vec(),
        neighbors: dist
            .into_iter()
            .map(|(d, i)| Neighbor {
                row: i,
                id: ids[i].clone(),
                distance: d,
                probability: None,
                label: None,
                covariates: None,
            })
            .collect(),
    })
}

impl NeighborResult {
    pub fn with_cohort(mut self, cohort: CohortView<'_>) -> Result<Self> {
        for nb in &mut self.neighbors {
            let i = nb.row;
            let len = cohort.probabilities.len().min(cohort.labels.len()).min(cohort.covariates.len());
            if i >= len {
                return Err(Error::Index { what: "cohort rows", index: i, len });
            }
            nb.probability = Some(cohort.probabilities[i]);
            nb.label = Some(cohort.labels[i].clone());
            nb.covariates = Some(cohort.covariates[i].clone());
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub row: usize,
    pub probability: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBars {
    pub threshold: f64,
    /// Ascending by probability, ties by row.
    pub bars: Vec<Bar>,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Bars from positive-class probabilities; a patient is predicted positive
/// when its probability is at least `threshold`.
pub fn prediction_bars(probabilities: &[f64], labels: &[usize], threshold: f64) -> Result<PredictionBars> {
    if probabilities.len() != labels.len() {
        return Err(Error::shape(labels.len(), probabilities.len()));
    }
    if !threshold.is_finite() {
        return Err(Error::InvalidInput("threshold must be finite".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Index { what: "classes", index: bad, len: 2 });
    }
    let mut bars: Vec<Bar> = probabilities
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(row, (&probability, &label))| Bar { row, probability, label })
        .collect();
    bars.sort_by(|a, b| a.probability.total_cmp(&b.probability).then(a.row.cmp(&b.row)));
    let false_positives = bars.iter().filter(|b| b.probability >= threshold && b.label == 0).count();
    let false_negatives = bars.iter().filter(|b| b.probability < threshold && b.label == 1).count();
    Ok(PredictionBars { threshold, bars, false_positives, false_negatives })
}

/// Prediction bars for a binary KAAM on a labelled set.
pub fn model_prediction_bars(
    model: &Kaam,
    x: ndarray::ArrayView2<'_, f64>,
    labels: &[usize],
    threshold: f64,
) -> Result<PredictionBars> {
    if !model.is_binary() {
        return Err(Error::Arity { expected: 2, actual: model.class_labels().len() });
    }
    let probs = x.axis_iter(Axis(0)).map(|r| model.predict_binary(&r.to_vec())).collect::<Result<Vec<_>>>()?;
    prediction_bars(&probs, labels, threshold)
}
