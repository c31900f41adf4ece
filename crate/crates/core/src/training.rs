//! Losses, Adam training, the logistic-regression baseline and
//! cross-validated grid search.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kaam::Kaam;
use crate::kan::{softmax, LogisticKan, ModelConfig, TrainableModel};
use crate::metrics::{argmax, weighted_f1};
use crate::spline::{sigmoid, InitMode};
use crate::split::{complement, stratified_folds, stratified_split};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Rows per Adam step; 0 means the full training set.
    pub batch_size: usize,
    pub l1_lambda: f64,
    pub class_balanced: bool,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables
    /// early stopping and the holdout.
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            learning_rate: 1e-2,
            batch_size: 0,
            l1_lambda: 1e-3,
            class_balanced: false,
            seed: 0,
            early_stop_patience: 50,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Training settings that follow a model config's regularisation.
    pub fn for_model(model: &ModelConfig) -> Self {
        TrainConfig { l1_lambda: model.l1_lambda, class_balanced: model.class_balanced, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.l1_lambda >= 0.0 && self.l1_lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("l1 lambda {} must be non-negative", self.l1_lambda)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidInput("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `(1/N) sum_i w_{y_i} * -ln max(p_i[y_i], 1e-12)`.
pub fn cross_entropy(probs: ArrayView2<'_, f64>, labels: &[usize], weights: &[f64]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::shape(labels.len(), probs.nrows()));
    }
    if weights.len() != probs.ncols() {
        return Err(Error::shape(probs.ncols(), weights.len()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("cross-entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y >= weights.len() {
            return Err(Error::Index { what: "classes", index: y, len: weights.len() });
        }
        total += weights[y] * -row[y].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Inverse-frequency weights `N / (P * count_p)`, or all ones.
pub fn class_weights(labels: &[usize], classes: usize, balanced: bool) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::Index { what: "classes", index: y, len: classes });
        }
        counts[y] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidInput(format!("class {missing} is absent from the labels")));
    }
    if !balanced {
        return Ok(vec![1.0; classes]);
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (classes as f64 * c as f64)).collect())
}

/// Mean absolute spline coefficient over every function of the model.
pub fn l1_penalty<M: TrainableModel>(model: &M) -> f64 {
    let params = model.parameters();
    let mask = model.coefficient_mask();
    let (sum, n) =
        params.iter().zip(&mask).filter(|(_, &m)| m).fold((0.0, 0usize), |(s, n), (v, _)| (s + v.abs(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (the last one without early stopping).
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<history csv>", e))?;
        Ok(())
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.train_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }
}

/// Cross-entropy (plus `lambda * l1`) over `rows`, and its gradient
/// accumulated into `grad` when given.
fn objective<M: TrainableModel>(
    model: &M,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    rows: &[usize],
    weights: &[f64],
    lambda: f64,
    mask: &[bool],
    params: &[f64],
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let n = rows.len() as f64;
    let p = model.class_count();
    let mut loss = 0.0;
    let mut upstream = vec![0.0; p];
    for &i in rows {
        let xi = x.row(i);
        let xi = xi.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| xi.to_vec());
        let probs = softmax(&model.logits_fast(&xi));
        let y = labels[i];
        let w = weights[y];
        loss += w * -probs[y].max(PROB_FLOOR).ln();
        if let Some(g) = grad.as_deref_mut() {
            for q in 0..p {
                upstream[q] = w * (probs[q] - f64::from(u8::from(q == y))) / n;
            }
            model.accumulate_gradient(&xi, &upstream, g);
        }
    }
    loss /= n;
    if lambda > 0.0 {
        let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
        let mut l1 = 0.0;
        for (j, (&v, &m)) in params.iter().zip(mask).enumerate() {
            if m {
                l1 += v.abs();
                if let Some(g) = grad.as_deref_mut() {
                    g[j] += lambda * v.signum() * f64::from(u8::from(v != 0.0)) / count;
                }
            }
        }
        loss += lambda * l1 / count;
    }
    loss
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Minimises weighted cross-entropy plus `lambda * l1_penalty` with Adam.
///
/// When early stopping is enabled a stratified holdout of
/// `validation_fraction` of the rows is set aside and the parameters with the
/// lowest validation loss are restored at the end. If the holdout cannot be
/// stratified (a class with fewer than two rows) training uses every row and
/// runs for the full epoch budget. Deterministic given `config.seed`.
pub fn train<M: TrainableModel>(
    model: &mut M,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainingHistory> {
    config.validate()?;
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("training data is empty".into()));
    }
    if x.nrows() != labels.len() {
        return Err(Error::shape(x.nrows(), labels.len()));
    }
    if x.ncols() != model.feature_count() {
        return Err(Error::shape(model.feature_count(), x.ncols()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("training data contains non-finite values".into()));
    }
    let classes = model.class_count();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index { what: "classes", index: bad, len: classes });
    }
    let mut history = TrainingHistory::default();
    if config.epochs == 0 {
        return Ok(history);
    }

    let (train_rows, val_rows) = if config.early_stop_patience > 0 && config.validation_fraction > 0.0 {
        match stratified_split(labels, config.validation_fraction, config.seed) {
            Ok(split) => split,
            Err(Error::Stratification(_)) => ((0..labels.len()).collect(), Vec::new()),
            Err(e) => return Err(e),
        }
    } else {
        ((0..labels.len()).collect(), Vec::new())
    };
    let train_labels: Vec<usize> = train_rows.iter().map(|&i| labels[i]).collect();
    let weights = match class_weights(&train_labels, classes, config.class_balanced) {
        Ok(w) => w,
        // Classes missing from the training rows contribute nothing anyway.
        Err(Error::InvalidInput(_)) if !config.class_balanced => vec![1.0; classes],
        Err(e) => return Err(e),
    };

    let mask = model.coefficient_mask();
    let mut params = model.parameters();
    let mut grad = vec![0.0; params.len()];
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut order = train_rows.clone();
    let batch = if config.batch_size == 0 { order.len() } else { config.batch_size.min(order.len()) };

    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        if batch < order.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss =
                objective(&*model, x, labels, chunk, &weights, config.l1_lambda, &mask, &params, Some(&mut grad));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailed { epoch, last_finite: params });
            }
            let before = params.clone();
            adam.step(&mut params, &grad);
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingFailed { epoch, last_finite: before });
            }
            model.set_parameters(&params);
        }
        let train_loss = objective(&*model, x, labels, &train_rows, &weights, config.l1_lambda, &mask, &params, None);
        if !train_loss.is_finite() {
            return Err(Error::TrainingFailed { epoch, last_finite: best.map(|b| b.2).unwrap_or(params) });
        }
        let val_loss = (!val_rows.is_empty())
            .then(|| objective(&*model, x, labels, &val_rows, &weights, 0.0, &mask, &params, None));
        history.records.push(EpochRecord { epoch, train_loss, val_loss });
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.early_stop_patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }
    match best {
        Some((_, epoch, p)) => {
            model.set_parameters(&p);
            history.best_epoch = Some(epoch);
        }
        None => history.best_epoch = history.records.last().map(|r| r.epoch),
    }
    Ok(history)
}

/// `sum_i (sigmoid(beta . x_i) - y_i) * x_i`, the gradient of the Bernoulli
/// negative log-likelihood.
pub fn lr_gradient(beta: &[f64], x: ArrayView2<'_, f64>, y: &[f64]) -> Result<Vec<f64>> {
    lr_weighted_gradient(beta, x, y, None)
}

fn lr_weighted_gradient(beta: &[f64], x: ArrayView2<'_, f64>, y: &[f64], w: Option<&[f64]>) -> Result<Vec<f64>> {
    if x.ncols() != beta.len() {
        return Err(Error::shape(beta.len(), x.ncols()));
    }
    if x.nrows() != y.len() {
        return Err(Error::shape(x.nrows(), y.len()));
    }
    let mut g = vec![0.0; beta.len()];
    for (i, row) in x.rows().into_iter().enumerate() {
        let z: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        let r = (sigmoid(z) - y[i]) * w.map_or(1.0, |w| w[i]);
        for (gj, xj) in g.iter_mut().zip(row.iter()) {
            *gj += r * xj;
        }
    }
    Ok(g)
}

/// `-sum_i [y_i ln sigmoid(z_i) + (1 - y_i) ln(1 - sigmoid(z_i))]`, computed stably.
pub fn lr_negative_log_likelihood(beta: &[f64], x: ArrayView2<'_, f64>, y: &[f64]) -> Result<f64> {
    lr_weighted_nll(beta, x, y, None)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn lr_weighted_nll(beta: &[f64], x: ArrayView2<'_, f64>, y: &[f64], w: Option<&[f64]>) -> Result<f64> {
    if x.ncols() != beta.len() {
        return Err(Error::shape(beta.len(), x.ncols()));
    }
    if x.nrows() != y.len() {
        return Err(Error::shape(x.nrows(), y.len()));
    }
    Ok(x.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let z: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
            w.map_or(1.0, |w| w[i]) * (softplus(z) - y[i] * z)
        })
        .sum())
}

/// Binary logistic regression with an intercept, fitted by gradient descent
/// with backtracking line search on the (optionally class-weighted) mean
/// negative log-likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrBaseline {
    /// Length `M + 1`; the intercept is last.
    pub beta: Vec<f64>,
    pub class_balanced: bool,
    pub feature_names: Vec<String>,
    pub class_labels: Vec<String>,
}

fn with_intercept(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::ones((x.nrows(), x.ncols() + 1));
    out.slice_mut(ndarray::s![.., ..x.ncols()]).assign(&x);
    out
}

impl LrBaseline {
    pub const MAX_ITERATIONS: usize = 20_000;
    pub const GRADIENT_TOLERANCE: f64 = 1e-9;

    pub fn fit(
        x: ArrayView2<'_, f64>,
        labels: &[usize],
        feature_names: Vec<String>,
        class_labels: Vec<String>,
        class_balanced: bool,
    ) -> Result<Self> {
        if class_labels.len() != 2 {
            return Err(Error::Arity { expected: 2, actual: class_labels.len() });
        }
        if x.nrows() != labels.len() {
            return Err(Error::shape(x.nrows(), labels.len()));
        }
        if x.ncols() != feature_names.len() {
            return Err(Error::shape(feature_names.len(), x.ncols()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("training data contains non-finite values".into()));
        }
        let cw = class_weights(labels, 2, class_balanced)?;
        let n = labels.len() as f64;
        let w: Vec<f64> = labels.iter().map(|&y| cw[y] / n).collect();
        let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let xa = with_intercept(x);
        let mut beta = vec![0.0; xa.ncols()];
        let mut step = 1.0;
        let mut f = lr_weighted_nll(&beta, xa.view(), &y, Some(&w))?;
        for _ in 0..Self::MAX_ITERATIONS {
            let g = lr_weighted_gradient(&beta, xa.view(), &y, Some(&w))?;
            let gg: f64 = g.iter().map(|v| v * v).sum();
            if gg.sqrt() < Self::GRADIENT_TOLERANCE {
                break;
            }
            // Armijo backtracking, then let the step grow again.
            loop {
                let trial: Vec<f64> = beta.iter().zip(&g).map(|(b, d)| b - step * d).collect();
                let ft = lr_weighted_nll(&trial, xa.view(), &y, Some(&w))?;
                if ft <= f - 0.5 * step * gg {
                    beta = trial;
                    f = ft;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
                if step < 1e-20 {
                    return Ok(LrBaseline { beta, class_balanced, feature_names, class_labels });
                }
            }
        }
        Ok(LrBaseline { beta, class_balanced, feature_names, class_labels })
    }

    pub fn feature_count(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn predict_binary(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_count() {
            return Err(Error::shape(self.feature_count(), x.len()));
        }
        let z: f64 = x.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>() + self.beta[x.len()];
        Ok(sigmoid(z))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.predict_binary(x)?;
        Ok(vec![1.0 - p, p])
    }
}

/// Model family searched by [`grid_search`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Kaam,
    LogisticKan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchSpace {
    pub hidden_sizes: Vec<Vec<usize>>,
    pub grid_points: Vec<usize>,
    pub degree: Vec<usize>,
    pub l1_lambda: Vec<f64>,
    pub class_balanced: Vec<bool>,
    pub init_mode: Vec<InitMode>,
}

impl GridSearchSpace {
    /// The published search grid; additive models get no hidden layers.
    pub fn standard(kind: ModelKind) -> Self {
        GridSearchSpace {
            hidden_sizes: match kind {
                ModelKind::Kaam => vec![vec![]],
                ModelKind::LogisticKan => vec![vec![], vec![5], vec![5, 5]],
            },
            grid_points: vec![1, 3, 5],
            degree: vec![1, 3, 5],
            l1_lambda: vec![1e-1, 1e-2, 1e-3],
            class_balanced: vec![true, false],
            init_mode: vec![InitMode::Sparse, InitMode::Dense],
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        if self.hidden_sizes.is_empty()
            || self.grid_points.is_empty()
            || self.degree.is_empty()
            || self.l1_lambda.is_empty()
            || self.class_balanced.is_empty()
            || self.init_mode.is_empty()
        {
            return Err(Error::InvalidInput("every grid-search list must be nonempty".into()));
        }
        if kind == ModelKind::Kaam && self.hidden_sizes.iter().any(|h| !h.is_empty()) {
            return Err(Error::InvalidInput("KAAM search is limited to no hidden layers".into()));
        }
        Ok(())
    }

    /// Cartesian product in nested-loop order (hidden sizes outermost).
    pub fn configs(&self) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for h in &self.hidden_sizes {
            for &g in &self.grid_points {
                for &k in &self.degree {
                    for &l in &self.l1_lambda {
                        for &b in &self.class_balanced {
                            for &i in &self.init_mode {
                                out.push(ModelConfig {
                                    hidden_sizes: h.clone(),
                                    grid_points: g,
                                    degree: k,
                                    l1_lambda: l,
                                    class_balanced: b,
                                    init_mode: i,
                                    ..ModelConfig::default()
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigScore {
    pub config: ModelConfig,
    pub fold_f1: Vec<f64>,
    pub mean_f1: f64,
    pub parameter_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_index: usize,
    pub best: ModelConfig,
    pub scores: Vec<ConfigScore>,
}

/// A freshly initialised model of either family behind one interface.
#[derive(Debug, Clone)]
pub enum AnyKan {
    Kaam(Kaam),
    LogisticKan(LogisticKan),
}

impl AnyKan {
    pub fn init(
        kind: ModelKind,
        config: &ModelConfig,
        x: ArrayView2<'_, f64>,
        feature_names: Vec<String>,
        class_labels: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        Ok(match kind {
            ModelKind::Kaam => AnyKan::Kaam(Kaam::init(config, x, feature_names, class_labels, seed)?),
            ModelKind::LogisticKan => {
                AnyKan::LogisticKan(LogisticKan::init(config, x, feature_names, class_labels, seed)?)
            }
        })
    }

    pub fn train(&mut self, x: ArrayView2<'_, f64>, labels: &[usize], config: &TrainConfig) -> Result<TrainingHistory> {
        match self {
            AnyKan::Kaam(m) => train(m, x, labels, config),
            AnyKan::LogisticKan(m) => train(m, x, labels, config),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            AnyKan::Kaam(m) => m.parameter_count(),
            AnyKan::LogisticKan(m) => m.parameter_count(),
        }
    }

    pub fn predict_proba_fast(&self, x: &[f64]) -> Vec<f64> {
        match self {
            AnyKan::Kaam(m) => m.predict_proba_fast(x),
            AnyKan::LogisticKan(m) => m.predict_proba_fast(x),
        }
    }

    pub fn predict_labels(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        x.axis_iter(Axis(0)).map(|r| argmax(&self.predict_proba_fast(&r.to_vec()))).collect()
    }
}

/// Worker threads for parallel work: `KAAMLAB_THREADS` if set, else rayon's default.
pub fn thread_count() -> usize {
    std::env::var("KAAMLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Exhaustive stratified k-fold search scored by weighted F1. Ties go to the
/// config with fewer parameters, then to the earlier config. `train_config`
/// supplies optimiser settings; its λ and balancing are overridden per config.
pub fn grid_search(
    kind: ModelKind,
    space: &GridSearchSpace,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    feature_names: &[String],
    class_labels: &[String],
    folds: usize,
    train_config: &TrainConfig,
) -> Result<GridSearchResult> {
    space.validate(kind)?;
    if x.nrows() != labels.len() {
        return Err(Error::shape(x.nrows(), labels.len()));
    }
    let fold_rows = stratified_folds(labels, folds, train_config.seed)?;
    let configs = space.configs();
    let jobs: Vec<(usize, usize)> = (0..configs.len()).flat_map(|c| (0..folds).map(move |f| (c, f))).collect();
    let run = |&(c, f): &(usize, usize)| -> Result<(f64, usize)> {
        let cfg = &configs[c];
        let val = &fold_rows[f];
        let tr = complement(labels.len(), val);
        let xt = x.select(Axis(0), &tr);
        let yt: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
        let mut model =
            AnyKan::init(kind, cfg, xt.view(), feature_names.to_vec(), class_labels.to_vec(), train_config.seed)?;
        let tc = TrainConfig { l1_lambda: cfg.l1_lambda, class_balanced: cfg.class_balanced, ..train_config.clone() };
        model.train(xt.view(), &yt, &tc)?;
        let xv = x.select(Axis(0), val);
        let yv: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
        let pred = model.predict_labels(xv.view());
        Ok((weighted_f1(&pred, &yv, class_labels.len())?, model.parameter_count()))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let results: Vec<(f64, usize)> = pool.install(|| jobs.par_iter().map(run).collect::<Result<_>>())?;

    let scores: Vec<ConfigScore> = configs
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let chunk = &results[c * folds..(c + 1) * folds];
            let fold_f1: Vec<f64> = chunk.iter().map(|r| r.0).collect();
            ConfigScore {
                config: cfg.clone(),
                mean_f1: fold_f1.iter().sum::<f64>() / folds as f64,
                fold_f1,
                parameter_count: chunk[0].1,
            }
        })
        .collect();
    let mut best_index = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        let b = &scores[best_index];
        if s.mean_f1 > b.mean_f1 || (s.mean_f1 == b.mean_f1 && s.parameter_count < b.parameter_count) {
            best_index = i;
        }
    }
    Ok(GridSearchResult { best_index, best: scores[best_index].config.clone(), scores })
}
