//! Kolmogorov-Arnold additive model: one shape function per (feature, class)
//! plus a per-class bias, and the logit matrices built from it.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kan::{softmax, KanLayer, LogisticKan, ModelConfig, ModelGradient, TrainableModel};
use crate::spline::{fit_basis_from_data, sigmoid, LearnableFunction};

/// Row sums of a logit matrix must reproduce the model logit to this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kaam {
    /// `M x P` layer; `function(j, p)` is the shape function `g_j^p`.
    layer: KanLayer,
    bias: Vec<f64>,
    feature_names: Vec<String>,
    class_labels: Vec<String>,
    config: ModelConfig,
}

impl Kaam {
    pub fn new(
        layer: KanLayer,
        bias: Vec<f64>,
        feature_names: Vec<String>,
        class_labels: Vec<String>,
        config: ModelConfig,
    ) -> Result<Self> {
        if class_labels.len() < 2 {
            return Err(Error::InvalidModel("a classifier needs at least two classes".into()));
        }
        if layer.in_dim() != feature_names.len() {
            return Err(Error::shape(feature_names.len(), layer.in_dim()));
        }
        if layer.out_dim() != class_labels.len() || bias.len() != class_labels.len() {
            return Err(Error::shape(class_labels.len(), layer.out_dim().min(bias.len())));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidModel("non-finite bias".into()));
        }
        Ok(Kaam { layer, bias, feature_names, class_labels, config })
    }

    /// Seeded initialisation with spline domains fitted to each data column
    /// and zero biases.
    pub fn init(
        config: &ModelConfig,
        x: ArrayView2<'_, f64>,
        feature_names: Vec<String>,
        class_labels: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if !config.hidden_sizes.is_empty() {
            return Err(Error::InvalidInput("KAAM models have no hidden layers".into()));
        }
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("cannot initialise from an empty dataset".into()));
        }
        if x.ncols() != feature_names.len() {
            return Err(Error::shape(feature_names.len(), x.ncols()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bases = x
            .axis_iter(Axis(1))
            .map(|col| {
                let v = col.to_vec();
                fit_basis_from_data(&v, config.grid_points, config.degree, config.margin_fraction)
            })
            .collect::<Result<Vec<_>>>()?;
        let layer = KanLayer::init(&bases, class_labels.len(), config.init_mode, &mut rng)?;
        let p = class_labels.len();
        Kaam::new(layer, vec![0.0; p], feature_names, class_labels, config.clone())
    }

    /// Wraps a single-layer Logistic-KAN as a KAAM with zero biases.
    pub fn from_logistic_kan(model: &LogisticKan) -> Result<Self> {
        if model.layers().len() != 1 {
            return Err(Error::InvalidModel("only single-layer Logistic-KANs are additive".into()));
        }
        let p = model.class_labels().len();
        Kaam::new(
            model.layers()[0].clone(),
            vec![0.0; p],
            model.feature_names().to_vec(),
            model.class_labels().to_vec(),
            model.config().clone(),
        )
    }

    /// The equivalent single-layer Logistic-KAN, with each class bias folded
    /// into the spline of the first feature (B-splines sum to one on the
    /// clamped domain, so adding `alpha / w_s` to every coefficient adds `alpha`).
    pub fn to_logistic_kan(&self) -> Result<LogisticKan> {
        let mut layer = self.layer.clone();
        for (p, &alpha) in self.bias.iter().enumerate() {
            if alpha == 0.0 {
                continue;
            }
            let f: &mut LearnableFunction = layer.function_mut(0, p);
            if f.spline_weight == 0.0 {
                f.spline_weight = 1.0;
                f.coefficients.iter_mut().for_each(|c| *c = alpha);
            } else {
                let shift = alpha / f.spline_weight;
                f.coefficients.iter_mut().for_each(|c| *c += shift);
            }
        }
        LogisticKan::new(vec![layer], self.feature_names.clone(), self.class_labels.clone(), self.config.clone())
    }

    pub fn layer(&self) -> &KanLayer {
        &self.layer
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shape_function(&self, feature: usize, class: usize) -> &LearnableFunction {
        self.layer.function(feature, class)
    }

    pub fn shape_function_mut(&mut self, feature: usize, class: usize) -> &mut LearnableFunction {
        self.layer.function_mut(feature, class)
    }

    pub fn set_bias(&mut self, class: usize, value: f64) {
        self.bias[class] = value;
    }

    pub fn is_binary(&self) -> bool {
        self.class_labels.len() == 2
    }

    pub fn check_class(&self, p: usize) -> Result<()> {
        if p >= self.class_labels.len() {
            return Err(Error::Index { what: "classes", index: p, len: self.class_labels.len() });
        }
        Ok(())
    }

    pub fn check_feature(&self, j: usize) -> Result<()> {
        if j >= self.feature_names.len() {
            return Err(Error::Index { what: "features", index: j, len: self.feature_names.len() });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_names.len() {
            return Err(Error::shape(self.feature_names.len(), x.len()));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("input {bad} is not finite")));
        }
        for f in self.layer.functions() {
            f.validate()?;
        }
        Ok(())
    }

    /// `g_j^p(value)` without validation.
    pub fn contribution(&self, j: usize, p: usize, value: f64) -> f64 {
        self.layer.function(j, p).eval_fast(value)
    }

    /// `g_j^1(value) - g_j^0(value)` for binary models.
    pub fn differential_contribution(&self, j: usize, value: f64) -> f64 {
        self.contribution(j, 1, value) - self.contribution(j, 0, value)
    }

    /// `alpha^p + sum_j g_j^p(x_j)`.
    pub fn logit(&self, x: &[f64], p: usize) -> Result<f64> {
        self.check_class(p)?;
        self.check_input(x)?;
        Ok(self.bias[p] + x.iter().enumerate().map(|(j, &v)| self.contribution(j, p, v)).sum::<f64>())
    }

    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.logits_fast(x))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward_logits(x)?))
    }

    pub fn predict_binary(&self, x: &[f64]) -> Result<f64> {
        if !self.is_binary() {
            return Err(Error::Arity { expected: 2, actual: self.class_labels.len() });
        }
        let l = self.forward_logits(x)?;
        Ok(sigmoid(l[1] - l[0]))
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<ModelGradient> {
        self.check_input(x)?;
        if upstream.len() != self.class_labels.len() {
            return Err(Error::shape(self.class_labels.len(), upstream.len()));
        }
        let mut flat = vec![0.0; self.parameter_count()];
        let input = self.accumulate_gradient(x, upstream, &mut flat);
        let n = self.layer.parameter_count();
        Ok(ModelGradient { layers: vec![self.layer.split_gradient(&flat[..n])], bias: flat[n..].to_vec(), input })
    }

    fn check_matrix(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.feature_names.len() {
            return Err(Error::shape(self.feature_names.len(), x.ncols()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset contains non-finite values".into()));
        }
        for f in self.layer.functions() {
            f.validate()?;
        }
        Ok(())
    }

    /// `Delta_p`: entry `(i, j) = g_j^p(x_ij)`, last column `alpha^p`.
    pub fn logit_matrix(&self, x: ArrayView2<'_, f64>, p: usize, row_ids: Option<&[String]>) -> Result<LogitMatrix> {
        self.check_class(p)?;
        self.check_matrix(x)?;
        let m = self.feature_names.len();
        let values = Array2::from_shape_fn((x.nrows(), m + 1), |(i, j)| {
            if j < m {
                self.contribution(j, p, x[[i, j]])
            } else {
                self.bias[p]
            }
        });
        let targets: Vec<f64> = x.axis_iter(Axis(0)).map(|r| self.logits_fast(&r.to_vec())[p]).collect();
        LogitMatrix::new(
            values,
            self.feature_names.clone(),
            LogitKind::Class(p),
            resolve_ids(row_ids, x.nrows())?,
            &targets,
        )
    }

    /// `Delta` for binary models: entry `(i, j) = g_j^1(x_ij) - g_j^0(x_ij)`,
    /// last column `alpha^1 - alpha^0`.
    pub fn differential_logit_matrix(&self, x: ArrayView2<'_, f64>, row_ids: Option<&[String]>) -> Result<LogitMatrix> {
        if !self.is_binary() {
            return Err(Error::Arity { expected: 2, actual: self.class_labels.len() });
        }
        self.check_matrix(x)?;
        let m = self.feature_names.len();
        let values = Array2::from_shape_fn((x.nrows(), m + 1), |(i, j)| {
            if j < m {
                self.differential_contribution(j, x[[i, j]])
            } else {
                self.bias[1] - self.bias[0]
            }
        });
        let targets: Vec<f64> = x
            .axis_iter(Axis(0))
            .map(|r| {
                let l = self.logits_fast(&r.to_vec());
                l[1] - l[0]
            })
            .collect();
        LogitMatrix::new(
            values,
            self.feature_names.clone(),
            LogitKind::BinaryDifferential,
            resolve_ids(row_ids, x.nrows())?,
            &targets,
        )
    }

    /// The matrix interpretability tools work on: `Delta` for binary models
    /// and `Delta_p` otherwise.
    pub fn explanation_matrix(
        &self,
        x: ArrayView2<'_, f64>,
        p: usize,
        row_ids: Option<&[String]>,
    ) -> Result<LogitMatrix> {
        if self.is_binary() {
            self.differential_logit_matrix(x, row_ids)
        } else {
            self.logit_matrix(x, p, row_ids)
        }
    }

    /// Logit-space row for one patient, matching [`Kaam::explanation_matrix`].
    pub fn explanation_row(&self, x: &[f64], p: usize) -> Result<Vec<f64>> {
        self.check_class(p)?;
        self.check_input(x)?;
        let mut row: Vec<f64> = if self.is_binary() {
            (0..x.len()).map(|j| self.differential_contribution(j, x[j])).collect()
        } else {
            (0..x.len()).map(|j| self.contribution(j, p, x[j])).collect()
        };
        row.push(if self.is_binary() { self.bias[1] - self.bias[0] } else { self.bias[p] });
        Ok(row)
    }
}

fn resolve_ids(ids: Option<&[String]>, n: usize) -> Result<Vec<String>> {
    match ids {
        Some(ids) if ids.len() != n => Err(Error::shape(n, ids.len())),
        Some(ids) => Ok(ids.to_vec()),
        None => Ok((0..n).map(|i| i.to_string()).collect()),
    }
}

impl TrainableModel for Kaam {
    fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    fn class_count(&self) -> usize {
        self.class_labels.len()
    }

    fn logits_fast(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.layer.forward_fast(x);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }

    fn accumulate_gradient(&self, x: &[f64], upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let n = self.layer.parameter_count();
        let (layer_grad, bias_grad) = grad.split_at_mut(n);
        for (g, u) in bias_grad.iter_mut().zip(upstream) {
            *g += u;
        }
        self.layer.backward_into(x, upstream, layer_grad)
    }

    fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layer.parameter_count() + self.bias.len());
        self.layer.write_parameters(&mut out);
        out.extend_from_slice(&self.bias);
        out
    }

    fn set_parameters(&mut self, params: &[f64]) {
        let n = self.layer.read_parameters(params);
        let b = self.bias.len();
        self.bias.copy_from_slice(&params[n..n + b]);
    }

    fn coefficient_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        self.layer.write_coefficient_mask(&mut out);
        out.extend(std::iter::repeat_n(false, self.bias.len()));
        out
    }

    fn parameter_count(&self) -> usize {
        self.layer.parameter_count() + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "class", rename_all = "snake_case")]
pub enum LogitKind {
    Class(usize),
    BinaryDifferential,
}

/// Per-patient, per-feature logit contributions with a trailing bias column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitMatrix {
    values: Array2<f64>,
    feature_names: Vec<String>,
    kind: LogitKind,
    row_ids: Vec<String>,
}

impl LogitMatrix {
    /// Builds the matrix and asserts each row sums to the matching entry of
    /// `row_targets` (the model logit or decision margin).
    pub fn new(
        values: Array2<f64>,
        feature_names: Vec<String>,
        kind: LogitKind,
        row_ids: Vec<String>,
        row_targets: &[f64],
    ) -> Result<Self> {
        if values.ncols() != feature_names.len() + 1 {
            return Err(Error::shape(feature_names.len() + 1, values.ncols()));
        }
        if row_ids.len() != values.nrows() || row_targets.len() != values.nrows() {
            return Err(Error::shape(values.nrows(), row_ids.len().min(row_targets.len())));
        }
        for (i, (row, target)) in values.axis_iter(Axis(0)).zip(row_targets).enumerate() {
            let sum: f64 = row.sum();
            if (sum - target).abs() > ROW_SUM_TOLERANCE * (1.0 + target.abs()) {
                return Err(Error::InvalidModel(format!("logit matrix row {i} sums to {sum}, model gives {target}")));
            }
        }
        Ok(LogitMatrix { values, feature_names, kind, row_ids })
    }

    /// Unchecked construction for matrices that do not come from a model.
    pub fn from_values(values: Array2<f64>, feature_names: Vec<String>, kind: LogitKind) -> Result<Self> {
        if values.ncols() != feature_names.len() + 1 {
            return Err(Error::shape(feature_names.len() + 1, values.ncols()));
        }
        let row_ids = (0..values.nrows()).map(|i| i.to_string()).collect();
        Ok(LogitMatrix { values, feature_names, kind, row_ids })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn kind(&self) -> LogitKind {
        self.kind
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.axis_iter(Axis(0)).map(|r| r.sum()).collect()
    }

    /// CSV with header `feature names..., bias` and one row per patient, in
    /// row order (see [`LogitMatrix::row_ids`]).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push("bias");
        w.write_record(&header)?;
        for row in self.values.axis_iter(Axis(0)) {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<logit matrix csv>", e))?;
        Ok(())
    }
}

/// Column means of a logit matrix: the "average patient" in logit space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageContribution {
    /// Length `M + 1`; the last entry is the bias.
    pub delta: Vec<f64>,
}

impl AverageContribution {
    pub fn bias(&self) -> f64 {
        *self.delta.last().expect("nonempty")
    }

    pub fn features(&self) -> &[f64] {
        &self.delta[..self.delta.len() - 1]
    }
}

pub fn average_contribution(matrix: &LogitMatrix) -> Result<AverageContribution> {
    average_contribution_masked(matrix, None)
}

/// Column means restricted to rows where `mask` is true (a cohort filter).
pub fn average_contribution_masked(matrix: &LogitMatrix, mask: Option<&[bool]>) -> Result<AverageContribution> {
    if let Some(m) = mask {
        if m.len() != matrix.nrows() {
            return Err(Error::shape(matrix.nrows(), m.len()));
        }
    }
    let rows: Vec<usize> = (0..matrix.nrows()).filter(|&i| mask.is_none_or(|m| m[i])).collect();
    if rows.is_empty() {
        return Err(Error::InvalidInput("average contribution needs at least one row".into()));
    }
    let n = rows.len() as f64;
    let delta =
        (0..matrix.values.ncols()).map(|j| rows.iter().map(|&i| matrix.values[[i, j]]).sum::<f64>() / n).collect();
    Ok(AverageContribution { delta })
}
