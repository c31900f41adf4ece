//! KAN layers, stacked networks and the Logistic-KAN classification head.

use ndarray::{ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::{fit_basis_from_data, sigmoid, BSplineBasis, InitMode, LearnableFunction};

/// Architecture and regularisation knobs shared by Logistic-KAN and KAAM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden layer widths; empty means a single input-to-class layer.
    pub hidden_sizes: Vec<usize>,
    pub grid_points: usize,
    pub degree: usize,
    pub l1_lambda: f64,
    pub class_balanced: bool,
    pub init_mode: InitMode,
    #[serde(default = "default_margin")]
    pub margin_fraction: f64,
}

fn default_margin() -> f64 {
    0.05
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_sizes: Vec::new(),
            grid_points: 5,
            degree: 3,
            l1_lambda: 1e-3,
            class_balanced: false,
            init_mode: InitMode::Dense,
            margin_fraction: default_margin(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points == 0 {
            return Err(Error::InvalidInput("grid points must be >= 1".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::InvalidInput("hidden sizes must be >= 1".into()));
        }
        if !(self.l1_lambda >= 0.0) {
            return Err(Error::InvalidInput("l1 lambda must be >= 0".into()));
        }
        if !(self.margin_fraction >= 0.0) {
            return Err(Error::InvalidInput("margin fraction must be >= 0".into()));
        }
        Ok(())
    }
}

/// Gradient of a single function's trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamGradient {
    pub coefficients: Vec<f64>,
    pub base_weight: f64,
    pub spline_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerGradient {
    /// Same `[input][output]` layout as [`KanLayer::functions`].
    pub functions: Vec<ParamGradient>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelGradient {
    pub layers: Vec<LayerGradient>,
    /// Per-class bias gradients (KAAM only; empty for Logistic-KAN).
    pub bias: Vec<f64>,
    pub input: Vec<f64>,
}

impl ModelGradient {
    /// Flattens in the same order as the owning model's `parameters()`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for f in &layer.functions {
                out.extend_from_slice(&f.coefficients);
                out.push(f.base_weight);
                out.push(f.spline_weight);
            }
        }
        out.extend_from_slice(&self.bias);
        out
    }
}

/// A grid of `in_dim x out_dim` learnable functions; output `q` is
/// `sum_p phi_{p,q}(v_p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major by input: entry `p * out_dim + q` is `phi_{p,q}`.
    functions: Vec<LearnableFunction>,
}

impl KanLayer {
    pub fn new(in_dim: usize, out_dim: usize, functions: Vec<LearnableFunction>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidInput("layer dimensions must be >= 1".into()));
        }
        if functions.len() != in_dim * out_dim {
            return Err(Error::shape(in_dim * out_dim, functions.len()));
        }
        let first = &functions[0].basis;
        if functions
            .iter()
            .any(|f| f.basis.degree() != first.degree() || f.basis.interval_count() != first.interval_count())
        {
            return Err(Error::InvalidModel("functions in a layer must share degree and grid".into()));
        }
        for f in &functions {
            f.validate()?;
        }
        Ok(KanLayer { in_dim, out_dim, functions })
    }

    /// Initialises a layer with one basis per input, shared across outputs.
    pub fn init(bases: &[BSplineBasis], out_dim: usize, mode: InitMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut functions = Vec::with_capacity(bases.len() * out_dim);
        for basis in bases {
            for _ in 0..out_dim {
                functions.push(LearnableFunction::init(basis.clone(), mode, rng));
            }
        }
        KanLayer::new(bases.len(), out_dim, functions)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn functions(&self) -> &[LearnableFunction] {
        &self.functions
    }

    pub fn function(&self, input: usize, output: usize) -> &LearnableFunction {
        &self.functions[input * self.out_dim + output]
    }

    pub fn function_mut(&mut self, input: usize, output: usize) -> &mut LearnableFunction {
        &mut self.functions[input * self.out_dim + output]
    }

    pub fn parameter_count(&self) -> usize {
        self.functions.iter().map(LearnableFunction::parameter_count).sum()
    }

    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.in_dim {
            return Err(Error::shape(self.in_dim, v.len()));
        }
        if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("layer input {bad} is not finite")));
        }
        for f in &self.functions {
            f.validate()?;
        }
        Ok(self.forward_fast(v))
    }

    pub(crate) fn forward_fast(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        for (p, &vp) in v.iter().enumerate() {
            let row = &self.functions[p * self.out_dim..(p + 1) * self.out_dim];
            for (o, f) in out.iter_mut().zip(row) {
                *o += f.eval_fast(vp);
            }
        }
        out
    }

    /// Accumulates parameter gradients for `upstream = dL/d(output)` into
    /// `grad` (flat, this layer's slice) and returns `dL/d(input)`.
    pub(crate) fn backward_into(&self, v: &[f64], upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut d_input = vec![0.0; self.in_dim];
        let mut offset = 0;
        for (p, &vp) in v.iter().enumerate() {
            for q in 0..self.out_dim {
                let f = &self.functions[p * self.out_dim + q];
                let n = f.coefficients.len();
                let u = upstream[q];
                if u != 0.0 {
                    let (coeffs, rest) = grad[offset..offset + n + 2].split_at_mut(n);
                    let (wb, ws) = rest.split_at_mut(1);
                    f.accumulate_grad(vp, u, coeffs, &mut wb[0], &mut ws[0]);
                    d_input[p] += u * f.input_derivative(vp);
                }
                offset += n + 2;
            }
        }
        d_input
    }

    pub(crate) fn write_parameters(&self, out: &mut Vec<f64>) {
        for f in &self.functions {
            out.extend_from_slice(&f.coefficients);
            out.push(f.base_weight);
            out.push(f.spline_weight);
        }
    }

    pub(crate) fn read_parameters(&mut self, params: &[f64]) -> usize {
        let mut offset = 0;
        for f in &mut self.functions {
            let n = f.coefficients.len();
            f.coefficients.copy_from_slice(&params[offset..offset + n]);
            f.base_weight = params[offset + n];
            f.spline_weight = params[offset + n + 1];
            offset += n + 2;
        }
        offset
    }

    /// Marks which flat parameters are spline coefficients.
    pub(crate) fn write_coefficient_mask(&self, out: &mut Vec<bool>) {
        for f in &self.functions {
            out.extend(std::iter::repeat_n(true, f.coefficients.len()));
            out.push(false);
            out.push(false);
        }
    }

    pub(crate) fn split_gradient(&self, flat: &[f64]) -> LayerGradient {
        let mut offset = 0;
        let functions = self
            .functions
            .iter()
            .map(|f| {
                let n = f.coefficients.len();
                let g = ParamGradient {
                    coefficients: flat[offset..offset + n].to_vec(),
                    base_weight: flat[offset + n],
                    spline_weight: flat[offset + n + 1],
                };
                offset += n + 2;
                g
            })
            .collect();
        LayerGradient { functions }
    }
}

/// Numerically stable softmax (max-logit subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Interface the optimiser needs from a differentiable classifier.
pub trait TrainableModel: Clone + Send + Sync {
    fn feature_count(&self) -> usize;
    fn class_count(&self) -> usize;
    /// Logits without input validation.
    fn logits_fast(&self, x: &[f64]) -> Vec<f64>;
    /// Adds `d(upstream . logits)/d(theta)` into `grad` (flat layout) and
    /// returns `d(upstream . logits)/dx`.
    fn accumulate_gradient(&self, x: &[f64], upstream: &[f64], grad: &mut [f64]) -> Vec<f64>;
    fn parameters(&self) -> Vec<f64>;
    fn set_parameters(&mut self, params: &[f64]);
    /// True at flat positions holding spline coefficients.
    fn coefficient_mask(&self) -> Vec<bool>;

    fn parameter_count(&self) -> usize {
        self.parameters().len()
    }

    fn predict_proba_fast(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits_fast(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticKan {
    layers: Vec<KanLayer>,
    feature_names: Vec<String>,
    class_labels: Vec<String>,
    config: ModelConfig,
}

impl LogisticKan {
    pub fn new(
        layers: Vec<KanLayer>,
        feature_names: Vec<String>,
        class_labels: Vec<String>,
        config: ModelConfig,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("a Logistic-KAN needs at least one layer".into()));
        }
        if class_labels.len() < 2 {
            return Err(Error::InvalidModel("a classifier needs at least two classes".into()));
        }
        if layers[0].in_dim() != feature_names.len() {
            return Err(Error::shape(feature_names.len(), layers[0].in_dim()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(w[0].out_dim(), w[1].in_dim()));
            }
        }
        let last = layers.last().expect("nonempty");
        if last.out_dim() != class_labels.len() {
            return Err(Error::shape(class_labels.len(), last.out_dim()));
        }
        Ok(LogisticKan { layers, feature_names, class_labels, config })
    }

    /// Seeded initialisation. First-layer spline domains come from the data
    /// columns; hidden-layer domains from the initial activations, widened to
    /// at least `[-1, 1]`.
    pub fn init(
        config: &ModelConfig,
        x: ArrayView2<'_, f64>,
        feature_names: Vec<String>,
        class_labels: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("cannot initialise from an empty dataset".into()));
        }
        if x.ncols() != feature_names.len() {
            return Err(Error::shape(feature_names.len(), x.ncols()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = config.hidden_sizes.clone();
        widths.push(class_labels.len());
        let mut layers = Vec::with_capacity(widths.len());
        let mut activations: Vec<Vec<f64>> = x.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
        for (li, &out_dim) in widths.iter().enumerate() {
            let in_dim = activations[0].len();
            let bases = (0..in_dim)
                .map(|p| {
                    let col: Vec<f64> = activations.iter().map(|a| a[p]).collect();
                    let b = fit_basis_from_data(&col, config.grid_points, config.degree, config.margin_fraction)?;
                    if li == 0 {
                        Ok(b)
                    } else {
                        let (lo, hi) = b.domain();
                        BSplineBasis::new(config.degree, config.grid_points, lo.min(-1.0), hi.max(1.0))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let layer = KanLayer::init(&bases, out_dim, config.init_mode, &mut rng)?;
            if li + 1 < widths.len() {
                activations = activations.iter().map(|a| layer.forward_fast(a)).collect();
            }
            layers.push(layer);
        }
        LogisticKan::new(layers, feature_names, class_labels, config.clone())
    }

    pub fn layers(&self) -> &[KanLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [KanLayer] {
        &mut self.layers
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

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_names.len() {
            return Err(Error::shape(self.feature_names.len(), x.len()));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("input {bad} is not finite")));
        }
        for layer in &self.layers {
            for f in layer.functions() {
                f.validate()?;
            }
        }
        Ok(())
    }

    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.logits_fast(x))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward_logits(x)?))
    }

    /// `sigmoid(f^1(x) - f^0(x))` for two-class models.
    pub fn predict_binary(&self, x: &[f64]) -> Result<f64> {
        if self.class_labels.len() != 2 {
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
        let mut offset = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let n = l.parameter_count();
                let g = l.split_gradient(&flat[offset..offset + n]);
                offset += n;
                g
            })
            .collect();
        Ok(ModelGradient { layers, bias: Vec::new(), input })
    }
}

impl TrainableModel for LogisticKan {
    fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    fn class_count(&self) -> usize {
        self.class_labels.len()
    }

    fn logits_fast(&self, x: &[f64]) -> Vec<f64> {
        let mut v = self.layers[0].forward_fast(x);
        for layer in &self.layers[1..] {
            v = layer.forward_fast(&v);
        }
        v
    }

    fn accumulate_gradient(&self, x: &[f64], upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        for layer in &self.layers[..self.layers.len() - 1] {
            let next = layer.forward_fast(inputs.last().expect("nonempty"));
            inputs.push(next);
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offsets.push(acc);
            acc += l.parameter_count();
        }
        let mut u = upstream.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let n = layer.parameter_count();
            u = layer.backward_into(&inputs[li], &u, &mut grad[offsets[li]..offsets[li] + n]);
        }
        u
    }

    fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.write_parameters(&mut out);
        }
        out
    }

    fn set_parameters(&mut self, params: &[f64]) {
        let mut offset = 0;
        for l in &mut self.layers {
            offset += l.read_parameters(&params[offset..]);
        }
    }

    fn coefficient_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.write_coefficient_mask(&mut out);
        }
        out
    }

    fn parameter_count(&self) -> usize {
        self.layers.iter().map(KanLayer::parameter_count).sum()
    }
}
