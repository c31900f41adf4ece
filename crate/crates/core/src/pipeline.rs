//! End-to-end workflows shared by the CLI, the service and the C API:
//! train a bundle from a table, evaluate it, extract its formula.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{prepare, BundleModel, Cohort, Dataset, ModelBundle, PrepareOptions, RawTable, Schema};
use crate::error::{Error, Result};
use crate::kaam::Kaam;
use crate::kan::{LogisticKan, ModelConfig};
use crate::metrics::{metric_report, MetricReport, DEFAULT_BOOTSTRAP_RESAMPLES};
use crate::symbolic::{distill, DistillConfig, SymbolicFormula};
use crate::training::{train, GridSearchResult, GridSearchSpace, LrBaseline, ModelKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    Kaam,
    LogisticKan,
    Lr,
}

impl ModelFamily {
    pub fn kind(self) -> Option<ModelKind> {
        match self {
            ModelFamily::Kaam => Some(ModelKind::Kaam),
            ModelFamily::LogisticKan => Some(ModelKind::LogisticKan),
            ModelFamily::Lr => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub family: ModelFamily,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prepare: PrepareOptions,
    /// Distill a formula when the model is additive.
    pub distill: bool,
}

impl TrainRequest {
    pub fn new(family: ModelFamily, model: ModelConfig, seed: u64) -> Self {
        let train = TrainConfig { seed, ..TrainConfig::for_model(&model) };
        TrainRequest {
            family,
            model,
            train,
            prepare: PrepareOptions { seed, ..PrepareOptions::default() },
            distill: true,
        }
    }
}

/// Fits a model on the train rows of `prepared` and packs the bundle.
pub fn fit_model(
    family: ModelFamily,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &Dataset,
    features: Vec<String>,
    classes: Vec<String>,
) -> Result<(BundleModel, Option<crate::training::TrainingHistory>)> {
    let x = train_set.x.view();
    let y = &train_set.labels;
    Ok(match family {
        ModelFamily::Kaam => {
            let mut m = Kaam::init(model_config, x, features, classes, train_config.seed)?;
            let h = train(&mut m, x, y, train_config)?;
            (BundleModel::Kaam(m), Some(h))
        }
        ModelFamily::LogisticKan => {
            let mut m = LogisticKan::init(model_config, x, features, classes, train_config.seed)?;
            let h = train(&mut m, x, y, train_config)?;
            (BundleModel::LogisticKan(m), Some(h))
        }
        ModelFamily::Lr => {
            let m = LrBaseline::fit(x, y, features, classes, train_config.class_balanced)?;
            (BundleModel::Lr(m), None)
        }
    })
}

/// Prepares the table, trains, optionally distills, and returns the bundle.
pub fn train_bundle(table: &RawTable, schema: &Schema, req: &TrainRequest) -> Result<ModelBundle> {
    req.model.validate()?;
    req.train.validate()?;
    let prepared = prepare(table, schema, &req.prepare)?;
    let features = prepared.preprocessor.columns().to_vec();
    let (model, history) =
        fit_model(req.family, &req.model, &req.train, &prepared.train, features, prepared.class_labels.clone())?;
    let formula = match (req.distill, model.additive()) {
        (true, Some(kaam)) => Some(distill(&kaam, prepared.train.x.view(), &DistillConfig::default())?),
        _ => None,
    };
    let bundle = ModelBundle {
        format_version: ModelBundle::FORMAT_VERSION,
        schema: schema.clone(),
        preprocessor: prepared.preprocessor,
        model,
        model_config: (req.family != ModelFamily::Lr).then(|| req.model.clone()),
        train_config: req.train.clone(),
        prepare: req.prepare.clone(),
        seed: req.train.seed,
        formula,
        history,
        train: Cohort::from_dataset(&prepared.train),
        test: Cohort::from_dataset(&prepared.test),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Grid search over the train rows of a prepared table.
pub fn grid_search_table(
    table: &RawTable,
    schema: &Schema,
    kind: ModelKind,
    space: &GridSearchSpace,
    prepare_opts: &PrepareOptions,
    train_config: &TrainConfig,
    folds: usize,
) -> Result<GridSearchResult> {
    let prepared = prepare(table, schema, prepare_opts)?;
    crate::training::grid_search(
        kind,
        space,
        prepared.train.x.view(),
        &prepared.train.labels,
        prepared.preprocessor.columns(),
        &prepared.class_labels,
        folds,
        train_config,
    )
}

/// Encodes a labelled table with a bundle's preprocessor and classes.
pub fn encode_table(bundle: &ModelBundle, table: &RawTable) -> Result<Dataset> {
    let classes = bundle.model.class_labels();
    Dataset::encode(&bundle.preprocessor, table, &bundle.schema, classes)
}

pub fn formula_proba(formula: &SymbolicFormula, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((x.nrows(), formula.class_labels.len()));
    for (i, r) in x.axis_iter(Axis(0)).enumerate() {
        let e = formula.eval(&r.to_vec())?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&e.probabilities));
    }
    Ok(out)
}

/// Which predictor an evaluation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    Model,
    /// The stored formula, optionally rounded to this many decimals.
    Formula(Option<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOptions {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        EvaluationOptions { resamples: DEFAULT_BOOTSTRAP_RESAMPLES, seed: 0 }
    }
}

pub fn evaluate(
    bundle: &ModelBundle,
    data: &Dataset,
    scorer: Scorer,
    opts: &EvaluationOptions,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let probs = match scorer {
        Scorer::Model => bundle.model.predict_proba_matrix(data.x.view())?,
        Scorer::Formula(decimals) => {
            let f = bundle.formula.as_ref().ok_or_else(|| Error::InvalidInput("bundle has no formula".into()))?;
            match decimals {
                Some(d) => formula_proba(&f.rounded(d), data.x.view())?,
                None => formula_proba(f, data.x.view())?,
            }
        }
    };
    metric_report(probs.view(), &data.labels, opts.resamples, opts.seed)
}
