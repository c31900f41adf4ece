//! HTTP JSON API over a fixed set of loaded model bundles.
//!
//! Every handler is a thin wrapper around a [`LoadedModel`] method, so the
//! same responses are available in-process.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tower_http::cors::CorsLayer;

use crate::data::{ColumnPlan, Dataset, FeatureKind, ModelBundle, Record};
use crate::error::{Error, Result};
use crate::interpret::{
    feature_importance, model_prediction_bars, nearest_patients, pdp, prediction_bars, radar, CohortView,
    ImportanceVector, NeighborResult, PdpCurve, PdpRequest, PredictionBars, RadarData, DEFAULT_NEIGHBORS,
    DEFAULT_PDP_POINTS,
};
use crate::kaam::{average_contribution, AverageContribution, Kaam, LogitMatrix};
use crate::metrics::argmax;
use crate::symbolic::SymbolicFormula;

/// One bundle with everything the endpoints read, computed once at load.
#[derive(Debug)]
pub struct LoadedModel {
    pub id: String,
    pub hash: String,
    pub bundle: ModelBundle,
    train: Dataset,
    test: Dataset,
    train_probs: Vec<Vec<f64>>,
    labels: Vec<String>,
    covariates: Vec<BTreeMap<String, String>>,
    additive: Option<Additive>,
}

#[derive(Debug)]
struct Additive {
    kaam: Kaam,
    /// One explanation matrix per output: a single differential matrix for
    /// binary models, one per class otherwise.
    matrices: Vec<LogitMatrix>,
    averages: Vec<AverageContribution>,
    ranges: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub model_id: String,
    pub bundle_hash: String,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub name: String,
    pub kind: FeatureKind,
    /// Observed training range of numeric features.
    pub range: Option<(f64, f64)>,
    /// Accepted values of binary and categorical features.
    pub categories: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub bundle_hash: String,
    pub kind: String,
    pub classes: Vec<String>,
    pub features: Vec<FeatureInfo>,
    pub columns: Vec<String>,
    pub additive: bool,
    pub has_formula: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelList {
    pub loaded_at: u64,
    pub models: Vec<ModelInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
    pub predicted_class: usize,
    pub predicted_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdpResponse {
    pub curves: Vec<PdpCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceResponse {
    pub class: Option<usize>,
    #[serde(flatten)]
    pub importance: ImportanceVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaResponse {
    pub decimals: Option<u32>,
    pub text: String,
    pub formula: SymbolicFormula,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarsResponse {
    /// Test-cohort ids, indexed by each bar's `row`.
    pub ids: Vec<String>,
    #[serde(flatten)]
    pub bars: PredictionBars,
}

/// Everything the explanation tools say about one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub class: usize,
    pub patient: BTreeMap<String, String>,
    pub prediction: Prediction,
    pub radar: RadarData,
    pub pdp: Vec<PdpCurve>,
    pub importance: ImportanceResponse,
    pub neighbors: NeighborResult,
}

/// Body of every POST endpoint. Only `covariates` is required.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRequest {
    pub covariates: Map<String, Value>,
    #[serde(default)]
    pub class: Option<usize>,
    /// Radar only: add the neighbour polygon.
    #[serde(default)]
    pub neighbors: bool,
    #[serde(default)]
    pub k: Option<usize>,
    /// PDP only: raw feature or encoded column names; all columns when absent.
    #[serde(default)]
    pub features: Option<Vec<String>>,
}

impl LoadedModel {
    pub fn new(id: impl Into<String>, bundle: ModelBundle) -> Result<Self> {
        bundle.validate()?;
        let hash = bundle.hash()?;
        let train = bundle.train.dataset(&bundle.preprocessor)?;
        let test = bundle.test.dataset(&bundle.preprocessor)?;
        if train.is_empty() {
            return Err(Error::InvalidModel("bundle has no training cohort".into()));
        }
        let train_probs =
            train.x.axis_iter(Axis(0)).map(|r| bundle.model.predict_proba(&r.to_vec())).collect::<Result<Vec<_>>>()?;
        let classes = bundle.model.class_labels();
        let labels = train.labels.iter().map(|&l| classes[l].clone()).collect();
        let covariates = train.records.iter().map(|r| bundle.preprocessor.record_map(r)).collect();
        let additive = match bundle.model.additive() {
            Some(kaam) => {
                let outputs = if kaam.is_binary() { 1 } else { classes.len() };
                let matrices = (0..outputs)
                    .map(|p| kaam.explanation_matrix(train.x.view(), p, Some(&train.ids)))
                    .collect::<Result<Vec<_>>>()?;
                let averages = matrices.iter().map(average_contribution).collect::<Result<Vec<_>>>()?;
                let ranges = train
                    .x
                    .axis_iter(Axis(1))
                    .map(|c| c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
                    .collect();
                Some(Additive { kaam, matrices, averages, ranges })
            }
            None => None,
        };
        Ok(LoadedModel { id: id.into(), hash, bundle, train, test, train_probs, labels, covariates, additive })
    }

    pub fn load(id: impl Into<String>, path: &Path) -> Result<Self> {
        Self::new(id, ModelBundle::load(path)?)
    }

    fn wrap<T>(&self, body: T) -> Envelope<T> {
        Envelope { model_id: self.id.clone(), bundle_hash: self.hash.clone(), body }
    }

    fn additive(&self) -> Result<&Additive> {
        self.additive.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "{} models are not additive; explanations are unavailable",
                self.bundle.model.kind_name()
            ))
        })
    }

    fn is_binary(&self) -> bool {
        self.bundle.model.class_labels().len() == 2
    }

    /// Requested class, defaulting to the positive class for binary models
    /// and class 0 otherwise.
    fn class(&self, class: Option<usize>) -> Result<usize> {
        let p = self.bundle.model.class_labels().len();
        let c = class.unwrap_or(usize::from(self.is_binary()));
        if c >= p {
            return Err(Error::Index { what: "classes", index: c, len: p });
        }
        Ok(c)
    }

    fn output(&self, class: usize) -> usize {
        if self.is_binary() {
            0
        } else {
            class
        }
    }

    pub fn encode(&self, covariates: &Map<String, Value>) -> Result<(Record, Vec<f64>)> {
        let record = self.bundle.preprocessor.record_from_json(covariates)?;
        let (x, _) = self.bundle.preprocessor.transform_record(&record)?;
        Ok((record, x))
    }

    pub fn info(&self) -> ModelInfo {
        let pre = &self.bundle.preprocessor;
        let features = pre
            .features()
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let (range, categories) = match &f.plan {
                    ColumnPlan::Numeric { .. } => {
                        let vals = self.train.records.iter().filter_map(|r| r[j].as_deref()?.parse::<f64>().ok());
                        let r = vals.fold(None, |acc: Option<(f64, f64)>, v| match acc {
                            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
                            None => Some((v, v)),
                        });
                        (r, None)
                    }
                    ColumnPlan::Binary { values, .. } => (None, Some(values.clone())),
                    ColumnPlan::Categorical { vocabulary } => (None, Some(vocabulary.clone())),
                };
                FeatureInfo { name: f.spec.name.clone(), kind: f.spec.kind, range, categories }
            })
            .collect();
        ModelInfo {
            model_id: self.id.clone(),
            bundle_hash: self.hash.clone(),
            kind: self.bundle.model.kind_name().to_string(),
            classes: self.bundle.model.class_labels().to_vec(),
            features,
            columns: pre.columns().to_vec(),
            additive: self.additive.is_some(),
            has_formula: self.bundle.formula.is_some(),
        }
    }

    pub fn predict(&self, req: &PatientRequest) -> Result<Envelope<Prediction>> {
        let (_, x) = self.encode(&req.covariates)?;
        let probabilities = self.bundle.model.predict_proba(&x)?;
        let logits = self.bundle.model.logits(&x)?;
        let predicted_class = argmax(&probabilities);
        Ok(self.wrap(Prediction {
            predicted_label: self.bundle.model.class_labels()[predicted_class].clone(),
            probabilities,
            logits,
            predicted_class,
        }))
    }

    fn neighbor_rows(&self, a: &Additive, out: usize, query: &[f64], k: usize) -> Result<NeighborResult> {
        nearest_patients(&a.matrices[out], query, k)
    }

    pub fn radar(&self, req: &PatientRequest) -> Result<Envelope<RadarData>> {
        let a = self.additive()?;
        let class = self.class(req.class)?;
        let out = self.output(class);
        let (_, x) = self.encode(&req.covariates)?;
        let rows: Option<Vec<Vec<f64>>> = if req.neighbors {
            let query = a.kaam.explanation_row(&x, class)?;
            let nb = self.neighbor_rows(a, out, &query, req.k.unwrap_or(DEFAULT_NEIGHBORS))?;
            Some(nb.neighbors.iter().map(|n| a.matrices[out].values().row(n.row).to_vec()).collect())
        } else {
            None
        };
        Ok(self.wrap(radar(&a.kaam, &a.averages[out], &x, class, rows.as_deref())?))
    }

    /// Column indices named by raw feature or encoded column names.
    fn columns_for(&self, names: Option<&[String]>) -> Result<Vec<usize>> {
        let pre = &self.bundle.preprocessor;
        let Some(names) = names else {
            return Ok((0..pre.width()).collect());
        };
        let mut out = Vec::new();
        for name in names {
            if let Some(c) = pre.columns().iter().position(|c| c == name) {
                out.push(c);
                continue;
            }
            let mut start = 0;
            let mut found = false;
            for f in pre.features() {
                if &f.spec.name == name {
                    out.extend(start..start + f.width());
                    found = true;
                }
                start += f.width();
            }
            if !found {
                return Err(Error::Schema(format!("unknown feature {name:?}")));
            }
        }
        Ok(out)
    }

    pub fn pdp(&self, req: &PatientRequest) -> Result<Envelope<PdpResponse>> {
        let a = self.additive()?;
        let class = self.class(req.class)?;
        let out = self.output(class);
        let (_, x) = self.encode(&req.covariates)?;
        let columns = self.columns_for(req.features.as_deref())?;
        let query = a.kaam.explanation_row(&x, class)?;
        let k = req.k.unwrap_or(DEFAULT_NEIGHBORS);
        let nb = self.neighbor_rows(a, out, &query, k)?;
        let curves = columns
            .into_iter()
            .map(|j| {
                let neighbors: Vec<f64> = nb.neighbors.iter().map(|n| self.train.x[[n.row, j]]).collect();
                pdp(
                    &a.kaam,
                    &PdpRequest {
                        feature: j,
                        class,
                        grid_size: DEFAULT_PDP_POINTS,
                        range: a.ranges[j],
                        differential: a.kaam.is_binary(),
                        patient: Some(x[j]),
                        cohort: &[],
                        neighbors: &neighbors,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.wrap(PdpResponse { curves }))
    }

    pub fn neighbors(&self, req: &PatientRequest) -> Result<Envelope<NeighborResult>> {
        let a = self.additive()?;
        let class = self.class(req.class)?;
        let out = self.output(class);
        let (_, x) = self.encode(&req.covariates)?;
        let query = a.kaam.explanation_row(&x, class)?;
        let probs: Vec<f64> = self.train_probs.iter().map(|p| p[class]).collect();
        let result = self
            .neighbor_rows(a, out, &query, req.k.unwrap_or(DEFAULT_NEIGHBORS))?
            .with_cohort(CohortView { probabilities: &probs, labels: &self.labels, covariates: &self.covariates })?;
        Ok(self.wrap(result))
    }

    pub fn importance(&self, class: Option<usize>) -> Result<Envelope<ImportanceResponse>> {
        let a = self.additive()?;
        let class = self.class(class)?;
        let importance = feature_importance(&a.matrices[self.output(class)])?;
        Ok(self.wrap(ImportanceResponse { class: (!self.is_binary()).then_some(class), importance }))
    }

    pub fn formula(&self, decimals: Option<u32>) -> Result<Envelope<FormulaResponse>> {
        let f = self.bundle.formula.as_ref().ok_or_else(|| Error::InvalidInput("bundle has no formula".into()))?;
        let formula = match decimals {
            Some(d) => f.rounded(d),
            None => f.clone(),
        };
        Ok(self.wrap(FormulaResponse { decimals, text: formula.render(), formula }))
    }

    /// Bars over the held-out cohort (the training cohort when none was kept).
    /// Radar (with neighbour polygon), PDP curves, importance and
    /// neighbours for one patient in a single document.
    pub fn explain(&self, req: &PatientRequest) -> Result<Envelope<Explanation>> {
        let class = self.class(req.class)?;
        let (record, _) = self.encode(&req.covariates)?;
        let with_nb = PatientRequest { neighbors: true, class: Some(class), ..req.clone() };
        Ok(self.wrap(Explanation {
            class,
            patient: self.bundle.preprocessor.record_map(&record),
            prediction: self.predict(req)?.body,
            radar: self.radar(&with_nb)?.body,
            pdp: self.pdp(&with_nb)?.body.curves,
            importance: self.importance(Some(class))?.body,
            neighbors: self.neighbors(&with_nb)?.body,
        }))
    }

    /// JSON covariates for a raw record, typed the way the API expects.
    pub fn covariates_for(&self, record: &Record) -> Result<Map<String, Value>> {
        let pre = &self.bundle.preprocessor;
        if record.len() != pre.features().len() {
            return Err(Error::shape(pre.features().len(), record.len()));
        }
        let mut out = Map::new();
        for (f, cell) in pre.features().iter().zip(record) {
            let v = match (cell, f.spec.kind) {
                (None, _) => Value::Null,
                (Some(c), FeatureKind::Continuous | FeatureKind::Integer) => {
                    let x: f64 = c
                        .parse()
                        .map_err(|_| Error::Schema(format!("feature {:?}: {c:?} is not a number", f.spec.name)))?;
                    serde_json::Number::from_f64(x)
                        .map(Value::Number)
                        .ok_or_else(|| Error::Schema(format!("feature {:?}: {c:?} is not finite", f.spec.name)))?
                }
                (Some(c), _) => Value::String(c.clone()),
            };
            out.insert(f.spec.name.clone(), v);
        }
        Ok(out)
    }

    pub fn train_cohort(&self) -> &Dataset {
        &self.train
    }

    pub fn test_cohort(&self) -> &Dataset {
        &self.test
    }

    pub fn prediction_bars(&self, threshold: f64) -> Result<Envelope<BarsResponse>> {
        if !self.is_binary() {
            return Err(Error::Arity { expected: 2, actual: self.bundle.model.class_labels().len() });
        }
        let d = if self.test.is_empty() { &self.train } else { &self.test };
        let bars = match &self.bundle.model {
            crate::data::BundleModel::Kaam(m) => model_prediction_bars(m, d.x.view(), &d.labels, threshold)?,
            model => {
                let probs =
                    d.x.axis_iter(Axis(0))
                        .map(|r| model.predict_proba(&r.to_vec()).map(|p| p[1]))
                        .collect::<Result<Vec<_>>>()?;
                prediction_bars(&probs, &d.labels, threshold)?
            }
        };
        Ok(self.wrap(BarsResponse { ids: d.ids.clone(), bars }))
    }
}

/// Immutable map of model id to loaded bundle.
#[derive(Debug, Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<LoadedModel>>,
    loaded_at: u64,
}

impl Registry {
    pub fn new(models: Vec<LoadedModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidInput("the service needs at least one model bundle".into()));
        }
        let mut map = BTreeMap::new();
        for m in models {
            let id = m.id.clone();
            if map.insert(id.clone(), Arc::new(m)).is_some() {
                return Err(Error::InvalidInput(format!("duplicate model id {id:?}")));
            }
        }
        let loaded_at = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Ok(Registry { models: map, loaded_at })
    }

    /// Loads bundles from files; each id is the file stem.
    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self> {
        let models = paths
            .iter()
            .map(|p| {
                let p = p.as_ref();
                let id = p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
                LoadedModel::load(id, p)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(models)
    }

    pub fn get(&self, id: &str) -> Option<&Arc<LoadedModel>> {
        self.models.get(id)
    }

    pub fn list(&self) -> ModelList {
        ModelList { loaded_at: self.loaded_at, models: self.models.values().map(|m| m.info()).collect() }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Schema(_)
            | Error::InvalidInput(_)
            | Error::Index { .. }
            | Error::Arity { .. }
            | Error::Shape { .. }
            | Error::UndefinedMetric(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "status": self.status.as_u16() });
        (self.status, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
    }
}

type ApiResult = std::result::Result<Response, ApiError>;

fn json_response<T: Serialize>(value: &T) -> ApiResult {
    let body =
        serde_json::to_vec(value).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

fn model(reg: &Registry, id: &str) -> std::result::Result<Arc<LoadedModel>, ApiError> {
    reg.get(id).cloned().ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown model {id:?}")))
}

/// Malformed JSON is a 400; well-formed JSON of the wrong shape is a 422.
fn parse_request(body: &Bytes) -> std::result::Result<PatientRequest, ApiError> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}")))?;
    serde_json::from_value(value).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

fn query_param<T: std::str::FromStr>(
    q: &BTreeMap<String, String>,
    key: &str,
) -> std::result::Result<Option<T>, ApiError> {
    match q.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("query parameter {key}={v:?} is invalid"))),
    }
}

type Shared = State<Arc<Registry>>;

async fn list_models(State(reg): Shared) -> ApiResult {
    json_response(&reg.list())
}

macro_rules! post_handler {
    ($name:ident, $method:ident) => {
        async fn $name(State(reg): Shared, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
            let m = model(&reg, &id)?;
            let req = parse_request(&body)?;
            json_response(&m.$method(&req)?)
        }
    };
}

post_handler!(predict_handler, predict);
post_handler!(radar_handler, radar);
post_handler!(pdp_handler, pdp);
post_handler!(neighbors_handler, neighbors);

async fn importance_handler(
    State(reg): Shared,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<BTreeMap<String, String>>,
) -> ApiResult {
    let m = model(&reg, &id)?;
    json_response(&m.importance(query_param(&q, "class")?)?)
}

async fn formula_handler(
    State(reg): Shared,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<BTreeMap<String, String>>,
) -> ApiResult {
    let m = model(&reg, &id)?;
    let decimals: Option<u32> = query_param(&q, "decimals")?;
    if m.bundle.formula.is_none() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("model {id:?} has no formula")));
    }
    json_response(&m.formula(decimals)?)
}

async fn bars_handler(
    State(reg): Shared,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<BTreeMap<String, String>>,
) -> ApiResult {
    let m = model(&reg, &id)?;
    json_response(&m.prediction_bars(query_param(&q, "threshold")?.unwrap_or(0.5))?)
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/models/{id}/predict", post(predict_handler))
        .route("/models/{id}/explain/radar", post(radar_handler))
        .route("/models/{id}/explain/pdp", post(pdp_handler))
        .route("/models/{id}/neighbors", post(neighbors_handler))
        .route("/models/{id}/importance", get(importance_handler))
        .route("/models/{id}/formula", get(formula_handler))
        .route("/models/{id}/prediction-bars", get(bars_handler))
        .layer(CorsLayer::permissive())
        .with_state(registry)
}

/// Serves until ctrl-c. Bundles are already loaded when this is called.
pub async fn serve(registry: Arc<Registry>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(registry))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
