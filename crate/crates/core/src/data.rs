//! CSV ingestion, schema typing, preprocessing, splitting and model bundles.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kaam::Kaam;
use crate::kan::{LogisticKan, ModelConfig};
use crate::split::{random_split, stratified_split, subsample};
use crate::symbolic::SymbolicFormula;
use crate::training::{LrBaseline, TrainConfig, TrainingHistory};

/// Cell spellings read as missing values.
pub const MISSING_TOKENS: [&str; 5] = ["", "NA", "NaN", "?", "null"];
/// Category name used for the one-hot column of missing categorical values.
pub const MISSING_CATEGORY: &str = "missing";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Binary,
    Categorical,
    Integer,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Fixed vocabulary. Optional for categorical features (learned from the
    /// training rows otherwise); for non-numeric binary features it sets
    /// which value encodes to 0 and which to 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

/// Binary targets name one positive label; other tasks may list their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassSpec {
    Positive(String),
    Ordered(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_class: Option<ClassSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_column: Option<String>,
    pub features: Vec<FeatureSpec>,
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Schema = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Schema("schema lists no features".into()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.features {
            if f.name.is_empty() {
                return Err(Error::Schema("feature names must be nonempty".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature {:?}", f.name)));
            }
            if f.name == self.target || Some(&f.name) == self.id_column.as_ref() {
                return Err(Error::Schema(format!("{:?} is both a feature and the target or id", f.name)));
            }
            let distinct: BTreeSet<&String> = f.categories.iter().collect();
            if distinct.len() != f.categories.len() {
                return Err(Error::Schema(format!("feature {:?} repeats a category", f.name)));
            }
            match f.kind {
                FeatureKind::Binary if !f.categories.is_empty() && f.categories.len() != 2 => {
                    return Err(Error::Schema(format!("binary feature {:?} needs exactly two categories", f.name)));
                }
                FeatureKind::Integer | FeatureKind::Continuous if !f.categories.is_empty() => {
                    return Err(Error::Schema(format!("numeric feature {:?} cannot list categories", f.name)));
                }
                _ => {}
            }
        }
        match &self.positive_class {
            Some(ClassSpec::Ordered(v)) => {
                let distinct: BTreeSet<&String> = v.iter().collect();
                if v.len() < 2 || distinct.len() != v.len() {
                    return Err(Error::Schema("class list needs at least two distinct labels".into()));
                }
            }
            Some(ClassSpec::Positive(p)) if p.is_empty() => {
                return Err(Error::Schema("positive class must be nonempty".into()));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    /// Class labels in index order for the given target values.
    pub fn class_labels(&self, targets: &[String]) -> Result<Vec<String>> {
        match &self.positive_class {
            Some(ClassSpec::Ordered(v)) => Ok(v.clone()),
            Some(ClassSpec::Positive(pos)) => {
                let others: BTreeSet<&String> = targets.iter().filter(|t| *t != pos).collect();
                let negative = match others.len() {
                    1 => others.into_iter().next().expect("one element").clone(),
                    _ => format!("not {pos}"),
                };
                Ok(vec![negative, pos.clone()])
            }
            None => {
                let distinct: Vec<String> = sort_values(targets.iter().cloned().collect::<BTreeSet<_>>());
                if distinct.len() < 2 {
                    return Err(Error::Schema(format!("target {:?} has fewer than two classes", self.target)));
                }
                Ok(distinct)
            }
        }
    }

    /// Class index of a target value; `None` when it belongs to no class.
    pub fn encode_target(&self, classes: &[String], value: &str) -> Option<usize> {
        match &self.positive_class {
            Some(ClassSpec::Positive(pos)) => Some(usize::from(value == pos)),
            _ => classes.iter().position(|c| c == value),
        }
    }
}

/// Numeric-aware ordering: all-numeric values sort by value, others lexically.
fn sort_values(values: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = values.into_iter().collect();
    if v.iter().all(|s| s.trim().parse::<f64>().is_ok()) {
        v.sort_by(|a, b| {
            let (x, y) = (a.trim().parse::<f64>().unwrap(), b.trim().parse::<f64>().unwrap());
            x.total_cmp(&y).then_with(|| a.cmp(b))
        });
    }
    v
}

pub fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    MISSING_TOKENS.iter().any(|m| t.eq_ignore_ascii_case(m))
}

/// One raw record: a value per schema feature, `None` when missing.
pub type Record = Vec<Option<String>>;

/// Typed rows of a CSV file, in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    pub ids: Vec<String>,
    pub records: Vec<Record>,
    pub targets: Vec<String>,
    /// Rows dropped because the target was missing or not a known class.
    pub dropped: usize,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> RawTable {
        RawTable {
            feature_names: self.feature_names.clone(),
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            records: rows.iter().map(|&i| self.records[i].clone()).collect(),
            targets: rows.iter().map(|&i| self.targets[i].clone()).collect(),
            dropped: 0,
        }
    }
}

fn check_cell(spec: &FeatureSpec, value: &str) -> Result<()> {
    match spec.kind {
        FeatureKind::Continuous | FeatureKind::Integer => {
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Schema(format!("feature {:?}: {value:?} is not a number", spec.name)))?;
            if !v.is_finite() {
                return Err(Error::Schema(format!("feature {:?}: {value:?} is not finite", spec.name)));
            }
            if spec.kind == FeatureKind::Integer && v.fract() != 0.0 {
                return Err(Error::Schema(format!("feature {:?}: {value:?} is not an integer", spec.name)));
            }
        }
        FeatureKind::Binary if !spec.categories.is_empty() && !spec.categories.iter().any(|c| c == value.trim()) => {
            return Err(Error::Schema(format!(
                "feature {:?}: {value:?} is not one of {:?}",
                spec.name, spec.categories
            )));
        }
        _ => {}
    }
    Ok(())
}

/// Reads a headed CSV file, typing every schema feature. Rows whose target
/// is missing (or, with a class list, unknown) are dropped and counted.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<RawTable> {
    read_rows(reader, schema, true)
}

/// Reads feature rows without requiring a target column (for example one
/// patient to explain). Targets are empty strings when the column is absent.
pub fn read_records<R: std::io::Read>(reader: R, schema: &Schema) -> Result<RawTable> {
    read_rows(reader, schema, false)
}

fn read_rows<R: std::io::Read>(reader: R, schema: &Schema, require_target: bool) -> Result<RawTable> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::Headers).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let target_col = find(&schema.target);
    if require_target && target_col.is_none() {
        return Err(Error::Schema(format!("target column {:?} not in header", schema.target)));
    }
    let id_col = match &schema.id_column {
        Some(id) => Some(find(id).ok_or_else(|| Error::Schema(format!("id column {id:?} not in header")))?),
        None => None,
    };
    let cols = schema
        .features
        .iter()
        .map(|f| find(&f.name).ok_or_else(|| Error::Schema(format!("feature column {:?} not in header", f.name))))
        .collect::<Result<Vec<_>>>()?;
    let known: Option<&Vec<String>> = match &schema.positive_class {
        Some(ClassSpec::Ordered(v)) => Some(v),
        _ => None,
    };

    let mut table = RawTable {
        feature_names: schema.feature_names(),
        ids: Vec::new(),
        records: Vec::new(),
        targets: Vec::new(),
        dropped: 0,
    };
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let target = target_col.and_then(|c| row.get(c)).unwrap_or("").trim();
        if require_target && (is_missing(target) || known.is_some_and(|k| !k.iter().any(|c| c == target))) {
            table.dropped += 1;
            continue;
        }
        let mut record = Vec::with_capacity(cols.len());
        for (spec, &c) in schema.features.iter().zip(&cols) {
            let cell = row.get(c).unwrap_or("");
            if is_missing(cell) {
                record.push(None);
            } else {
                check_cell(spec, cell).map_err(|e| Error::Schema(format!("data row {}: {e}", line + 1)))?;
                record.push(Some(cell.trim().to_string()));
            }
        }
        let id = match id_col {
            Some(c) => row.get(c).unwrap_or("").trim().to_string(),
            None => line.to_string(),
        };
        table.ids.push(id);
        table.records.push(record);
        table.targets.push(target.to_string());
    }
    if table.dropped > 0 {
        log::warn!("dropped {} rows with a missing or unknown target", table.dropped);
    }
    if table.is_empty() {
        return Err(Error::Schema("table has no usable rows".into()));
    }
    Ok(table)
}

/// Fitted encoding of one raw feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColumnPlan {
    /// `values[0]` encodes to 0 and `values[1]` to 1; a missing value gets
    /// the training mean of the coding.
    Binary { values: Vec<String>, mean: f64 },
    /// Standardised with population statistics; `std == 0` passes through
    /// centred but unscaled.
    Numeric { mean: f64, std: f64 },
    /// One column per category, in vocabulary order. Unseen values encode
    /// as all zeros.
    Categorical { vocabulary: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedFeature {
    pub spec: FeatureSpec,
    pub plan: ColumnPlan,
    /// Set when the feature could not be encoded as intended (constant
    /// column or single category).
    pub warning: Option<String>,
}

impl FittedFeature {
    pub fn width(&self) -> usize {
        match &self.plan {
            ColumnPlan::Categorical { vocabulary } => vocabulary.len(),
            _ => 1,
        }
    }
}

/// Train-only encoding state. Immutable once fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    features: Vec<FittedFeature>,
    columns: Vec<String>,
}

fn binary_code(values: &[String], cell: &str) -> Option<f64> {
    if let Some(i) = values.iter().position(|v| v == cell) {
        return Some(i as f64);
    }
    // Numeric spellings such as "1.0" match "1".
    let x: f64 = cell.parse().ok()?;
    values.iter().position(|v| v.parse::<f64>().ok() == Some(x)).map(|i| i as f64)
}

impl Preprocessor {
    pub fn fit(schema: &Schema, records: &[Record]) -> Result<Self> {
        schema.validate()?;
        if records.is_empty() {
            return Err(Error::InvalidInput("cannot fit a preprocessor on zero rows".into()));
        }
        let mut features = Vec::with_capacity(schema.features.len());
        let mut columns = Vec::new();
        for (j, spec) in schema.features.iter().enumerate() {
            let cells: Vec<Option<&str>> = records.iter().map(|r| r[j].as_deref()).collect();
            let present: Vec<&str> = cells.iter().flatten().copied().collect();
            let mut warning = None;
            let plan = match spec.kind {
                FeatureKind::Binary => {
                    let values = if !spec.categories.is_empty() {
                        spec.categories.clone()
                    } else {
                        let seen = sort_values(present.iter().map(|s| s.to_string()).collect());
                        let numeric = seen.iter().all(|s| s.parse::<f64>().is_ok());
                        if numeric {
                            if let Some(bad) =
                                seen.iter().find(|s| !matches!(s.parse::<f64>(), Ok(v) if v == 0.0 || v == 1.0))
                            {
                                return Err(Error::Schema(format!(
                                    "binary feature {:?} has numeric value {bad:?} outside {{0, 1}}",
                                    spec.name
                                )));
                            }
                            vec!["0".to_string(), "1".to_string()]
                        } else {
                            match seen.len() {
                                2 => seen,
                                1 => {
                                    warning = Some("binary feature has a single observed value".into());
                                    seen
                                }
                                0 => {
                                    return Err(Error::Schema(format!(
                                        "binary feature {:?} is entirely missing",
                                        spec.name
                                    )));
                                }
                                n => {
                                    return Err(Error::Schema(format!(
                                        "binary feature {:?} has {n} distinct values",
                                        spec.name
                                    )));
                                }
                            }
                        }
                    };
                    let codes: Vec<f64> = present.iter().filter_map(|c| binary_code(&values, c)).collect();
                    let mean = if codes.is_empty() { 0.0 } else { codes.iter().sum::<f64>() / codes.len() as f64 };
                    columns.push(spec.name.clone());
                    ColumnPlan::Binary { values, mean }
                }
                FeatureKind::Integer | FeatureKind::Continuous => {
                    let xs: Vec<f64> = present
                        .iter()
                        .map(|c| c.parse::<f64>().map_err(|_| Error::Schema(format!("{c:?} is not a number"))))
                        .collect::<Result<_>>()?;
                    if xs.is_empty() {
                        return Err(Error::Schema(format!("numeric feature {:?} is entirely missing", spec.name)));
                    }
                    let n = xs.len() as f64;
                    let mean = xs.iter().sum::<f64>() / n;
                    let std = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
                    if std == 0.0 {
                        log::warn!("feature {:?} is constant on the training rows; left unscaled", spec.name);
                        warning = Some("constant on training rows; left unscaled".into());
                    }
                    columns.push(spec.name.clone());
                    ColumnPlan::Numeric { mean, std }
                }
                FeatureKind::Categorical => {
                    let mut vocabulary = if spec.categories.is_empty() {
                        sort_values(present.iter().map(|s| s.to_string()).collect())
                    } else {
                        spec.categories.clone()
                    };
                    if cells.iter().any(Option::is_none) && !vocabulary.iter().any(|v| v == MISSING_CATEGORY) {
                        vocabulary.push(MISSING_CATEGORY.to_string());
                    }
                    if vocabulary.is_empty() {
                        return Err(Error::Schema(format!("categorical feature {:?} has no categories", spec.name)));
                    }
                    if vocabulary.len() == 1 {
                        log::warn!("categorical feature {:?} has a single category", spec.name);
                        warning = Some("single category; constant column".into());
                    }
                    columns.extend(vocabulary.iter().map(|v| format!("{}={v}", spec.name)));
                    ColumnPlan::Categorical { vocabulary }
                }
            };
            features.push(FittedFeature { spec: spec.clone(), plan, warning });
        }
        Ok(Preprocessor { features, columns })
    }

    pub fn features(&self) -> &[FittedFeature] {
        &self.features
    }

    pub fn feature(&self, name: &str) -> Option<&FittedFeature> {
        self.features.iter().find(|f| f.spec.name == name)
    }

    /// Names of the encoded columns, one per model input.
    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// Encodes one record; returns the row and the number of imputed cells.
    pub fn transform_record(&self, record: &Record) -> Result<(Vec<f64>, usize)> {
        if record.len() != self.features.len() {
            return Err(Error::shape(self.features.len(), record.len()));
        }
        let mut row = Vec::with_capacity(self.width());
        let mut imputed = 0;
        for (f, cell) in self.features.iter().zip(record) {
            let cell = cell.as_deref().map(str::trim);
            match &f.plan {
                ColumnPlan::Binary { values, mean } => match cell {
                    None => {
                        imputed += 1;
                        row.push(*mean);
                    }
                    Some(c) => row.push(binary_code(values, c).ok_or_else(|| {
                        Error::InvalidInput(format!("feature {:?}: {c:?} is not one of {values:?}", f.spec.name))
                    })?),
                },
                ColumnPlan::Numeric { mean, std } => {
                    let x = match cell {
                        None => {
                            imputed += 1;
                            *mean
                        }
                        Some(c) => {
                            check_cell(&f.spec, c)?;
                            c.parse::<f64>().expect("checked")
                        }
                    };
                    row.push(if *std > 0.0 { (x - mean) / std } else { x - mean });
                }
                ColumnPlan::Categorical { vocabulary } => {
                    let key = cell.unwrap_or(MISSING_CATEGORY);
                    row.extend(vocabulary.iter().map(|v| if v == key { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok((row, imputed))
    }

    /// Encodes records into an `N x width` matrix plus the imputed-cell count.
    pub fn transform(&self, records: &[Record]) -> Result<(Array2<f64>, usize)> {
        let mut x = Array2::zeros((records.len(), self.width()));
        let mut imputed = 0;
        for (i, r) in records.iter().enumerate() {
            let (row, k) = self.transform_record(r)?;
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
            imputed += k;
        }
        Ok((x, imputed))
    }

    /// Decodes an encoded row. Numeric values are de-standardised, binary
    /// codes snap to the nearer value and one-hot blocks to their largest
    /// entry (`None` when all zero).
    pub fn inverse(&self, row: &[f64]) -> Result<Record> {
        if row.len() != self.width() {
            return Err(Error::shape(self.width(), row.len()));
        }
        let mut out = Vec::with_capacity(self.features.len());
        let mut c = 0;
        for f in &self.features {
            match &f.plan {
                ColumnPlan::Binary { values, .. } => {
                    let i = usize::from(row[c] >= 0.5).min(values.len() - 1);
                    out.push(Some(values[i].clone()));
                }
                ColumnPlan::Numeric { mean, std } => {
                    let x = if *std > 0.0 { row[c] * std + mean } else { row[c] + mean };
                    out.push(Some(x.to_string()));
                }
                ColumnPlan::Categorical { vocabulary } => {
                    let block = &row[c..c + vocabulary.len()];
                    let best = block.iter().enumerate().fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
                        Some((_, b)) if b >= v => acc,
                        _ if v > 0.0 => Some((i, v)),
                        _ => acc,
                    });
                    out.push(best.map(|(i, _)| vocabulary[i].clone()));
                }
            }
            c += f.width();
        }
        Ok(out)
    }

    /// Reads raw covariates keyed by feature name. Every feature must be
    /// present; `null` marks a missing value. Numbers are accepted for
    /// numeric and numeric-coded binary features, strings for the rest.
    pub fn record_from_json(&self, covariates: &serde_json::Map<String, serde_json::Value>) -> Result<Record> {
        use serde_json::Value;
        if let Some(k) = covariates.keys().find(|k| self.feature(k).is_none()) {
            return Err(Error::Schema(format!("unknown feature {k:?}")));
        }
        let mut record = Vec::with_capacity(self.features.len());
        for f in &self.features {
            let name = &f.spec.name;
            let v = covariates.get(name).ok_or_else(|| Error::Schema(format!("missing feature {name:?}")))?;
            let cell = match (v, f.spec.kind) {
                (Value::Null, _) => None,
                (Value::Number(n), FeatureKind::Continuous | FeatureKind::Integer | FeatureKind::Binary) => {
                    Some(n.to_string())
                }
                (Value::Bool(b), FeatureKind::Binary) => Some(if *b { "1" } else { "0" }.to_string()),
                (Value::String(s), FeatureKind::Categorical | FeatureKind::Binary) => Some(s.clone()),
                (Value::Number(n), FeatureKind::Categorical) => Some(n.to_string()),
                _ => {
                    return Err(Error::Schema(format!(
                        "feature {name:?} has the wrong JSON type for {:?}",
                        f.spec.kind
                    )));
                }
            };
            if let Some(c) = &cell {
                self.check_value(f, c)?;
            }
            record.push(cell);
        }
        Ok(record)
    }

    fn check_value(&self, f: &FittedFeature, cell: &str) -> Result<()> {
        match &f.plan {
            ColumnPlan::Binary { values, .. } if binary_code(values, cell).is_none() => {
                Err(Error::Schema(format!("feature {:?}: {cell:?} is not one of {values:?}", f.spec.name)))
            }
            ColumnPlan::Numeric { .. } => check_cell(&f.spec, cell),
            _ => Ok(()),
        }
    }

    /// Raw record as a name-to-value map (missing values as empty strings).
    pub fn record_map(&self, record: &Record) -> BTreeMap<String, String> {
        self.features.iter().zip(record).map(|(f, v)| (f.spec.name.clone(), v.clone().unwrap_or_default())).collect()
    }
}

/// Encoded rows with labels, ids and the raw records they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub records: Vec<Record>,
    pub imputed: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn encode(pre: &Preprocessor, table: &RawTable, schema: &Schema, classes: &[String]) -> Result<Self> {
        let (x, imputed) = pre.transform(&table.records)?;
        let labels = table
            .targets
            .iter()
            .map(|t| {
                schema
                    .encode_target(classes, t)
                    .ok_or_else(|| Error::InvalidInput(format!("target {t:?} is not a known class")))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { x, labels, ids: table.ids.clone(), records: table.records.clone(), imputed })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    /// Draw this many rows before splitting when the table is larger.
    pub subsample_n: Option<usize>,
    pub test_fraction: f64,
    pub stratify: bool,
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions { subsample_n: Some(1000), test_fraction: 0.2, stratify: true, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub preprocessor: Preprocessor,
    pub class_labels: Vec<String>,
    pub train: Dataset,
    pub test: Dataset,
}

const SPLIT_STREAM: u64 = 0x5b11_7000;

/// Subsample, split, fit the preprocessor on the train side only, encode both.
pub fn prepare(table: &RawTable, schema: &Schema, opts: &PrepareOptions) -> Result<Prepared> {
    let classes = schema.class_labels(&table.targets)?;
    let table = match opts.subsample_n {
        Some(n) if n < table.len() => table.select(&subsample(table.len(), n, opts.seed)?),
        _ => table.clone(),
    };
    let labels: Vec<usize> =
        table.targets.iter().map(|t| schema.encode_target(&classes, t).expect("filtered on load")).collect();
    let split_seed = opts.seed ^ SPLIT_STREAM;
    let (tr, te) = if opts.stratify {
        stratified_split(&labels, opts.test_fraction, split_seed)?
    } else {
        random_split(labels.len(), opts.test_fraction, split_seed)?
    };
    let (train_raw, test_raw) = (table.select(&tr), table.select(&te));
    let preprocessor = Preprocessor::fit(schema, &train_raw.records)?;
    let train = Dataset::encode(&preprocessor, &train_raw, schema, &classes)?;
    let test = Dataset::encode(&preprocessor, &test_raw, schema, &classes)?;
    Ok(Prepared { preprocessor, class_labels: classes, train, test })
}

/// Trained model of any supported family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum BundleModel {
    Kaam(Kaam),
    LogisticKan(LogisticKan),
    Lr(LrBaseline),
}

impl BundleModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            BundleModel::Kaam(_) => "kaam",
            BundleModel::LogisticKan(_) => "logistic-kan",
            BundleModel::Lr(_) => "lr",
        }
    }

    pub fn feature_names(&self) -> &[String] {
        match self {
            BundleModel::Kaam(m) => m.feature_names(),
            BundleModel::LogisticKan(m) => m.feature_names(),
            BundleModel::Lr(m) => &m.feature_names,
        }
    }

    pub fn class_labels(&self) -> &[String] {
        match self {
            BundleModel::Kaam(m) => m.class_labels(),
            BundleModel::LogisticKan(m) => m.class_labels(),
            BundleModel::Lr(m) => &m.class_labels,
        }
    }

    /// Per-class logits. The baseline reports `[0, z]` for its single logit `z`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            BundleModel::Kaam(m) => m.forward_logits(x),
            BundleModel::LogisticKan(m) => m.forward_logits(x),
            BundleModel::Lr(m) => {
                if x.len() != m.feature_count() {
                    return Err(Error::shape(m.feature_count(), x.len()));
                }
                let z = x.iter().zip(&m.beta).map(|(a, b)| a * b).sum::<f64>() + m.beta[x.len()];
                Ok(vec![0.0, z])
            }
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            BundleModel::Kaam(m) => m.predict_proba(x),
            BundleModel::LogisticKan(m) => m.predict_proba(x),
            BundleModel::Lr(m) => m.predict_proba(x),
        }
    }

    pub fn predict_proba_matrix(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let p = self.class_labels().len();
        let mut out = Array2::zeros((x.nrows(), p));
        for (i, r) in x.axis_iter(Axis(0)).enumerate() {
            let probs = self.predict_proba(&r.to_vec())?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&probs));
        }
        Ok(out)
    }

    /// The additive view used by the explanation tools: the KAAM itself, or
    /// a single-layer Logistic-KAN read as a KAAM with zero biases.
    pub fn additive(&self) -> Option<Kaam> {
        match self {
            BundleModel::Kaam(m) => Some(m.clone()),
            BundleModel::LogisticKan(m) => Kaam::from_logistic_kan(m).ok(),
            BundleModel::Lr(_) => None,
        }
    }

    fn validate(&self) -> Result<()> {
        // Rebuilding through the checked constructors catches hand-edited shapes.
        match self {
            BundleModel::Kaam(m) => {
                m.layer().functions().iter().try_for_each(|f| f.validate())?;
                Kaam::new(
                    m.layer().clone(),
                    m.bias().to_vec(),
                    m.feature_names().to_vec(),
                    m.class_labels().to_vec(),
                    m.config().clone(),
                )?;
            }
            BundleModel::LogisticKan(m) => {
                m.layers().iter().flat_map(|l| l.functions()).try_for_each(|f| f.validate())?;
                LogisticKan::new(
                    m.layers().to_vec(),
                    m.feature_names().to_vec(),
                    m.class_labels().to_vec(),
                    m.config().clone(),
                )?;
            }
            BundleModel::Lr(m) => {
                if m.beta.len() != m.feature_names.len() + 1 || m.class_labels.len() != 2 {
                    return Err(Error::InvalidModel("logistic regression shape mismatch".into()));
                }
            }
        }
        let probe = self.predict_proba(&vec![0.0; self.feature_names().len()])?;
        if probe.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidModel("model produces non-finite probabilities".into()));
        }
        Ok(())
    }
}

/// Raw rows kept with a bundle: ids, records and class indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Cohort {
    pub ids: Vec<String>,
    pub records: Vec<Record>,
    pub labels: Vec<usize>,
}

impl Cohort {
    pub fn from_dataset(d: &Dataset) -> Self {
        Cohort { ids: d.ids.clone(), records: d.records.clone(), labels: d.labels.clone() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Re-encodes the cohort with the bundle's preprocessor.
    pub fn dataset(&self, pre: &Preprocessor) -> Result<Dataset> {
        let (x, imputed) = pre.transform(&self.records)?;
        Ok(Dataset { x, labels: self.labels.clone(), ids: self.ids.clone(), records: self.records.clone(), imputed })
    }
}

/// Everything needed to reuse a trained model: configuration, encoding
/// state, parameters, an optional formula, the seed and the data split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub schema: Schema,
    pub preprocessor: Preprocessor,
    pub model: BundleModel,
    pub model_config: Option<ModelConfig>,
    pub train_config: TrainConfig,
    pub prepare: PrepareOptions,
    pub seed: u64,
    pub formula: Option<SymbolicFormula>,
    pub history: Option<TrainingHistory>,
    pub train: Cohort,
    pub test: Cohort,
}

impl ModelBundle {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.feature_names() != self.preprocessor.columns() {
            return Err(Error::InvalidModel("model inputs do not match the preprocessor columns".into()));
        }
        let p = self.model.class_labels().len();
        for c in [&self.train, &self.test] {
            if c.ids.len() != c.labels.len() || c.records.len() != c.labels.len() {
                return Err(Error::InvalidModel("cohort columns differ in length".into()));
            }
            if let Some(&bad) = c.labels.iter().find(|&&l| l >= p) {
                return Err(Error::Index { what: "classes", index: bad, len: p });
            }
        }
        if let Some(f) = &self.formula {
            f.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// Hex SHA-256 of the serialised bundle.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?)))
    }

    /// Writes the bundle through a temporary file and a rename, so readers
    /// never observe a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let bytes = self.to_json()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_slice(&bytes, path)
    }

    pub fn from_slice(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptBundle { path: path.to_path_buf(), reason };
        let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| corrupt(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| corrupt("no format_version field".into()))?;
        if found != u64::from(Self::FORMAT_VERSION) {
            return Err(Error::VersionMismatch {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: Self::FORMAT_VERSION,
            });
        }
        let bundle: ModelBundle = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
        bundle.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(bundle)
    }
}
