//! Command-line entry point: train, grid-search, evaluate, formula, explain,
//! neighbors and serve.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{load_csv, read_records, ModelBundle, PrepareOptions, Schema};
use crate::error::{Error, Result};
use crate::interpret::DEFAULT_NEIGHBORS;
use crate::kan::ModelConfig;
use crate::metrics::DEFAULT_BOOTSTRAP_RESAMPLES;
use crate::pipeline::{self, EvaluationOptions, ModelFamily, Scorer, TrainRequest};
use crate::service::{LoadedModel, PatientRequest, Registry};
use crate::spline::InitMode;
use crate::training::{GridSearchSpace, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kaamlab", version, about = "Interpretable Kolmogorov-Arnold classifiers for tabular data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a bundle; prints test-split metrics.
    Train(TrainArgs),
    /// Cross-validated hyperparameter search on the train split.
    GridSearch(GridArgs),
    /// Metrics with bootstrap intervals for a bundle.
    Evaluate(EvaluateArgs),
    /// Print the distilled formula of a bundle.
    Formula(FormulaArgs),
    /// Radar, PDP, importance and neighbours for one patient.
    Explain(PatientArgs),
    /// Nearest training patients in logit space.
    Neighbors(PatientArgs),
    /// Serve bundles over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Kaam,
    LogisticKan,
    Lr,
}

impl From<FamilyArg> for ModelFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Kaam => ModelFamily::Kaam,
            FamilyArg::LogisticKan => ModelFamily::LogisticKan,
            FamilyArg::Lr => ModelFamily::Lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Sparse,
    Dense,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// Override the schema's target column.
    #[arg(long)]
    pub target: Option<String>,
    /// Rows drawn before splitting when the file is larger; 0 keeps all rows.
    #[arg(long, default_value_t = 1000)]
    pub subsample_n: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "kaam")]
    pub model: FamilyArg,
    /// Hidden layer widths, comma separated (Logistic-KAN only).
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub grid: usize,
    #[arg(long, default_value_t = 3)]
    pub degree: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub l1: f64,
    /// Inverse-frequency class weights in the loss.
    #[arg(long)]
    pub balance: bool,
    #[arg(long, value_enum, default_value = "dense")]
    pub init: InitArg,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr_rate: f64,
    /// Rows per optimiser step; 0 uses the full training set.
    #[arg(long, default_value_t = 0)]
    pub batch_size: usize,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip formula distillation.
    #[arg(long)]
    pub no_formula: bool,
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_RESAMPLES)]
    pub resamples: usize,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "kaam")]
    pub model: FamilyArg,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr_rate: f64,
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    /// JSON search space replacing the standard grid.
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Where to write the search results; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train the winning config on the train split and save it here.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled CSV; the bundle's held-out split when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Score the stored formula instead of the model.
    #[arg(long)]
    pub formula: bool,
    /// Round the formula before scoring.
    #[arg(long)]
    pub decimals: Option<u32>,
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_RESAMPLES)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FormulaArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub decimals: Option<u32>,
    /// Print the structured formula as JSON instead of text.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PatientArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One-row CSV with the schema's feature columns, or a JSON object of
    /// covariates.
    #[arg(long)]
    pub patient: PathBuf,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_NEIGHBORS)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Bundle files; each is served under its file stem.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}

/// Failure of one run, split by exit code.
#[derive(Debug)]
enum RunError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Runtime(e)
    }
}

type RunResult<T = ()> = std::result::Result<T, RunError>;

fn require_file(p: &Path) -> RunResult {
    if p.is_file() {
        Ok(())
    } else {
        Err(RunError::Usage(format!("no such file: {}", p.display())))
    }
}

fn sha256_file(p: &Path) -> Result<String> {
    let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: Vec<String>,
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn digests(paths: &[&Path]) -> Result<Vec<FileDigest>> {
    paths.iter().map(|p| Ok(FileDigest { path: p.display().to_string(), sha256: sha256_file(p)? })).collect()
}

/// Writes `<output>.manifest.json` describing how `output` was produced.
fn write_manifest(argv: &[String], seed: Option<u64>, inputs: &[&Path], output: &Path) -> Result<()> {
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: argv.to_vec(),
        seed,
        inputs: digests(inputs)?,
        outputs: digests(&[output])?,
    };
    let mut path = output.as_os_str().to_owned();
    path.push(".manifest.json");
    let path = PathBuf::from(path);
    let mut bytes = serde_json::to_vec_pretty(&m)?;
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes to `out` (plus manifest) or stdout.
fn emit(text: &str, out: Option<&Path>, argv: &[String], seed: Option<u64>, inputs: &[&Path]) -> Result<()> {
    match out {
        Some(p) => {
            write_file(p, text.as_bytes())?;
            write_manifest(argv, seed, inputs, p)
        }
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
            so.flush().map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn load_schema(args: &DataArgs) -> RunResult<Schema> {
    require_file(&args.data)?;
    require_file(&args.schema)?;
    let mut schema = Schema::load(&args.schema)?;
    if let Some(t) = &args.target {
        schema.target = t.clone();
        schema.validate()?;
    }
    Ok(schema)
}

fn prepare_options(args: &DataArgs) -> PrepareOptions {
    PrepareOptions {
        subsample_n: (args.subsample_n > 0).then_some(args.subsample_n),
        test_fraction: args.test_fraction,
        stratify: true,
        seed: args.seed,
    }
}

fn model_config(m: &ModelArgs) -> ModelConfig {
    ModelConfig {
        hidden_sizes: m.hidden.clone(),
        grid_points: m.grid,
        degree: m.degree,
        l1_lambda: m.l1,
        class_balanced: m.balance,
        init_mode: match m.init {
            InitArg::Sparse => InitMode::Sparse,
            InitArg::Dense => InitMode::Dense,
        },
        ..ModelConfig::default()
    }
}

fn train_cmd(a: &TrainArgs, argv: &[String]) -> RunResult {
    let schema = load_schema(&a.data)?;
    let table = load_csv(&a.data.data, &schema)?;
    let family: ModelFamily = a.model.model.into();
    if family == ModelFamily::Kaam && !a.model.hidden.is_empty() {
        return Err(RunError::Usage("--hidden applies to logistic-kan models only".into()));
    }
    let config = model_config(&a.model);
    let req = TrainRequest {
        family,
        train: TrainConfig {
            epochs: a.model.epochs,
            learning_rate: a.model.lr_rate,
            batch_size: a.model.batch_size,
            early_stop_patience: a.model.patience,
            seed: a.data.seed,
            ..TrainConfig::for_model(&config)
        },
        model: config,
        prepare: prepare_options(&a.data),
        distill: !a.no_formula,
    };
    let bundle = pipeline::train_bundle(&table, &schema, &req)?;
    bundle.save(&a.out)?;
    write_manifest(argv, Some(a.data.seed), &[&a.data.data, &a.data.schema], &a.out)?;
    let test = bundle.test.dataset(&bundle.preprocessor)?;
    let report = pipeline::evaluate(
        &bundle,
        &test,
        Scorer::Model,
        &EvaluationOptions { resamples: a.resamples, seed: a.data.seed },
    )?;
    emit(&to_json(&report)?, None, argv, None, &[])?;
    Ok(())
}

fn grid_cmd(a: &GridArgs, argv: &[String]) -> RunResult {
    let schema = load_schema(&a.data)?;
    let family: ModelFamily = a.model.into();
    let kind = family.kind().ok_or_else(|| RunError::Usage("grid search covers kaam and logistic-kan".into()))?;
    let space = match &a.space {
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(Error::from)?
        }
        None => GridSearchSpace::standard(kind),
    };
    let table = load_csv(&a.data.data, &schema)?;
    let opts = prepare_options(&a.data);
    let train_config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr_rate,
        early_stop_patience: a.patience,
        seed: a.data.seed,
        ..TrainConfig::default()
    };
    let result = pipeline::grid_search_table(&table, &schema, kind, &space, &opts, &train_config, a.folds)?;
    let inputs: Vec<&Path> = [Some(a.data.data.as_path()), Some(a.data.schema.as_path()), a.space.as_deref()]
        .into_iter()
        .flatten()
        .collect();
    if let Some(bundle_path) = &a.bundle {
        let req = TrainRequest {
            family,
            train: TrainConfig {
                l1_lambda: result.best.l1_lambda,
                class_balanced: result.best.class_balanced,
                ..train_config.clone()
            },
            model: result.best.clone(),
            prepare: opts,
            distill: true,
        };
        let bundle = pipeline::train_bundle(&table, &schema, &req)?;
        bundle.save(bundle_path)?;
        write_manifest(argv, Some(a.data.seed), &inputs, bundle_path)?;
    }
    emit(&to_json(&result)?, a.out.as_deref(), argv, Some(a.data.seed), &inputs)?;
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, argv: &[String]) -> RunResult {
    require_file(&a.model)?;
    let bundle = ModelBundle::load(&a.model)?;
    let data = match &a.data {
        Some(p) => {
            require_file(p)?;
            let table = load_csv(p, &bundle.schema)?;
            pipeline::encode_table(&bundle, &table)?
        }
        None => bundle.test.dataset(&bundle.preprocessor)?,
    };
    if a.decimals.is_some() && !a.formula {
        return Err(RunError::Usage("--decimals needs --formula".into()));
    }
    let scorer = if a.formula { Scorer::Formula(a.decimals) } else { Scorer::Model };
    let report =
        pipeline::evaluate(&bundle, &data, scorer, &EvaluationOptions { resamples: a.resamples, seed: a.seed })?;
    let inputs: Vec<&Path> = [Some(a.model.as_path()), a.data.as_deref()].into_iter().flatten().collect();
    emit(&to_json(&report)?, a.out.as_deref(), argv, Some(a.seed), &inputs)?;
    Ok(())
}

fn formula_cmd(a: &FormulaArgs, argv: &[String]) -> RunResult {
    require_file(&a.model)?;
    let bundle = ModelBundle::load(&a.model)?;
    let f =
        bundle.formula.as_ref().ok_or_else(|| Error::InvalidInput(format!("{} has no formula", a.model.display())))?;
    let f = match a.decimals {
        Some(d) => f.rounded(d),
        None => f.clone(),
    };
    let text = if a.json { to_json(&f)? } else { format!("{}\n", f.render()) };
    emit(&text, a.out.as_deref(), argv, None, &[&a.model])?;
    Ok(())
}

fn patient_request(model: &LoadedModel, a: &PatientArgs) -> RunResult<PatientRequest> {
    require_file(&a.patient)?;
    let is_json = a.patient.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let covariates = if is_json {
        let text = fs::read_to_string(&a.patient).map_err(|e| Error::io(&a.patient, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
        let obj = v.get("covariates").unwrap_or(&v);
        obj.as_object().cloned().ok_or_else(|| Error::Schema("patient JSON must be an object of covariates".into()))?
    } else {
        let file = fs::File::open(&a.patient).map_err(|e| Error::io(&a.patient, e))?;
        let rows = read_records(file, &model.bundle.schema)?;
        if rows.len() != 1 {
            return Err(Error::Schema(format!("patient file holds {} rows, expected 1", rows.len())).into());
        }
        model.covariates_for(&rows.records[0])?
    };
    Ok(PatientRequest { covariates, class: a.class, neighbors: true, k: Some(a.k), features: None })
}

fn patient_cmd(a: &PatientArgs, argv: &[String], explain: bool) -> RunResult {
    require_file(&a.model)?;
    let id = a.model.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let model = LoadedModel::load(id, &a.model)?;
    let req = patient_request(&model, a)?;
    let text = if explain { to_json(&model.explain(&req)?)? } else { to_json(&model.neighbors(&req)?)? };
    emit(&text, a.out.as_deref(), argv, None, &[&a.model, &a.patient])?;
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> RunResult {
    for p in &a.models {
        require_file(p)?;
    }
    let registry = Arc::new(Registry::load(&a.models)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(crate::training::thread_count())
        .enable_all()
        .build()
        .map_err(|e| Error::io("<runtime>", e))?;
    let addr = std::net::SocketAddr::new(a.host, a.port);
    rt.block_on(crate::service::serve(registry, addr)).map_err(|e| Error::io(addr.to_string(), e))?;
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().skip(1).map(|s| s.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::Train(a) => train_cmd(a, &argv),
        Command::GridSearch(a) => grid_cmd(a, &argv),
        Command::Evaluate(a) => evaluate_cmd(a, &argv),
        Command::Formula(a) => formula_cmd(a, &argv),
        Command::Explain(a) => patient_cmd(a, &argv, true),
        Command::Neighbors(a) => patient_cmd(a, &argv, false),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(RunError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(RunError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
