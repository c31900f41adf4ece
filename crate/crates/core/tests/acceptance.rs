//! Acceptance harness: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Datasets other than Breast Cancer are read from `KAAMLAB_DATA_DIR`
//! (default `tests/data`) as `<name>.csv` plus `<name>.schema.json`.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use kaamlab::data::{load_csv, ColumnPlan, FeatureKind, ModelBundle, Schema};
use kaamlab::interpret::nearest_patients;
use kaamlab::kaam::Kaam;
use kaamlab::kan::{LogisticKan, ModelConfig, TrainableModel};
use kaamlab::metrics::{mrr, roc_auc_binary, MetricReport, RankTable, TiePolicy};
use kaamlab::pipeline::{evaluate, train_bundle, EvaluationOptions, ModelFamily, Scorer, TrainRequest};
use kaamlab::service::{router, LoadedModel, PatientRequest, Registry};
use kaamlab::spline::BSplineBasis;
use kaamlab::training::{lr_gradient, lr_negative_log_likelihood, train, TrainConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use tower::ServiceExt;

type Verdict = Result<(bool, String), String>;

fn data_dir() -> PathBuf {
    std::env::var_os("KAAMLAB_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data"))
}

fn dataset(name: &str) -> Result<(kaamlab::data::RawTable, Schema), String> {
    let dir = data_dir();
    let csv = dir.join(format!("{name}.csv"));
    let schema = dir.join(format!("{name}.schema.json"));
    if !csv.exists() || !schema.exists() {
        return Err(format!("dataset not found: {} and {}", csv.display(), schema.display()));
    }
    let schema = Schema::load(&schema).map_err(|e| e.to_string())?;
    let table = load_csv(&csv, &schema).map_err(|e| e.to_string())?;
    Ok((table, schema))
}

fn breast_cancer() -> (kaamlab::data::RawTable, Schema) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let schema = Schema::load(&dir.join("breast_cancer.schema.json")).unwrap();
    (load_csv(&dir.join("breast_cancer.csv"), &schema).unwrap(), schema)
}

fn test_report(bundle: &ModelBundle, scorer: Scorer) -> Result<MetricReport, String> {
    let test = bundle.test.dataset(&bundle.preprocessor).map_err(|e| e.to_string())?;
    evaluate(bundle, &test, scorer, &EvaluationOptions::default()).map_err(|e| e.to_string())
}

fn points(r: &MetricReport) -> Vec<(&'static str, f64)> {
    r.rows().into_iter().filter_map(|(k, v)| v.map(|v| (k, v.point))).collect()
}

fn point(r: &MetricReport, name: &str) -> f64 {
    points(r).into_iter().find(|(k, _)| *k == name).map_or(f64::NAN, |(_, v)| v)
}

// ---- trained models ----

fn breast_cancer_kaam(bc_bundle: &ModelBundle, elapsed: Duration) -> Verdict {
    let r = test_report(bc_bundle, Scorer::Model)?;
    let (acc, auc) = (r.accuracy.point, r.roc_auc.map_or(f64::NAN, |a| a.point));
    let ok = acc >= 0.93 && auc >= 0.97 && elapsed < Duration::from_secs(300);
    Ok((
        ok,
        format!(
            "accuracy {acc:.3} (>= 0.93), auc {auc:.3} (>= 0.97), {:.1}s single-threaded (< 300s)",
            elapsed.as_secs_f64()
        ),
    ))
}

fn obesity_bin_lkan() -> Verdict {
    let (table, schema) = dataset("obesity_bin")?;
    let req = TrainRequest::new(ModelFamily::LogisticKan, ModelConfig::default(), 0);
    let bundle = train_bundle(&table, &schema, &req).map_err(|e| e.to_string())?;
    let acc = test_report(&bundle, Scorer::Model)?.accuracy.point;
    Ok((acc >= 0.98, format!("accuracy {acc:.3} (>= 0.98)")))
}

fn heart_bundle() -> Result<ModelBundle, String> {
    let (table, schema) = dataset("heart")?;
    let cfg = ModelConfig { class_balanced: true, ..ModelConfig::default() };
    let req = TrainRequest::new(ModelFamily::Kaam, cfg, 0);
    train_bundle(&table, &schema, &req).map_err(|e| e.to_string())
}

fn heart_kaam(heart: &Result<ModelBundle, String>) -> Verdict {
    let bundle = heart.as_ref().map_err(Clone::clone)?;
    let r = test_report(bundle, Scorer::Model)?;
    let (auc, recall) = (point(&r, "roc_auc"), r.recall.point);
    Ok((auc >= 0.84 && recall >= 0.70, format!("auc {auc:.3} (>= 0.84), recall {recall:.3} (>= 0.70)")))
}

fn parity(bundle: &ModelBundle) -> Verdict {
    let model = test_report(bundle, Scorer::Model)?;
    let formula = test_report(bundle, Scorer::Formula(Some(3)))?;
    let mut worst = ("", 0.0f64);
    for ((k, a), (_, b)) in points(&model).into_iter().zip(points(&formula)) {
        let d = (a - b).abs();
        if d >= worst.1 {
            worst = (k, d);
        }
    }
    Ok((worst.1 <= 0.05, format!("largest drift {:.3} on {} (<= 0.05)", worst.1, worst.0)))
}

fn symbolic_parity(heart: &Result<ModelBundle, String>) -> Verdict {
    parity(heart.as_ref().map_err(Clone::clone)?)
}

// ---- gradients ----

fn random_data(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

fn names(n: usize, prefix: &str) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Relative error with the denominator floored so exact zeros compare equal.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference gradients
/// of `upstream . logits` over every parameter and input.
fn check_model<M: TrainableModel>(
    model: &M,
    backward: impl Fn(&M, &[f64]) -> (Vec<f64>, Vec<f64>),
    x: &[f64],
    upstream: &[f64],
) -> (f64, usize) {
    const H: f64 = 1e-5;
    let objective = |m: &M, x: &[f64]| -> f64 { m.logits_fast(x).iter().zip(upstream).map(|(l, u)| l * u).sum() };
    let (gp, gx) = backward(model, x);
    let mut worst = 0.0f64;
    let nonzero = gp.iter().chain(&gx).filter(|g| g.abs() > 1e-6).count();
    let params = model.parameters();
    let mut probe = model.clone();
    for k in 0..params.len() {
        let mut p = params.clone();
        p[k] += H;
        probe.set_parameters(&p);
        let up = objective(&probe, x);
        p[k] -= 2.0 * H;
        probe.set_parameters(&p);
        let down = objective(&probe, x);
        worst = worst.max(rel_err(gp[k], (up - down) / (2.0 * H)));
    }
    for k in 0..x.len() {
        let mut xp = x.to_vec();
        xp[k] += H;
        let up = objective(model, &xp);
        xp[k] -= 2.0 * H;
        let down = objective(model, &xp);
        worst = worst.max(rel_err(gx[k], (up - down) / (2.0 * H)));
    }
    (worst, nonzero)
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut entries = 0usize;
    for case in 0..100 {
        let inputs = rng.random_range(1..=4);
        let classes = rng.random_range(2..=4);
        let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=3)).collect();
        let additive = hidden.is_empty() && rng.random_bool(0.5);
        let cfg = ModelConfig {
            hidden_sizes: hidden,
            grid_points: rng.random_range(1..=6),
            degree: rng.random_range(2..=3),
            ..ModelConfig::default()
        };
        let data = random_data(&mut rng, 30, inputs);
        let x: Vec<f64> = (0..inputs).map(|_| rng.random_range(-1.5..1.5)).collect();
        let upstream: Vec<f64> = (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = if additive {
            let mut m = Kaam::init(&cfg, data.view(), names(inputs, "x"), names(classes, "c"), case).unwrap();
            for p in 0..classes {
                m.set_bias(p, rng.random_range(-1.0..1.0));
            }
            check_model(
                &m,
                |m, x| {
                    let g = m.backward(x, &upstream).unwrap();
                    (g.flatten(), g.input)
                },
                &x,
                &upstream,
            )
        } else {
            let m = LogisticKan::init(&cfg, data.view(), names(inputs, "x"), names(classes, "c"), case).unwrap();
            check_model(
                &m,
                |m, x| {
                    let g = m.backward(x, &upstream).unwrap();
                    (g.flatten(), g.input)
                },
                &x,
                &upstream,
            )
        };
        worst = worst.max(err.0);
        entries += err.1;
    }
    let t = start.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-4 && t < 30.0,
        format!("100 cases, {entries} nonzero gradient entries, worst relative error {worst:.2e} (<= 1e-4), {t:.2}s (< 30s)"),
    ))
}

// ---- splines ----

fn spline_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_sum = 0.0f64;
    let mut worst_dsum = 0.0f64;
    let mut negative = 0usize;
    let mut support = 0usize;
    for _ in 0..10_000 {
        let degree = rng.random_range(1..=3);
        let intervals = rng.random_range(1..=8);
        let lo = rng.random_range(-5.0..0.0);
        let hi = lo + rng.random_range(0.1..5.0);
        let basis = BSplineBasis::new(degree, intervals, lo, hi).unwrap();
        let x = rng.random_range(lo..=hi);
        let b = basis.eval(x).unwrap();
        worst_sum = worst_sum.max((b.iter().sum::<f64>() - 1.0).abs());
        negative += b.iter().filter(|&&v| v < 0.0).count();
        // B_i is supported on [t_i, t_{i+degree+1}].
        let t = basis.knots();
        support += b.iter().enumerate().filter(|(i, &v)| v != 0.0 && !(t[*i] <= x && x <= t[i + degree + 1])).count();
        support += usize::from(b.iter().filter(|&&v| v != 0.0).count() > degree + 1);
        let d = basis.derivative(x).unwrap();
        let scale = d.iter().map(|v| v.abs()).fold(1.0, f64::max);
        worst_dsum = worst_dsum.max(d.iter().sum::<f64>().abs() / scale);
    }
    let ok = worst_sum < 1e-9 && negative == 0 && support == 0 && worst_dsum < 1e-9;
    Ok((
        ok,
        format!(
            "10000 samples: max |sum - 1| {worst_sum:.1e}, negatives {negative}, support violations {support}, max |sum d| {worst_dsum:.1e}"
        ),
    ))
}

// ---- structure ----

fn structural_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = random_data(&mut rng, 50, 4);
    let mut kaam = Kaam::init(&ModelConfig::default(), data.view(), names(4, "x"), names(3, "c"), 9).unwrap();
    for p in 0..3 {
        kaam.set_bias(p, rng.random_range(-2.0..2.0));
    }
    let lkan = kaam.to_logistic_kan().map_err(|e| e.to_string())?;
    let back = Kaam::from_logistic_kan(&lkan).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = kaam.predict_proba(&x).unwrap();
        for b in [lkan.predict_proba(&x).unwrap(), back.predict_proba(&x).unwrap()] {
            worst = worst.max(a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
        }
    }

    let binary = LogisticKan::init(&ModelConfig::default(), data.view(), names(4, "x"), names(2, "c"), 3).unwrap();
    let bk = Kaam::from_logistic_kan(&binary).map_err(|e| e.to_string())?;
    let mut worst_binary = 0.0f64;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        worst_binary =
            worst_binary.max((binary.predict_binary(&x).unwrap() - binary.predict_proba(&x).unwrap()[1]).abs());
        worst_binary = worst_binary.max((bk.predict_binary(&x).unwrap() - bk.predict_proba(&x).unwrap()[1]).abs());
    }
    Ok((
        worst <= 1e-10 && worst_binary <= 1e-12,
        format!("KAAM vs Logistic-KAN {worst:.1e} (<= 1e-10), binary head {worst_binary:.1e} (<= 1e-12)"),
    ))
}

// ---- oracles ----

fn auc_by_pairs(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// Table of mean metrics per dataset (rows) and model (MLP, LR, RF, NAM,
/// Logistic-KAN, KAAM); metrics are accuracy, AUC, F1, precision, recall.
const PUBLISHED: [(&str, [Option<[f64; 5]>; 6]); 6] = [
    (
        "Heart",
        [
            Some([0.90, 0.38, 0.00, 0.00, 0.00]),
            Some([0.79, 0.89, 0.44, 0.31, 0.81]),
            Some([0.90, 0.90, 0.54, 0.52, 0.57]),
            Some([0.90, 0.38, 0.00, 0.00, 0.00]),
            Some([0.84, 0.91, 0.56, 0.40, 0.95]),
            Some([0.82, 0.90, 0.49, 0.35, 0.86]),
        ],
    ),
    (
        "Diabetes-H",
        [
            Some([0.81, 0.58, 0.75, 0.71, 0.81]),
            Some([0.80, 0.70, 0.81, 0.81, 0.80]),
            Some([0.85, 0.66, 0.82, 0.81, 0.85]),
            None,
            Some([0.82, 0.68, 0.75, 0.73, 0.82]),
            Some([0.82, 0.68, 0.75, 0.73, 0.82]),
        ],
    ),
    (
        "Diabetes-130",
        [
            Some([0.52, 0.53, 0.45, 0.44, 0.52]),
            Some([0.55, 0.53, 0.50, 0.51, 0.55]),
            Some([0.52, 0.53, 0.51, 0.51, 0.52]),
            None,
            Some([0.51, 0.49, 0.46, 0.46, 0.51]),
            Some([0.55, 0.53, 0.51, 0.55, 0.55]),
        ],
    ),
    (
        "Obesity",
        [
            Some([0.56, 0.88, 0.55, 0.56, 0.56]),
            Some([0.70, 0.92, 0.68, 0.68, 0.70]),
            Some([0.91, 1.00, 0.91, 0.92, 0.91]),
            None,
            Some([0.98, 1.00, 0.98, 0.98, 0.98]),
            Some([0.95, 1.00, 0.95, 0.95, 0.95]),
        ],
    ),
    (
        "Obesity-Bin",
        [
            Some([0.86, 0.93, 0.86, 0.88, 0.83]),
            Some([1.00, 1.00, 1.00, 0.99, 1.00]),
            Some([0.99, 1.00, 0.99, 0.99, 0.99]),
            Some([0.50, 0.89, 0.00, 0.00, 0.00]),
            Some([1.00, 1.00, 1.00, 1.00, 1.00]),
            Some([1.00, 1.00, 1.00, 1.00, 1.00]),
        ],
    ),
    (
        "Breast Cancer",
        [
            Some([0.94, 0.98, 0.95, 0.92, 0.98]),
            Some([0.96, 1.00, 0.96, 0.97, 0.96]),
            Some([0.95, 1.00, 0.96, 0.97, 0.95]),
            Some([0.92, 0.98, 0.93, 0.91, 0.96]),
            Some([0.97, 0.99, 0.98, 0.97, 0.99]),
            Some([0.96, 1.00, 0.97, 0.97, 0.97]),
        ],
    ),
];

const MODELS: [&str; 6] = ["MLP", "LR", "RF", "NAM", "Logistic-KAN", "KAAM"];

fn published_table() -> RankTable {
    let mut tasks = Vec::new();
    let mut values = Vec::new();
    for (ds, rows) in PUBLISHED {
        for (k, metric) in ["accuracy", "roc_auc", "f1", "precision", "recall"].iter().enumerate() {
            tasks.push(format!("{ds}/{metric}"));
            values.push(rows.iter().map(|r| r.map(|r| r[k])).collect());
        }
    }
    RankTable::new(tasks, MODELS.iter().map(|s| s.to_string()).collect(), values, true).unwrap()
}

fn order(scores: &[f64]) -> Vec<&'static str> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.into_iter().map(|i| MODELS[i]).collect()
}

fn oracle_suites() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // AUC against pair counting, with heavy ties.
    let mut auc_exact = true;
    for _ in 0..200 {
        let n = rng.random_range(4..60);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8)) / 8.0).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        pos[0] = true;
        pos[1] = false;
        auc_exact &= roc_auc_binary(&scores, &pos).unwrap() == auc_by_pairs(&scores, &pos);
    }

    // Nearest patients against a full scan.
    let data = random_data(&mut rng, 120, 5);
    let kaam = Kaam::init(&ModelConfig::default(), data.view(), names(5, "x"), names(2, "c"), 1).unwrap();
    let delta = kaam.explanation_matrix(data.view(), 1, None).unwrap();
    let mut knn_exact = true;
    for q in 0..40 {
        let query: Vec<f64> = delta.values().row(q).to_vec();
        let got: Vec<usize> = nearest_patients(&delta, &query, 10).unwrap().neighbors.iter().map(|n| n.row).collect();
        let mut all: Vec<(f64, usize)> = delta
            .values()
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        knn_exact &= got == all.iter().take(10).map(|p| p.1).collect::<Vec<_>>();
    }

    // Trivial rank tables.
    let two = |first: f64, second: f64| {
        RankTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["m".into(), "n".into()],
            vec![vec![Some(first), Some(second)]; 3],
            true,
        )
        .unwrap()
    };
    let trivial = mrr(&two(0.9, 0.1), TiePolicy::Average).unwrap() == vec![1.0, 0.5]
        && mrr(&two(0.1, 0.9), TiePolicy::Average).unwrap() == vec![0.5, 1.0];

    let table = published_table();
    let avg = mrr(&table, TiePolicy::Average).unwrap();
    let min = mrr(&table, TiePolicy::Min).unwrap();
    let lkan_top = order(&avg)[0] == "Logistic-KAN";
    let proposed_lead = order(&avg)[..2] == ["Logistic-KAN", "KAAM"];
    let ok = auc_exact && knn_exact && trivial && lkan_top && proposed_lead;
    Ok((
        ok,
        format!(
            "auc exact {auc_exact}, neighbours exact {knn_exact}, trivial mrr {trivial}; overall mrr (average ties) {} -> {:?}; \
             Logistic-KAN {:.3} (min ties {:.3}, published 0.71)",
            MODELS.iter().zip(&avg).map(|(m, v)| format!("{m} {v:.3}")).collect::<Vec<_>>().join(", "),
            order(&avg),
            avg[4],
            min[4],
        ),
    ))
}

// ---- logistic regression ----

fn lr_recovery() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, m) = (rng.random_range(5..40), rng.random_range(1..6));
        let x = random_data(&mut rng, n, m);
        let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let beta: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = lr_gradient(&beta, x.view(), &y).unwrap();
        for k in 0..m {
            let h = 1e-6;
            let mut b = beta.clone();
            b[k] += h;
            let up = lr_negative_log_likelihood(&b, x.view(), &y).unwrap();
            b[k] -= 2.0 * h;
            let down = lr_negative_log_likelihood(&b, x.view(), &y).unwrap();
            worst = worst.max(rel_err(g[k], (up - down) / (2.0 * h)));
        }
    }

    // Separable set: label is the side of a fixed hyperplane, with a margin.
    let w = [1.0, -2.0, 0.5];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    while labels.len() < 300 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        if s.abs() > 0.2 {
            labels.push(usize::from(s > 0.0));
            rows.extend(x);
        }
    }
    let x = Array2::from_shape_vec((300, 3), rows).unwrap();
    let cfg = ModelConfig { degree: 1, ..ModelConfig::default() };
    let mut m = LogisticKan::init(&cfg, x.view(), names(3, "x"), names(2, "c"), 4).unwrap();
    let tc = TrainConfig { epochs: 500, early_stop_patience: 0, learning_rate: 5e-2, ..TrainConfig::for_model(&cfg) };
    train(&mut m, x.view(), &labels, &tc).map_err(|e| e.to_string())?;
    let hits = x
        .rows()
        .into_iter()
        .zip(&labels)
        .filter(|(r, &y)| usize::from(m.predict_binary(&r.to_vec()).unwrap() >= 0.5) == y)
        .count();
    let acc = hits as f64 / labels.len() as f64;
    Ok((
        worst <= 1e-6 && acc >= 0.99,
        format!(
            "gradient worst relative error {worst:.1e} (<= 1e-6), degree-1 Logistic-KAN accuracy {acc:.3} (>= 0.99)"
        ),
    ))
}

// ---- determinism ----

fn determinism(first: &ModelBundle) -> Verdict {
    let (table, schema) = breast_cancer();
    let second = train_bundle(&table, &schema, &bc_request()).map_err(|e| e.to_string())?;
    let same_bytes = first.to_json().unwrap() == second.to_json().unwrap();
    let same_report = test_report(first, Scorer::Model)? == test_report(&second, Scorer::Model)?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("bc.json");
    first.save(&path).map_err(|e| e.to_string())?;
    let loaded = ModelBundle::load(&path).map_err(|e| e.to_string())?;
    let round_trip = &loaded == first && loaded.to_json().unwrap() == std::fs::read(&path).unwrap();
    let test = first.test.dataset(&first.preprocessor).unwrap();
    let same_probs = first.model.predict_proba_matrix(test.x.view()).unwrap()
        == loaded.model.predict_proba_matrix(test.x.view()).unwrap();
    Ok((
        same_bytes && same_report && round_trip && same_probs,
        format!(
            "bundles identical {same_bytes}, reports identical {same_report}, round trip exact {}",
            round_trip && same_probs
        ),
    ))
}

// ---- service ----

fn random_patient(model: &LoadedModel, rng: &mut ChaCha8Rng) -> Map<String, Value> {
    let info = model.info();
    let mut out = Map::new();
    for (f, fi) in model.bundle.preprocessor.features().iter().zip(&info.features) {
        let v = match &f.plan {
            ColumnPlan::Numeric { .. } => {
                let (lo, hi) = fi.range.unwrap();
                let x = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                if f.spec.kind == FeatureKind::Integer {
                    json!(x.round())
                } else {
                    json!(x)
                }
            }
            ColumnPlan::Binary { values, .. } => json!(values[rng.random_range(0..values.len())]),
            ColumnPlan::Categorical { vocabulary } => json!(vocabulary[rng.random_range(0..vocabulary.len())]),
        };
        out.insert(f.spec.name.clone(), v);
    }
    out
}

fn service_conformance(bundle: &ModelBundle) -> Verdict {
    let model = LoadedModel::new("bc", bundle.clone()).map_err(|e| e.to_string())?;
    let registry = Arc::new(Registry::new(vec![model]).map_err(|e| e.to_string())?);
    let m = registry.get("bc").unwrap().clone();
    let rt = tokio::runtime::Builder::new_current_thread().build().map_err(|e| e.to_string())?;
    let call = |method: &str, uri: String, body: Option<Vec<u8>>| {
        let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
        let req = req.body(body.map_or_else(Body::empty, Body::from)).unwrap();
        rt.block_on(async {
            let resp = router(registry.clone()).oneshot(req).await.unwrap();
            let status = resp.status();
            (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
        })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0usize;
    let mut mismatches = Vec::new();
    for endpoint in ["predict", "explain/radar", "explain/pdp", "neighbors", "importance", "formula", "prediction-bars"]
    {
        for _ in 0..50 {
            let req = PatientRequest {
                covariates: random_patient(&m, &mut rng),
                class: Some(rng.random_range(0..2)),
                neighbors: rng.random_bool(0.5),
                k: Some(rng.random_range(1..=8)),
                features: None,
            };
            let body = serde_json::to_vec(&req).unwrap();
            let (uri, payload, expected) = match endpoint {
                "predict" => (endpoint.to_string(), Some(body), ser(&m.predict(&req).unwrap())),
                "explain/radar" => (endpoint.to_string(), Some(body), ser(&m.radar(&req).unwrap())),
                "explain/pdp" => (endpoint.to_string(), Some(body), ser(&m.pdp(&req).unwrap())),
                "neighbors" => (endpoint.to_string(), Some(body), ser(&m.neighbors(&req).unwrap())),
                "importance" => {
                    let c = rng.random_range(0..2);
                    (format!("importance?class={c}"), None, ser(&m.importance(Some(c)).unwrap()))
                }
                "formula" => {
                    let d = rng.random_range(0..6);
                    (format!("formula?decimals={d}"), None, ser(&m.formula(Some(d)).unwrap()))
                }
                _ => {
                    let t: f64 = f64::from(rng.random_range(1..100)) / 100.0;
                    (format!("prediction-bars?threshold={t}"), None, ser(&m.prediction_bars(t).unwrap()))
                }
            };
            let method = if payload.is_some() { "POST" } else { "GET" };
            let (status, got) = call(method, format!("/models/bc/{uri}"), payload);
            checked += 1;
            if status != StatusCode::OK || got != expected {
                mismatches.push(endpoint);
            }
        }
    }
    let (status, got) = call("GET", "/models".into(), None);
    let list_ok = status == StatusCode::OK && got == serde_json::to_vec(&registry.list()).unwrap();
    mismatches.dedup();
    Ok((
        mismatches.is_empty() && list_ok,
        format!(
            "{checked} requests over 7 endpoints (50 patients each) plus /models; mismatched endpoints {mismatches:?}"
        ),
    ))
}

fn ser<T: serde::Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).unwrap()
}

fn bc_request() -> TrainRequest {
    TrainRequest::new(ModelFamily::Kaam, ModelConfig::default(), 0)
}

fn main() {
    std::env::set_var("KAAMLAB_THREADS", "1");
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("fresh global pool");

    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let (table, schema) = breast_cancer();
    let start = Instant::now();
    let bc = train_bundle(&table, &schema, &bc_request());
    let elapsed = start.elapsed();
    let bc = match bc {
        Ok(b) => b,
        Err(e) => {
            println!("FAIL  breast cancer KAAM: training failed: {e}");
            std::process::exit(1);
        }
    };
    results.push(("breast cancer KAAM", breast_cancer_kaam(&bc, elapsed)));
    results.push(("obesity-bin Logistic-KAN", obesity_bin_lkan()));
    let heart = heart_bundle();
    results.push(("heart KAAM (balanced)", heart_kaam(&heart)));
    results.push(("symbolic parity (heart)", symbolic_parity(&heart)));
    results.push(("gradient suite", gradient_suite()));
    results.push(("spline invariants", spline_invariants()));
    results.push(("structural equivalence", structural_equivalence()));
    results.push(("oracle suites", oracle_suites()));
    results.push(("lr recovery", lr_recovery()));
    results.push(("determinism", determinism(&bc)));
    results.push(("service conformance", service_conformance(&bc)));

    let mut failed = 0;
    for (name, verdict) in &results {
        let (ok, detail) = match verdict {
            Ok((ok, d)) => (*ok, d.clone()),
            Err(e) => (false, e.clone()),
        };
        failed += usize::from(!ok);
        println!("{}  {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if let Ok((_, d)) = parity(&bc) {
        println!("info  symbolic parity (breast cancer): {d}");
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
