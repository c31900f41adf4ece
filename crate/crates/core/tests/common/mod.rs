#![allow(dead_code)]

use std::path::PathBuf;

use kaamlab::data::{load_csv, read_csv, ModelBundle, PrepareOptions, RawTable, Schema};
use kaamlab::kan::ModelConfig;
use kaamlab::pipeline::{train_bundle, ModelFamily, TrainRequest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn breast_cancer() -> (RawTable, Schema) {
    let dir = data_dir();
    let schema = Schema::load(&dir.join("breast_cancer.schema.json")).unwrap();
    (load_csv(&dir.join("breast_cancer.csv"), &schema).unwrap(), schema)
}

pub fn quick_request(family: ModelFamily, epochs: usize, seed: u64) -> TrainRequest {
    let mut r = TrainRequest::new(family, ModelConfig { grid_points: 3, ..ModelConfig::default() }, seed);
    r.train.epochs = epochs;
    r
}

pub fn breast_cancer_bundle(epochs: usize) -> ModelBundle {
    let (t, s) = breast_cancer();
    train_bundle(&t, &s, &quick_request(ModelFamily::Kaam, epochs, 3)).unwrap()
}

/// Three-class table mixing every feature kind, with a few blanks.
pub fn mixed_table(rows: usize, seed: u64) -> (RawTable, Schema) {
    let schema = Schema::from_json(
        r#"{"target": "grade", "positive_class": ["low", "mid", "high"], "id_column": "pid",
            "features": [
              {"name": "age", "kind": "integer"},
              {"name": "bmi", "kind": "continuous"},
              {"name": "smoker", "kind": "binary", "categories": ["no", "yes"]},
              {"name": "region", "kind": "categorical"}]}"#,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regions = ["north", "south", "east"];
    let mut csv = String::from("pid,age,bmi,smoker,region,grade\n");
    for i in 0..rows {
        let age: i32 = rng.random_range(20..80);
        let bmi: f64 = rng.random_range(18.0..40.0);
        let smoker = rng.random_bool(0.3);
        let region = regions[rng.random_range(0..3)];
        let score = (age as f64 - 50.0) / 15.0
            + (bmi - 29.0) / 5.0
            + if smoker { 1.0 } else { 0.0 }
            + if region == "south" { 0.5 } else { 0.0 }
            + rng.random_range(-0.7..0.7);
        let grade = if score < -0.5 {
            "low"
        } else if score < 0.8 {
            "mid"
        } else {
            "high"
        };
        let bmi_cell = if i % 37 == 5 { String::new() } else { format!("{bmi:.2}") };
        csv.push_str(&format!("p{i},{age},{bmi_cell},{},{region},{grade}\n", if smoker { "yes" } else { "no" }));
    }
    (read_csv(csv.as_bytes(), &schema).unwrap(), schema)
}

pub fn mixed_bundle(family: ModelFamily) -> ModelBundle {
    let (t, s) = mixed_table(240, 5);
    let mut req = quick_request(family, 150, 9);
    req.prepare = PrepareOptions { seed: 9, ..PrepareOptions::default() };
    train_bundle(&t, &s, &req).unwrap()
}

/// Binary logistic-regression bundle on the mixed table (high grade vs rest).
pub fn mixed_bundle_binary_lr() -> ModelBundle {
    let (t, mut s) = mixed_table(240, 6);
    s.positive_class = Some(kaamlab::data::ClassSpec::Positive("high".into()));
    train_bundle(&t, &s, &quick_request(ModelFamily::Lr, 0, 2)).unwrap()
}
