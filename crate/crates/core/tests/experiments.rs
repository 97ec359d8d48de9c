use std::path::PathBuf;

use corrbalance::experiments::{run_sweep, sweep_label, train_all, ExperimentConfig};
use corrbalance::losses::LossVariant;
use corrbalance::metrics::Protocol;

fn small_longtail() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/longtail.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["data"]["generator"]["num_scenes"] = 150.into();
    v["train"]["epochs"] = 2.into();
    v["train"]["encoder"] = serde_json::Value::Null;
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

#[test]
fn zero_exponent_sweep_point_is_plain_cross_entropy() {
    let mut exp = small_longtail();
    let table = run_sweep(&exp, &[2]).unwrap();
    let n0 = table.row(2, &sweep_label(0.0)).unwrap();
    exp.variants = vec![LossVariant::PlainCe];
    let runs = train_all(&exp, &[2]).unwrap();
    let (_, _, outcome) = &runs[0];
    let (_, result) = outcome.as_ref().unwrap();
    let ce: Vec<f64> = (0..table.num_classes)
        .map(|c| result.class_recall(Protocol::Constrained, c))
        .collect();
    assert_eq!(n0.class_recall, ce);
}

#[test]
fn config_hash_tracks_content() {
    let a = small_longtail();
    let mut b = small_longtail();
    assert_eq!(a.hash(), b.hash());
    b.train.epochs = 3;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn unknown_keys_are_rejected_with_path() {
    let err = ExperimentConfig::from_json(r#"{"train": {"epochs": 1, "bogus": 2}}"#).unwrap_err();
    assert!(err.to_string().contains("train"), "{err}");
}
