//! Regression fixtures for the brute-force oracles.
//!
//! Set `LATENT_ROUTING_WRITE_FIXTURES=1` to (re)freeze the files after the
//! oracle has been verified against its independent checks.

use std::path::PathBuf;

use latent_routing::inference::SearchContext;
use latent_routing::model::{Model, ModelConfig};
use latent_routing::oracle::{self, GridHarness, ORACLE_VERSION};
use latent_routing::problems::{self, generate_instance, ProblemKind};
use serde_json::{json, Value};

fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

fn check(name: &str, seed: u64, values: Value) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(format!("{name}.json"));
    let doc = json!({ "name": name, "seed": seed, "oracle_version": ORACLE_VERSION, "values": values });
    if std::env::var_os("LATENT_ROUTING_WRITE_FIXTURES").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap() + "\n").unwrap();
        return;
    }
    let stored: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(stored["oracle_version"], json!(ORACLE_VERSION), "{name}: oracle version");
    assert_eq!(stored["seed"], json!(seed), "{name}: seed");
    compare(name, &stored["values"], &doc["values"]);
}

fn compare(ctx: &str, a: &Value, b: &Value) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-9, "{ctx}: {x} vs {y}");
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{ctx}: length");
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                compare(&format!("{ctx}[{i}]"), p, q);
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{ctx}: keys");
            for (k, v) in x {
                compare(&format!("{ctx}.{k}"), v, &y[k]);
            }
        }
        _ => assert_eq!(a, b, "{ctx}"),
    }
}

#[test]
fn tsp_seed42_n8_optimum() {
    let inst = generate_instance(ProblemKind::Tsp, 8, 42).unwrap();
    let s = oracle::brute_force_tsp(&inst).unwrap();
    check("tsp_seed42_n8", 42, json!({ "tour": s.visits, "cost": round9(s.cost) }));
}

#[test]
fn tsp_seed42_n6_optimum() {
    let inst = generate_instance(ProblemKind::Tsp, 6, 42).unwrap();
    let s = oracle::brute_force_tsp(&inst).unwrap();
    assert!((problems::cost(&inst, &s.visits).unwrap() - s.cost).abs() < 1e-12);
    check("tsp_seed42_n6", 42, json!({ "tour": s.visits, "cost": round9(s.cost) }));
}

#[test]
fn cvrp_seed7_n6_capacity10_optimum() {
    let mut inst = generate_instance(ProblemKind::Cvrp, 6, 7).unwrap();
    inst.capacity = Some(10.0);
    let s = oracle::brute_force_cvrp(&inst).unwrap();
    check("cvrp_seed7_n6_d10", 7, json!({ "visits": s.visits, "cost": round9(s.cost) }));
}

#[test]
fn tsp_seed7_n7_optimum_across_augmentations() {
    let inst = generate_instance(ProblemKind::Tsp, 7, 7).unwrap();
    let costs: Vec<f64> = problems::augment(&inst)
        .iter()
        .map(|v| round9(oracle::brute_force_tsp(v).unwrap().cost))
        .collect();
    check("tsp_seed7_n7_augmented", 7, json!({ "costs": costs }));
}

#[test]
fn grid_target_5x5_n4_lambda1() {
    let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 1).unwrap();
    let inst = generate_instance(ProblemKind::Tsp, 4, 1).unwrap();
    let h = GridHarness::new(SearchContext::new(&model, &inst).unwrap(), 5, 0.75, 1.0).unwrap();
    let probs: Vec<f64> = h.target.probabilities.iter().map(|&p| round9(p)).collect();
    check(
        "grid_target_5x5_n4_l1",
        1,
        json!({ "tours": h.tours, "grid_side": 5, "spacing": 0.75, "lambda": 1.0, "probabilities": probs }),
    );
}
