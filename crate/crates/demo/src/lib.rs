//! Browser demo bindings. Every export takes plain numbers or strings and
//! returns a JSON string, so the page needs no generated type glue.

use latent_routing::inference::{self, InferenceConfig, Method, SearchContext};
use latent_routing::model::{Model, ModelConfig};
use latent_routing::oracle::{self, GridHarness};
use latent_routing::problems::generate_instance;
use latent_routing::{io, ProblemKind};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn kind(s: &str) -> Result<ProblemKind, JsError> {
    match s {
        "tsp" => Ok(ProblemKind::Tsp),
        "cvrp" => Ok(ProblemKind::Cvrp),
        other => Err(js(format!("unknown problem kind `{other}`"))),
    }
}

/// A model held across calls: a loaded checkpoint or a seeded untrained one.
#[wasm_bindgen]
pub struct Demo {
    model: Model,
    trained: bool,
}

#[wasm_bindgen]
impl Demo {
    /// Untrained desk-scale model for `kind`.
    #[wasm_bindgen(constructor)]
    pub fn new(kind_name: &str, seed: u64) -> Result<Demo, JsError> {
        let model = Model::init(ModelConfig::desk(kind(kind_name)?), seed).map_err(js)?;
        Ok(Demo { model, trained: false })
    }

    /// Model restored from checkpoint JSON written by `train`.
    pub fn from_checkpoint(text: &str) -> Result<Demo, JsError> {
        let (model, _) = io::checkpoint_from_json(text).map_err(js)?;
        Ok(Demo { model, trained: true })
    }

    pub fn describe(&self) -> String {
        json!({
            "kind": self.model.config.kind,
            "d_z": self.model.config.d_z,
            "trained": self.trained,
        })
        .to_string()
    }

    /// Generates an instance, runs `method` and returns coordinates, the
    /// best route, the per-iteration trace and, when small enough, the
    /// exact optimum.
    pub fn solve(&self, n: usize, seed: u64, method: &str, particles: usize, iterations: usize) -> Result<String, JsError> {
        let k = self.model.config.kind;
        let inst = generate_instance(k, n, seed).map_err(js)?;
        let cfg = InferenceConfig {
            particles,
            iterations,
            seed,
            ..InferenceConfig::new(method.parse::<Method>().map_err(js)?, k)
        };
        let out = inference::run(&self.model, &inst, &cfg).map_err(js)?;
        let small = match k {
            ProblemKind::Tsp => n <= 9,
            ProblemKind::Cvrp => n <= 7,
        };
        let optimum = if small {
            Some(oracle::brute_force(&inst).map_err(js)?.cost)
        } else {
            None
        };
        Ok(json!({
            "kind": k,
            "coords": inst.coords,
            "demands": inst.demands,
            "visits": out.best.visits,
            "cost": out.best.cost,
            "optimum": optimum,
            "best": out.trace.iter().map(|r| r.best_cost).collect::<Vec<_>>(),
            "mean": out.trace.iter().map(|r| r.mean_cost).collect::<Vec<_>>(),
            "acceptance": out.trace.iter().map(|r| r.acceptance_rate).collect::<Vec<_>>(),
        })
        .to_string())
    }

    /// Particle cloud (first two latent coordinates) at every iteration.
    pub fn latent_trajectory(&self, n: usize, seed: u64, method: &str, particles: usize, iterations: usize) -> Result<String, JsError> {
        let k = self.model.config.kind;
        let inst = generate_instance(k, n, seed).map_err(js)?;
        let cfg = InferenceConfig {
            particles,
            iterations,
            seed,
            record_latents: true,
            ..InferenceConfig::new(method.parse::<Method>().map_err(js)?, k)
        };
        let out = inference::run(&self.model, &inst, &cfg).map_err(js)?;
        let rows: Vec<_> = out
            .latents
            .iter()
            .map(|r| json!([r.m, r.k, r.z1, r.z2, r.cost, r.accepted]))
            .collect();
        Ok(json!({ "columns": ["m", "k", "z1", "z2", "cost", "accepted"], "rows": rows }).to_string())
    }
}

/// Empirical and exact total-variation curves of the grid-harness chain
/// (tiny TSP model, 4 nodes, 5x5 latent grid) started from one corner.
#[wasm_bindgen]
pub fn grid_tv_curve(chains: usize, steps: usize, lambda: f64, seed: u64) -> Result<String, JsError> {
    let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), 1).map_err(js)?;
    let inst = generate_instance(ProblemKind::Tsp, 4, 1).map_err(js)?;
    let ctx = SearchContext::new(&model, &inst).map_err(js)?;
    let h = GridHarness::new(ctx, 5, 0.75, lambda).map_err(js)?;
    let empirical = h.empirical_tv_curve(chains, steps, 0, seed).map_err(js)?;
    let kernel = h.kernel();
    let mut law = vec![0.0; h.states()];
    for (t, p) in h.policy[0].iter().enumerate() {
        law[h.state(0, t)] = *p;
    }
    let mut exact = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        exact.push(
            0.5 * law
                .iter()
                .zip(&h.target.probabilities)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>(),
        );
        law = oracle::push_forward(&kernel, &law);
    }
    Ok(json!({
        "empirical": empirical,
        "exact": exact,
        "balance": oracle::detailed_balance_check(&kernel, &h.target.probabilities, 2000, seed),
    })
    .to_string())
}
