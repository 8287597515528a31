//! Named property suites run by `verify`. Each returns a list of [`Check`]s;
//! a suite passes when every check does.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use latent_routing::gradcheck;
use latent_routing::inference::{self, InferenceConfig, Method, SearchContext};
use latent_routing::model::{Model, ModelConfig};
use latent_routing::oracle::{self, GridHarness};
use latent_routing::problems::{self, generate_instance};
use latent_routing::rng::{self, Purpose};
use latent_routing::ProblemKind;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::manifest::{self, Manifest};
use crate::{commands, CliResult, Ctx};

/// Grid harness used by the kernel suites: tiny TSP model and instance,
/// both seeded 1, with 4 nodes and `d_z = 2`.
pub const HARNESS_MODEL_SEED: u64 = 1;
pub const HARNESS_INSTANCE_SEED: u64 = 1;
pub const HARNESS_NODES: usize = 4;
pub const HARNESS_SIDE: usize = 5;
/// Grid spacing in prior standard deviations.
pub const HARNESS_SPACING: f64 = 0.75;
pub const HARNESS_LAMBDA: f64 = 1.0;
pub const BALANCE_PAIRS: usize = 10_000;
/// Independent chains behind each empirical law.
pub const EMPIRICAL_CHAINS: usize = 20_000;
/// Steps by which the empirical TV must fall below [`EMPIRICAL_TV`].
pub const EMPIRICAL_STEPS: usize = 40;
pub const EMPIRICAL_TV: f64 = 0.05;
pub const NORMALIZATION_CASES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Balance,
    Stationarity,
    Convergence,
    Normalization,
    Gradients,
    Augmentation,
    Reproduce,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Balance => "balance",
            Suite::Stationarity => "stationarity",
            Suite::Convergence => "convergence",
            Suite::Normalization => "normalization",
            Suite::Gradients => "gradients",
            Suite::Augmentation => "augmentation",
            Suite::Reproduce => "reproduce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    /// `value < threshold`.
    Below,
    /// `value > threshold`.
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub relation: Relation,
    pub pass: bool,
    /// Enough context to rerun the failing case.
    pub case: Value,
}

impl Check {
    pub fn new(suite: Suite, name: impl Into<String>, value: f64, relation: Relation, threshold: f64, case: Value) -> Self {
        let pass = match relation {
            Relation::Below => value < threshold,
            Relation::Above => value > threshold,
        };
        Check {
            suite: suite.name().into(),
            name: name.into(),
            value,
            threshold,
            relation,
            pass,
            case,
        }
    }

    pub fn line(&self) -> String {
        let rel = match self.relation {
            Relation::Below => "<",
            Relation::Above => ">",
        };
        format!(
            "{} {}/{}: {:.3e} {rel} {:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.value,
            self.threshold
        )
    }
}

/// The documented grid harness.
pub fn harness() -> latent_routing::Result<GridHarness> {
    let model = Model::init(ModelConfig::tiny(ProblemKind::Tsp, 2), HARNESS_MODEL_SEED)?;
    let inst = generate_instance(ProblemKind::Tsp, HARNESS_NODES, HARNESS_INSTANCE_SEED)?;
    GridHarness::new(SearchContext::new(&model, &inst)?, HARNESS_SIDE, HARNESS_SPACING, HARNESS_LAMBDA)
}

fn harness_case(seed: u64) -> Value {
    json!({
        "model_seed": HARNESS_MODEL_SEED,
        "instance_seed": HARNESS_INSTANCE_SEED,
        "nodes": HARNESS_NODES,
        "side": HARNESS_SIDE,
        "spacing": HARNESS_SPACING,
        "lambda": HARNESS_LAMBDA,
        "seed": seed,
    })
}

pub fn balance(seed: u64) -> latent_routing::Result<Vec<Check>> {
    let h = harness()?;
    let pi = &h.target.probabilities;
    let case = harness_case(seed);
    Ok(vec![
        Check::new(
            Suite::Balance,
            "detailed_balance",
            oracle::detailed_balance_check(&h.kernel(), pi, BALANCE_PAIRS, seed),
            Relation::Below,
            1e-10,
            case.clone(),
        ),
        Check::new(
            Suite::Balance,
            "negative_control_without_prior_ratio",
            oracle::detailed_balance_check(&h.corrupted_kernel(), pi, BALANCE_PAIRS, seed),
            Relation::Above,
            1e-3,
            case,
        ),
    ])
}

pub fn stationarity(seed: u64) -> latent_routing::Result<Vec<Check>> {
    let h = harness()?;
    let case = harness_case(seed);
    let exact = oracle::stationarity_tv(&h.kernel(), &h.target.probabilities);
    let curve = h.empirical_tv_curve(EMPIRICAL_CHAINS, EMPIRICAL_STEPS, 0, seed)?;
    let mut c = case.clone();
    c["chains"] = json!(EMPIRICAL_CHAINS);
    c["steps"] = json!(EMPIRICAL_STEPS);
    c["curve"] = json!(curve);
    Ok(vec![
        Check::new(Suite::Stationarity, "exact_pi_p_tv", exact, Relation::Below, 1e-10, case),
        Check::new(
            Suite::Stationarity,
            "empirical_tv_at_m",
            curve[EMPIRICAL_STEPS],
            Relation::Below,
            EMPIRICAL_TV,
            c.clone(),
        ),
        Check::new(
            Suite::Stationarity,
            "log_tv_slope",
            oracle::log_slope(&curve),
            Relation::Below,
            0.0,
            c,
        ),
    ])
}

/// Full guided search on the grid, including decoder updates, compared with
/// the target at the final decoder.
pub fn convergence(seed: u64) -> latent_routing::Result<Vec<Check>> {
    const CHAINS: usize = 5_000;
    const STEPS: usize = 150;
    const STEP0: f64 = 1e-4;
    let h = harness()?;
    let (tv, updates) = h.lgs_final_tv(CHAINS, STEPS, 0, &inference::DEFAULT_SCHEDULE, STEP0, seed)?;
    let mut case = harness_case(seed);
    case["chains"] = json!(CHAINS);
    case["steps"] = json!(STEPS);
    case["sa_step0"] = json!(STEP0);
    case["updates"] = json!(updates);
    Ok(vec![Check::new(
        Suite::Convergence,
        "lgs_final_tv",
        tv,
        Relation::Below,
        0.1,
        case,
    )])
}

/// Random tiny-model policies on small TSP and CVRP instances sum to one.
pub fn normalization(seed: u64) -> latent_routing::Result<Vec<Check>> {
    let mut r = rng::stream(seed, Purpose::Harness, 0, 0);
    let mut worst: f64 = 0.0;
    let mut worst_case = json!(null);
    for i in 0..NORMALIZATION_CASES {
        let (kind, n) = if i % 2 == 0 {
            (ProblemKind::Tsp, 3 + (i / 2) % 5)
        } else {
            (ProblemKind::Cvrp, 2 + (i / 2) % 4)
        };
        let s = rng::derive(seed, Purpose::Harness, i as u64, 1);
        let model = Model::init(ModelConfig::tiny(kind, 2), s)?;
        let mut inst = generate_instance(kind, n, s)?;
        if kind == ProblemKind::Cvrp && i % 4 == 1 {
            // Tight capacity forces several routes.
            inst.capacity = Some(12.0);
        }
        let enc = model.encode(&inst)?;
        let cache = model.decoder_cache(&enc)?;
        let z = vec![r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)];
        let total = oracle::enumerate_policy(&cache, &z, &inst)?.total();
        let err = (total - 1.0).abs();
        if err >= worst {
            worst = err;
            worst_case = json!({ "kind": kind, "n": n, "seed": s, "capacity": inst.capacity, "z": z });
        }
    }
    Ok(vec![Check::new(
        Suite::Normalization,
        "policy_total_minus_one",
        worst,
        Relation::Below,
        1e-8,
        worst_case,
    )])
}

pub fn gradients(seed: u64) -> latent_routing::Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, err) in gradcheck::primitive_checks(seed)? {
        out.push(Check::new(
            Suite::Gradients,
            format!("primitive_{name}"),
            err,
            Relation::Below,
            1e-6,
            json!({ "seed": seed }),
        ));
    }
    for (kind, n) in [(ProblemKind::Tsp, 5), (ProblemKind::Cvrp, 4)] {
        let s = rng::derive(seed, Purpose::Harness, n as u64, kind as u64);
        let model = Model::init(ModelConfig::tiny(kind, 2), s)?;
        let inst = generate_instance(kind, n, s)?;
        let case = json!({ "kind": kind, "n": n, "seed": s });
        out.push(Check::new(
            Suite::Gradients,
            format!("log_prob_{kind}"),
            gradcheck::log_prob_check(&model, &inst, s, 4)?,
            Relation::Below,
            1e-6,
            case.clone(),
        ));
        let small = generate_instance(kind, n - 1, s)?;
        let enc = model.encode(&small)?;
        let z = [0.3, -0.2];
        let b = problems::route_length(&small, &(0..small.node_count()).collect::<Vec<_>>());
        out.push(Check::new(
            Suite::Gradients,
            format!("policy_gradient_{kind}"),
            oracle::policy_gradient_check(&model, &enc, &small, &z, b)?,
            Relation::Below,
            1e-5,
            case.clone(),
        ));
        let mut d = oracle::exact_score_expectation(&model, &enc, &small, &z, 0.0)?;
        d.add_scaled(&oracle::exact_score_expectation(&model, &enc, &small, &z, 10.0)?, -1.0);
        out.push(Check::new(
            Suite::Gradients,
            format!("baseline_shift_{kind}"),
            d.max_abs(),
            Relation::Below,
            1e-10,
            case,
        ));
    }
    Ok(out)
}

/// Costs are invariant under the eight dihedral maps, and augmented search
/// never loses to its identity-variant subset.
pub fn augmentation(seed: u64) -> latent_routing::Result<Vec<Check>> {
    let mut cost_err: f64 = 0.0;
    let mut opt_err: f64 = 0.0;
    let mut regret: f64 = f64::NEG_INFINITY;
    let mut cases = Vec::new();
    for i in 0..6u64 {
        let kind = if i % 2 == 0 { ProblemKind::Tsp } else { ProblemKind::Cvrp };
        let s = rng::derive(seed, Purpose::Harness, i, 2);
        let inst = generate_instance(kind, 6, s)?;
        let opt = oracle::brute_force(&inst)?;
        for v in problems::augment(&inst) {
            cost_err = cost_err.max((problems::route_length(&v, &opt.visits) - opt.cost).abs());
            opt_err = opt_err.max((oracle::brute_force(&v)?.cost - opt.cost).abs());
        }
        let model = Model::init(ModelConfig::tiny(kind, 2), s)?;
        let cfg = InferenceConfig {
            particles: 16,
            iterations: 8,
            augment: true,
            seed: s,
            ..InferenceConfig::new(Method::Lgs, kind)
        };
        let aug = inference::run(&model, &inst, &cfg)?;
        let ident = inference::run(&model, &inst, &inference::augmented_variant_configs(&cfg)[0])?;
        regret = regret.max(aug.best.cost - ident.best.cost);
        cases.push(json!({ "kind": kind, "n": 6, "seed": s }));
    }
    let case = json!({ "instances": cases });
    Ok(vec![
        Check::new(Suite::Augmentation, "tour_cost_invariance", cost_err, Relation::Below, 1e-9, case.clone()),
        Check::new(Suite::Augmentation, "optimum_invariance", opt_err, Relation::Below, 1e-9, case.clone()),
        Check::new(
            Suite::Augmentation,
            "augmented_minus_identity_cost",
            regret,
            Relation::Below,
            1e-12,
            case,
        ),
    ])
}

/// Replays a manifest into a fresh directory and compares every recorded
/// input and output hash.
pub fn reproduce(ctx: &Ctx, manifest_path: &Path) -> CliResult<Vec<Check>> {
    let m = Manifest::read(manifest_path)?;
    let mut out = Vec::new();
    for input in &m.inputs {
        let now = manifest::file_hash(Path::new(&input.path)).ok();
        out.push(Check::new(
            Suite::Reproduce,
            format!("input {}", input.path),
            if now.as_deref() == Some(input.hash.as_str()) { 0.0 } else { 1.0 },
            Relation::Below,
            0.5,
            json!({ "path": input.path, "recorded": input.hash, "now": now }),
        ));
    }
    let scratch = tempfile::tempdir().map_err(|e| crate::CliError::Failed(e.into()))?;
    let replay_ctx = Ctx {
        out_dir: scratch.path().to_path_buf(),
        quiet: true,
        ..ctx.clone()
    };
    let produced = commands::replay(&m, &replay_ctx)?;
    let base = scratch.path().canonicalize().ok();
    let mut fresh = Vec::new();
    for p in &produced {
        let abs = p.canonicalize().unwrap_or_else(|_| p.clone());
        fresh.push(manifest::record(&abs, base.as_deref())?);
    }
    for rec in &m.outputs {
        let now = fresh
            .iter()
            .find(|f| file_name(&f.path) == file_name(&rec.path) && same_tail(&f.path, &rec.path))
            .map(|f| f.hash.clone());
        out.push(Check::new(
            Suite::Reproduce,
            format!("output {}", rec.path),
            if now.as_deref() == Some(rec.hash.as_str()) { 0.0 } else { 1.0 },
            Relation::Below,
            0.5,
            json!({ "manifest": manifest_path, "path": rec.path, "recorded": rec.hash, "replayed": now }),
        ));
    }
    Ok(out)
}

fn file_name(p: &str) -> Option<std::ffi::OsString> {
    PathBuf::from(p).file_name().map(|s| s.to_os_string())
}

/// Relative records compare whole; absolute ones were replayed by file name.
fn same_tail(fresh: &str, recorded: &str) -> bool {
    Path::new(recorded).is_absolute() || fresh == recorded
}

pub fn run_suite(ctx: &Ctx, suite: Suite, seed: u64, manifest: Option<&Path>) -> CliResult<Vec<Check>> {
    Ok(match suite {
        Suite::Balance => balance(seed)?,
        Suite::Stationarity => stationarity(seed)?,
        Suite::Convergence => convergence(seed)?,
        Suite::Normalization => normalization(seed)?,
        Suite::Gradients => gradients(seed)?,
        Suite::Augmentation => augmentation(seed)?,
        Suite::Reproduce => {
            let m = manifest.ok_or_else(|| crate::usage("verify reproduce needs --manifest <file>"))?;
            reproduce(ctx, m)?
        }
    })
}
