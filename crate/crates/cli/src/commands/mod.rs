//! Subcommands. Each resolves its flags into a [`Resolved`] settings value;
//! the manifest stores that value so a run can be replayed without the
//! original config files or working directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use latent_routing::inference::{InferenceConfig, Method};
use latent_routing::ProblemKind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::manifest::Manifest;
use crate::{usage, CliError, CliResult, Ctx, InferenceFlags};

pub mod eval;
pub mod gen;
pub mod solve;
pub mod trace_latent;
pub mod train;
pub mod verify;

/// What an executed command read and wrote.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: Value,
    /// Set when the command ran to completion but a check failed.
    pub failure: Option<String>,
}

pub trait Resolved: Serialize + DeserializeOwned {
    const NAME: &'static str;
    fn execute(&self, ctx: &Ctx) -> CliResult<Outcome>;
    fn outputs_mut(&mut self) -> Vec<&mut PathBuf>;
}

/// Executes, writes the manifest and maps a recorded failure to exit 1.
pub fn finish<R: Resolved>(ctx: &Ctx, r: &R) -> CliResult<()> {
    let started = Instant::now();
    let out = r.execute(ctx)?;
    let manifest = ctx.finish(R::NAME, r, out.seeds, &out.inputs, &out.outputs, started)?;
    ctx.say(format!("manifest: {}", manifest.display()));
    match out.failure {
        Some(f) => Err(CliError::Failed(anyhow::anyhow!(f))),
        None => Ok(()),
    }
}

fn replay_as<R: Resolved>(config: &Value, ctx: &Ctx) -> CliResult<Vec<PathBuf>> {
    let mut r: R = serde_json::from_value(config.clone())
        .map_err(|e| usage(format!("manifest config for `{}`: {e}", R::NAME)))?;
    for p in r.outputs_mut() {
        if p.is_absolute() {
            *p = PathBuf::from(p.file_name().unwrap_or_default());
        }
    }
    Ok(r.execute(ctx)?.outputs)
}

/// Re-executes a manifest's command with outputs under `ctx.out_dir`.
pub fn replay(m: &Manifest, ctx: &Ctx) -> CliResult<Vec<PathBuf>> {
    match m.command.as_str() {
        gen::Resolved::NAME => replay_as::<gen::Resolved>(&m.config, ctx),
        train::Resolved::NAME => replay_as::<train::Resolved>(&m.config, ctx),
        solve::Resolved::NAME => replay_as::<solve::Resolved>(&m.config, ctx),
        eval::Resolved::NAME => replay_as::<eval::Resolved>(&m.config, ctx),
        verify::Resolved::NAME => replay_as::<verify::Resolved>(&m.config, ctx),
        trace_latent::Resolved::NAME => replay_as::<trace_latent::Resolved>(&m.config, ctx),
        other => Err(usage(format!("manifest names unknown command `{other}`"))),
    }
}

pub fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

/// Overlays `top` onto `base`; keys absent from `base` are rejected.
pub fn overlay(base: &mut Value, top: &Map<String, Value>, section: &str) -> CliResult<()> {
    let obj = base
        .as_object_mut()
        .ok_or_else(|| usage(format!("{section}: expected an object")))?;
    for (k, v) in top {
        if !obj.contains_key(k) {
            let known: Vec<&String> = obj.keys().collect();
            return Err(usage(format!("{section}: unknown field `{k}` (known: {known:?})")));
        }
        obj.insert(k.clone(), v.clone());
    }
    Ok(())
}

pub fn set<T: Serialize>(map: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        map.insert(key.to_string(), serde_json::to_value(v).expect("plain value"));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum MethodArg {
    #[value(name = "sampling")]
    Sampling,
    #[value(name = "single_mcmc", alias = "single")]
    SingleMcmc,
    #[value(name = "parallel_mcmc", alias = "parallel")]
    ParallelMcmc,
    #[value(name = "interacting_mcmc", alias = "interacting")]
    InteractingMcmc,
    #[value(name = "lgs")]
    Lgs,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Sampling => Method::Sampling,
            MethodArg::SingleMcmc => Method::SingleMcmc,
            MethodArg::ParallelMcmc => Method::ParallelMcmc,
            MethodArg::InteractingMcmc => Method::InteractingMcmc,
            MethodArg::Lgs => Method::Lgs,
        }
    }
}

/// Method defaults, then the config file, then flags.
pub fn inference_config(
    method: Option<MethodArg>,
    kind: ProblemKind,
    flags: &InferenceFlags,
) -> CliResult<InferenceConfig> {
    let file = match &flags.config {
        Some(p) => read_json(p)?,
        None => Value::Object(Map::new()),
    };
    let file = file
        .as_object()
        .cloned()
        .ok_or_else(|| usage("inference config: expected a JSON object"))?;
    let file_method = match file.get("method") {
        Some(v) => Some(
            serde_json::from_value::<Method>(v.clone()).map_err(|e| usage(format!("inference config: method: {e}")))?,
        ),
        None => None,
    };
    let m = method
        .map(Method::from)
        .or(file_method)
        .unwrap_or(Method::Lgs);
    let mut base = serde_json::to_value(InferenceConfig::new(m, kind)).expect("serialisable");
    let mut file = file;
    file.remove("method");
    overlay(&mut base, &file, "inference config")?;
    let mut flag_map = Map::new();
    set(&mut flag_map, "particles", flags.particles);
    set(&mut flag_map, "iterations", flags.iterations);
    set(&mut flag_map, "lambda", flags.lambda);
    set(&mut flag_map, "proposal_var", flags.proposal_var);
    set(&mut flag_map, "drift", flags.drift);
    set(&mut flag_map, "sa_step0", flags.sa_step0);
    set(&mut flag_map, "schedule", flags.schedule.clone());
    set(&mut flag_map, "seed", flags.seed);
    if flags.augment {
        flag_map.insert("augment".into(), Value::Bool(true));
    }
    overlay(&mut base, &flag_map, "flags")?;
    let cfg: InferenceConfig =
        serde_json::from_value(base).map_err(|e| usage(format!("inference config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_checkpoint(path: &Path) -> CliResult<(latent_routing::model::Model, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("checkpoint {}: {e}", path.display())))?;
    Ok(latent_routing::io::checkpoint_from_json(&text)?)
}

pub fn load_dataset(path: &Path) -> CliResult<Vec<latent_routing::ProblemInstance>> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("dataset {}: {e}", path.display())))?;
    Ok(latent_routing::io::dataset_from_jsonl(&text)?)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| usage(format!("writing {}: {e}", path.display())))
}

pub fn csv_out(path: &Path, schema: &crate::csvio::Schema, rows: &[Vec<String>]) -> CliResult<()> {
    crate::csvio::write(path, schema, rows).map_err(CliError::Usage)
}

/// Inference trace rows in CSV form.
pub fn trace_rows(trace: &[latent_routing::inference::TraceRow]) -> Vec<Vec<String>> {
    use crate::csvio::{f, flag};
    trace
        .iter()
        .map(|r| {
            vec![
                r.m.to_string(),
                f(r.best_cost),
                f(r.mean_cost),
                f(r.acceptance_rate),
                flag(r.theta_update_flag),
            ]
        })
        .collect()
}

pub fn latent_rows(rows: &[latent_routing::inference::LatentRow]) -> Vec<Vec<String>> {
    use crate::csvio::{f, flag};
    rows.iter()
        .map(|r| {
            vec![
                r.m.to_string(),
                r.k.to_string(),
                f(r.z1),
                f(r.z2),
                f(r.cost),
                flag(r.accepted),
            ]
        })
        .collect()
}
