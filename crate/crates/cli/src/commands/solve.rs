use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use latent_routing::inference::{self, InferenceConfig, RunOutput};
use latent_routing::rng::{self, Purpose};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{csv_out, inference_config, latent_rows, load_checkpoint, load_dataset, trace_rows, MethodArg, Outcome};
use crate::csvio::{self, f};
use crate::{input_path, usage, CliError, CliResult, Ctx, InferenceFlags};

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[command(flatten)]
    pub inference: InferenceFlags,
    /// Expected latent dimension; must match the checkpoint.
    #[arg(long)]
    pub d_z: Option<usize>,
    /// Solve only the first `limit` instances.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value = "results.csv")]
    pub out: PathBuf,
    /// Directory for one inference trace per instance.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    /// Directory for one latent dump per instance.
    #[arg(long)]
    pub latent_dir: Option<PathBuf>,
    /// Record wall-clock time per instance (breaks bit-reproducibility).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resolved {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub limit: Option<usize>,
    pub inference: InferenceConfig,
    pub out: PathBuf,
    pub trace_dir: Option<PathBuf>,
    pub latent_dir: Option<PathBuf>,
    pub timing: bool,
}

/// Per-instance search seed: `derive(root, Instance, i, 1)`.
pub fn instance_seed(root: u64, i: usize) -> u64 {
    rng::derive(root, Purpose::Instance, i as u64, 1)
}

pub fn resolve(a: SolveArgs) -> CliResult<Resolved> {
    let checkpoint = input_path(&a.checkpoint)?;
    let dataset = input_path(&a.dataset)?;
    let (model, _) = load_checkpoint(&checkpoint)?;
    if let Some(d) = a.d_z {
        if d != model.config.d_z {
            return Err(usage(format!(
                "solve: --d-z {d} does not match the checkpoint's d_z {}",
                model.config.d_z
            )));
        }
    }
    let mut inference = inference_config(a.method, model.config.kind, &a.inference)?;
    if a.latent_dir.is_some() {
        if inference.augment {
            return Err(usage("solve: latent dumps are not available with --augment"));
        }
        inference.record_latents = true;
    }
    Ok(Resolved {
        checkpoint,
        dataset,
        limit: a.limit,
        inference,
        out: a.out,
        trace_dir: a.trace_dir,
        latent_dir: a.latent_dir,
        timing: a.timing,
    })
}

impl super::Resolved for Resolved {
    const NAME: &'static str = "solve";

    fn execute(&self, ctx: &Ctx) -> CliResult<Outcome> {
        let (model, _) = load_checkpoint(&self.checkpoint)?;
        let mut instances = load_dataset(&self.dataset)?;
        if let Some(l) = self.limit {
            instances.truncate(l);
        }
        if let Some(bad) = instances.iter().find(|i| i.kind != model.config.kind) {
            return Err(usage(format!(
                "solve: checkpoint is for {}, dataset contains {}",
                model.config.kind, bad.kind
            )));
        }
        let cfg = &self.inference;
        let runs: Vec<latent_routing::Result<(RunOutput, u64, u64)>> = ctx.pool(|| {
            instances
                .par_iter()
                .enumerate()
                .map(|(i, inst)| {
                    let c = InferenceConfig {
                        seed: instance_seed(cfg.seed, i),
                        ..cfg.clone()
                    };
                    let t = Instant::now();
                    let out = inference::run(&model, inst, &c)?;
                    let ms = if self.timing { t.elapsed().as_millis() as u64 } else { 0 };
                    Ok((out, c.seed, ms))
                })
                .collect()
        })?;
        let runs = runs.into_iter().collect::<latent_routing::Result<Vec<_>>>().map_err(CliError::from)?;
        let mut outputs = Vec::new();
        let out = ctx.output(&self.out);
        let rows: Vec<Vec<String>> = runs
            .iter()
            .zip(&instances)
            .enumerate()
            .map(|(i, ((r, seed, ms), inst))| {
                vec![
                    i.to_string(),
                    inst.kind.to_string(),
                    inst.n.to_string(),
                    cfg.method.to_string(),
                    seed.to_string(),
                    f(r.best.cost),
                    r.draws.to_string(),
                    ms.to_string(),
                    r.best.visits.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
                ]
            })
            .collect();
        csv_out(&out, &csvio::RESULTS, &rows)?;
        outputs.push(out);
        if let Some(dir) = &self.trace_dir {
            for (i, (r, _, _)) in runs.iter().enumerate() {
                let p = ctx.output(&dir.join(format!("trace_{i:04}.csv")));
                csv_out(&p, &csvio::INFERENCE_TRACE, &trace_rows(&r.trace))?;
                outputs.push(p);
            }
        }
        if let Some(dir) = &self.latent_dir {
            for (i, (r, _, _)) in runs.iter().enumerate() {
                let p = ctx.output(&dir.join(format!("latent_{i:04}.csv")));
                csv_out(&p, &csvio::LATENT_DUMP, &latent_rows(&r.latents))?;
                outputs.push(p);
            }
        }
        let mean = runs.iter().map(|r| r.0.best.cost).sum::<f64>() / runs.len().max(1) as f64;
        ctx.say(format!(
            "{}: {} instances, mean best cost {mean:.6}",
            cfg.method,
            runs.len()
        ));
        Ok(Outcome {
            inputs: vec![self.checkpoint.clone(), self.dataset.clone()],
            outputs,
            seeds: json!({
                "root": cfg.seed,
                "per_instance": runs.iter().map(|r| r.1).collect::<Vec<_>>(),
            }),
            failure: None,
        })
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![&mut self.out];
        v.extend(self.trace_dir.as_mut());
        v.extend(self.latent_dir.as_mut());
        v
    }
}

pub fn run(ctx: &Ctx, a: SolveArgs) -> CliResult<()> {
    super::finish(ctx, &resolve(a)?)
}
