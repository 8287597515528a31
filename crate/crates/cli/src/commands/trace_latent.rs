use std::path::PathBuf;

use clap::Args;
use latent_routing::inference::{self, InferenceConfig};
use latent_routing::ProblemInstance;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{csv_out, inference_config, latent_rows, load_checkpoint, load_dataset, trace_rows, MethodArg, Outcome};
use crate::csvio;
use crate::{input_path, usage, CliResult, Ctx, InferenceFlags};

#[derive(Debug, Clone, Args)]
pub struct TraceLatentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Single-instance JSON file.
    #[arg(long, conflicts_with = "dataset")]
    pub instance: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Instance index within `--dataset`.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[command(flatten)]
    pub inference: InferenceFlags,
    #[arg(long, default_value = "latent.csv")]
    pub out: PathBuf,
    #[arg(long, default_value = "latent_trace.csv")]
    pub trace: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Instance { path: PathBuf },
    Dataset { path: PathBuf, index: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resolved {
    pub checkpoint: PathBuf,
    pub source: Source,
    pub inference: InferenceConfig,
    pub out: PathBuf,
    pub trace: PathBuf,
}

pub fn resolve(a: TraceLatentArgs) -> CliResult<Resolved> {
    let checkpoint = input_path(&a.checkpoint)?;
    let (model, _) = load_checkpoint(&checkpoint)?;
    let source = match (a.instance, a.dataset) {
        (Some(p), None) => Source::Instance { path: input_path(&p)? },
        (None, Some(p)) => Source::Dataset {
            path: input_path(&p)?,
            index: a.index,
        },
        _ => return Err(usage("trace-latent: pass --instance or --dataset")),
    };
    let mut inference = inference_config(a.method, model.config.kind, &a.inference)?;
    if inference.augment {
        return Err(usage("trace-latent: --augment is not supported"));
    }
    inference.record_latents = true;
    Ok(Resolved {
        checkpoint,
        source,
        inference,
        out: a.out,
        trace: a.trace,
    })
}

fn load_instance(s: &Source) -> CliResult<(ProblemInstance, PathBuf)> {
    match s {
        Source::Instance { path } => {
            let text =
                std::fs::read_to_string(path).map_err(|e| usage(format!("instance {}: {e}", path.display())))?;
            Ok((ProblemInstance::from_json(&text)?, path.clone()))
        }
        Source::Dataset { path, index } => {
            let all = load_dataset(path)?;
            let n = all.len();
            let inst = all
                .into_iter()
                .nth(*index)
                .ok_or_else(|| usage(format!("trace-latent: index {index} outside a dataset of {n}")))?;
            Ok((inst, path.clone()))
        }
    }
}

impl super::Resolved for Resolved {
    const NAME: &'static str = "trace-latent";

    fn execute(&self, ctx: &Ctx) -> CliResult<Outcome> {
        let (model, _) = load_checkpoint(&self.checkpoint)?;
        let (inst, input) = load_instance(&self.source)?;
        let run = inference::run(&model, &inst, &self.inference)?;
        let out = ctx.output(&self.out);
        csv_out(&out, &csvio::LATENT_DUMP, &latent_rows(&run.latents))?;
        let trace = ctx.output(&self.trace);
        csv_out(&trace, &csvio::INFERENCE_TRACE, &trace_rows(&run.trace))?;
        ctx.say(format!(
            "{}: best cost {:.6}, {} latent rows",
            self.inference.method,
            run.best.cost,
            run.latents.len()
        ));
        Ok(Outcome {
            inputs: vec![self.checkpoint.clone(), input],
            outputs: vec![out, trace],
            seeds: json!({ "root": self.inference.seed }),
            failure: None,
        })
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out, &mut self.trace]
    }
}

pub fn run(ctx: &Ctx, a: TraceLatentArgs) -> CliResult<()> {
    super::finish(ctx, &resolve(a)?)
}
