use std::path::PathBuf;

use clap::Args;
use latent_routing::problems::generate_instance;
use latent_routing::rng::{self, Purpose};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{write_text, Outcome};
use crate::{CliResult, Ctx, KindArg};

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Node count (TSP) or customer count (CVRP).
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "dataset.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resolved {
    pub kind: KindArg,
    pub n: usize,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Instance `i` is generated from `derive(seed, Instance, i, 0)`.
pub fn instance_seed(root: u64, i: usize) -> u64 {
    rng::derive(root, Purpose::Instance, i as u64, 0)
}

impl super::Resolved for Resolved {
    const NAME: &'static str = "gen";

    fn execute(&self, ctx: &Ctx) -> CliResult<Outcome> {
        let instances = (0..self.count)
            .map(|i| generate_instance(self.kind.into(), self.n, instance_seed(self.seed, i)))
            .collect::<latent_routing::Result<Vec<_>>>()?;
        let out = ctx.output(&self.out);
        write_text(&out, &latent_routing::io::dataset_to_jsonl(&instances)?)?;
        ctx.say(format!("wrote {} instances to {}", self.count, out.display()));
        Ok(Outcome {
            outputs: vec![out],
            seeds: json!({ "root": self.seed }),
            ..Outcome::default()
        })
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out]
    }
}

pub fn run(ctx: &Ctx, a: GenArgs) -> CliResult<()> {
    super::finish(
        ctx,
        &Resolved {
            kind: a.kind,
            n: a.n,
            count: a.count,
            seed: a.seed,
            out: a.out,
        },
    )
}
