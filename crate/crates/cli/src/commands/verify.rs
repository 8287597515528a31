use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{write_text, Outcome};
use crate::suites::{self, Suite};
use crate::{input_path, CliResult, Ctx};

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest to replay (`reproduce` only).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// JSON-lines report; defaults to `verify_<suite>.jsonl`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resolved {
    pub suite: Suite,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub report: PathBuf,
}

pub fn resolve(a: VerifyArgs) -> CliResult<Resolved> {
    let manifest = match a.manifest {
        Some(p) => Some(input_path(&p)?),
        None if a.suite == Suite::Reproduce => {
            return Err(crate::usage("verify reproduce needs --manifest <file>"))
        }
        None => None,
    };
    Ok(Resolved {
        suite: a.suite,
        seed: a.seed,
        manifest,
        report: a
            .report
            .unwrap_or_else(|| PathBuf::from(format!("verify_{}.jsonl", a.suite.name()))),
    })
}

impl super::Resolved for Resolved {
    const NAME: &'static str = "verify";

    fn execute(&self, ctx: &Ctx) -> CliResult<Outcome> {
        let checks = suites::run_suite(ctx, self.suite, self.seed, self.manifest.as_deref())?;
        let mut text = String::new();
        for c in &checks {
            if !ctx.quiet {
                println!("{}", c.line());
            }
            text.push_str(&serde_json::to_string(c).expect("serialisable check"));
            text.push('\n');
        }
        let report = ctx.output(&self.report);
        write_text(&report, &text)?;
        let failed: Vec<String> = checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| serde_json::to_string(c).expect("serialisable check"))
            .collect();
        let failure = (!failed.is_empty()).then(|| {
            format!(
                "{} of {} checks failed in suite `{}`:\n{}",
                failed.len(),
                checks.len(),
                self.suite.name(),
                failed.join("\n")
            )
        });
        Ok(Outcome {
            inputs: self.manifest.iter().cloned().collect(),
            outputs: vec![report],
            seeds: json!({ "root": self.seed }),
            failure,
        })
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.report]
    }
}

pub fn run(ctx: &Ctx, a: VerifyArgs) -> CliResult<()> {
    super::finish(ctx, &resolve(a)?)
}
