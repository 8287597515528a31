use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use latent_routing::oracle;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{csv_out, load_dataset, Outcome};
use crate::csvio::{self, f};
use crate::{input_path, usage, CliError, CliResult, Ctx};

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Results file written by `solve`.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Compute exact references by brute force on this dataset.
    #[arg(long, requires = "dataset")]
    pub oracle: bool,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Reference costs file (`reference` schema).
    #[arg(long, conflicts_with = "oracle")]
    pub reference: Option<PathBuf>,
    /// Single cost to compare against `--optimal`.
    #[arg(long, requires = "optimal", conflicts_with = "results")]
    pub cost: Option<f64>,
    #[arg(long, requires = "cost")]
    pub optimal: Option<f64>,
    #[arg(long, default_value = "eval.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    Oracle { dataset: PathBuf },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Mode {
    Pair { cost: f64, optimal: f64 },
    Results { results: PathBuf, reference: Reference },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resolved {
    pub mode: Mode,
    pub out: PathBuf,
}

/// `(C / C* - 1) · 100`.
pub fn gap_pct(cost: f64, reference: f64) -> f64 {
    (cost / reference - 1.0) * 100.0
}

pub fn format_gap(g: f64) -> String {
    format!("{g:.4}%")
}

pub fn resolve(a: EvalArgs) -> CliResult<Resolved> {
    let mode = match (a.cost, a.optimal, a.results) {
        (Some(cost), Some(optimal), None) => {
            if !(optimal > 0.0) {
                return Err(usage("eval: --optimal must be positive"));
            }
            Mode::Pair { cost, optimal }
        }
        (None, None, Some(r)) => {
            let reference = match (a.oracle, a.reference, a.dataset) {
                (true, _, Some(d)) => Reference::Oracle { dataset: input_path(&d)? },
                (false, Some(p), _) => Reference::File { path: input_path(&p)? },
                _ => {
                    return Err(usage(
                        "eval: no reference available; pass --oracle --dataset <file> or --reference <file>",
                    ))
                }
            };
            Mode::Results {
                results: input_path(&r)?,
                reference,
            }
        }
        _ => return Err(usage("eval: pass either --results or --cost with --optimal")),
    };
    Ok(Resolved { mode, out: a.out })
}

impl super::Resolved for Resolved {
    const NAME: &'static str = "eval";

    fn execute(&self, ctx: &Ctx) -> CliResult<Outcome> {
        let out = ctx.output(&self.out);
        match &self.mode {
            Mode::Pair { cost, optimal } => {
                let g = gap_pct(*cost, *optimal);
                if !ctx.quiet {
                    println!("gap {}", format_gap(g));
                }
                csv_out(&out, &csvio::EVAL, &[vec!["0".into(), f(*cost), f(*optimal), f(g)]])?;
                Ok(Outcome {
                    outputs: vec![out],
                    seeds: json!(null),
                    ..Outcome::default()
                })
            }
            Mode::Results { results, reference } => {
                let rows = csvio::read(results, &csvio::RESULTS).map_err(CliError::Usage)?;
                let (refs, ref_input) = references(ctx, reference)?;
                let mut per_method: BTreeMap<String, (f64, f64, f64, usize)> = BTreeMap::new();
                let mut out_rows = Vec::new();
                for r in &rows {
                    let i: usize = r[0].parse().map_err(|_| usage(format!("eval: bad instance id `{}`", r[0])))?;
                    let cost: f64 = r[5].parse().map_err(|_| usage(format!("eval: bad cost `{}`", r[5])))?;
                    let ms: f64 = r[7].parse().unwrap_or(0.0);
                    let reference = *refs
                        .get(&i)
                        .ok_or_else(|| usage(format!("eval: missing reference for instance {i}")))?;
                    let g = gap_pct(cost, reference);
                    let e = per_method.entry(r[3].clone()).or_default();
                    e.0 += cost;
                    e.1 += g;
                    e.2 += ms;
                    e.3 += 1;
                    out_rows.push(vec![i.to_string(), f(cost), f(reference), f(g)]);
                }
                csv_out(&out, &csvio::EVAL, &out_rows)?;
                if !ctx.quiet {
                    println!("{:<18} {:>10} {:>10} {:>10}", "method", "Obj.", "Gap", "Time");
                }
                for (m, (c, g, ms, k)) in per_method.iter().filter(|_| !ctx.quiet) {
                    let k = *k as f64;
                    println!(
                        "{:<18} {:>10.4} {:>10} {:>9.2}s",
                        m,
                        c / k,
                        format_gap(g / k),
                        ms / 1000.0
                    );
                }
                let mut inputs = vec![results.clone()];
                inputs.extend(ref_input);
                Ok(Outcome {
                    inputs,
                    outputs: vec![out],
                    seeds: json!(null),
                    failure: None,
                })
            }
        }
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out]
    }
}

fn references(ctx: &Ctx, r: &Reference) -> CliResult<(BTreeMap<usize, f64>, Option<PathBuf>)> {
    match r {
        Reference::Oracle { dataset } => {
            let instances = load_dataset(dataset)?;
            let costs: Vec<latent_routing::Result<f64>> = ctx.pool(|| {
                instances
                    .par_iter()
                    .map(|i| oracle::brute_force(i).map(|s| s.cost))
                    .collect()
            })?;
            let mut map = BTreeMap::new();
            for (i, c) in costs.into_iter().enumerate() {
                map.insert(i, c?);
            }
            Ok((map, Some(dataset.clone())))
        }
        Reference::File { path } => {
            let rows = csvio::read(path, &csvio::REFERENCE).map_err(CliError::Usage)?;
            let mut map = BTreeMap::new();
            for r in rows {
                let i = r[0].parse().map_err(|_| usage(format!("reference: bad instance `{}`", r[0])))?;
                let c = r[1].parse().map_err(|_| usage(format!("reference: bad cost `{}`", r[1])))?;
                map.insert(i, c);
            }
            Ok((map, Some(path.clone())))
        }
    }
}

pub fn run(ctx: &Ctx, a: EvalArgs) -> CliResult<()> {
    super::finish(ctx, &resolve(a)?)
}
