use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use latent_routing::model::{Model, ModelConfig};
use latent_routing::training::{self, InstanceSource, TrainConfig};
use latent_routing::ProblemKind;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{csv_out, load_checkpoint, load_dataset, overlay, read_json, set, write_text, Outcome};
use crate::csvio::{self, f};
use crate::{input_path, usage, CliResult, Ctx, KindArg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Desk,
    Full,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON file `{kind, n, model, d_z, dataset, train: {...}}`; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Train on a fixed JSON-lines dataset instead of fresh instances.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<Preset>,
    #[arg(long)]
    pub d_z: Option<usize>,
    /// Continue from a checkpoint; the trace resumes at its epoch.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub latent_samples: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub entropy_coef: Option<f64>,
    #[arg(long)]
    pub tau0: Option<f64>,
    #[arg(long)]
    pub tau_decay: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record wall-clock time per epoch (breaks bit-reproducibility).
    #[arg(long)]
    pub timing: bool,
    #[arg(long, default_value = "checkpoint.json")]
    pub out: PathBuf,
    #[arg(long, default_value = "train_trace.csv")]
    pub trace: PathBuf,
    /// Epochs between progress lines on stderr (0 silences them).
    #[arg(long, default_value_t = 25)]
    pub log_every: usize,
    /// Also write `<out>_epochNNNNN.json` every this many epochs (0: final only).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Resolved {
    pub kind: ProblemKind,
    pub n: usize,
    pub model: ModelConfig,
    pub dataset: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub trace: PathBuf,
    pub log_every: usize,
    #[serde(default)]
    pub checkpoint_every: usize,
}

pub fn resolve(a: TrainArgs) -> CliResult<Resolved> {
    let file = match &a.config {
        Some(p) => read_json(p)?,
        None => Value::Object(Map::new()),
    };
    let mut file = file
        .as_object()
        .cloned()
        .ok_or_else(|| usage("train config: expected a JSON object"))?;
    let known = ["kind", "n", "model", "d_z", "dataset", "train"];
    if let Some(k) = file.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(usage(format!("train config: unknown field `{k}` (known: {known:?})")));
    }
    let get = |file: &Map<String, Value>, k: &str| file.get(k).cloned();
    let dataset = match a.dataset.clone().or_else(|| {
        get(&file, "dataset").and_then(|v| v.as_str().map(PathBuf::from))
    }) {
        Some(p) => Some(input_path(&p)?),
        None => None,
    };
    let resume = match &a.resume {
        Some(p) => Some(input_path(p)?),
        None => None,
    };
    let from_ckpt = match &resume {
        Some(p) => Some(load_checkpoint(p)?.0.config),
        None => None,
    };
    let from_data = match &dataset {
        Some(p) => load_dataset(p)?.first().map(|i| (i.kind, i.n)),
        None => None,
    };
    let file_kind: Option<ProblemKind> = match get(&file, "kind") {
        Some(v) => Some(serde_json::from_value(v).map_err(|e| usage(format!("train config: kind: {e}")))?),
        None => None,
    };
    let kind = a
        .kind
        .map(ProblemKind::from)
        .or(file_kind)
        .or(from_data.map(|d| d.0))
        .or(from_ckpt.as_ref().map(|c| c.kind))
        .ok_or_else(|| usage("train: --kind is required"))?;
    let n = a
        .n
        .or_else(|| get(&file, "n").and_then(|v| v.as_u64()).map(|v| v as usize))
        .or(from_data.map(|d| d.1))
        .ok_or_else(|| usage("train: --n is required without a dataset"))?;
    if let Some((dk, dn)) = from_data {
        if dk != kind || dn != n {
            return Err(usage(format!("train: dataset holds {dk} n={dn}, settings say {kind} n={n}")));
        }
    }
    let d_z = a.d_z.or_else(|| get(&file, "d_z").and_then(|v| v.as_u64()).map(|v| v as usize));
    let mut model = match (a.model, get(&file, "model")) {
        (Some(p), _) => preset(p, kind),
        (None, Some(Value::String(s))) => preset(
            Preset::from_str(&s, true).map_err(|e| usage(format!("train config: model: {e}")))?,
            kind,
        ),
        (None, Some(v)) => serde_json::from_value(v).map_err(|e| usage(format!("train config: model: {e}")))?,
        (None, None) => from_ckpt.clone().unwrap_or_else(|| ModelConfig::desk(kind)),
    };
    if let Some(d) = d_z {
        model.d_z = d;
    }
    if let Some(c) = &from_ckpt {
        if *c != model {
            return Err(usage("train: model settings differ from the resumed checkpoint"));
        }
    }
    if model.kind != kind {
        return Err(usage(format!("train: model is for {}, problem is {kind}", model.kind)));
    }
    model.validate()?;
    let mut train = serde_json::to_value(TrainConfig::default()).expect("serialisable");
    if let Some(t) = file.remove("train") {
        let t = t.as_object().cloned().ok_or_else(|| usage("train config: `train` must be an object"))?;
        overlay(&mut train, &t, "train config: train")?;
    }
    let mut flags = Map::new();
    set(&mut flags, "epochs", a.epochs);
    set(&mut flags, "batch_size", a.batch_size);
    set(&mut flags, "latent_samples", a.latent_samples);
    set(&mut flags, "lr", a.lr);
    set(&mut flags, "entropy_coef", a.entropy_coef);
    set(&mut flags, "tau0", a.tau0);
    set(&mut flags, "tau_decay", a.tau_decay);
    set(&mut flags, "weight_decay", a.weight_decay);
    set(&mut flags, "seed", a.seed);
    if a.timing {
        flags.insert("timing".into(), Value::Bool(true));
    }
    overlay(&mut train, &flags, "flags")?;
    let train: TrainConfig = serde_json::from_value(train).map_err(|e| usage(format!("train config: {e}")))?;
    train.validate()?;
    Ok(Resolved {
        kind,
        n,
        model,
        dataset,
        resume,
        train,
        out: a.out,
        trace: a.trace,
        log_every: a.log_every,
        checkpoint_every: a.checkpoint_every,
    })
}

/// `dir/stem_epochNNNNN.ext` next to the final checkpoint.
pub fn snapshot_path(out: &Path, epoch: usize) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    let ext = out.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    out.with_file_name(format!("{stem}_epoch{epoch:05}{ext}"))
}

fn preset(p: Preset, kind: ProblemKind) -> ModelConfig {
    match p {
        Preset::Tiny => ModelConfig::tiny(kind, 2),
        Preset::Desk => ModelConfig::desk(kind),
        Preset::Full => ModelConfig::full(kind),
    }
}

impl super::Resolved for Resolved {
    const NAME: &'static str = "train";

    fn execute(&self, ctx: &Ctx) -> CliResult<Outcome> {
        let mut inputs = Vec::new();
        let (mut model, start) = match &self.resume {
            Some(p) => {
                inputs.push(p.clone());
                load_checkpoint(p)?
            }
            None => (Model::init(self.model.clone(), self.train.seed)?, 0),
        };
        let source = match &self.dataset {
            Some(p) => {
                inputs.push(p.clone());
                InstanceSource::Dataset(load_dataset(p)?)
            }
            None => InstanceSource::Generator {
                kind: self.kind,
                n: self.n,
            },
        };
        let every = self.log_every;
        let snap_every = self.checkpoint_every;
        let mut snapshots = Vec::new();
        let trace = training::train(&mut model, &self.train, &source, start, |m, r| {
            let done = r.epoch + 1;
            if snap_every > 0 && done % snap_every == 0 && done < start + self.train.epochs {
                snapshots.push((done, latent_routing::io::checkpoint_to_json(m, done)?));
            }
            if every > 0 && (r.epoch + 1) % every == 0 {
                ctx.say(format!(
                    "epoch {:>5}  mean {:.4}  greedy {:.4}  entropy {:.4}  tau {:.4}",
                    r.epoch, r.mean_cost, r.greedy_cost, r.mean_step_entropy, r.tau
                ));
            }
            Ok(())
        })?;
        let out = ctx.output(&self.out);
        let end = start + self.train.epochs;
        write_text(&out, &latent_routing::io::checkpoint_to_json(&model, end)?)?;
        let rows: Vec<Vec<String>> = trace
            .iter()
            .map(|r| {
                vec![
                    r.epoch.to_string(),
                    f(r.mean_cost),
                    f(r.greedy_cost),
                    f(r.mean_step_entropy),
                    f(r.tau),
                    r.wall_ms.to_string(),
                ]
            })
            .collect();
        let trace_path = ctx.output(&self.trace);
        csv_out(&trace_path, &csvio::TRAIN_TRACE, &rows)?;
        let mut outputs = vec![out.clone(), trace_path];
        for (epoch, text) in snapshots {
            let p = snapshot_path(&out, epoch);
            write_text(&p, &text)?;
            outputs.push(p);
        }
        Ok(Outcome {
            inputs,
            outputs,
            seeds: json!({ "root": self.train.seed, "start_epoch": start }),
            failure: None,
        })
    }

    fn outputs_mut(&mut self) -> Vec<&mut PathBuf> {
        vec![&mut self.out, &mut self.trace]
    }
}

pub fn run(ctx: &Ctx, a: TrainArgs) -> CliResult<()> {
    super::finish(ctx, &resolve(a)?)
}
