//! The `mope` command-line tool. Every subcommand resolves one run config
//! (defaults, `--config` file, then flags), writes its artifacts into
//! `--out` and finishes with a `manifest.json` recording input and output
//! hashes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::distill::train_distill;
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::AblationSet;
use crate::pruning::{
    compare_strategies, make_depth_plan, make_width_plan, run_pipeline, PruningPlan, Stage, Variant,
};
use crate::scoring::{build_cost_tables, CostTables, ImportanceMetric};
use crate::DualEncoder;

use super::canon::sha256_hex;
use super::checkpoint::{encode_checkpoint, load_checkpoint};
use super::config::{set_path, RunConfig};
use super::data::{generate_dataset, Dataset, Split};
use super::manifest::{ArtifactDir, RunManifest, MANIFEST_FILE};
use super::report::{build_report, render_csv, render_markdown, ReportInputs, Section};
use super::runs::{run_loss_ablation, train_teacher, LossAblation};

#[derive(Debug, Parser)]
#[command(name = "mope", version, about = "Score, prune and distill dual-encoder transformers")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run config; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for data, initialization and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override any config key, e.g. `--set stage.distill.epochs=5`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    pub set: Vec<String>,
    /// Retrieval objective for scoring: tr-mean, ir-mean or recall-mean.
    #[arg(long, global = true)]
    pub objective: Option<String>,
    /// Scoring threads.
    #[arg(long, global = true, env = "MOPE_WORKERS")]
    pub workers: Option<usize>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "mope-out")]
    pub out: PathBuf,
}

/// Pruning target flags shared by the planning commands.
#[derive(Debug, Clone, Default, Args)]
pub struct TargetArgs {
    /// Fraction of heads and FFN neurons kept per layer.
    #[arg(long)]
    pub width: Option<f64>,
    /// Layers kept per tower.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Parameter budget; switches width planning to a global greedy pass.
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic paired dataset.
    GenData,
    /// Train a teacher contrastively.
    TrainTeacher {
        /// Split name (regenerated from the config) or dataset JSON path.
        #[arg(long)]
        data: Option<String>,
    },
    /// Build cost tables for a model.
    Score {
        /// Checkpoint to score.
        #[arg(long)]
        model: PathBuf,
        /// Split name (regenerated from the config) or dataset JSON path.
        #[arg(long)]
        data: Option<String>,
        /// Split used for scoring; defaults to val.
        #[arg(long)]
        split: Option<String>,
        /// Importance metric for the tables.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Turn cost tables into a pruning plan.
    Plan {
        /// Checkpoint the tables were built for.
        #[arg(long)]
        model: PathBuf,
        /// Cost tables from `score`; required for width pruning and score-based layer selection.
        #[arg(long)]
        tables: Option<PathBuf>,
        #[command(flatten)]
        target: TargetArgs,
        /// Layer selection strategy for depth pruning.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Apply a plan to a model.
    Prune {
        /// Checkpoint to prune.
        #[arg(long)]
        model: PathBuf,
        /// Plan from `plan`.
        #[arg(long)]
        plan: PathBuf,
    },
    /// Retrain a student, distilling from a teacher when one is given.
    Distill {
        /// Student checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Teacher checkpoint; contrastive-only training when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Split name (regenerated from the config) or dataset JSON path.
        #[arg(long)]
        data: Option<String>,
    },
    /// Retrieval metrics of a model on one split.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        model: PathBuf,
        /// Split name (regenerated from the config) or dataset JSON path.
        #[arg(long)]
        data: Option<String>,
        /// Split to evaluate; defaults to val.
        #[arg(long)]
        split: Option<String>,
    },
    /// Score, prune and distill end to end.
    Pipeline {
        /// finetune (width then depth, two phases) or pretrain (one phase).
        #[arg(long)]
        stage: String,
        /// Teacher checkpoint; trained from scratch when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Split name (regenerated from the config) or dataset JSON path.
        #[arg(long)]
        data: Option<String>,
        #[command(flatten)]
        target: TargetArgs,
        /// Layer selection strategy for depth pruning.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Run several layer strategies (or loss variants) under one budget.
    Compare {
        /// Teacher checkpoint; trained from scratch when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Split name (regenerated from the config) or dataset JSON path.
        #[arg(long)]
        data: Option<String>,
        #[command(flatten)]
        target: TargetArgs,
        /// Comma-separated strategies.
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<String>,
        /// Ablate the distillation loss terms instead.
        #[arg(long)]
        losses: bool,
    },
    /// Render stored comparison artifacts as markdown and CSV.
    Report {
        /// Directories holding comparison.json / loss_ablation.json.
        #[arg(long)]
        from: Vec<PathBuf>,
        /// strategies or losses; defaults to whatever is present.
        #[arg(long)]
        section: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::Score { .. } => "score",
            Command::Plan { .. } => "plan",
            Command::Prune { .. } => "prune",
            Command::Distill { .. } => "distill",
            Command::Eval { .. } => "eval",
            Command::Pipeline { .. } => "pipeline",
            Command::Compare { .. } => "compare",
            Command::Report { .. } => "report",
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
/// Failures print one JSON line `{"error": kind, "message": text}` to stderr.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn overrides(common: &Common, command: &Command) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    if let Some(s) = common.seed {
        out.push(("seed".into(), json!(s)));
    }
    if let Some(o) = &common.objective {
        let o: crate::evaluation::Objective = o.parse()?;
        out.push(("stage.score.objective.objective".into(), serde_json::to_value(o)?));
    }
    if let Some(w) = common.workers {
        out.push(("stage.score.workers".into(), json!(w)));
    }
    let target = match command {
        Command::Plan { target, .. } | Command::Pipeline { target, .. } | Command::Compare { target, .. } => {
            Some(target)
        }
        _ => None,
    };
    if let Some(t) = target {
        for tower in ["vision", "text"] {
            if let Some(w) = t.width {
                out.push((format!("target.{tower}.width"), json!(w)));
            }
            if let Some(d) = t.depth {
                out.push((format!("target.{tower}.depth"), json!(d)));
            }
            if t.budget.is_some() {
                out.push((format!("target.{tower}.width"), json!(1.0)));
                out.push((format!("target.{tower}.ffn_width"), Value::Null));
            }
        }
        if let Some(b) = t.budget {
            out.push(("target.param_budget".into(), json!(b)));
        }
    }
    let metric = |s: &str| -> Result<Value> { Ok(serde_json::to_value(s.parse::<ImportanceMetric>()?)?) };
    match command {
        Command::Score { strategy: Some(s), .. } => out.push(("stage.score.metric".into(), metric(s)?)),
        Command::Plan { strategy: Some(s), .. } | Command::Pipeline { strategy: Some(s), .. } => {
            out.push(("stage.strategy".into(), metric(s)?))
        }
        Command::Compare { strategy, .. } if !strategy.is_empty() => {
            let list = strategy.iter().map(|s| metric(s)).collect::<Result<Vec<_>>>()?;
            out.push(("strategies".into(), Value::Array(list)));
        }
        _ => {}
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects PATH=VALUE, got `{kv}`")))?;
        out.push((k.to_string(), parse_value(v)));
    }
    Ok(out)
}

fn resolve_config(common: &Common, command: &Command) -> Result<RunConfig> {
    let file = match &common.config {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            Some(serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let mut ov = Vec::new();
    // Validate every override path up front so typos fail before any work.
    for (k, v) in overrides(common, command)? {
        set_path(&mut serde_json::to_value(RunConfig::default())?, &k, v.clone())?;
        ov.push((k, v));
    }
    RunConfig::resolve(file, &ov)
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// `--data` is either a split name (the dataset is regenerated from the
/// config) or a path to a dataset JSON written by `gen-data`.
fn load_dataset(cfg: &RunConfig, data: Option<&str>) -> Result<Dataset> {
    match data {
        Some(p) if !SPLITS.contains(&p) => {
            let path = Path::new(p);
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Input(format!("{p}: not a dataset ({e})")))
        }
        _ => generate_dataset(&cfg.data),
    }
}

fn pick_split<'a>(data: &'a Dataset, arg: Option<&str>, split: Option<&str>) -> Result<&'a Split> {
    let name = match (arg, split) {
        (_, Some(s)) => s,
        (Some(a), None) if SPLITS.contains(&a) => a,
        _ => "val",
    };
    data.split(name)
}

fn load_model(path: &Path) -> Result<DualEncoder> {
    if !path.exists() {
        return Err(Error::Input(format!("missing input artifact {}", path.display())));
    }
    load_checkpoint(path)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Input(format!("missing input artifact {}", path.display())));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Serializes `value`, moving every `wall_time_s` field into the manifest so
/// that the artifact itself is reproducible byte for byte.
fn write_timed<T: Serialize>(dir: &mut ArtifactDir, name: &str, value: &T) -> Result<()> {
    fn strip(v: &mut Value, total: &mut f64) {
        match v {
            Value::Object(m) => {
                if let Some(t) = m.remove("wall_time_s") {
                    *total += t.as_f64().unwrap_or(0.0);
                }
                m.values_mut().for_each(|x| strip(x, total));
            }
            Value::Array(a) => a.iter_mut().for_each(|x| strip(x, total)),
            _ => {}
        }
    }
    let mut v = serde_json::to_value(value)?;
    let mut total = 0.0;
    strip(&mut v, &mut total);
    if total > 0.0 {
        dir.time(&format!("train:{name}"), total);
    }
    dir.write_json(name, &v)?;
    Ok(())
}

fn write_model(dir: &mut ArtifactDir, name: &str, model: &DualEncoder) -> Result<()> {
    dir.write(name, &encode_checkpoint(model)?)?;
    Ok(())
}

fn say(v: Value) {
    println!("{v}");
}

fn teacher_or_train(
    dir: &mut ArtifactDir,
    cfg: &RunConfig,
    data: &Dataset,
    teacher: Option<&Path>,
) -> Result<DualEncoder> {
    match teacher {
        Some(p) => {
            let t = load_model(p)?;
            dir.input("teacher", t.hash());
            Ok(t)
        }
        None => {
            let t0 = Instant::now();
            let (t, report) = train_teacher(cfg, data)?;
            dir.time("teacher", t0.elapsed().as_secs_f64());
            write_model(dir, "teacher.ckpt", &t)?;
            write_timed(dir, "teacher_train.json", &report)?;
            Ok(t)
        }
    }
}

/// Checks a stored artifact against the manifest of the directory it came
/// from, when there is one.
fn verify_against_manifest(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Ok(());
    }
    let m = RunManifest::load(&mpath)?;
    if let Some(declared) = m.outputs.get(name) {
        let found = sha256_hex(bytes);
        if *declared != found {
            return Err(Error::HashMismatch {
                what: dir.join(name).display().to_string(),
                declared: declared.clone(),
                found,
            });
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let Cli { common, command } = cli;
    let cfg = resolve_config(&common, &command)?;
    let manifest = RunManifest::new(command.name(), serde_json::to_value(&cfg)?);
    let mut dir = ArtifactDir::open(&common.out, manifest)?;
    let started = Instant::now();
    match &command {
        Command::GenData => {
            let data = generate_dataset(&cfg.data)?;
            dir.write_json("dataset.json", &data)?;
            say(json!({"dataset": data.hash(), "train": data.train.len(), "val": data.val.len(), "test": data.test.len()}));
        }
        Command::TrainTeacher { data } => {
            let data = load_dataset(&cfg, data.as_deref())?;
            dir.input("dataset", data.hash());
            let (t, report) = train_teacher(&cfg, &data)?;
            write_model(&mut dir, "teacher.ckpt", &t)?;
            write_timed(&mut dir, "train_report.json", &report)?;
            say(json!({"model": t.hash(), "param_count": t.param_count(), "metrics": report.final_metrics}));
        }
        Command::Score { model, data, split, .. } => {
            let m = load_model(model)?;
            let ds = load_dataset(&cfg, data.as_deref())?;
            let split = pick_split(&ds, data.as_deref(), split.as_deref())?;
            dir.input("model", m.hash());
            dir.input("split", split.hash());
            let scored = build_cost_tables(&m, split, &cfg.stage.score)?;
            dir.write("cost_tables.json", scored.tables.to_json()?.as_bytes())?;
            write_model(&mut dir, "model.ckpt", &scored.model)?;
            say(json!({"tables": scored.tables.hash()?, "model": scored.model.hash()}));
        }
        Command::Plan { model, tables, .. } => {
            let m = load_model(model)?;
            dir.input("model", m.hash());
            let tables: Option<CostTables> = tables.as_deref().map(read_json).transpose()?;
            if let Some(t) = &tables {
                let declared = t.meta.group_model_hash.clone().unwrap_or_else(|| t.meta.model_hash.clone());
                if declared != m.hash() {
                    return Err(Error::HashMismatch {
                        what: "cost tables model".into(),
                        declared,
                        found: m.hash(),
                    });
                }
                dir.input("tables", t.hash()?);
            }
            let plan = make_plan(&m, tables.as_ref(), &cfg)?;
            dir.write("plan.json", plan.to_json()?.as_bytes())?;
            say(json!({"plan": plan.hash()?, "removed": plan.remove.len(), "param_count": plan.param_count}));
        }
        Command::Prune { model, plan } => {
            let m = load_model(model)?;
            let plan: PruningPlan = read_json(plan)?;
            dir.input("model", m.hash());
            dir.input("plan", plan.hash()?);
            let pruned = plan.apply(&m)?;
            write_model(&mut dir, "model.ckpt", &pruned)?;
            say(json!({"model": pruned.hash(), "param_count": pruned.param_count()}));
        }
        Command::Distill { model, teacher, data } => {
            let student = load_model(model)?;
            let ds = load_dataset(&cfg, data.as_deref())?;
            dir.input("model", student.hash());
            dir.input("dataset", ds.hash());
            let teacher = teacher.as_deref().map(load_model).transpose()?;
            let dc = match &teacher {
                Some(t) => {
                    dir.input("teacher", t.hash());
                    cfg.stage.distill.clone()
                }
                None => cfg.stage.distill.itc_only(),
            };
            let (trained, report) = train_distill(&student, teacher.as_ref(), &ds.train, Some(&ds.val), &dc)?;
            write_model(&mut dir, "model.ckpt", &trained)?;
            write_timed(&mut dir, "train_report.json", &report)?;
            say(json!({"model": trained.hash(), "metrics": report.final_metrics}));
        }
        Command::Eval { model, data, split } => {
            let m = load_model(model)?;
            let ds = load_dataset(&cfg, data.as_deref())?;
            let split = pick_split(&ds, data.as_deref(), split.as_deref())?;
            dir.input("model", m.hash());
            dir.input("split", split.hash());
            let metrics = evaluate(&m, split, &AblationSet::new(), &cfg.stage.score.objective.ks)?;
            dir.write_json("metrics.json", &metrics)?;
            say(serde_json::to_value(&metrics)?);
        }
        Command::Pipeline { stage, teacher, data, .. } => {
            let stage: Stage = stage.parse()?;
            let ds = load_dataset(&cfg, data.as_deref())?;
            dir.input("dataset", ds.hash());
            let teacher = teacher_or_train(&mut dir, &cfg, &ds, teacher.as_deref())?;
            let t0 = Instant::now();
            let run = run_pipeline(&teacher, &ds, &cfg.target, &cfg.stage, stage.framework())?;
            dir.time("pipeline", t0.elapsed().as_secs_f64());
            for (i, t) in run.report.tables.iter().enumerate() {
                dir.write(&format!("cost_tables_{i}.json"), t.to_json()?.as_bytes())?;
            }
            for (i, p) in run.report.plans.iter().enumerate() {
                dir.write(&format!("plan_{i}.json"), p.to_json()?.as_bytes())?;
            }
            write_model(&mut dir, "student.ckpt", &run.student)?;
            dir.write_json("metrics.json", &run.report.final_metrics)?;
            write_timed(&mut dir, "report.json", &run.report)?;
            say(json!({
                "student": run.report.student_hash,
                "param_count": run.report.param_count,
                "phases": run.report.phases.len(),
                "metrics": run.report.final_metrics,
            }));
        }
        Command::Compare { teacher, data, losses, .. } => {
            let ds = load_dataset(&cfg, data.as_deref())?;
            dir.input("dataset", ds.hash());
            let teacher = teacher_or_train(&mut dir, &cfg, &ds, teacher.as_deref())?;
            if *losses {
                let ablation = run_loss_ablation(&teacher, &ds, &cfg.target, &cfg.stage)?;
                dir.write_json("loss_ablation.json", &ablation)?;
                say(json!({"rows": ablation.rows.iter().map(|r| json!({"label": r.label, "recall_mean": r.metrics.recall_mean})).collect::<Vec<_>>()}));
            } else {
                let variants: Vec<Variant> = cfg.strategies.iter().map(|&s| Variant::strategy(s)).collect();
                let cmp = compare_strategies(&teacher, &ds, &cfg.target, &variants, &cfg.stage)?;
                write_timed(&mut dir, "comparison.json", &cmp)?;
                say(json!({"rows": cmp.rows.iter().map(|r| json!({"rank": r.rank, "variant": r.variant.to_string(), "recall_mean": r.metrics.recall_mean})).collect::<Vec<_>>()}));
            }
        }
        Command::Report { from, section } => {
            let dirs: Vec<PathBuf> = if from.is_empty() { vec![common.out.clone()] } else { from.clone() };
            let mut inputs = ReportInputs::default();
            for d in &dirs {
                for s in [Section::Strategies, Section::Losses] {
                    let p = d.join(s.artifact());
                    if !p.exists() {
                        continue;
                    }
                    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                    verify_against_manifest(d, s.artifact(), &bytes)?;
                    dir.input(s.artifact(), sha256_hex(&bytes));
                    let bad = |e: serde_json::Error| Error::Input(format!("{}: {e}", p.display()));
                    match s {
                        Section::Strategies => inputs.comparison = Some(serde_json::from_slice(&bytes).map_err(bad)?),
                        Section::Losses => {
                            inputs.loss_ablation = Some(serde_json::from_slice::<LossAblation>(&bytes).map_err(bad)?)
                        }
                    }
                }
            }
            let sections: Vec<Section> = if section.is_empty() {
                let present: Vec<Section> = [
                    (Section::Strategies, inputs.comparison.is_some()),
                    (Section::Losses, inputs.loss_ablation.is_some()),
                ]
                .into_iter()
                .filter_map(|(s, ok)| ok.then_some(s))
                .collect();
                if present.is_empty() {
                    vec![Section::Strategies, Section::Losses]
                } else {
                    present
                }
            } else {
                section
                    .iter()
                    .map(|s| {
                        serde_json::from_value(Value::String(s.clone()))
                            .map_err(|_| Error::Usage(format!("unknown report section `{s}` (strategies|losses)")))
                    })
                    .collect::<Result<_>>()?
            };
            let tables = build_report(&inputs, &sections)?;
            dir.write("report.md", render_markdown(&tables).as_bytes())?;
            dir.write("report.csv", render_csv(&tables)?.as_bytes())?;
            say(json!({"tables": tables.len()}));
        }
    }
    dir.time("total", started.elapsed().as_secs_f64());
    dir.finish()?;
    Ok(())
}

/// Width plan from the tables when the target narrows layers, depth plan
/// when it drops layers, combined when both apply.
fn make_plan(model: &DualEncoder, tables: Option<&CostTables>, cfg: &RunConfig) -> Result<PruningPlan> {
    let target = &cfg.target;
    target.validate()?;
    let width = if target.changes_width() {
        let t = tables.ok_or_else(|| Error::Usage("width pruning needs --tables".into()))?;
        Some(make_width_plan(model, t, target)?)
    } else {
        None
    };
    let drops_layers = crate::model::Encoder::BOTH.iter().any(|&e| {
        target
            .tower(e)
            .depth
            .is_some_and(|d| d < model.tower(e).arch.n_layers())
    });
    let depth = if drops_layers || width.is_none() {
        Some(make_depth_plan(model, tables, target, cfg.stage.strategy)?)
    } else {
        None
    };
    match (width, depth) {
        (Some(w), Some(d)) => PruningPlan::combine(model, &w, &d),
        (Some(w), None) => Ok(w),
        (None, Some(d)) => Ok(d),
        (None, None) => unreachable!("depth plan is built when there is no width plan"),
    }
}
