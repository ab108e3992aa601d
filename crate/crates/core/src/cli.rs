//! Command-line front end.
//!
//! Each command resolves its settings from built-in defaults, then an
//! optional `--config` TOML file, then flags, and writes the resolved
//! settings to `<out-dir>/logs/<command>.config.toml` before doing any work.
//! Passing that file back through `--config` repeats the run.

use std::ffi::OsString;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::eval::{self, InferenceMode, Sampling};
use crate::model::Model;
use crate::scene::{self, read_scenes, write_scenes, ScenarioKind, Scene, World};
use crate::tensor::Checkpoint;
use crate::training::{self, TrainConfig};

const PRECEDENCE: &str = "\
Settings precedence: command-line flags override values from --config, which override built-in defaults.
Outputs go under the output root (--out-dir or HIERDRIVE_OUT): checkpoints/, reports/, plots/, logs/.
Exit codes: 0 ok, 2 usage error, 3 data error (missing or malformed input), 4 runtime error.";

#[derive(Debug, Parser)]
#[command(name = "hierdrive", version, about = "Hierarchical driving planner on a synthetic world", after_help = PRECEDENCE)]
pub struct Cli {
    /// Output root holding checkpoints/, reports/, plots/ and logs/.
    #[arg(long, global = true, env = "HIERDRIVE_OUT", default_value = "runs")]
    pub out_dir: PathBuf,
    /// TOML file with settings for the command (same keys as its effective-config record).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Open-loop L2 / collision evaluation, optionally with the long-tail suite.
    EvalOpen(EvalOpenArgs),
    /// Closed-loop rollouts in scripted worlds.
    EvalClosed(EvalClosedArgs),
    /// Plan for scenes and write the selected trajectories.
    Infer(InferArgs),
    /// Render scenes with their plans as SVG.
    Plot(PlotArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::EvalOpen(_) => "eval-open",
            Command::EvalClosed(_) => "eval-closed",
            Command::Infer(_) => "infer",
            Command::Plot(_) => "plot",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Seed range `start..end`, one scene per seed.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Output `.scenes` file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Family weights `kind=w,...`, or `default` for all families equally.
    #[arg(long)]
    pub mix: Option<String>,
    /// Fraction of seeds for `--out`; the rest (and zero-shot families) go to `--val-out`.
    #[arg(long)]
    pub split: Option<f64>,
    /// Validation `.scenes` file, required when `--split` < 1.
    #[arg(long)]
    pub val_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModeArgs {
    /// deterministic, intent_sample, traj_sample or dual_sample.
    #[arg(long)]
    pub mode: Option<String>,
    /// Softmax temperature for sampled modes.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training `.scenes` file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write [default: <out-dir>/checkpoints/model.ckpt].
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Seed for initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Intent anchors.
    #[arg(long)]
    pub k: Option<usize>,
    /// Trajectory modes.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalOpenArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// `.scenes` file to evaluate.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report file [default: <out-dir>/reports/eval-open.jsonl].
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also run the long-tail suite (three_point_turn, stop_resume, overtake).
    #[arg(long)]
    pub long_tail: bool,
    /// Scenes per long-tail family.
    #[arg(long)]
    pub long_tail_scenes: Option<usize>,
    /// First seed of the long-tail scenes.
    #[arg(long)]
    pub long_tail_seed: Option<u64>,
    #[command(flatten)]
    pub mode: ModeArgs,
}

#[derive(Debug, Args)]
pub struct EvalClosedArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Scenario family.
    #[arg(long)]
    pub scenario: Option<String>,
    /// World seed range `start..end`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Planning steps (2 Hz) before a rollout is cut off.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Rollouts per world; each draws its own sampling seed.
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// Remove scripted agents from the worlds.
    #[arg(long)]
    pub no_agents: bool,
    /// Report file [default: <out-dir>/reports/eval-closed.jsonl].
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub mode: ModeArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Only this scene (0-based line index).
    #[arg(long)]
    pub index: Option<usize>,
    /// Output file [default: <out-dir>/reports/infer.jsonl].
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub mode: ModeArgs,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// First scene to draw (0-based line index).
    #[arg(long)]
    pub index: Option<usize>,
    /// Number of scenes to draw.
    #[arg(long)]
    pub count: Option<usize>,
    /// Intents to draw.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Modes of the best intent to draw.
    #[arg(long)]
    pub top_m: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataSettings {
    pub seeds: String,
    pub out: Option<PathBuf>,
    pub mix: String,
    pub split: f64,
    pub val_out: Option<PathBuf>,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        GenDataSettings {
            seeds: "0..200".into(),
            out: None,
            mix: "default".into(),
            split: 1.0,
            val_out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeSettings {
    pub mode: String,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ModeSettings {
    fn default() -> Self {
        ModeSettings {
            mode: Sampling::Deterministic.name().into(),
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl ModeSettings {
    fn resolve(&self) -> CliResult<InferenceMode> {
        let sampling: Sampling = self.mode.parse().map_err(|e| CliError::Usage(format!("--mode: {e}")))?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CliError::Usage(format!(
                "--temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(InferenceMode::new(sampling, self.temperature, self.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOpenSettings {
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub long_tail: bool,
    pub long_tail_scenes: usize,
    pub long_tail_seed: u64,
    pub inference: ModeSettings,
}

impl Default for EvalOpenSettings {
    fn default() -> Self {
        EvalOpenSettings {
            ckpt: None,
            data: None,
            report: None,
            long_tail: false,
            long_tail_scenes: 25,
            long_tail_seed: 1_000_000,
            inference: ModeSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalClosedSettings {
    pub ckpt: Option<PathBuf>,
    pub scenario: String,
    pub seeds: String,
    pub budget: usize,
    pub rollouts: usize,
    pub no_agents: bool,
    pub report: Option<PathBuf>,
    pub inference: ModeSettings,
}

impl Default for EvalClosedSettings {
    fn default() -> Self {
        EvalClosedSettings {
            ckpt: None,
            scenario: ScenarioKind::LaneKeep.name().into(),
            seeds: "0..5".into(),
            budget: 60,
            rollouts: 1,
            no_agents: false,
            report: None,
            inference: ModeSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSettings {
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub index: Option<usize>,
    pub output: Option<PathBuf>,
    pub inference: ModeSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotSettings {
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub index: usize,
    pub count: usize,
    pub top_k: usize,
    pub top_m: usize,
}

impl Default for PlotSettings {
    fn default() -> Self {
        PlotSettings {
            ckpt: None,
            data: None,
            index: 0,
            count: 1,
            top_k: 3,
            top_m: 3,
        }
    }
}

/// Flag overrides as a TOML table, keyed like the settings.
#[derive(Default)]
struct Overrides(toml::Table);

impl Overrides {
    fn set<T: Serialize>(&mut self, path: &[&str], v: Option<T>) {
        let Some(v) = v else { return };
        let value = toml::Value::try_from(v).expect("flag values serialize");
        let mut table = &mut self.0;
        for key in &path[..path.len() - 1] {
            table = table
                .entry(key.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("override paths are tables");
        }
        table.insert(path[path.len() - 1].to_string(), value);
    }

    fn flag(&mut self, path: &[&str], on: bool) {
        if on {
            self.set(path, Some(true));
        }
    }

    fn mode(&mut self, m: &ModeArgs) {
        self.set(&["inference", "mode"], m.mode.clone());
        self.set(&["inference", "temperature"], m.temperature);
        self.set(&["inference", "seed"], m.seed);
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve<S: Serialize + DeserializeOwned + Default>(config: Option<&Path>, flags: Overrides) -> CliResult<S> {
    let mut table = match toml::Value::try_from(S::default()).expect("defaults serialize") {
        toml::Value::Table(t) => t,
        _ => unreachable!("settings are tables"),
    };
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("config file {}: {e}", path.display())))?;
        let file: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
        merge(&mut table, file);
    }
    merge(&mut table, flags.0);
    let where_ = config.map(|p| format!(" (config file {})", p.display())).unwrap_or_default();
    S::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Usage(format!("invalid settings{where_}: {e}")))
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    v.as_ref().ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

fn existing(path: &Path, flag: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("--{flag}: file not found: {}", path.display())))
    }
}

pub fn parse_seeds(s: &str) -> Result<Range<u64>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected `start..end`, got `{s}`"))?;
    let a: u64 = a.trim().parse().map_err(|_| format!("bad range start in `{s}`"))?;
    let b: u64 = b.trim().parse().map_err(|_| format!("bad range end in `{s}`"))?;
    if b <= a {
        return Err(format!("empty range `{s}`"));
    }
    Ok(a..b)
}

pub fn parse_mix(s: &str) -> Result<Vec<(ScenarioKind, f64)>, String> {
    if s == "default" {
        return Ok(scene::default_mix());
    }
    s.split(',')
        .map(|part| {
            let (k, w) = part
                .split_once('=')
                .ok_or_else(|| format!("expected `kind=weight`, got `{part}`"))?;
            let kind = ScenarioKind::parse(k.trim()).ok_or_else(|| format!("unknown scenario `{}`", k.trim()))?;
            let w: f64 = w.trim().parse().map_err(|_| format!("bad weight in `{part}`"))?;
            Ok((kind, w))
        })
        .collect()
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn dir(&self, name: &str) -> CliResult<PathBuf> {
        let d = self.root.join(name);
        std::fs::create_dir_all(&d).map_err(|e| CliError::Runtime(format!("creating {}: {e}", d.display())))?;
        Ok(d)
    }

    fn record<S: Serialize>(&self, command: &str, settings: &S) -> CliResult<PathBuf> {
        let path = self.dir("logs")?.join(format!("{command}.config.toml"));
        let text = toml::to_string(settings).expect("settings serialize");
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("creating {}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn load_scenes(path: &Path, flag: &str) -> CliResult<Vec<Scene>> {
    existing(path, flag)?;
    read_scenes(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> CliResult<Model> {
    existing(path, "ckpt")?;
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))?;
    Model::from_checkpoint(&ckpt).map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let layout = Layout {
        root: cli.out_dir.clone(),
    };
    let config = cli.config.as_deref();
    let name = cli.command.name();
    match &cli.command {
        Command::GenData(a) => {
            let mut o = Overrides::default();
            o.set(&["seeds"], a.seeds.clone());
            o.set(&["out"], a.out.clone());
            o.set(&["mix"], a.mix.clone());
            o.set(&["split"], a.split);
            o.set(&["val_out"], a.val_out.clone());
            gen_data(&layout, name, resolve(config, o)?)
        }
        Command::Train(a) => {
            let mut o = Overrides::default();
            o.set(&["data"], a.data.clone());
            o.set(&["ckpt"], a.ckpt.clone());
            o.set(&["train", "epochs"], a.epochs);
            o.set(&["train", "batch_size"], a.batch_size);
            o.set(&["train", "lr0"], a.lr0);
            o.set(&["train", "lr_min"], a.lr_min);
            o.set(&["train", "weight_decay"], a.weight_decay);
            o.set(&["train", "seed"], a.seed);
            o.set(&["train", "k"], a.k);
            o.set(&["train", "m"], a.m);
            o.set(&["train", "d_model"], a.d_model);
            o.set(&["train", "grad_clip"], a.grad_clip);
            train(&layout, name, resolve(config, o)?)
        }
        Command::EvalOpen(a) => {
            let mut o = Overrides::default();
            o.set(&["ckpt"], a.ckpt.clone());
            o.set(&["data"], a.data.clone());
            o.set(&["report"], a.report.clone());
            o.flag(&["long_tail"], a.long_tail);
            o.set(&["long_tail_scenes"], a.long_tail_scenes);
            o.set(&["long_tail_seed"], a.long_tail_seed);
            o.mode(&a.mode);
            eval_open(&layout, name, resolve(config, o)?)
        }
        Command::EvalClosed(a) => {
            let mut o = Overrides::default();
            o.set(&["ckpt"], a.ckpt.clone());
            o.set(&["scenario"], a.scenario.clone());
            o.set(&["seeds"], a.seeds.clone());
            o.set(&["budget"], a.budget);
            o.set(&["rollouts"], a.rollouts);
            o.flag(&["no_agents"], a.no_agents);
            o.set(&["report"], a.report.clone());
            o.mode(&a.mode);
            eval_closed(&layout, name, resolve(config, o)?)
        }
        Command::Infer(a) => {
            let mut o = Overrides::default();
            o.set(&["ckpt"], a.ckpt.clone());
            o.set(&["data"], a.data.clone());
            o.set(&["index"], a.index);
            o.set(&["output"], a.output.clone());
            o.mode(&a.mode);
            infer(&layout, name, resolve(config, o)?)
        }
        Command::Plot(a) => {
            let mut o = Overrides::default();
            o.set(&["ckpt"], a.ckpt.clone());
            o.set(&["data"], a.data.clone());
            o.set(&["index"], a.index);
            o.set(&["count"], a.count);
            o.set(&["top_k"], a.top_k);
            o.set(&["top_m"], a.top_m);
            plot(&layout, name, resolve(config, o)?)
        }
    }
}

fn gen_data(layout: &Layout, name: &str, s: GenDataSettings) -> CliResult<()> {
    let out = required(&s.out, "out")?.clone();
    let seeds = parse_seeds(&s.seeds).map_err(|e| CliError::Usage(format!("--seeds: {e}")))?;
    let mix = parse_mix(&s.mix).map_err(|e| CliError::Usage(format!("--mix: {e}")))?;
    if !(0.0..=1.0).contains(&s.split) {
        return Err(CliError::Usage(format!("--split must lie in [0, 1], got {}", s.split)));
    }
    let splitting = s.split < 1.0 || s.val_out.is_some();
    if splitting && s.val_out.is_none() {
        return Err(CliError::Usage("--split below 1 needs --val-out".into()));
    }
    layout.record(name, &s)?;
    let (train, val) = if splitting {
        scene::build_dataset(seeds, &mix, (s.split, 1.0 - s.split)).map_err(|e| CliError::Usage(e.to_string()))?
    } else {
        // everything into one file, zero-shot families included
        let (a, b) = scene::build_dataset(seeds, &mix, (1.0, 0.0)).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut all = a;
        all.extend(b);
        all.sort_by_key(|sc| sc.id.rsplit_once('-').map(|(_, n)| n.to_string()));
        (all, Vec::new())
    };
    write_scenes(&out, &train).map_err(runtime)?;
    println!("wrote {} scenes to {}", train.len(), out.display());
    if let Some(v) = &s.val_out {
        write_scenes(v, &val).map_err(runtime)?;
        println!("wrote {} scenes to {}", val.len(), v.display());
    }
    Ok(())
}

fn train(layout: &Layout, name: &str, mut s: TrainSettings) -> CliResult<()> {
    let data = required(&s.data, "data")?.clone();
    existing(&data, "data")?;
    s.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ckpt = s
        .ckpt
        .get_or_insert_with(|| layout.root.join("checkpoints").join("model.ckpt"))
        .clone();
    layout.record(name, &s)?;
    let all = load_scenes(&data, "data")?;
    let (train, held): (Vec<Scene>, Vec<Scene>) = all
        .into_iter()
        .partition(|sc| !sc.kind().is_some_and(|k| k.is_zero_shot()));
    if !held.is_empty() {
        eprintln!("note: skipped {} zero-shot scenes", held.len());
    }
    if train.is_empty() {
        return Err(CliError::Data(format!("{}: no trainable scenes", data.display())));
    }
    let log_path = layout.dir("logs")?.join("train.metrics.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
    let mut log_err = None;
    let trained = training::fit(&train, &s.train, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })
    .map_err(|e| match e {
        training::TrainError::Config(m) => CliError::Usage(m),
        training::TrainError::EmptyTrainSet => CliError::Data(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;
    if let Some(e) = log_err {
        return Err(CliError::Runtime(format!("{}: {e}", log_path.display())));
    }
    write_file(&ckpt, &trained.checkpoint(&s.train).to_bytes())?;
    println!("wrote checkpoint {}", ckpt.display());
    Ok(())
}

fn eval_open(layout: &Layout, name: &str, mut s: EvalOpenSettings) -> CliResult<()> {
    let ckpt = required(&s.ckpt, "ckpt")?.clone();
    let data = required(&s.data, "data")?.clone();
    let mode = s.inference.resolve()?;
    let report = s
        .report
        .get_or_insert_with(|| layout.root.join("reports").join("eval-open.jsonl"))
        .clone();
    existing(&ckpt, "ckpt")?;
    existing(&data, "data")?;
    layout.record(name, &s)?;
    let model = load_model(&ckpt)?;
    let scenes = load_scenes(&data, "data")?;
    let (records, agg) = eval::open_loop(&model, &scenes, &mode).map_err(|e| match e {
        eval::EvalError::Empty => CliError::Data(format!("{}: no scenes", data.display())),
        other => runtime(other),
    })?;
    if let Some(parent) = report.parent() {
        std::fs::create_dir_all(parent).map_err(runtime)?;
    }
    eval::write_report(&report, &records, &agg).map_err(runtime)?;
    println!("{}", serde_json::to_string(&agg).expect("report serializes"));
    println!("wrote {}", report.display());
    if s.long_tail {
        if s.long_tail_scenes == 0 {
            return Err(CliError::Usage("--long-tail-scenes must be positive".into()));
        }
        let seeds = s.long_tail_seed..s.long_tail_seed + s.long_tail_scenes as u64;
        let families = eval::long_tail_eval(&model, seeds, &mode).map_err(runtime)?;
        let path = report.with_file_name("long-tail.jsonl");
        let summary = serde_json::json!({ "families": families.len(), "scenes_per_family": s.long_tail_scenes });
        eval::write_report(&path, &families, &summary).map_err(runtime)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct ClosedAggregate {
    rollouts: usize,
    success_rate: f64,
    mean_completion: f64,
    collision_rate: f64,
}

fn eval_closed(layout: &Layout, name: &str, mut s: EvalClosedSettings) -> CliResult<()> {
    let ckpt = required(&s.ckpt, "ckpt")?.clone();
    let mode = s.inference.resolve()?;
    let kind = ScenarioKind::parse(&s.scenario)
        .ok_or_else(|| CliError::Usage(format!("--scenario: unknown scenario `{}`", s.scenario)))?;
    let seeds = parse_seeds(&s.seeds).map_err(|e| CliError::Usage(format!("--seeds: {e}")))?;
    if s.rollouts == 0 {
        return Err(CliError::Usage("--rollouts must be positive".into()));
    }
    let report = s
        .report
        .get_or_insert_with(|| layout.root.join("reports").join("eval-closed.jsonl"))
        .clone();
    existing(&ckpt, "ckpt")?;
    layout.record(name, &s)?;
    let model = load_model(&ckpt)?;
    let mut reports = Vec::new();
    for seed in seeds {
        let mut world = World::new(seed, kind);
        if s.no_agents {
            world = world.without_agents();
        }
        for r in 0..s.rollouts {
            let m = InferenceMode {
                seed: mode.seed.wrapping_add(r as u64),
                ..mode
            };
            reports.push(eval::rollout_world(&model, &world, &m, s.budget).map_err(runtime)?.report);
        }
    }
    let n = reports.len() as f64;
    let agg = ClosedAggregate {
        rollouts: reports.len(),
        success_rate: reports.iter().filter(|r| r.success).count() as f64 / n,
        mean_completion: reports.iter().map(|r| r.completion).sum::<f64>() / n,
        collision_rate: reports.iter().filter(|r| r.collisions > 0).count() as f64 / n,
    };
    if let Some(parent) = report.parent() {
        std::fs::create_dir_all(parent).map_err(runtime)?;
    }
    eval::write_report(&report, &reports, &agg).map_err(runtime)?;
    println!("{}", serde_json::to_string(&agg).expect("report serializes"));
    println!("wrote {}", report.display());
    Ok(())
}

#[derive(Serialize)]
struct InferRecord<'a> {
    id: &'a str,
    intent: usize,
    mode: usize,
    trajectory: &'a [crate::geom::Vec2],
    intent_logits: &'a [f64],
    mode_logits: &'a [f64],
}

fn select_scenes(scenes: Vec<Scene>, index: Option<usize>, count: usize, data: &Path) -> CliResult<Vec<Scene>> {
    let n = scenes.len();
    let start = index.unwrap_or(0);
    let take = if index.is_some() { count } else { n };
    if start >= n {
        return Err(CliError::Usage(format!(
            "--index {start} out of range: {} has {n} scenes",
            data.display()
        )));
    }
    Ok(scenes.into_iter().skip(start).take(take).collect())
}

fn infer(layout: &Layout, name: &str, mut s: InferSettings) -> CliResult<()> {
    let ckpt = required(&s.ckpt, "ckpt")?.clone();
    let data = required(&s.data, "data")?.clone();
    let mode = s.inference.resolve()?;
    let output = s
        .output
        .get_or_insert_with(|| layout.root.join("reports").join("infer.jsonl"))
        .clone();
    existing(&ckpt, "ckpt")?;
    existing(&data, "data")?;
    layout.record(name, &s)?;
    let model = load_model(&ckpt)?;
    let scenes = select_scenes(load_scenes(&data, "data")?, s.index, 1, &data)?;
    let mut rng = mode.rng();
    let mut out = String::new();
    for scene in &scenes {
        let inf = eval::infer_input(&model, &model.input(scene), &mode, &mut rng).map_err(runtime)?;
        let rec = InferRecord {
            id: &scene.id,
            intent: inf.intent,
            mode: inf.mode,
            trajectory: &inf.trajectory,
            intent_logits: &inf.prediction.plan.intent_logits,
            mode_logits: &inf.prediction.plan.mode_logits[inf.intent],
        };
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    }
    write_file(&output, out.as_bytes())?;
    println!("wrote {} plans to {}", scenes.len(), output.display());
    Ok(())
}

fn plot(layout: &Layout, name: &str, s: PlotSettings) -> CliResult<()> {
    let ckpt = required(&s.ckpt, "ckpt")?.clone();
    let data = required(&s.data, "data")?.clone();
    existing(&ckpt, "ckpt")?;
    existing(&data, "data")?;
    layout.record(name, &s)?;
    let model = load_model(&ckpt)?;
    let scenes = select_scenes(load_scenes(&data, "data")?, Some(s.index), s.count, &data)?;
    let dir = layout.dir("plots")?;
    for scene in &scenes {
        let pred = model.predict(scene).map_err(runtime)?;
        let svg = eval::plot::plan_svg(scene, &pred.plan, s.top_k, s.top_m);
        let path = dir.join(format!("{}.svg", scene.id));
        write_file(&path, svg.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_parse() {
        assert_eq!(parse_seeds("0..100").unwrap(), 0..100);
        assert!(parse_seeds("5..5").is_err());
        assert!(parse_seeds("a..3").is_err());
        assert!(parse_seeds("7").is_err());
    }

    #[test]
    fn mix_parse() {
        assert_eq!(parse_mix("default").unwrap().len(), ScenarioKind::ALL.len());
        let m = parse_mix("lane_keep=2, overtake=0.5").unwrap();
        assert_eq!(m, vec![(ScenarioKind::LaneKeep, 2.0), (ScenarioKind::Overtake, 0.5)]);
        assert!(parse_mix("drift=1").unwrap_err().contains("drift"));
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "data = \"a.scenes\"\n[train]\nepochs = 5\nlr0 = 0.01\n").unwrap();
        let mut o = Overrides::default();
        o.set(&["train", "epochs"], Some(7usize));
        let s: TrainSettings = resolve(Some(&cfg), o).unwrap();
        assert_eq!(s.train.epochs, 7);
        assert_eq!(s.train.lr0, 0.01);
        assert_eq!(s.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(s.data, Some(PathBuf::from("a.scenes")));
    }

    #[test]
    fn unknown_config_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "[train]\nepoch = 5\n").unwrap();
        let err = resolve::<TrainSettings>(Some(&cfg), Overrides::default()).unwrap_err();
        assert_eq!(err.code(), 2);
        assert!(err.message().contains("epoch"), "{}", err.message());
    }

    #[test]
    fn missing_config_file_is_a_data_error() {
        let err = resolve::<TrainSettings>(Some(Path::new("/nonexistent/c.toml")), Overrides::default()).unwrap_err();
        assert_eq!(err.code(), 3);
    }

    #[test]
    fn records_round_trip_through_resolve() {
        let s = EvalClosedSettings {
            ckpt: Some("m.ckpt".into()),
            rollouts: 8,
            ..EvalClosedSettings::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.toml");
        std::fs::write(&p, toml::to_string(&s).unwrap()).unwrap();
        assert_eq!(resolve::<EvalClosedSettings>(Some(&p), Overrides::default()).unwrap(), s);
    }
}
