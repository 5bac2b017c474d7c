//! Command-line front end: data generation, training, open- and closed-loop
//! evaluation, gradient checks and plots.
//!
//! Every option can come from a flag or from a TOML config file with one table
//! per command (`[train]`, `[eval-open-loop]`, ...) plus optional top-level
//! `seed` and `out_dir`. Flags win over the file, the file over built-in
//! defaults. Each command writes `<output stem>.resolved.toml` next to its
//! main output.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::gradsuite::{self, GradTarget, SuiteReport};
use crate::planner::Setting;
use crate::scenario::{self, Family, ScenarioConfig, DEFAULT_DT};
use crate::simulator::{self, ClosedLoopMetrics, SimConfig};
use crate::stack::{Ablation, StackConfig};
use crate::training::{self, Checkpoint, EpochLog, LossConfig, MeanLosses, TrainConfig, TrainInit, TrainMode, OPEN_LOOP_METRICS};

/// Value of the `format_version` column in every CSV.
pub const CSV_VERSION: u32 = 1;
/// Default output directory when neither `--out-dir` nor the config sets one.
pub const OUT_DIR_ENV: &str = "DRIVESTACK_OUT_DIR";

const COMMANDS: [&str; 6] = ["gen-data", "train", "eval-open-loop", "eval-closed-loop", "grad-check", "plot"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            Error::Schema(_) | Error::HorizonMismatch { .. } | Error::Json(_) | Error::Shape(_) => CliError::Data(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Failures while reading an input file are data errors.
fn reading(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| match e {
        Error::Config(m) => CliError::Config(m),
        other => CliError::Data(format!("{}: {other}", path.display())),
    }
}

fn writing(path: &Path) -> impl FnOnce(&dyn Display) -> CliError + '_ {
    move |e| CliError::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn config_err(e: impl Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "drivestack", version, about = "Differentiable predict-plan-control stack: experiments and reports")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for default and relative output paths [env: DRIVESTACK_OUT_DIR].
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario file.
    GenData(GenDataArgs),
    /// Train a predictor (or tune cost weights) and write a checkpoint.
    Train(TrainArgs),
    /// Open-loop metrics relative to the no-prediction stack.
    EvalOpenLoop(EvalOpenLoopArgs),
    /// Closed-loop log-replay metrics relative to the no-prediction stack.
    EvalClosedLoop(EvalClosedLoopArgs),
    /// Analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// SVG bar charts of the relative columns of a metrics CSV.
    Plot(PlotArgs),
}

fn parse_named<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Comma-separated families, or `interactive` or `all`.
    #[arg(long, value_delimiter = ',')]
    pub family: Option<Vec<String>>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Time step in seconds.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Multiplier on the generator noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Emit long logs for closed-loop simulation.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub long: Option<bool>,
    #[arg(long)]
    pub intent_prob: Option<f64>,
    #[arg(long)]
    pub cue_prob: Option<f64>,
    /// Keep only interactive scenarios where the predicted agent matters.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub certify: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSettings {
    pub family: Vec<String>,
    pub count: usize,
    pub seed: u64,
    pub dt: f64,
    pub noise: f64,
    pub long: bool,
    pub intent_prob: f64,
    pub cue_prob: f64,
    pub certify: bool,
    pub out: Option<PathBuf>,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        let d = ScenarioConfig::default();
        GenDataSettings {
            family: vec!["interactive".into()],
            count: d.count,
            seed: d.seed,
            dt: DEFAULT_DT,
            noise: d.noise,
            long: d.long,
            intent_prob: d.intent_prob,
            cue_prob: d.cue_prob,
            certify: d.certify,
            out: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Scenario file; split into train and validation unless --val-data is given.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long, value_parser = parse_named::<TrainMode>)]
    pub mode: Option<TrainMode>,
    #[arg(long, value_parser = parse_named::<Setting>)]
    pub setting: Option<Setting>,
    /// Loss weights `a1,a2,a3` for NLL, planning and control terms.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub alphas: Option<Vec<f64>>,
    /// Offset (m) added to the prediction targets.
    #[arg(long)]
    pub bias_offset: Option<f64>,
    /// Offset direction `x,y` in the ego frame.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bias_direction: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Mixture components.
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, value_parser = parse_named::<Ablation>)]
    pub ablation: Option<Ablation>,
    /// Checkpoint whose predictor and weights start the run.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Relative perturbation of psi_2..5 applied to the initial weights.
    #[arg(long)]
    pub psi_perturbation: Option<f64>,
    #[arg(long)]
    pub perturb_seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub mode: TrainMode,
    pub setting: Setting,
    pub alphas: Option<Vec<f64>>,
    pub bias_offset: f64,
    pub bias_direction: Vec<f64>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub modes: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub ablation: Ablation,
    pub init: Option<PathBuf>,
    pub psi_perturbation: f64,
    pub perturb_seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSettings {
            data: None,
            val_data: None,
            mode: d.mode,
            setting: Setting::Rl,
            alphas: None,
            bias_offset: d.bias_offset,
            bias_direction: d.bias_direction.to_vec(),
            seed: d.seed,
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            clip_norm: d.clip_norm,
            modes: d.modes,
            train_fraction: 0.75,
            split_seed: 0,
            ablation: Ablation::Full,
            init: None,
            psi_perturbation: 0.0,
            perturb_seed: 0,
            out: None,
        }
    }
}

impl TrainSettings {
    fn alphas(&self) -> Result<[f64; 3], CliError> {
        match &self.alphas {
            None => Ok(self.mode.default_alphas(self.setting)),
            Some(a) => <[f64; 3]>::try_from(a.as_slice()).map_err(|_| CliError::Config(format!("alphas needs three values, got {}", a.len()))),
        }
    }

    fn train_config(&self) -> Result<TrainConfig, CliError> {
        let bias_direction = <[f64; 2]>::try_from(self.bias_direction.as_slice())
            .map_err(|_| CliError::Config(format!("bias_direction needs two values, got {}", self.bias_direction.len())))?;
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            seed: self.seed,
            mode: self.mode,
            modes: self.modes,
            bias_offset: self.bias_offset,
            bias_direction,
        })
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalOpenLoopArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub checkpoints: Option<Vec<PathBuf>>,
    /// Planning-loss target; defaults to the first checkpoint's setting.
    #[arg(long, value_parser = parse_named::<Setting>)]
    pub setting: Option<Setting>,
    #[arg(long, value_parser = parse_named::<Ablation>)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOpenLoopSettings {
    pub data: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub setting: Option<Setting>,
    pub ablation: Ablation,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalClosedLoopArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub checkpoints: Option<Vec<PathBuf>>,
    /// Simulated seconds.
    #[arg(long)]
    pub tsim: Option<f64>,
    /// Seconds between replans.
    #[arg(long)]
    pub replan: Option<f64>,
    #[arg(long, value_parser = parse_named::<Ablation>)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalClosedLoopSettings {
    pub data: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub tsim: f64,
    pub replan: f64,
    pub ablation: Ablation,
    pub out: Option<PathBuf>,
}

impl Default for EvalClosedLoopSettings {
    fn default() -> Self {
        let d = SimConfig::default();
        EvalClosedLoopSettings { data: None, checkpoints: Vec::new(), tsim: d.t_sim, replan: d.replan_interval, ablation: Ablation::Full, out: None }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheckArgs {
    /// Suite name, or `all`.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    pub target: String,
    pub seed: u64,
    pub instances: usize,
    pub out: Option<PathBuf>,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { target: "all".into(), seed: 0, instances: 100, out: None }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PlotArgs {
    #[arg(long)]
    pub metrics_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSettings {
    pub metrics_csv: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
struct ConfigFile {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    #[serde(flatten)]
    sections: toml::Table,
}

impl ConfigFile {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let file: ConfigFile = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(key) = file.sections.keys().find(|k| !COMMANDS.contains(&k.as_str())) {
            return Err(CliError::Config(format!("{}: unknown section or key '{key}'", path.display())));
        }
        Ok(file)
    }

    /// Top-level seed, then the command's table, then flags.
    fn resolve<A: Serialize, R: DeserializeOwned>(&self, command: &str, flags: &A, seeded: bool) -> Result<R, CliError> {
        let mut table = toml::Table::new();
        if let (true, Some(seed)) = (seeded, self.seed) {
            let seed = i64::try_from(seed).map_err(config_err)?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        if let Some(section) = self.sections.get(command) {
            let section = section.as_table().ok_or_else(|| CliError::Config(format!("[{command}] must be a table")))?;
            table.extend(section.clone());
        }
        table.extend(toml::Table::try_from(flags).map_err(config_err)?);
        toml::Value::Table(table).try_into().map_err(|e| CliError::Config(format!("[{command}]: {e}")))
    }
}

#[derive(Serialize)]
struct Snapshot<'a, R> {
    command: &'a str,
    version: &'a str,
    out_dir: &'a Path,
    config: &'a R,
}

struct Env {
    out_dir: PathBuf,
    file: ConfigFile,
}

impl Env {
    fn new(cli: &Cli) -> Result<Self, CliError> {
        let file = cli.config.as_deref().map(ConfigFile::load).transpose()?.unwrap_or_default();
        let out_dir = cli
            .out_dir
            .clone()
            .or_else(|| file.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Env { out_dir, file })
    }

    fn output(&self, out: Option<&Path>, default: &str) -> Result<PathBuf, CliError> {
        let path = match out {
            Some(p) if p.is_absolute() => p.to_path_buf(),
            Some(p) => self.out_dir.join(p),
            None => self.out_dir.join(default),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| writing(parent)(&e))?;
        }
        Ok(path)
    }

    fn snapshot<R: Serialize>(&self, command: &str, output: &Path, config: &R) -> Result<(), CliError> {
        let path = output.with_extension("resolved.toml");
        let snap = Snapshot { command, version: env!("CARGO_PKG_VERSION"), out_dir: &self.out_dir, config };
        let text = toml::to_string(&snap).map_err(|e| writing(&path)(&e))?;
        std::fs::write(&path, text).map_err(|e| writing(&path)(&e))
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| CliError::Config(format!("missing --{flag}")))
}

fn load_scenarios(path: &Path) -> Result<Vec<scenario::Scenario>, CliError> {
    scenario::load(path).map_err(reading(path))
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<Checkpoint>, CliError> {
    paths.iter().map(|p| Checkpoint::load(p).map_err(reading(p))).collect()
}

fn parse_families(names: &[String]) -> Result<Vec<Family>, CliError> {
    let mut out = Vec::new();
    for name in names {
        match name.as_str() {
            "interactive" => out.extend(Family::INTERACTIVE),
            "all" => out.extend(Family::ALL),
            other => out.push(other.parse().map_err(|e: Error| CliError::Config(e.to_string()))?),
        }
    }
    Ok(out)
}

/// Shortest round-trip decimal; empty for missing values.
fn num(x: f64) -> String {
    x.to_string()
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(columns: impl IntoIterator<Item = String>) -> Self {
        Table { header: std::iter::once("format_version".to_string()).chain(columns).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: impl IntoIterator<Item = String>) {
        let row: Vec<String> = std::iter::once(CSV_VERSION.to_string()).chain(row).collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let fail = |e: &dyn Display| writing(path)(e);
        let mut w = csv::Writer::from_path(path).map_err(|e| fail(&e))?;
        w.write_record(&self.header).map_err(|e| fail(&e))?;
        for row in &self.rows {
            w.write_record(row).map_err(|e| fail(&e))?;
        }
        w.flush().map_err(|e| fail(&e))
    }
}

fn gen_data(env: &Env, args: &GenDataArgs) -> Result<(), CliError> {
    let s: GenDataSettings = env.file.resolve("gen-data", args, true)?;
    let cfg = ScenarioConfig {
        families: parse_families(&s.family)?,
        count: s.count,
        seed: s.seed,
        dt: s.dt,
        noise: s.noise,
        long: s.long,
        intent_prob: s.intent_prob,
        cue_prob: s.cue_prob,
        certify: s.certify,
    };
    let out = env.output(s.out.as_deref(), "scenarios.json")?;
    let (scenarios, report) = scenario::generate(&cfg)?;
    scenario::save(&out, &scenarios).map_err(|e| writing(&out)(&e))?;
    eprintln!("wrote {} scenarios to {} ({} attempts, {} uncertified)", report.generated, out.display(), report.attempts, report.uncertified);
    env.snapshot("gen-data", &out, &GenDataSettings { out: Some(out.clone()), ..s })
}

fn loss_columns(prefix: &str) -> impl Iterator<Item = String> + '_ {
    ["nll", "ade", "plan_loss", "hindsight_cost", "mse", "total", "ctr_skipped", "count"].into_iter().map(move |c| format!("{prefix}_{c}"))
}

fn loss_values(m: &MeanLosses) -> impl Iterator<Item = String> {
    [m.nll, m.ade, m.plan, m.hindsight_cost, m.mse, m.total].into_iter().map(num).chain([m.ctr_skipped.to_string(), m.count.to_string()])
}

fn training_log(epochs: &[EpochLog]) -> Table {
    let psi = (1..=crate::cost::NUM_TERMS).map(|i| format!("psi_{i}"));
    let columns = std::iter::once("epoch".to_string())
        .chain(loss_columns("train"))
        .chain(loss_columns("val"))
        .chain(["max_grad_norm".to_string(), "alpha".to_string()])
        .chain(psi);
    let mut t = Table::new(columns);
    for e in epochs {
        t.push(
            std::iter::once(e.epoch.to_string())
                .chain(loss_values(&e.train))
                .chain(loss_values(&e.val))
                .chain([num(e.max_grad_norm), num(e.alpha)])
                .chain(e.psi.iter().copied().map(num)),
        );
    }
    t
}

fn train(env: &Env, args: &TrainArgs) -> Result<(), CliError> {
    let s: TrainSettings = env.file.resolve("train", args, true)?;
    let data = required(&s.data, "data")?;
    let loss = LossConfig::new(s.alphas()?, s.setting)?;
    let cfg = s.train_config()?;
    let stack = StackConfig { ablation: s.ablation, ..Default::default() };
    let scenarios = load_scenarios(data)?;
    let (train_set, val_set) = match &s.val_data {
        Some(v) => (scenarios, load_scenarios(v)?),
        None => {
            if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
                return Err(CliError::Config(format!("train_fraction must lie in (0, 1), got {}", s.train_fraction)));
            }
            scenario::split(&scenarios, s.train_fraction, s.split_seed)
        }
    };
    let mut init = TrainInit::default();
    if let Some(path) = &s.init {
        let ck = Checkpoint::load(path).map_err(reading(path))?;
        init = TrainInit { predictor: Some(ck.predictor), weights: ck.weights };
    }
    if s.psi_perturbation != 0.0 {
        init.weights = training::perturb_psi(&init.weights, s.psi_perturbation, s.perturb_seed)?;
    }
    let out = env.output(s.out.as_deref(), "checkpoint.json")?;
    let (ck, report) = training::train(&train_set, &val_set, &cfg, &loss, &stack, init, |e| {
        eprintln!("epoch {:>3}  train {:.5}  val nll {:.4} plan {:.5} hc {:.5} mse {:.5}", e.epoch, e.train.total, e.val.nll, e.val.plan, e.val.hindsight_cost, e.val.mse);
    })?;
    ck.save(&out).map_err(|e| writing(&out)(&e))?;
    training_log(&report.epochs).write(&out.with_extension("log.csv"))?;
    if !report.skipped_train.is_empty() || !report.skipped_val.is_empty() {
        eprintln!("skipped {} training and {} validation scenarios", report.skipped_train.len(), report.skipped_val.len());
    }
    env.snapshot("train", &out, &TrainSettings { out: Some(out.clone()), alphas: Some(s.alphas()?.to_vec()), ..s })
}

fn open_loop_tables(report: &training::OpenLoopReport) -> (Table, Table) {
    let metrics = OPEN_LOOP_METRICS;
    let group_columns = ["run".to_string(), "seeds".to_string()]
        .into_iter()
        .chain(metrics.iter().flat_map(|m| [format!("rel_{m}"), format!("rel_{m}_se")]))
        .chain(metrics.iter().map(|m| m.to_string()));
    let mut groups = Table::new(group_columns);
    for g in &report.groups {
        groups.push(
            [g.run.clone(), g.seeds.to_string()]
                .into_iter()
                .chain((0..metrics.len()).flat_map(|i| [num(g.relative[i]), num(g.relative_se[i])]))
                .chain(g.absolute.iter().copied().map(num)),
        );
    }
    let run_columns = ["run", "seed", "ade", "nll"]
        .into_iter()
        .map(String::from)
        .chain(metrics.iter().map(|m| m.to_string()))
        .chain(metrics.iter().map(|m| format!("rel_{m}")));
    let mut runs = Table::new(run_columns);
    for r in &report.runs {
        runs.push(
            [r.run.clone(), r.seed.map(|s| s.to_string()).unwrap_or_default(), opt_num(r.ade), opt_num(r.nll)]
                .into_iter()
                .chain(r.absolute.iter().copied().map(num))
                .chain(r.relative.iter().copied().map(num)),
        );
    }
    (groups, runs)
}

fn eval_open_loop(env: &Env, args: &EvalOpenLoopArgs) -> Result<(), CliError> {
    let s: EvalOpenLoopSettings = env.file.resolve("eval-open-loop", args, false)?;
    let scenarios = load_scenarios(required(&s.data, "data")?)?;
    let checkpoints = load_checkpoints(&s.checkpoints)?;
    let setting = s.setting.or_else(|| checkpoints.first().map(|c| c.loss.setting)).unwrap_or(Setting::Rl);
    let stack = StackConfig { ablation: s.ablation, ..Default::default() };
    let out = env.output(s.out.as_deref(), "open_loop.csv")?;
    let report = training::evaluate_open_loop(&scenarios, &checkpoints, setting, &stack)?;
    let (groups, runs) = open_loop_tables(&report);
    groups.write(&out)?;
    runs.write(&out.with_extension("runs.csv"))?;
    for g in &report.groups {
        println!("{:<24} plan {:+.5}  hindsight {:+.5}  mse {:+.5}", g.run, g.relative[0], g.relative[1], g.relative[2]);
    }
    if !report.skipped.is_empty() {
        eprintln!("skipped {} scenarios", report.skipped.len());
    }
    env.snapshot("eval-open-loop", &out, &EvalOpenLoopSettings { out: Some(out.clone()), setting: Some(setting), ..s })
}

fn closed_loop_table(report: &simulator::ClosedLoopReport) -> Result<Table, CliError> {
    let names = ClosedLoopMetrics::NAMES;
    let base = report.group(training::EvalRun::NoPrediction.label().as_str()).ok_or_else(|| CliError::Runtime("no scenario could be simulated".into()))?.mean;
    let columns = ["run".to_string(), "seeds".to_string(), "fallbacks".to_string()]
        .into_iter()
        .chain(names.iter().flat_map(|m| [format!("rel_{m}"), format!("rel_{m}_se"), m.to_string()]));
    let mut t = Table::new(columns);
    for g in &report.groups {
        let fallbacks: usize = report.records.iter().filter(|r| r.run == g.run).map(|r| r.fallbacks).sum();
        t.push(
            [g.run.clone(), g.seeds.to_string(), fallbacks.to_string()]
                .into_iter()
                .chain((0..names.len()).flat_map(|i| [num(g.mean[i] - base[i]), num(g.se[i]), num(g.mean[i])])),
        );
    }
    Ok(t)
}

fn eval_closed_loop(env: &Env, args: &EvalClosedLoopArgs) -> Result<(), CliError> {
    let s: EvalClosedLoopSettings = env.file.resolve("eval-closed-loop", args, false)?;
    let scenarios = load_scenarios(required(&s.data, "data")?)?;
    let checkpoints = load_checkpoints(&s.checkpoints)?;
    let stack = StackConfig { ablation: s.ablation, ..Default::default() };
    let sim = SimConfig { t_sim: s.tsim, replan_interval: s.replan };
    let out = env.output(s.out.as_deref(), "closed_loop.csv")?;
    let report = simulator::evaluate_closed_loop(&scenarios, &checkpoints, &stack, &sim)?;
    closed_loop_table(&report)?.write(&out)?;
    for g in &report.groups {
        println!("{:<24} trajectory cost {:.5} ± {:.5}", g.run, g.mean[0], g.se[0]);
    }
    if !report.skipped.is_empty() {
        eprintln!("skipped {} scenarios", report.skipped.len());
    }
    env.snapshot("eval-closed-loop", &out, &EvalClosedLoopSettings { out: Some(out.clone()), ..s })
}

fn grad_check(env: &Env, args: &GradCheckArgs) -> Result<(), CliError> {
    let s: GradCheckSettings = env.file.resolve("grad-check", args, true)?;
    let targets: Vec<GradTarget> = if s.target == "all" { GradTarget::ALL.to_vec() } else { vec![s.target.parse()?] };
    let out = env.output(s.out.as_deref(), "grad_check.json")?;
    let reports = targets.iter().map(|t| gradsuite::run(*t, s.seed, s.instances)).collect::<crate::Result<Vec<SuiteReport>>>()?;
    let json = serde_json::to_string_pretty(&reports).map_err(|e| writing(&out)(&e))?;
    std::fs::write(&out, json).map_err(|e| writing(&out)(&e))?;
    for r in &reports {
        println!("{:<12} {} checked {:>4} failed {:>3} skipped {:>4} max rel err {:.3e}", r.target.name(), if r.passed() { "PASS" } else { "FAIL" }, r.checked, r.failed, r.skipped, r.max_relative_error);
    }
    env.snapshot("grad-check", &out, &GradCheckSettings { out: Some(out.clone()), ..s })?;
    match reports.iter().filter(|r| !r.passed()).map(|r| r.target.name()).collect::<Vec<_>>() {
        failed if failed.is_empty() => Ok(()),
        failed => Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", ")))),
    }
}

fn plot(env: &Env, args: &PlotArgs) -> Result<(), CliError> {
    let s: PlotSettings = env.file.resolve("plot", args, false)?;
    let csv_path = required(&s.metrics_csv, "metrics-csv")?;
    let chart = read_chart(csv_path)?;
    let default = csv_path.with_extension("svg").file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "plot.svg".into());
    let out = env.output(s.out.as_deref(), &default)?;
    std::fs::write(&out, chart.svg()).map_err(|e| writing(&out)(&e))?;
    env.snapshot("plot", &out, &PlotSettings { out: Some(out.clone()), ..s })
}

struct Panel {
    metric: String,
    values: Vec<f64>,
    errors: Vec<Option<f64>>,
}

struct Chart {
    labels: Vec<String>,
    panels: Vec<Panel>,
}

fn read_chart(path: &Path) -> Result<Chart, CliError> {
    let bad = |e: &dyn Display| CliError::Data(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(&e))?;
    let header = reader.headers().map_err(|e| bad(&e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let run = col("run").ok_or_else(|| bad(&"no 'run' column"))?;
    let seed = col("seed");
    let metrics: Vec<(usize, Option<usize>, String)> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("rel_") && !h.ends_with("_se"))
        .map(|(i, h)| (i, col(&format!("{h}_se")), h.trim_start_matches("rel_").to_string()))
        .collect();
    if metrics.is_empty() {
        return Err(bad(&"no relative metric columns"));
    }
    let mut chart = Chart {
        labels: Vec::new(),
        panels: metrics.iter().map(|(_, _, m)| Panel { metric: m.clone(), values: Vec::new(), errors: Vec::new() }).collect(),
    };
    let parse = |s: &str| s.parse::<f64>().map_err(|e| bad(&format!("'{s}': {e}")));
    for row in reader.records() {
        let row = row.map_err(|e| bad(&e))?;
        let mut label = row[run].to_string();
        if let Some(seed) = seed.map(|i| &row[i]).filter(|s| !s.is_empty()) {
            label = format!("{label} (seed {seed})");
        }
        chart.labels.push(label);
        for ((i, se, _), panel) in metrics.iter().zip(chart.panels.iter_mut()) {
            panel.values.push(parse(&row[*i])?);
            panel.errors.push(se.map(|j| parse(&row[j])).transpose()?);
        }
    }
    Ok(chart)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl Chart {
    const WIDTH: f64 = 760.0;
    const LABEL: f64 = 220.0;
    const BAR: f64 = 22.0;
    const TITLE: f64 = 34.0;
    const GAP: f64 = 26.0;

    fn svg(&self) -> String {
        let rows = self.labels.len() as f64;
        let panel_height = Self::TITLE + rows * Self::BAR + Self::GAP;
        let height = panel_height * self.panels.len() as f64;
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{height}\" viewBox=\"0 0 {w} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            w = Self::WIDTH
        );
        for (k, panel) in self.panels.iter().enumerate() {
            out.push_str(&self.panel_svg(panel, k as f64 * panel_height));
        }
        out.push_str("</svg>\n");
        out
    }

    fn panel_svg(&self, panel: &Panel, top: f64) -> String {
        let spans = panel.values.iter().zip(&panel.errors).map(|(v, e)| {
            let e = e.unwrap_or(0.0);
            (v - e, v + e)
        });
        let (lo, hi) = spans.fold((0.0f64, 0.0f64), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let plot_width = Self::WIDTH - Self::LABEL - 90.0;
        let x = |v: f64| Self::LABEL + (v - lo) / span * plot_width;
        let y0 = top + Self::TITLE;
        let mut s = format!("<text x=\"10\" y=\"{:.1}\" font-weight=\"bold\">relative {}</text>\n", top + 20.0, xml_escape(&panel.metric));
        for (i, (label, (v, e))) in self.labels.iter().zip(panel.values.iter().zip(&panel.errors)).enumerate() {
            let y = y0 + i as f64 * Self::BAR;
            let (a, b) = (x(0.0).min(x(*v)), x(0.0).max(x(*v)));
            let fill = if *v <= 0.0 { "#4878a8" } else { "#c8553d" };
            s.push_str(&format!("<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n", Self::LABEL - 8.0, y + 15.0, xml_escape(label)));
            s.push_str(&format!("<rect x=\"{a:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{fill}\"/>\n", y + 4.0, b - a, Self::BAR - 8.0));
            if let Some(e) = e.filter(|e| *e > 0.0) {
                let mid = y + Self::BAR / 2.0;
                s.push_str(&format!("<line x1=\"{:.1}\" y1=\"{mid:.1}\" x2=\"{:.1}\" y2=\"{mid:.1}\" stroke=\"black\"/>\n", x(v - e), x(v + e)));
            }
            s.push_str(&format!("<text x=\"{:.1}\" y=\"{:.1}\">{v:+.4}</text>\n", x(hi) + 6.0, y + 15.0));
        }
        let (zx, bottom) = (x(0.0), y0 + self.labels.len() as f64 * Self::BAR);
        s.push_str(&format!("<line x1=\"{zx:.1}\" y1=\"{y0:.1}\" x2=\"{zx:.1}\" y2=\"{bottom:.1}\" stroke=\"#333\"/>\n"));
        s
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let env = Env::new(cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(&env, a),
        Command::Train(a) => train(&env, a),
        Command::EvalOpenLoop(a) => eval_open_loop(&env, a),
        Command::EvalClosedLoop(a) => eval_closed_loop(&env, a),
        Command::GradCheck(a) => grad_check(&env, a),
        Command::Plot(a) => plot(&env, a),
    }
}

/// Parses the process arguments, runs the command and maps errors to exit
/// codes: 2 for configuration, 3 for input data, 4 for runtime failures.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("drivestack").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file: ConfigFile = toml::from_str("seed = 9\n[train]\nepochs = 3\nmode = \"diffstack\"\nlearning_rate = 0.01\n").unwrap();
        let cli = parse(&["train", "--epochs", "7", "--alphas", "1,0,0"]);
        let Command::Train(args) = &cli.command else { unreachable!() };
        let s: TrainSettings = file.resolve("train", args, true).unwrap();
        assert_eq!(s.epochs, 7);
        assert_eq!(s.mode, TrainMode::Diffstack);
        assert_eq!(s.seed, 9);
        assert_eq!(s.learning_rate, 0.01);
        assert_eq!(s.alphas().unwrap(), [1.0, 0.0, 0.0]);
        assert_eq!(s.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn mode_defaults_pick_alphas() {
        let cli = parse(&["train", "--mode", "diffstack", "--setting", "rl"]);
        let Command::Train(args) = &cli.command else { unreachable!() };
        let s: TrainSettings = ConfigFile::default().resolve("train", args, true).unwrap();
        assert_eq!(s.alphas().unwrap(), [1.0, 100.0, 1000.0]);
        let cli = parse(&["train", "--bias-offset", "1.0"]);
        let Command::Train(args) = &cli.command else { unreachable!() };
        let s: TrainSettings = ConfigFile::default().resolve("train", args, true).unwrap();
        assert_eq!(s.train_config().unwrap().bias_vector(), [1.0, 0.0]);
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(Cli::try_parse_from(["drivestack", "train", "--mode", "nope"]).is_err());
        let file: ConfigFile = toml::from_str("[train]\nepochz = 3\n").unwrap();
        let cli = parse(&["train"]);
        let Command::Train(args) = &cli.command else { unreachable!() };
        let err = file.resolve::<_, TrainSettings>("train", args, true).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let cli = parse(&["train", "--alphas", "1,2"]);
        let Command::Train(args) = &cli.command else { unreachable!() };
        let s: TrainSettings = ConfigFile::default().resolve("train", args, true).unwrap();
        assert_eq!(s.alphas().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn error_classes() {
        assert_eq!(CliError::from(Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::Schema("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(Error::HorizonMismatch { expected: 6, got: 5 }).exit_code(), 3);
        assert_eq!(CliError::from(Error::Domain("x".into())).exit_code(), 4);
        let missing = Path::new("/nonexistent/x.json");
        assert_eq!(reading(missing)(Error::Io(std::io::Error::from(std::io::ErrorKind::NotFound))).exit_code(), 3);
    }

    #[test]
    fn families_expand() {
        assert_eq!(parse_families(&["interactive".into()]).unwrap(), Family::INTERACTIVE.to_vec());
        assert_eq!(parse_families(&["cut_in".into(), "crossing".into()]).unwrap(), vec![Family::CutIn, Family::Crossing]);
        assert_eq!(parse_families(&["bogus".into()]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn chart_reads_relative_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "format_version,run,seeds,rel_a,rel_a_se,a\n1,x,1,0,0,2\n1,y<z,3,-0.5,0.1,1.5\n").unwrap();
        let chart = read_chart(&path).unwrap();
        assert_eq!(chart.labels, ["x", "y<z"]);
        assert_eq!(chart.panels.len(), 1);
        assert_eq!(chart.panels[0].values, [0.0, -0.5]);
        let svg = chart.svg();
        assert!(svg.starts_with("<svg") && svg.contains("y&lt;z") && svg.contains("-0.5000"));
    }
}
