//! The `ndf-rec` command line.
//!
//! Every subcommand writes its outputs under `--out` together with a
//! `run-manifest.txt` of `key=value` lines: the command, seed, effective
//! config and a CRC-32 per artifact. The manifest's `timestamp=` line is the
//! only output that differs between identical runs.

use std::error::Error;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dof::{
    dof_forest_adapter, estimate_dof, format_table, ConstantZero, DofRow, GlobalMean, LeastSquares,
    Regressor, SimulatedTask, TaskFunction,
};
use crate::gradcheck::{run_suites, TOLERANCE};
use crate::ndf::{ForestConfig, PruningMode};
use crate::pipeline::{
    default_q_grid, evaluate, metric_k, train_with, tune_q, Checkpoint, ConfigError, SessionModel,
    TrainConfig,
};
use crate::session::{
    generate_synthetic, load_dataset_dir, write_dataset_dir, SessionDataset, SyntheticConfig,
};

type CliResult<T> = Result<T, Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(
    name = "ndf-rec",
    version,
    about = "Neural decision forest add-on for session-based recommendation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic session dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint: HR@k and MRR@k.
    Eval(EvalArgs),
    /// Grid-search the merger weight q on the training split.
    TuneQ(TuneArgs),
    /// Estimate degrees of freedom on a simulated regression task.
    Dof(DofArgs),
    /// Finite-difference gradient checks of every primitive and the model.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn as_str(self) -> &'static str {
        match self {
            OnOff::On => "on",
            OnOff::Off => "off",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PruningArg {
    Off,
    Exclude,
    LiteralZero,
}

impl From<PruningArg> for PruningMode {
    fn from(p: PruningArg) -> Self {
        match p {
            PruningArg::Off => PruningMode::Off,
            PruningArg::Exclude => PruningMode::Exclude,
            PruningArg::LiteralZero => PruningMode::LiteralZero,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Directory for every output of the run.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub items: usize,
    #[arg(long, default_value_t = 2000)]
    pub sessions: usize,
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    #[arg(long, default_value_t = 2)]
    pub min_len: usize,
    #[arg(long, default_value_t = 4)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Model and training flags. Precedence: defaults, then `--config`, then
/// `--set`, then the dedicated flags.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alleviator: Option<OnOff>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub pruning_rate: Option<f64>,
    #[arg(long)]
    pub keep_fraction: Option<f64>,
    #[arg(long)]
    pub pruning: Option<PruningArg>,
    /// Merger weight on the base predictor.
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        let mut flags: Vec<String> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flags.push(format!("{k}={v}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push(
            "alleviator",
            self.alleviator.map(|v| v.as_str().to_string()),
        );
        push("trees", self.trees.map(|v| v.to_string()));
        push("depth", self.depth.map(|v| v.to_string()));
        push("pruning_rate", self.pruning_rate.map(|v| v.to_string()));
        push("keep_fraction", self.keep_fraction.map(|v| v.to_string()));
        push(
            "pruning",
            self.pruning.map(|v| PruningMode::from(v).to_string()),
        );
        push("q", self.q.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("learning_rate", self.learning_rate.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push(
            "eval_batch_size",
            self.eval_batch_size.map(|v| v.to_string()),
        );
        cfg.apply_overrides(&flags)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train.txt (and optionally test.txt).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Merger weight; defaults to the checkpoint's.
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Evaluation batch size; defaults to the checkpoint's.
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated q values.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct DofArgs {
    #[arg(long, default_value = "marsadd", value_parser = parse_function)]
    pub function: TaskFunction,
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    #[arg(long, default_value_t = 200)]
    pub replications: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub trees: usize,
    /// Comma-separated forest depths.
    #[arg(long, value_delimiter = ',', default_value = "5")]
    pub depths: Vec<usize>,
    /// Comma-separated pruning rates.
    #[arg(long, value_delimiter = ',', default_value = "0.3")]
    pub rates: Vec<f64>,
    #[arg(long, default_value_t = 0.8)]
    pub keep_fraction: f64,
    #[arg(long, value_enum, default_value = "exclude")]
    pub pruning: PruningArg,
    /// Full-batch epochs per forest fit.
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    /// Skip the mean, zero and least-squares reference rows.
    #[arg(long)]
    pub no_baselines: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

fn parse_function(s: &str) -> Result<TaskFunction, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Collects manifest lines and artifact checksums for one run.
struct Manifest {
    dir: PathBuf,
    lines: Vec<String>,
}

impl Manifest {
    fn new(dir: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            lines: vec![format!("command={command}")],
        })
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key}={value}"));
    }

    fn config(&mut self, cfg: &TrainConfig) {
        for line in cfg.to_text().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                self.lines.push(format!("config.{k}={v}"));
            }
        }
    }

    /// Writes `bytes` to `name` under the run directory and records its CRC.
    fn artifact(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.record(name, bytes);
        Ok(path)
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.lines.push(format!(
            "artifact.{name}.crc32={:08x}",
            crc32fast::hash(bytes)
        ));
        self.lines
            .push(format!("artifact.{name}.bytes={}", bytes.len()));
    }

    fn finish(mut self) -> CliResult<()> {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.lines.push(format!("timestamp={now}"));
        let mut text = self.lines.join("\n");
        text.push('\n');
        fs::write(self.dir.join("run-manifest.txt"), text)?;
        Ok(())
    }
}

fn load_data(dir: &Path) -> CliResult<SessionDataset> {
    let (ds, report) = load_dataset_dir(dir)?;
    if report.dropped_items + report.dropped_sessions > 0 {
        eprintln!(
            "dropped {} unknown test items and {} test sessions",
            report.dropped_items, report.dropped_sessions
        );
    }
    Ok(ds)
}

fn load_model(path: &Path, ds: &SessionDataset) -> CliResult<SessionModel> {
    let model = Checkpoint::load(path)?.into_model()?;
    if model.items() != ds.items() {
        return Err(format!(
            "checkpoint has {} items but the dataset vocabulary has {}",
            model.items(),
            ds.items()
        )
        .into());
    }
    Ok(model)
}

fn run_synth(a: &SynthArgs) -> CliResult<()> {
    let cfg = SyntheticConfig {
        items: a.items,
        sessions: a.sessions,
        noise: a.noise,
        min_len: a.min_len,
        max_len: a.max_len,
        test_fraction: a.test_fraction,
    };
    let ds = generate_synthetic(a.seed, &cfg)?;
    let mut m = Manifest::new(&a.out.out, "synth")?;
    m.set("seed", a.seed);
    m.set("items", a.items);
    m.set("sessions", a.sessions);
    m.set("noise", a.noise);
    m.set("min_len", a.min_len);
    m.set("max_len", a.max_len);
    m.set("test_fraction", a.test_fraction);
    write_dataset_dir(&ds, &a.out.out)?;
    for name in ["train.txt", "test.txt"] {
        let bytes = fs::read(a.out.out.join(name))?;
        m.record(name, &bytes);
    }
    println!(
        "wrote {} train and {} test sessions to {}",
        ds.train.len(),
        ds.test.len(),
        a.out.out.display()
    );
    m.finish()
}

fn run_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let ds = load_data(&a.data)?;
    let mut m = Manifest::new(&a.out.out, "train")?;
    m.set("seed", cfg.seed);
    m.set("data", a.data.display());
    m.config(&cfg);
    let k = metric_k(ds.items());
    let mut metrics = format!("epoch\tloss\tHR@{k}\tMRR@{k}\n");
    let out = train_with(&ds, &cfg, |e| {
        println!(
            "epoch={} loss={:.6} HR@{k}={:.6} MRR@{k}={:.6}",
            e.epoch, e.loss, e.hit_rate, e.mrr
        );
        let _ = writeln!(
            metrics,
            "{}\t{}\t{}\t{}",
            e.epoch, e.loss, e.hit_rate, e.mrr
        );
    })?;
    m.artifact("metrics.tsv", metrics.as_bytes())?;
    m.artifact("config.cfg", cfg.to_text().as_bytes())?;
    let path = m.artifact("model.ckpt", &Checkpoint::from_model(&out.model).to_bytes())?;
    println!("checkpoint={}", path.display());
    m.finish()
}

fn run_eval(a: &EvalArgs) -> CliResult<()> {
    let ds = load_data(&a.data)?;
    let mut model = load_model(&a.checkpoint, &ds)?;
    if let Some(b) = a.eval_batch_size {
        model.config.set("eval_batch_size", &b.to_string())?;
        model.config.validate()?;
    }
    let q = a.q.unwrap_or(model.config.q);
    let sessions = match a.split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    };
    if sessions.is_empty() {
        return Err("selected split has no sessions".into());
    }
    if a.k == 0 || a.k > model.items() {
        return Err(format!("k = {} must lie in 1..={}", a.k, model.items()).into());
    }
    let report = evaluate(&model, sessions, q, a.k)?;
    let mut text = report.to_text();
    let _ = writeln!(text, "q={q}");
    let _ = writeln!(text, "eval_batch_size={}", model.config.eval_batch_size);
    print!("{text}");
    let mut m = Manifest::new(&a.out.out, "eval")?;
    m.set("seed", model.config.seed);
    m.set("checkpoint", a.checkpoint.display());
    m.config(&model.config);
    m.artifact("eval.txt", text.as_bytes())?;
    m.finish()
}

fn run_tune(a: &TuneArgs) -> CliResult<()> {
    let ds = load_data(&a.data)?;
    let mut model = load_model(&a.checkpoint, &ds)?;
    let grid = if a.grid.is_empty() {
        default_q_grid()
    } else {
        a.grid.clone()
    };
    if let Some(bad) = grid.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(format!("grid value {bad} outside [0, 1]").into());
    }
    let t = tune_q(&model, &ds.train, &grid)?;
    let k = metric_k(model.items());
    let mut curve = format!("q\tHR@{k}\n");
    for (q, hr) in &t.curve {
        let _ = writeln!(curve, "{q}\t{hr}");
    }
    print!("{curve}");
    println!("q*={}", t.best_q);
    model.config.q = t.best_q;
    let mut m = Manifest::new(&a.out.out, "tune-q")?;
    m.set("seed", model.config.seed);
    m.set("checkpoint", a.checkpoint.display());
    m.set("best_q", t.best_q);
    m.config(&model.config);
    m.artifact("q-curve.tsv", curve.as_bytes())?;
    m.artifact("tuned.ckpt", &Checkpoint::from_model(&model).to_bytes())?;
    m.finish()
}

fn run_dof(a: &DofArgs) -> CliResult<()> {
    let task = SimulatedTask::new(a.function, a.points, a.sigma2, a.seed)?;
    let mut models: Vec<Box<dyn Regressor>> = Vec::new();
    if !a.no_baselines {
        models.push(Box::new(ConstantZero));
        models.push(Box::new(GlobalMean));
        models.push(Box::new(LeastSquares));
    }
    for &depth in &a.depths {
        for &rate in &a.rates {
            let mut reg = dof_forest_adapter(ForestConfig {
                trees: a.trees,
                depth,
                pruning_rate: rate,
                keep_fraction: a.keep_fraction,
                pruning: a.pruning.into(),
                seed: a.seed,
            })?;
            reg.epochs = a.epochs;
            reg.learning_rate = a.learning_rate;
            models.push(Box::new(reg));
        }
    }
    let mut rows = Vec::with_capacity(models.len());
    for model in &models {
        let est = estimate_dof(&task, model.as_ref(), a.replications, a.seed)?;
        eprintln!(
            "{}: DoF {:.3} (se {:.3})",
            model.name(),
            est.dof,
            est.std_error
        );
        rows.push(DofRow {
            model: model.name(),
            shape: model.forest_shape(),
            dof: est.dof,
        });
    }
    let table = format_table(&rows);
    print!("{table}");
    let mut m = Manifest::new(&a.out.out, "dof")?;
    m.set("seed", a.seed);
    m.set("function", a.function);
    m.set("points", a.points);
    m.set("replications", a.replications);
    m.set("sigma2", a.sigma2);
    m.set("epochs", a.epochs);
    m.set("learning_rate", a.learning_rate);
    m.artifact("dof.csv", table.as_bytes())?;
    m.finish()
}

/// Returns whether every suite passed.
fn run_grad_check(a: &GradCheckArgs) -> CliResult<bool> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        for (i, s) in run_suites(seed)?.into_iter().enumerate() {
            match worst.get_mut(i) {
                Some(w) => w.1 = w.1.max(s.report.max_rel_error),
                None => worst.push((s.name, s.report.max_rel_error)),
            }
        }
    }
    let mut text = String::from("suite\tmax_rel_error\tstatus\n");
    let mut ok = true;
    for (name, err) in &worst {
        let pass = *err < TOLERANCE;
        ok &= pass;
        let _ = writeln!(
            text,
            "{name}\t{err:.3e}\t{}",
            if pass { "pass" } else { "FAIL" }
        );
    }
    let _ = writeln!(text, "seeds={}", a.seeds);
    let _ = writeln!(text, "result={}", if ok { "pass" } else { "fail" });
    print!("{text}");
    let mut m = Manifest::new(&a.out.out, "grad-check")?;
    m.set("seed", a.seed);
    m.set("seeds", a.seeds);
    m.set("tolerance", TOLERANCE);
    m.artifact("gradcheck.tsv", text.as_bytes())?;
    m.finish()?;
    Ok(ok)
}

/// Runs one command and returns the process exit status: 0 on success,
/// 1 on runtime failure, 2 on usage errors (including bad config keys or
/// values).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::TuneQ(a) => run_tune(a).map(|_| true),
        Command::Dof(a) => run_dof(a).map(|_| true),
        Command::GradCheck(a) => run_grad_check(a),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is::<ConfigError>() {
                2
            } else {
                1
            }
        }
    }
}
