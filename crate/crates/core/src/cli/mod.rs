//! Command-line driver: `train`, `eval`, `gradcheck`, `count` and `trace`.
//!
//! Exit codes: 0 success, 1 other failure (output I/O), 2 configuration,
//! 3 divergence, 4 checkpoint, 5 gradient check.

pub mod checkpoint;
pub mod gradcheck;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    count_params, count_params_for_config, estimate_flops, trace_attention, write_trace_csv, ParamReport, Quantity,
    REPORT_CSV_HEADER,
};
use crate::attention::BlockVariant;
use crate::autodiff::OpKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2SeqModel, BOS, EOS};
use crate::tensor::Real;
use crate::training::{evaluate, train_with_progress, MetricsRow, Precision, Task, TrainConfig};

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, write_atomic};

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const CHECKPOINT: i32 = 4;
    pub const GRADCHECK: i32 = 5;
}

/// Environment variable that replaces the seeds of a config.
pub const SEED_ENV: &str = "HVAT_SEED";

pub const METRICS_HEADER: &str = "epoch,step,split,loss,token_accuracy,ppl";

/// Output locations of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    /// Defaults to `model.hvat` inside `out_dir`.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            checkpoint_path: None,
        }
    }
}

impl IoConfig {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.hvat"))
    }
}

/// Contents of a run config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len.1 + 1 > self.model.max_len {
            return Err(Error::config(
                "train.seq_len",
                format!(
                    "targets of up to {} tokens plus the end marker exceed max_len {}",
                    self.train.seq_len.1, self.model.max_len
                ),
            ));
        }
        Ok(())
    }

    /// Replaces both the model and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Pretty JSON with every default spelled out and the checkpoint path
    /// resolved.
    pub fn effective_json(&self) -> Result<String> {
        let mut resolved = self.clone();
        resolved.io.checkpoint_path = Some(self.io.checkpoint());
        Ok(serde_json::to_string_pretty(&resolved)? + "\n")
    }
}

/// Seed from `--seed-override`, else from the environment value, else
/// `None` (keep the config's).
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match env {
        None => Ok(None),
        Some(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(SEED_ENV, format!("`{s}` is not an unsigned integer"))),
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.step,
            r.split.name(),
            r.loss,
            r.token_accuracy,
            r.ppl
        ));
    }
    out
}

#[derive(Parser, Debug)]
#[command(name = "hvat", version, about = "Transformer with horizontal and vertical attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on freshly generated task data.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Print parameter counts and FLOP estimates.
    Count(CountArgs),
    /// Write alpha, beta and attention matrices of one example as CSV.
    Trace(TraceArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Output directory, replacing `io.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for both model and training, taking precedence over HVAT_SEED.
    #[arg(long)]
    pub seed_override: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Run config (for example an effective-config.json) whose `train`
    /// section supplies the data settings; flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    /// Run seed; evaluation uses its validation stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of evaluation pairs.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Block variant to check, or `all`.
    #[arg(long, default_value = "all")]
    pub variant: String,
    /// Sizes as `N=3,D=8,M=2,Da=2` (N <= 8, D <= 16).
    #[arg(long, default_value = "N=3,D=8,M=2,Da=2")]
    pub dims: String,
    /// Seed for block inputs and parameters.
    #[arg(long, default_value_t = gradcheck::DEFAULT_SEED)]
    pub seed: u64,
    /// Corrupt the backward rule of one operation.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    /// Run config whose `model` section is counted.
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sequence length for the FLOP estimate; defaults to `max_len`.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Also write the CSV report to this file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    pub checkpoint: PathBuf,
    /// Source tokens, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub src: Vec<usize>,
    /// Decoder input tokens; defaults to BOS followed by the greedy output.
    #[arg(long, value_delimiter = ',')]
    pub tgt: Option<Vec<usize>>,
    /// Any of alpha, beta, attention; defaults to all the variant has.
    #[arg(long, value_delimiter = ',')]
    pub quantities: Option<Vec<QuantityArg>>,
    /// Output file; standard output if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum QuantityArg {
    Alpha,
    Beta,
    Attention,
}

impl From<QuantityArg> for Quantity {
    fn from(q: QuantityArg) -> Self {
        match q {
            QuantityArg::Alpha => Quantity::Alpha,
            QuantityArg::Beta => Quantity::Beta,
            QuantityArg::Attention => Quantity::Attention,
        }
    }
}

impl clap::ValueEnum for Task {
    fn value_variants<'a>() -> &'a [Self] {
        &[Task::Copy, Task::Reverse, Task::Sort]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

/// Process environment seen by the commands.
#[derive(Clone, Debug, Default)]
pub struct Env {
    /// Value of `HVAT_SEED`, if set.
    pub seed: Option<String>,
}

impl Env {
    pub fn from_process() -> Self {
        Self {
            seed: std::env::var(SEED_ENV).ok(),
        }
    }
}

/// Error message paired with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::Json(_) | Error::Input(_) => exit::CONFIG,
            Error::Divergence { .. } => exit::DIVERGENCE,
            Error::Checkpoint(_) => exit::CHECKPOINT,
            Error::Io { .. } | Error::Shape(_) | Error::Contract(_) => exit::FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Reading the input file failed: configuration errors stay as they are,
/// I/O errors take `code`.
fn reading(code: i32) -> impl Fn(Error) -> Failure {
    move |e| match e {
        Error::Io { .. } => Failure::new(code, e.to_string()),
        other => other.into(),
    }
}

fn io_failure(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::new(exit::FAILURE, format!("i/o error on {}: {e}", path.display()))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, env: &Env, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, env, out),
        Command::Eval(a) => cmd_eval(&a, env, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out, err),
        Command::Count(a) => cmd_count(&a, out),
        Command::Trace(a) => cmd_trace(&a, out),
    };
    match result {
        Ok(()) => exit::OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

/// Entry point of the `hvat` binary.
pub fn main() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(
        std::env::args_os(),
        &Env::from_process(),
        &mut stdout.lock(),
        &mut stderr.lock(),
    )
}

fn cmd_train(args: &TrainArgs, env: &Env, out: &mut dyn Write) -> CmdResult {
    let mut cfg = RunConfig::load(&args.config).map_err(reading(exit::CONFIG))?;
    if let Some(seed) = resolve_seed(args.seed_override, env.seed.as_deref())? {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &args.out {
        cfg.io.out_dir = dir.clone();
    }
    cfg.validate()?;
    let dir = cfg.io.out_dir.clone();
    fs::create_dir_all(&dir).map_err(io_failure(&dir))?;
    write_atomic(&dir.join("effective-config.json"), cfg.effective_json()?.as_bytes())?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(&cfg, out),
        Precision::F64 => train_as::<f64>(&cfg, out),
    }
}

fn train_as<T: Real>(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let mut model = Seq2SeqModel::<T>::build(&cfg.model)?;
    let data = cfg.train.datasets(cfg.model.vocab_size)?;
    let mut rows = Vec::new();
    let result = train_with_progress(&mut model, &cfg.train, &data, |r| {
        let _ = writeln!(
            out,
            "epoch {} step {} {}: loss {:.6} token_accuracy {:.4} ppl {:.4}",
            r.epoch,
            r.step,
            r.split.name(),
            r.loss,
            r.token_accuracy,
            r.ppl
        );
        rows.push(*r);
    });
    let metrics = cfg.io.out_dir.join("metrics.csv");
    write_atomic(&metrics, metrics_csv(&rows).as_bytes())?;
    result?;
    let ckpt = cfg.io.checkpoint();
    save_checkpoint(&model, &ckpt)?;
    let _ = writeln!(out, "wrote {} and {}", metrics.display(), ckpt.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs, env: &Env, out: &mut dyn Write) -> CmdResult {
    let mut train = match &args.config {
        Some(p) => RunConfig::load(p).map_err(reading(exit::CONFIG))?.train,
        None => TrainConfig::default(),
    };
    if let Some(seed) = resolve_seed(args.seed, env.seed.as_deref())? {
        train.seed = seed;
    }
    if let Some(task) = args.task {
        train.task = task;
    }
    if let Some(count) = args.count {
        train.val_size = count;
    }
    if let Some(lo) = args.min_len {
        train.seq_len.0 = lo;
    }
    if let Some(hi) = args.max_len {
        train.seq_len.1 = hi;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    train.validate()?;
    let metrics = match args.precision {
        PrecisionArg::F32 => eval_as::<f32>(&args.checkpoint, &train)?,
        PrecisionArg::F64 => eval_as::<f64>(&args.checkpoint, &train)?,
    };
    let _ = writeln!(out, "loss {}", metrics.loss);
    let _ = writeln!(out, "token_accuracy {}", metrics.token_accuracy);
    let _ = writeln!(out, "ppl {}", metrics.ppl);
    Ok(())
}

fn eval_as<T: Real>(path: &Path, train: &TrainConfig) -> std::result::Result<crate::training::EvalMetrics, Failure> {
    let model = load_checkpoint::<T>(path).map_err(reading(exit::CHECKPOINT))?;
    let pairs = train.validation_set(model.config().vocab_size)?;
    Ok(evaluate(&model, &pairs, train.batch_size)?)
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let variants: Vec<BlockVariant> = if args.variant.eq_ignore_ascii_case("all") {
        BlockVariant::ALL.to_vec()
    } else {
        vec![args.variant.parse()?]
    };
    let dims: gradcheck::Dims = args.dims.parse()?;
    let fault = match &args.inject_fault {
        None => None,
        Some(name) => Some(
            OpKind::from_name(name)
                .ok_or_else(|| Error::config("inject-fault", format!("unknown operation `{name}`")))?,
        ),
    };
    let report = gradcheck::run_suite_seeded(&variants, &dims, fault, args.seed)?;
    let _ = writeln!(
        out,
        "gradient check at {dims}, seed {}, h = {}, tolerance {}",
        args.seed,
        gradcheck::STEP,
        gradcheck::TOLERANCE
    );
    for (kind, results) in [("op", &report.ops), ("block", &report.blocks)] {
        for r in results {
            let status = if r.passed() { "ok" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{kind:<5} {:<24} {:.3e} {status}",
                r.name, r.report.max_relative_error
            );
        }
    }
    let _ = writeln!(out, "max relative error {:.3e}", report.max_relative_error());
    if report.passed() {
        return Ok(());
    }
    for r in report.failures() {
        let _ = write!(
            err,
            "failed: {} (max relative error {:.3e}",
            r.name, r.report.max_relative_error
        );
        if let Some((input, element, analytic, numeric)) = r.report.worst {
            let _ = write!(
                err,
                " at input {input} element {element}: analytic {analytic:e}, numeric {numeric:e}"
            );
        }
        let _ = writeln!(err, ")");
    }
    let names: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
    Err(Failure::new(
        exit::GRADCHECK,
        format!(
            "gradient check exceeded {} in: {}",
            gradcheck::TOLERANCE,
            names.join(", ")
        ),
    ))
}

fn cmd_count(args: &CountArgs, out: &mut dyn Write) -> CmdResult {
    let (config, report): (ModelConfig, ParamReport) = match (&args.config, &args.checkpoint) {
        (Some(p), _) => {
            let cfg = RunConfig::load(p).map_err(reading(exit::CONFIG))?;
            cfg.model.validate()?;
            let report = count_params_for_config(&cfg.model);
            (cfg.model, report)
        }
        (None, Some(p)) => {
            let model = load_checkpoint::<f32>(p).map_err(reading(exit::CHECKPOINT))?;
            (model.config().clone(), count_params(&model))
        }
        (None, None) => {
            return Err(Failure::new(
                exit::CONFIG,
                "either --config or --checkpoint is required",
            ))
        }
    };
    let flops = estimate_flops(&config, args.n.unwrap_or(config.max_len))?;
    let csv = format!("{REPORT_CSV_HEADER}\n{}{}", report.to_csv(), flops.to_csv());
    match args.format {
        Format::Text => {
            let _ = write!(out, "{report}\n{flops}");
        }
        Format::Csv => {
            let _ = write!(out, "{csv}");
        }
    }
    if let Some(path) = &args.csv {
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(())
}

fn cmd_trace(args: &TraceArgs, out: &mut dyn Write) -> CmdResult {
    let model = load_checkpoint::<f64>(&args.checkpoint).map_err(reading(exit::CHECKPOINT))?;
    let variant = model.config().variant;
    let quantities: Vec<Quantity> = match &args.quantities {
        Some(q) => q.iter().map(|&q| q.into()).collect(),
        None => {
            let mut q = Vec::new();
            if variant.has_horizontal() {
                q.push(Quantity::Alpha);
            }
            if variant.has_vertical() {
                q.push(Quantity::Beta);
            }
            q.push(Quantity::Attention);
            q
        }
    };
    let tgt = match &args.tgt {
        Some(t) => t.clone(),
        None => {
            let steps = model.config().max_len.saturating_sub(1).max(1);
            let mut t = vec![BOS];
            t.extend(model.greedy_decode(&args.src, steps, BOS, EOS)?);
            t.truncate(model.config().max_len);
            t
        }
    };
    let records = trace_attention(&model, &args.src, &tgt, &quantities)?;
    let mut buf = Vec::new();
    write_trace_csv(&records, &mut buf).expect("writing to memory");
    match &args.out {
        Some(path) => write_atomic(path, &buf)?,
        None => {
            let _ = out.write_all(&buf);
        }
    }
    Ok(())
}
