//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config;
use crate::encoder::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::eval::protocol::{self, resolve_protocol};
use crate::eval::report::{self, EvalReport};
use crate::losses;
use crate::prompts::{self, PriorBank};
use crate::store::{self, EmbeddingStore, Label, Record, RecordMeta, Split};
use crate::synthetic::{self, BenchmarkSpec};
use crate::trainer::{self, StepLog, TrainConfig};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  bad command-line flags
  3  missing or unreadable file (io)
  4  malformed input file: embedding container, sidecar or report (schema)
  5  invalid config value or unknown config key (config)
  6  protocol selects unknown or empty data (data)
  7  numerical failure: dimension mismatch, zero norm, non-finite value (numeric)
  8  gradient check above tolerance (grad_check)

On failure a single line `error: code=<n> kind=<kind> msg=<json string>` is
written to stderr.";

#[derive(Debug, Parser)]
#[command(name = "unkspoof", version, about = "One-class prompt learning for face anti-spoofing", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark (embedding file, sidecar, spec).
    GenData(GenDataArgs),
    /// Fit prompts on a protocol's training split; writes checkpoint and log.
    Train(RunArgs),
    /// Fit and evaluate a protocol; writes the report JSON as well.
    Eval(EvalArgs),
    /// Aggregate report JSON files into summary CSV and JSON.
    Report(ReportArgs),
    /// Encode a prompt checkpoint into real / unknown / spoof embeddings.
    ExportPrompts(ExportArgs),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheckArgs),
}

/// Training hyperparameters. Flags override values from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of unknown-spoof prompts.
    #[arg(long)]
    pub nu: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub lambda4: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

impl TrainFlags {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => config::read(path)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.nu {
            c.num_unknown = v;
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.eta {
            c.eta = v;
        }
        for (i, v) in [self.lambda1, self.lambda2, self.lambda3, self.lambda4].into_iter().enumerate() {
            if let Some(v) = v {
                c.lambda[i] = v;
            }
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Config whose text encoder anchors the real cluster.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Benchmark spec JSON; the built-in default benchmark when absent.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    /// Embedding file with its `.meta.jsonl` sidecar.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Sidecar path, when it is not next to the embedding file.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Prior descriptions: a text file with one per line, or an embedding
    /// file of pre-encoded descriptions. Built-in descriptions when absent.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Protocol name (P1..P6, A1..A14, B1..B7), `default`, or
    /// `SRC[+SRC]->TGT[+TGT][@ATTACK]`.
    #[arg(long, default_value = "default")]
    pub protocol: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyChoice {
    Fixed,
    Eer,
    Both,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = PolicyChoice::Both)]
    pub threshold_policy: PolicyChoice,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files written by `eval`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    /// Prompt checkpoint written by `train` or `eval`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Output embedding file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    /// Number of consecutive seeds, starting at `--seed`, to check.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub priors: Option<PathBuf>,
}

/// Failure of a CLI run, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn line(&self) -> String {
        format!(
            "error: code={} kind={} msg={}",
            self.code,
            self.kind,
            serde_json::Value::String(self.message.clone())
        )
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io { .. } => (3, "io"),
            Error::BadMagic(_)
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::TrailingData(_)
            | Error::DuplicateId(_)
            | Error::Metadata(_)
            | Error::Json { .. } => (4, "schema"),
            Error::Config(_) | Error::InvalidParameter(_) => (5, "config"),
            Error::SpoofInTraining(_)
            | Error::MissingClass(_)
            | Error::UnknownDomain(_)
            | Error::UnknownAttack(_)
            | Error::EmptySplit { .. }
            | Error::Empty(_) => (6, "data"),
            Error::DimensionMismatch { .. } | Error::ZeroNorm | Error::NonFinite(_) | Error::ZeroDim => {
                (7, "numeric")
            }
        };
        CliError {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            let err = CliError {
                code: 2,
                kind: "usage",
                message: e.kind().to_string(),
            };
            eprintln!("{}", err.line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code)
        }
    }
}

pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(&a)?,
        Command::Train(a) => {
            train(&a)?;
        }
        Command::Eval(a) => eval(&a)?,
        Command::Report(a) => report_cmd(&a)?,
        Command::ExportPrompts(a) => export_prompts(&a)?,
        Command::GradCheck(a) => grad_check(&a)?,
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = match &a.benchmark {
        Some(path) => BenchmarkSpec::read(path)?,
        None => {
            let config = match &a.config {
                Some(path) => config::read(path)?,
                None => TrainConfig::default(),
            };
            synthetic::standard_benchmark(&config, a.seed)?
        }
    };
    let data = spec.generate()?;
    create_dir(&a.out)?;
    spec.write(&a.out.join("benchmark.json"))?;
    store::write_embeddings(&data, &a.out.join("embeddings.fase"))?;
    println!("wrote {} rows to {}", data.len(), a.out.join("embeddings.fase").display());
    Ok(())
}

/// Text priors (one description per non-empty line) or a FASE embedding file.
pub fn load_priors(
    path: Option<&Path>,
    config: &TrainConfig,
    encoder: &dyn FrozenTextEncoder,
) -> Result<PriorBank> {
    let tokenizer = config.tokenizer();
    let Some(path) = path else {
        return PriorBank::default_bank(&tokenizer, encoder);
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&store::MAGIC) {
        return PriorBank::from_store(&store::read_embeddings(path)?);
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Metadata(format!("{}: priors are not UTF-8", path.display())))?;
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    PriorBank::encode(&lines, &tokenizer, encoder)
}

fn warn_if_degenerate(bank: &PriorBank) -> Result<()> {
    if losses::prior_is_degenerate(&prompts::prior_prototype(bank)?) {
        eprintln!("warning: prior prototype has near-zero norm; the guidance term has no direction");
    }
    Ok(())
}

fn load_store(a: &RunArgs) -> Result<EmbeddingStore> {
    match &a.manifest {
        Some(meta) => store::read_embeddings_with_meta(&a.embeddings, meta),
        None => store::read_embeddings(&a.embeddings),
    }
}

fn write_log(log: &[StepLog], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(log).expect("training log serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

struct Trained {
    config: TrainConfig,
    run: Option<protocol::ProtocolRun>,
}

fn fit_and_write(a: &RunArgs, evaluate: bool) -> Result<Trained> {
    let config = a.train.resolve()?;
    let encoder = config.encoder()?;
    let tokenizer = config.tokenizer();
    let bank = load_priors(a.priors.as_deref(), &config, &encoder)?;
    warn_if_degenerate(&bank)?;
    let data = load_store(a)?;
    let spec = resolve_protocol(&a.protocol)?;
    create_dir(&a.out)?;
    config::write(&config, &a.out.join("config.txt"))?;
    let (fit, run) = if evaluate {
        let run = protocol::run_protocol(&spec, &config, &data, &bank, &encoder, &tokenizer)?;
        (None, Some(run))
    } else {
        let (train, _) = protocol::build_protocol(&data, &spec)?;
        (Some(trainer::fit(&config, &train, &bank, &encoder, &tokenizer)?), None)
    };
    let fit = fit.as_ref().or(run.as_ref().map(|r| &r.fit)).expect("one of the two is set");
    prompts::write_prompts(&fit.prompts, &a.out.join("prompts.fase"))?;
    write_log(&fit.log, &a.out.join("training_log.json"))?;
    Ok(Trained { config, run })
}

fn train(a: &RunArgs) -> Result<()> {
    let t = fit_and_write(a, false)?;
    println!("trained {} ({}) -> {}", a.protocol, t.config.hash(), a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let t = fit_and_write(&a.run, true)?;
    let mut report = t.run.expect("evaluation requested").report;
    match a.threshold_policy {
        PolicyChoice::Fixed => report.retain_policies(&["fixed"]),
        PolicyChoice::Eer => report.retain_policies(&["eer"]),
        PolicyChoice::Both => {}
    }
    report.write(&a.run.out.join("report.json"))?;
    let acer = report
        .policies
        .iter()
        .map(|p| format!("acer_{}={:.4}", p.policy, p.acer))
        .collect::<Vec<_>>()
        .join(" ");
    println!("{} auc={:.4} eer={:.4} {acer}", report.protocol, report.auc, report.eer);
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| EvalReport::read(p))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    let csv = a.out.join("summary.csv");
    std::fs::write(&csv, report::summary_csv(&reports)).map_err(|e| Error::io(&csv, e))?;
    let json = a.out.join("summary.json");
    std::fs::write(&json, report::summary_json(&reports)).map_err(|e| Error::io(&json, e))?;
    println!("summarized {} reports into {}", reports.len(), csv.display());
    Ok(())
}

fn export_prompts(a: &ExportArgs) -> Result<()> {
    let config = a.train.resolve()?;
    let encoder = config.encoder()?;
    let tokenizer = config.tokenizer();
    let set = prompts::read_prompts(&a.checkpoint, &tokenizer)?;
    let bank = load_priors(a.priors.as_deref(), &config, &encoder)?;
    let mut rows: Vec<(String, Label, Option<String>, Vec<f64>)> =
        vec![("real".into(), Label::Real, None, set.encode_real(&encoder)?)];
    for (i, e) in set.encode_unknown(&encoder)?.into_iter().enumerate() {
        rows.push((format!("unknown_{i}"), Label::Spoof, Some(format!("unknown_{i}")), e));
    }
    rows.push((
        "spoof_prototype".into(),
        Label::Spoof,
        Some("prototype".into()),
        prompts::overall_spoof_embedding(&set, &bank, &encoder)?,
    ));
    let records = rows.into_iter().map(|(id, label, attack_type, v)| Record {
        vector: v.iter().map(|&x| x as f32).collect(),
        meta: RecordMeta {
            id,
            label,
            attack_type,
            domain: "prompts".into(),
            split: Split::Test,
        },
    });
    let out = EmbeddingStore::from_records(encoder.embed_dim(), records)?;
    store::write_embeddings(&out, &a.out)?;
    println!("wrote {} prompt embeddings to {}", out.len(), a.out.display());
    Ok(())
}

fn grad_check(a: &GradCheckArgs) -> std::result::Result<(), CliError> {
    let base = a.train.resolve()?;
    let encoder = base.encoder()?;
    let tokenizer = base.tokenizer();
    let bank = load_priors(a.priors.as_deref(), &base, &encoder)?;
    warn_if_degenerate(&bank)?;
    let mut worst: f64 = 0.0;
    for seed in base.seed..base.seed + a.seeds.max(1) {
        let config = TrainConfig { seed, ..base.clone() };
        let batch = trainer::sample_unit_batch(a.batch, config.d_emb, seed)?;
        let r = trainer::grad_check(&config, &batch, &bank, &encoder, &tokenizer)?;
        println!(
            "seed={seed} coordinates={} max_rel_error={:.3e} max_abs_error={:.3e}",
            r.coordinates, r.max_rel_error, r.max_abs_error
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max_rel_error={worst:.3e}");
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(CliError {
            code: 8,
            kind: "grad_check",
            message: format!("max relative error {worst:e} ≥ tolerance {:e}", a.tolerance),
        })
    }
}
