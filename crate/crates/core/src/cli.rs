//! Command-line front end: config merging, subcommands and run manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::evalkit::{self, MetricsReport, METRICS};
use crate::gradcheck::{self, ObjectiveCheckConfig, ObjectiveCheckReport};
use crate::io::{sha256_file, write_atomic};
use crate::model::{ModelParams, Pooling};
use crate::synth::{self, Cohort, CohortConfig};
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const COHORT_FILE: &str = "cohort.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SNAPSHOTS_FILE: &str = "snapshots.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABORT_FILE: &str = "abort.json";

#[derive(Debug, Parser)]
#[command(name = "xanat", version, about = "Anatomy-level contrastive alignment lab on synthetic cohorts")]
pub struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for both cohort generation and training.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Validate the config and inputs, print the effective config, write nothing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort file.
    Synth,
    /// Train on a cohort; writes checkpoint, step trace and snapshots.
    Train(TrainArgs),
    /// Zero-shot evaluation over every prompt template.
    Eval(EvalArgs),
    /// Similarity histograms, collapse indices and a 2-D projection.
    Diagnose(EvalArgs),
    /// Finite-difference check of the full objective.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the four ablation configurations.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct CohortArg {
    /// Cohort file; generated from the `[cohort]` config section when absent.
    #[arg(long, value_name = "PATH")]
    pub cohort: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: CohortArg,
    /// Drop the global loss (lambda treated as 0).
    #[arg(long)]
    pub no_global: bool,
    /// Disable report augmentation.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, value_name = "mean|positional")]
    pub pooling: Option<Pooling>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: CohortArg,
    /// Trained checkpoint; the seeded initialization is used when absent.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "mean|positional")]
    pub pooling: Option<Pooling>,
    /// Histogram bin count (diagnose only).
    #[arg(long, value_name = "N")]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random configurations.
    #[arg(long, value_name = "N")]
    pub configs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub max_batch: Option<usize>,
    #[arg(long, value_name = "N")]
    pub max_anatomies: Option<usize>,
    #[arg(long, value_name = "N")]
    pub max_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub input: CohortArg,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub bins: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS }
    }
}

/// Everything a run needs. Parsed from one TOML file; every field defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides both `cohort.seed` and `train.seed`.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub cohort: CohortConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub gradcheck: ObjectiveCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: PathBuf::from("out"),
            cohort: CohortConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            gradcheck: ObjectiveCheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Push the top-level seed into the sections that consume one.
    fn resolve_seed(&mut self) {
        if let Some(s) = self.seed {
            self.cohort.seed = s;
            self.train.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.train.validate()?;
        if self.eval.bins == 0 {
            return Err(Error::Config("eval.bins must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub duration_seconds: f64,
}

pub fn manifest_name(command: &str) -> String {
    format!("manifest-{command}.json")
}

/// What a finished command hands back to `run`.
struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    check_failed: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Diagnose(_) => "diagnose",
            Command::Gradcheck(_) => "gradcheck",
            Command::Ablation(_) => "ablation",
        }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalAbort { .. } | Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Build the effective config: file (or defaults), then flag overrides.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match &cli.command {
        Command::Train(a) => {
            if a.no_global {
                cfg.train.enable_global_loss = false;
            }
            if a.no_augment {
                cfg.train.enable_augment = false;
            }
            if let Some(p) = a.pooling {
                cfg.train.pooling = p;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if a.max_steps.is_some() {
                cfg.train.max_steps = a.max_steps;
            }
        }
        Command::Eval(a) | Command::Diagnose(a) => {
            if let Some(p) = a.pooling {
                cfg.train.pooling = p;
            }
            if let Some(b) = a.bins {
                cfg.eval.bins = b;
            }
        }
        Command::Gradcheck(a) => {
            let g = &mut cfg.gradcheck;
            g.configs = a.configs.unwrap_or(g.configs);
            g.max_batch = a.max_batch.unwrap_or(g.max_batch);
            g.max_anatomies = a.max_anatomies.unwrap_or(g.max_anatomies);
            g.max_dim = a.max_dim.unwrap_or(g.max_dim);
        }
        Command::Ablation(a) => {
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if a.max_steps.is_some() {
                cfg.train.max_steps = a.max_steps;
            }
        }
        Command::Synth => {}
    }
    cfg.resolve_seed();
    cfg.validate()?;
    Ok(cfg)
}

/// Parse `argv`, run, and return the process exit code. Messages go to
/// stdout (effective config, summaries) and stderr (errors).
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let start = Instant::now();
    let cfg = effective_config(cli)?;
    println!("# effective config\n{}", cfg.to_toml()?);
    let outcome = match &cli.command {
        Command::Synth => cmd_synth(&cfg, cli.dry_run)?,
        Command::Train(a) => cmd_train(&cfg, a.input.cohort.as_deref(), cli.dry_run)?,
        Command::Eval(a) => cmd_eval(&cfg, a.input.cohort.as_deref(), a.checkpoint.as_deref(), cli.dry_run)?,
        Command::Diagnose(a) => {
            cmd_diagnose(&cfg, a.input.cohort.as_deref(), a.checkpoint.as_deref(), cli.dry_run)?
        }
        Command::Gradcheck(_) => cmd_gradcheck(&cfg, cli.dry_run)?,
        Command::Ablation(a) => cmd_ablation(&cfg, a.input.cohort.as_deref(), cli.dry_run)?,
    };
    if cli.dry_run {
        println!("dry run: config valid, nothing written");
        return Ok(EXIT_OK);
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: cli.command.name().to_string(),
        config: cfg.clone(),
        inputs: digests(&outcome.inputs)?,
        outputs: digests(&outcome.outputs)?,
        duration_seconds: start.elapsed().as_secs_f64(),
    };
    let path = cfg.out.join(manifest_name(cli.command.name()));
    write_atomic(&path, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
    Ok(if outcome.check_failed { EXIT_CHECK_FAILED } else { EXIT_OK })
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

/// Read the cohort file if given, else generate from config.
fn load_cohort(cfg: &RunConfig, path: Option<&Path>, inputs: &mut Vec<PathBuf>) -> Result<Cohort> {
    match path {
        Some(p) => {
            let c = synth::read_cohort(p)?;
            inputs.push(p.to_path_buf());
            Ok(c)
        }
        None => synth::generate_cohort(&cfg.cohort),
    }
}

fn load_params(cfg: &RunConfig, cohort: &Cohort, path: Option<&Path>, inputs: &mut Vec<PathBuf>) -> Result<ModelParams> {
    let params = match path {
        Some(p) => {
            let params = ModelParams::load(p)?;
            inputs.push(p.to_path_buf());
            params
        }
        None => trainer::initial_params(cohort, cfg.train.seed)?,
    };
    if params.anatomies() != cohort.anatomies() || params.dim() != cohort.dim() {
        return Err(Error::Shape(format!(
            "checkpoint is M={} D={}, cohort is M={} D={}",
            params.anatomies(),
            params.dim(),
            cohort.anatomies(),
            cohort.dim()
        )));
    }
    Ok(params)
}

fn write_text(path: PathBuf, text: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    write_atomic(&path, text.as_bytes())?;
    outputs.push(path);
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, dry_run: bool) -> Result<Outcome> {
    let mut outputs = Vec::new();
    if !dry_run {
        let cohort = synth::generate_cohort(&cfg.cohort)?;
        let path = cfg.out.join(COHORT_FILE);
        synth::write_cohort(&cohort, &path)?;
        println!(
            "cohort: {} patients, checksum {}",
            cohort.patients.len(),
            synth::cohort_checksum(&cohort)?
        );
        outputs.push(path);
    }
    Ok(Outcome {
        inputs: Vec::new(),
        outputs,
        check_failed: false,
    })
}

fn cmd_train(cfg: &RunConfig, cohort_path: Option<&Path>, dry_run: bool) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let cohort = load_cohort(cfg, cohort_path, &mut inputs)?;
    let mut outputs = Vec::new();
    if dry_run {
        return Ok(Outcome {
            inputs,
            outputs,
            check_failed: false,
        });
    }
    let (params, trace) = match trainer::train(&cohort, &cfg.train) {
        Ok(r) => r,
        Err(e @ Error::NumericalAbort { .. }) => {
            if let Error::NumericalAbort { step, detail } = &e {
                let payload = serde_json::json!({ "step": step, "detail": detail });
                write_atomic(&cfg.out.join(ABORT_FILE), (payload.to_string() + "\n").as_bytes())?;
                eprintln!("{payload}");
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    params.save(&ckpt)?;
    outputs.push(ckpt);
    let steps = cfg.out.join(TRACE_FILE);
    let snaps = cfg.out.join(SNAPSHOTS_FILE);
    trace.write(&steps, &snaps)?;
    outputs.push(steps);
    outputs.push(snaps);
    if let (Some(first), Some(last)) = (trace.steps.first(), trace.steps.last()) {
        println!(
            "steps {}: loss {} -> {}, tau {}",
            trace.steps.len(),
            first.loss_total,
            last.loss_total,
            last.tau
        );
    } else {
        println!("no steps run");
    }
    Ok(Outcome {
        inputs,
        outputs,
        check_failed: false,
    })
}

fn cmd_eval(cfg: &RunConfig, cohort_path: Option<&Path>, ckpt: Option<&Path>, dry_run: bool) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let cohort = load_cohort(cfg, cohort_path, &mut inputs)?;
    let params = load_params(cfg, &cohort, ckpt, &mut inputs)?;
    let mut outputs = Vec::new();
    if !dry_run {
        let report = evalkit::evaluate(&params, &cohort, cfg.train.pooling)?;
        let json = serde_json::to_string_pretty(&report)? + "\n";
        write_text(cfg.out.join(METRICS_JSON), &json, &mut outputs)?;
        write_text(cfg.out.join(METRICS_CSV), &report.to_csv(), &mut outputs)?;
        for m in METRICS {
            let a = report.aggregate[m];
            println!("{m}: {:.4} ± {:.4}", a.mean, a.std);
        }
    }
    Ok(Outcome {
        inputs,
        outputs,
        check_failed: false,
    })
}

fn cmd_diagnose(cfg: &RunConfig, cohort_path: Option<&Path>, ckpt: Option<&Path>, dry_run: bool) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let cohort = load_cohort(cfg, cohort_path, &mut inputs)?;
    let params = load_params(cfg, &cohort, ckpt, &mut inputs)?;
    let mut outputs = Vec::new();
    if !dry_run {
        let report = diagnostics::diagnose(&params, &cohort, cfg.train.pooling, cfg.eval.bins)?;
        outputs = diagnostics::write_report(&report, &cfg.out)?;
        let t = &report.summary.text.collapse;
        println!(
            "text: inter {:.4}, fraction above 0.9 {:.4}",
            t.inter, t.inter_fraction_above_0_9
        );
        let i = &report.summary.image.collapse;
        println!("image: inter {:.4}, fraction above 0.9 {:.4}", i.inter, i.inter_fraction_above_0_9);
    }
    Ok(Outcome {
        inputs,
        outputs,
        check_failed: false,
    })
}

fn cmd_gradcheck(cfg: &RunConfig, dry_run: bool) -> Result<Outcome> {
    let g = &cfg.gradcheck;
    if g.configs == 0 || g.max_batch == 0 || g.max_anatomies == 0 || g.max_dim == 0 || g.max_sentences == 0 {
        return Err(Error::Config("gradcheck sizes must all be >= 1".into()));
    }
    let mut outputs = Vec::new();
    let mut failed = false;
    if !dry_run {
        let report: ObjectiveCheckReport = gradcheck::check_objective(cfg.train.seed, g, None)?;
        let json = serde_json::to_string_pretty(&report)? + "\n";
        write_text(cfg.out.join(GRADCHECK_FILE), &json, &mut outputs)?;
        println!(
            "gradcheck: {} cases, max rel error {:e} (tolerance {:e}): {}",
            report.cases.len(),
            report.max_rel_error,
            report.tolerance,
            if report.pass { "pass" } else { "FAIL" }
        );
        for (k, c) in report.cases.iter().enumerate().filter(|(_, c)| !c.pass) {
            if let Some(w) = &c.report.worst {
                eprintln!(
                    "case {k}: worst {}[{},{}] analytic {} numeric {} rel {:e}",
                    w.leaf, w.row, w.col, w.analytic, w.numeric, w.rel_error
                );
            }
        }
        failed = !report.pass;
    }
    Ok(Outcome {
        inputs: Vec::new(),
        outputs,
        check_failed: failed,
    })
}

/// The four ablation rows: (label, global loss, augmentation).
pub const ABLATION_ROWS: [(&str, bool, bool); 4] = [
    ("LCA", false, false),
    ("LCA+GCA", true, false),
    ("LCA+CTA", false, true),
    ("LCA+CTA+GCA", true, true),
];

/// Train and evaluate every ablation row from the same seed.
pub fn run_ablation(cohort: &Cohort, base: &TrainConfig) -> Result<Vec<(String, MetricsReport)>> {
    ABLATION_ROWS
        .iter()
        .map(|&(label, global, augment)| {
            let cfg = TrainConfig {
                enable_global_loss: global,
                enable_augment: augment,
                ..base.clone()
            };
            let (params, _) = trainer::train(cohort, &cfg)?;
            Ok((label.to_string(), evalkit::evaluate(&params, cohort, cfg.pooling)?))
        })
        .collect()
}

pub fn ablation_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::from("# report-parsing row omitted: LLM report parsing is out of scope\nconfig");
    for m in METRICS {
        let _ = write!(s, ",{m}_mean,{m}_std");
    }
    s.push('\n');
    for (label, r) in rows {
        s.push_str(label);
        for m in METRICS {
            let a = r.aggregate[m];
            let _ = write!(s, ",{},{}", a.mean, a.std);
        }
        s.push('\n');
    }
    s
}

fn cmd_ablation(cfg: &RunConfig, cohort_path: Option<&Path>, dry_run: bool) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let cohort = load_cohort(cfg, cohort_path, &mut inputs)?;
    let mut outputs = Vec::new();
    if !dry_run {
        let rows = run_ablation(&cohort, &cfg.train)?;
        let csv = ablation_csv(&rows);
        write_text(cfg.out.join(ABLATION_FILE), &csv, &mut outputs)?;
        print!("{csv}");
    }
    Ok(Outcome {
        inputs,
        outputs,
        check_failed: false,
    })
}
