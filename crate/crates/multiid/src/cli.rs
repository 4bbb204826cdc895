//! `multiid` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::bench::{self, schema};
use crate::config::RunConfig;
use crate::error::{exit, AppError, AppResult};
use crate::{eval, run};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(name = "multiid", version, about = "Training-free multi-identity image customization toolkit")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub depth_control: Option<OnOff>,
    #[arg(long, global = true)]
    pub images_per_sample: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate images for a request file or for every benchmark sample.
    Generate {
        #[arg(long, required_unless_present = "benchmark", conflicts_with = "benchmark")]
        request: Option<PathBuf>,
        #[arg(long)]
        benchmark: Option<PathBuf>,
    },
    /// Score generated images against a benchmark.
    Eval {
        /// Defaults to `benchmark_path` from the config.
        #[arg(long)]
        benchmark: Option<PathBuf>,
        /// Directory holding `<sample_id>/<k>.png`.
        #[arg(long)]
        images: PathBuf,
    },
    /// Build or validate a benchmark.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Invert an image and replay the sampler to reconstruct it.
    Invert {
        #[arg(long)]
        image: PathBuf,
        /// Conditioning prompt; empty uses null conditioning.
        #[arg(long, default_value = "")]
        prompt: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchAction {
    Build,
    Validate {
        #[arg(long)]
        benchmark: Option<PathBuf>,
    },
}

impl Cli {
    /// Config file (or defaults) with command-line overrides, validated.
    pub fn resolve_config(&self) -> AppResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.backend {
            cfg.backend = v.clone();
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.depth_control {
            cfg.depth_control.enabled = v == OnOff::On;
        }
        if let Some(v) = self.images_per_sample {
            cfg.images_per_sample = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn benchmark_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> AppResult<PathBuf> {
    flag.clone()
        .or_else(|| cfg.benchmark_path.clone())
        .ok_or_else(|| AppError::Config("no benchmark given; pass --benchmark or set benchmark_path".into()))
}

fn execute(cli: &Cli, stdout: &mut dyn Write) -> AppResult<()> {
    let cfg = cli.resolve_config()?;
    let out = cfg.output_dir.clone();
    let say = |stdout: &mut dyn Write, s: String| {
        let _ = writeln!(stdout, "{s}");
    };
    match &cli.command {
        Command::Generate { request, benchmark } => {
            let m = match (request, benchmark) {
                (Some(r), _) => run::generate_request(&cfg, r, &out)?,
                (None, Some(b)) => run::generate_benchmark(&cfg, b, &out)?,
                (None, None) => unreachable!("clap requires one of --request / --benchmark"),
            };
            say(stdout, format!("wrote {} image(s) and manifest.json to {}", m.images.len(), out.display()));
        }
        Command::Eval { benchmark, images } => {
            let path = benchmark_path(benchmark, &cfg)?;
            let bundle = run::backend(&cfg.backend)?;
            let e = eval::evaluate_benchmark(&path, images, cfg.images_per_sample, &bundle, cfg.concurrency)?;
            eval::write_reports(&e, &cfg.digest(), &out)?;
            say(stdout, eval::table(&e.report));
            say(
                stdout,
                format!(
                    "{} sample(s) x {} image(s); person coverage {:.1}%; reports in {}",
                    e.report.sample_count,
                    e.report.images_per_sample,
                    e.report.coverage() * 100.0,
                    out.display()
                ),
            );
        }
        Command::Bench { action: BenchAction::Build } => {
            let s = bench::build(&cfg, &out)?;
            say(
                stdout,
                format!(
                    "{} interactions x {} prompts = {} candidates; {} sample(s) written, {} flagged for review; {}",
                    s.interactions,
                    cfg.bench.prompts_per_interaction,
                    s.prompts,
                    s.samples,
                    s.flagged,
                    s.benchmark.display()
                ),
            );
        }
        Command::Bench {
            action: BenchAction::Validate { benchmark },
        } => {
            let path = benchmark_path(benchmark, &cfg)?;
            let samples = schema::load(&path)?;
            say(stdout, format!("ok: {} valid sample(s) in {}", samples.len(), path.display()));
        }
        Command::Invert { image, prompt } => {
            let s = run::invert(&cfg, image, prompt, &out)?;
            say(
                stdout,
                format!(
                    "inverted over {} steps; roundtrip max-abs error {:.3e}; {} cached features",
                    s.steps, s.roundtrip_max_abs_error, s.cache_entries
                ),
            );
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run_with(args: impl IntoIterator<Item = impl Into<OsString> + Clone>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(stderr, "{text}") } else { write!(stdout, "{text}") };
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => exit::OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    run_with(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
}
