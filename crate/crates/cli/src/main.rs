use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdan::data::DomainShiftSpec;
use sdan::harness::{self, RunConfig, RunStrategy, OUTPUT_ROOT_ENV};
use sdan::{Error, Result};

/// Conditional domain-adversarial training experiments.
///
/// Exit status: 0 on success, 1 for configuration or input errors, 2 when
/// training hits a non-finite loss or gradient.
#[derive(Parser, Debug)]
#[command(name = "sdan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Default)]
struct RunArgs {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; overrides the config file.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    out: Option<PathBuf>,
    /// Comma-separated strategies, e.g. `dann,sdan:3,ssdan:3`.
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<RunStrategy>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Runs to execute concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        if !self.strategies.is_empty() {
            cfg.strategies = self.strategies.clone();
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(n) = self.iterations {
            cfg.train.iterations = n;
        }
        if let Some(n) = self.eval_every {
            cfg.train.eval_every = n;
        }
        if self.jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write source.csv, target.csv and spec.json for a synthetic task.
    GenData {
        /// Generator spec (JSON); takes precedence over --preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "swap3")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        label_noise: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every (strategy, seed) pair and print the aggregate table.
    Train(RunArgs),
    /// Evaluate a run's checkpoint on its source and target data.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// `selected`, `final`, or a path to a model checkpoint.
        #[arg(long, default_value = "selected")]
        checkpoint: String,
    },
    /// Target accuracy against the norm control factor k.
    SweepK {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,8,16,64,256")]
        k: Vec<f64>,
        /// Strategy whose k is swept (`sdan` or `ssdan`, optionally `+e`).
        #[arg(long, default_value = "sdan")]
        strategy: RunStrategy,
    },
    /// Feature / prediction-branch norm ratio over a run, as CSV.
    TraceNorms {
        #[arg(long)]
        run: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Features, labels, domains and predictions of every sample, as CSV.
    ExportFeatures {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "selected")]
        checkpoint: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            say(text);
            Ok(())
        }
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn say(text: &str) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: stdout: {e}");
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            spec,
            preset,
            seed,
            label_noise,
            out,
        } => {
            let mut spec: DomainShiftSpec = match spec {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => harness::preset(&preset, seed)?,
            };
            if let Some(noise) = label_noise {
                spec.label_noise = noise;
            }
            spec.validate()?;
            harness::gen_data(&spec, &out)?;
            say(&format!(
                "wrote {} source and {} target samples to {}\n",
                spec.n_source,
                spec.n_target,
                out.display()
            ));
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let summaries = harness::train_all(&cfg, args.jobs)?;
            say(&harness::format_table(&harness::aggregate(&summaries)));
            say(&format!("runs written to {}\n", cfg.output_root().display()));
        }
        Command::Eval { run, checkpoint } => {
            let report = harness::eval_run(&run, &checkpoint)?;
            say(&format!("{}\n", serde_json::to_string_pretty(&report)?));
        }
        Command::SweepK { run, k, strategy } => {
            let cfg = run.resolve()?;
            let rows = harness::sweep_k(&cfg, &strategy, &k, run.jobs)?;
            let mut text = format!("{:>14}  {:>8}  target acc (%)\n", "label", "k");
            for r in &rows {
                let k = r.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into());
                text.push_str(&format!("{:>14}  {k:>8}  {}\n", r.label, r.acc));
            }
            if let Some((k, acc)) = harness::best_k(&rows) {
                text.push_str(&format!("best k = {k} ({acc})\n"));
            }
            say(&text);
        }
        Command::TraceNorms { run, out } => {
            emit(&harness::trace_norms(&run)?, out.as_deref())?;
        }
        Command::ExportFeatures {
            run,
            checkpoint,
            out,
        } => {
            emit(&harness::export_features(&run, &checkpoint)?, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
