use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{Level, Log, Metadata, Record};
use mobility_iohmm_cli::{resolve_config, run, Command, Layout, Overrides, RunMetadata, SchemaChoice};

#[derive(Parser)]
#[command(name = "mobility-iohmm", version, about = "Next-activity prediction from smart card trips")]
struct Cli {
    /// JSON configuration file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory shared by all stages.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Segment raw trips into per-user corpus files.
    Ingest(IngestArgs),
    /// Generate a synthetic commuter corpus with hidden labels.
    Synth(SynthArgs),
    /// Choose the number of hidden states per user by silhouette.
    SelectStates(ModelArgs),
    /// Fit the IOHMM and the baselines per user.
    Train(ModelArgs),
    /// Predict every held-out activity with each trained model.
    Predict(PredictArgs),
    /// Score predictions and regress predictability on user covariates.
    Evaluate(EvaluateArgs),
    /// Sample activity patterns and tabulate coefficients.
    Interpret(InterpretArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaArg {
    Default,
    Calendar,
    InterceptOnly,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    trips: Option<PathBuf>,
    #[arg(long)]
    calendar: Option<PathBuf>,
    #[arg(long, value_enum)]
    schema: Option<SchemaArg>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    /// Fit this many states instead of selecting per user.
    #[arg(long)]
    n_states: Option<usize>,
    /// Comma-separated candidate state counts.
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<usize>>,
    #[arg(long)]
    augment_duration: bool,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    mc_alpha: Option<f64>,
    #[arg(long)]
    per_index_lr: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Use duration and location evidence jointly in the state posterior.
    #[arg(long)]
    full_information: bool,
    #[arg(long)]
    clamp_durations: bool,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    metadata: Option<PathBuf>,
}

#[derive(Args)]
struct InterpretArgs {
    #[arg(long)]
    samples: Option<usize>,
    /// Clip sampled durations at zero before binning.
    #[arg(long)]
    clamp_durations: bool,
}

/// Forwards to env_logger and counts warnings.
struct CountingLogger {
    inner: env_logger::Logger,
    warnings: AtomicUsize,
}

impl Log for CountingLogger {
    fn enabled(&self, m: &Metadata) -> bool {
        m.level() <= Level::Warn || self.inner.enabled(m)
    }
    fn log(&self, r: &Record) {
        if r.level() == Level::Warn {
            self.warnings.fetch_add(1, Ordering::Relaxed);
        }
        if self.inner.matches(r) {
            self.inner.log(r);
        }
    }
    fn flush(&self) {
        self.inner.flush();
    }
}

fn overrides(cli: &Cli) -> (Command, Overrides) {
    let mut o = Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
        jobs: cli.jobs,
        ..Overrides::default()
    };
    let command = match &cli.command {
        Cmd::Ingest(a) => {
            o.trips = a.trips.clone();
            o.calendar = a.calendar.clone();
            o.schema = a.schema.map(|s| match s {
                SchemaArg::Default => SchemaChoice::Default,
                SchemaArg::Calendar => SchemaChoice::Calendar,
                SchemaArg::InterceptOnly => SchemaChoice::InterceptOnly,
            });
            Command::Ingest
        }
        Cmd::Synth(a) => {
            o.users = a.users;
            o.days = a.days;
            Command::Synth
        }
        Cmd::SelectStates(a) | Cmd::Train(a) => {
            o.n_states = a.n_states;
            o.state_candidates = a.candidates.clone();
            o.augment_duration = a.augment_duration;
            o.test_fraction = a.test_fraction;
            o.restarts = a.restarts;
            o.max_iter = a.max_iter;
            o.mc_alpha = a.mc_alpha;
            o.per_index_lr = a.per_index_lr;
            if matches!(cli.command, Cmd::Train(_)) {
                Command::Train
            } else {
                Command::SelectStates
            }
        }
        Cmd::Predict(a) => {
            o.full_information = a.full_information;
            o.clamp_durations = a.clamp_durations;
            o.top_k = a.top_k;
            Command::Predict
        }
        Cmd::Evaluate(a) => {
            o.metadata = a.metadata.clone();
            Command::Evaluate
        }
        Cmd::Interpret(a) => {
            o.gibbs_samples = a.samples;
            o.clamp_durations = a.clamp_durations;
            Command::Interpret
        }
    };
    (command, o)
}

fn main() -> ExitCode {
    let logger: &'static CountingLogger = Box::leak(Box::new(CountingLogger {
        inner: env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).build(),
        warnings: AtomicUsize::new(0),
    }));
    log::set_logger(logger).expect("logger installed once");
    log::set_max_level(log::LevelFilter::max());

    let cli = Cli::parse();
    let (command, o) = overrides(&cli);
    let cfg = match resolve_config(cli.config.as_deref(), &o) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let started_at = chrono::Utc::now();
    let clock = Instant::now();
    let outcome = match run(command, &cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let meta = RunMetadata {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        started_at: started_at.to_rfc3339(),
        finished_at: chrono::Utc::now().to_rfc3339(),
        elapsed_seconds: clock.elapsed().as_secs_f64(),
        config: &cfg,
        warning_count: outcome.warnings.len(),
        library_warning_count: logger.warnings.load(Ordering::Relaxed).saturating_sub(outcome.warnings.len()),
        warnings: &outcome.warnings,
        summary: &outcome.summary,
    };
    if let Err(e) = meta.write(&Layout::new(&cfg.out)) {
        eprintln!("error: writing run metadata: {e:#}");
        return ExitCode::FAILURE;
    }
    println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
    ExitCode::SUCCESS
}
