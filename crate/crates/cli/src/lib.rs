//! Command-line pipeline around `mobility_iohmm`: ingest or synthesize a
//! corpus, select state counts, train, predict, evaluate and interpret.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;

pub use commands::{Layout, Outcome};
pub use config::{RunConfig, SchemaChoice};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Ingest,
    Synth,
    SelectStates,
    Train,
    Predict,
    Evaluate,
    Interpret,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Synth => "synth",
            Command::SelectStates => "select-states",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Interpret => "interpret",
        }
    }
}

/// Values given on the command line; each replaces the configuration entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub trips: Option<PathBuf>,
    pub calendar: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub schema: Option<SchemaChoice>,
    pub test_fraction: Option<f64>,
    pub n_states: Option<usize>,
    pub state_candidates: Option<Vec<usize>>,
    pub augment_duration: bool,
    pub restarts: Option<usize>,
    pub max_iter: Option<usize>,
    pub mc_alpha: Option<f64>,
    pub gibbs_samples: Option<usize>,
    pub full_information: bool,
    pub clamp_durations: bool,
    pub per_index_lr: bool,
    pub top_k: Option<usize>,
    pub users: Option<usize>,
    pub days: Option<usize>,
}

/// Defaults, then the configuration file, then flags.
pub fn resolve_config(file: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
    let mut c = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident).+ <- $value:expr) => {
            if let Some(v) = $value.clone() {
                c.$($field).+ = v;
            }
        };
    }
    if o.trips.is_some() {
        c.trips = o.trips.clone();
    }
    if o.calendar.is_some() {
        c.calendar = o.calendar.clone();
    }
    if o.metadata.is_some() {
        c.metadata = o.metadata.clone();
    }
    if o.jobs.is_some() {
        c.jobs = o.jobs;
    }
    if o.n_states.is_some() {
        c.n_states = o.n_states;
    }
    set!(out <- o.out);
    set!(seed <- o.seed);
    set!(schema <- o.schema);
    set!(test_fraction <- o.test_fraction);
    set!(state_candidates <- o.state_candidates);
    set!(em.restarts <- o.restarts);
    set!(em.max_iter <- o.max_iter);
    set!(mc_alpha <- o.mc_alpha);
    set!(gibbs_samples <- o.gibbs_samples);
    set!(top_k <- o.top_k);
    set!(synth.users <- o.users);
    set!(synth.days <- o.days);
    c.augment_duration |= o.augment_duration;
    c.full_information |= o.full_information;
    c.clamp_durations |= o.clamp_durations;
    c.per_index_lr |= o.per_index_lr;
    c.validate()?;
    Ok(c)
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    match command {
        Command::Ingest => commands::ingest(cfg),
        Command::Synth => commands::synth(cfg),
        Command::SelectStates => commands::select_states(cfg),
        Command::Train => commands::train(cfg),
        Command::Predict => commands::predict(cfg),
        Command::Evaluate => commands::evaluate(cfg),
        Command::Interpret => commands::interpret(cfg),
    }
}

/// Timing and diagnostics of one invocation. Kept apart from the outputs so
/// that those stay byte-identical across runs.
#[derive(Debug, Serialize)]
pub struct RunMetadata<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub started_at: String,
    pub finished_at: String,
    pub elapsed_seconds: f64,
    pub config: &'a RunConfig,
    pub warning_count: usize,
    /// Warnings logged inside the library, which are not listed individually.
    pub library_warning_count: usize,
    pub warnings: &'a [String],
    pub summary: &'a serde_json::Value,
}

impl RunMetadata<'_> {
    pub fn write(&self, layout: &Layout) -> Result<()> {
        commands::write_json(&layout.metadata(self.command), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn switches_only_turn_options_on() {
        let o = Overrides {
            full_information: true,
            ..Overrides::default()
        };
        let c = resolve_config(None, &o).unwrap();
        assert!(c.full_information);
        assert!(!c.clamp_durations);
    }

    #[test]
    fn invalid_overrides_are_rejected() {
        let o = Overrides {
            test_fraction: Some(0.0),
            ..Overrides::default()
        };
        assert!(resolve_config(None, &o).is_err());
    }

    #[test]
    fn command_names_match_the_subcommands() {
        assert_eq!(Command::SelectStates.name(), "select-states");
        assert_eq!(Layout::new("o").metadata("train"), PathBuf::from("o/run_metadata/train.json"));
    }
}
