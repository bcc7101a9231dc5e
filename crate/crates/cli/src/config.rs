//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid by
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mobility_iohmm::iohmm::EmConfig;
use mobility_iohmm::model_selection::SelectionConfig;
use mobility_iohmm::pipeline::FeatureSchema;
use serde::{Deserialize, Serialize};

/// Context schema used when ingesting raw trips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaChoice {
    /// Calendar, last-trip and history features.
    Default,
    /// Calendar and previous end time only.
    Calendar,
    InterceptOnly,
}

impl SchemaChoice {
    pub fn schema(self) -> FeatureSchema {
        match self {
            SchemaChoice::Default => FeatureSchema::default_schema(),
            SchemaChoice::Calendar => FeatureSchema::calendar_schema(),
            SchemaChoice::InterceptOnly => FeatureSchema::intercept_only(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub users: usize,
    pub days: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings { users: 10, days: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub trips: Option<PathBuf>,
    pub calendar: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub schema: SchemaChoice,
    pub test_fraction: f64,
    /// Candidate state counts for silhouette selection.
    pub state_candidates: Vec<usize>,
    /// Skips selection and fits this many states for every user.
    pub n_states: Option<usize>,
    /// Cluster contexts augmented with the observed duration.
    pub augment_duration: bool,
    pub em: EmConfig,
    pub mc_alpha: f64,
    pub gibbs_samples: usize,
    pub full_information: bool,
    /// Write predicted durations clamped at zero.
    pub clamp_durations: bool,
    pub per_index_lr: bool,
    pub top_k: usize,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            trips: None,
            calendar: None,
            metadata: None,
            out: PathBuf::from("out"),
            seed: 0,
            jobs: None,
            schema: SchemaChoice::Default,
            test_fraction: 0.2,
            state_candidates: (3..=7).collect(),
            n_states: None,
            augment_duration: false,
            em: EmConfig::default(),
            mc_alpha: 1.0,
            gibbs_samples: 1000,
            full_information: false,
            clamp_durations: false,
            per_index_lr: false,
            top_k: 10,
            synth: SynthSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("invalid configuration")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            candidates: self.state_candidates.clone(),
            augment_duration: self.augment_duration,
            ..SelectionConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bail!("test_fraction must lie in (0, 1), got {}", self.test_fraction);
        }
        self.selection().validate()?;
        self.em.validate()?;
        if self.n_states == Some(0) {
            bail!("n_states must be at least 1");
        }
        if !(self.mc_alpha > 0.0 && self.mc_alpha.is_finite()) {
            bail!("mc_alpha must be positive, got {}", self.mc_alpha);
        }
        if self.gibbs_samples == 0 {
            bail!("gibbs_samples must be at least 1");
        }
        if self.jobs == Some(0) {
            bail!("jobs must be at least 1");
        }
        if self.top_k == 0 {
            bail!("top_k must be at least 1");
        }
        if self.synth.users == 0 || self.synth.days == 0 {
            bail!("synth needs at least 1 user and 1 day");
        }
        Ok(())
    }
}
