//! Per-user corpus files and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::context::FeatureSchema;
use crate::pipeline::ingest::CalendarData;
use crate::types::UserHistory;

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const CORPUS_SUFFIX: &str = ".corpus.json";

/// One user's days with the calendar rows they reference and the schema
/// their contexts were built under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCorpus {
    pub format_version: u32,
    pub history: UserHistory,
    pub calendar: CalendarData,
    pub schema: FeatureSchema,
    /// Hidden states per day, present for generated corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<Vec<usize>>>,
}

impl UserCorpus {
    pub fn new(history: UserHistory, calendar: &CalendarData, schema: FeatureSchema) -> Self {
        let calendar = calendar.restricted_to(history.days.iter().map(|d| d.day.as_str()));
        UserCorpus {
            format_version: CORPUS_FORMAT_VERSION,
            history,
            calendar,
            schema,
            labels: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: UserCorpus = serde_json::from_str(text)?;
        if c.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "corpus format {} is not supported (expected {CORPUS_FORMAT_VERSION})",
                c.format_version
            )));
        }
        c.history.validate()?;
        Ok(c)
    }

    pub fn file_name(&self) -> String {
        file_stem(&self.history.user) + CORPUS_SUFFIX
    }
}

/// User id made safe for a file name; other characters become `_`.
pub fn file_stem(user: &str) -> String {
    user.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Corpus files of a directory, sorted by file name.
pub fn corpus_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(CORPUS_SUFFIX))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn read_corpus(path: &Path) -> Result<UserCorpus> {
    UserCorpus::from_json(&fs::read_to_string(path)?)
}

pub fn read_corpus_dir(dir: &Path) -> Result<Vec<UserCorpus>> {
    corpus_paths(dir)?.iter().map(|p| read_corpus(p)).collect()
}
