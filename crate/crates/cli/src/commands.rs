//! Subcommands. Each stage reads what the previous ones wrote under the
//! output directory and returns a summary plus the warnings it raised.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::warn;
use mobility_iohmm::baselines::{fit_lr, fit_mc, predict_mc, LinearRegressionBaseline, MarkovChainBaseline, McContext};
use mobility_iohmm::corpus::{corpus_paths, file_stem, read_corpus, write_atomic, UserCorpus, CORPUS_SUFFIX};
use mobility_iohmm::evaluation::{
    aggregate_report, histogram_csv, predictability_regression, read_metadata, read_predictions, score_all,
    user_covariates, write_predictions, PredictionRow, ScoreOptions,
};
use mobility_iohmm::interpretation::{coefficient_table, gibbs_sample, pattern_report, ReportOptions};
use mobility_iohmm::iohmm::{fit, log_likelihood, EmReport, IOHMMParams};
use mobility_iohmm::model_selection::{select_state_count, SilhouetteSelection};
use mobility_iohmm::pipeline::context::{rebuild_contexts, trip_rate_constants};
use mobility_iohmm::pipeline::ingest::{read_calendar_csv, read_trips_csv};
use mobility_iohmm::pipeline::split::split_positions;
use mobility_iohmm::pipeline::synth::{synthesize, SyntheticScenario};
use mobility_iohmm::pipeline::{context::assemble_history, segment_days, CalendarData, FeatureSchema, RawTapRecord};
use mobility_iohmm::prediction::{predict_sequence, rank_of, ranking, PredictionConfig};
use mobility_iohmm::seed::user_seed;
use mobility_iohmm::types::{LocationVocab, UserHistory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_SUFFIX: &str = ".model.json";
const EM_SLACK: f64 = 1e-8;

/// Directory layout under `--out`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn selection(&self) -> PathBuf {
        self.root.join("selection")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn patterns(&self) -> PathBuf {
        self.root.join("patterns")
    }
    pub fn metadata(&self, command: &str) -> PathBuf {
        self.root.join("run_metadata").join(format!("{command}.json"))
    }
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub summary: serde_json::Value,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn warn(&mut self, message: String) {
        warn!("{message}");
        self.warnings.push(message);
    }
}

/// Everything `predict` and `interpret` need about one trained user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub user: String,
    pub n_states: usize,
    pub selection: Option<SilhouetteSelection>,
    pub train_days: Vec<String>,
    pub test_days: Vec<String>,
    pub params: IOHMMParams,
    pub em: EmReport,
    /// Held-out log-likelihood summed over test days the model can score.
    pub heldout_log_likelihood: f64,
    pub heldout_activities: usize,
    pub lr: LinearRegressionBaseline,
    pub mc: MarkovChainBaseline,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs.unwrap_or(0)).build()?)
}

/// Parallel map that keeps input order.
fn par_map<T: Sync, R: Send>(cfg: &RunConfig, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
    Ok(pool(cfg)?.install(|| items.par_iter().map(f).collect()))
}

/// Removes files in `dir` ending in `suffix` that are not in `keep`.
fn remove_stale(dir: &Path, suffix: &str, keep: &BTreeSet<PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.to_string_lossy().ends_with(suffix) && !keep.contains(&path) {
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}

fn write_corpora(dir: &Path, corpora: &[UserCorpus]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut written = BTreeSet::new();
    for c in corpora {
        let path = dir.join(c.file_name());
        write_atomic(&path, c.to_json()?.as_bytes())?;
        written.insert(path);
    }
    remove_stale(dir, CORPUS_SUFFIX, &written)
}

pub fn ingest(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let trips_path = cfg.trips.as_ref().ok_or_else(|| anyhow!("ingest needs --trips"))?;
    let trips = read_trips_csv(File::open(trips_path).with_context(|| format!("opening {}", trips_path.display()))?)?;
    for s in &trips.skipped {
        out.warn(format!("skipped trip row {s}"));
    }
    let calendar = match &cfg.calendar {
        Some(p) => read_calendar_csv(File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        None => {
            out.warn("no calendar given; every day is treated as dry and not a holiday".into());
            CalendarData::default()
        }
    };
    let mut by_user: BTreeMap<String, Vec<RawTapRecord>> = BTreeMap::new();
    for r in trips.records {
        by_user.entry(r.user_id.clone()).or_default().push(r);
    }
    let users: Vec<(String, Vec<RawTapRecord>)> = by_user.into_iter().collect();
    let schema = cfg.schema.schema();
    let results = par_map(cfg, &users, |(user, taps)| {
        let seg = segment_days(taps, user);
        let n_rejected = seg.rejected.len();
        let clipped = seg.clipped;
        let mut notes: Vec<String> = seg.rejected.iter().map(|r| format!("user {user}: rejected {r}")).collect();
        let missing = seg.days.iter().filter(|d| cfg.calendar.is_some() && !calendar.contains(&d.day)).count();
        if missing > 0 {
            notes.push(format!("user {user}: {missing} day(s) missing from the calendar default to 0"));
        }
        let history = if seg.days.is_empty() {
            None
        } else {
            Some(assemble_history(user, seg.days, &calendar, &schema))
        };
        (history, n_rejected, clipped, notes)
    })?;
    let mut corpora = Vec::new();
    let (mut rejected, mut clipped) = (0, 0);
    for (history, r, c, notes) in results {
        rejected += r;
        clipped += c;
        for n in notes {
            out.warn(n);
        }
        if let Some(h) = history {
            corpora.push(UserCorpus::new(h?, &calendar, schema.clone()));
        }
    }
    write_corpora(&Layout::new(&cfg.out).corpus(), &corpora)?;
    let report = json!({
        "users": corpora.len(),
        "days": corpora.iter().map(|c| c.history.active_days()).sum::<usize>(),
        "trips": corpora.iter().flat_map(|c| &c.history.days).map(|d| d.trips.len()).sum::<usize>(),
        "skipped_rows": trips.skipped.len(),
        "rejected_records": rejected,
        "clipped_trips": clipped,
    });
    write_json(&cfg.out.join("ingest_report.json"), &report)?;
    out.summary = report;
    Ok(out)
}

pub fn synth(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let scenario = SyntheticScenario::commuter(cfg.synth.users, cfg.synth.days, cfg.seed);
    let corpus = synthesize(&scenario)?;
    let schema = scenario.params.schema.clone();
    let corpora: Vec<UserCorpus> = corpus
        .histories
        .iter()
        .zip(&corpus.labels)
        .map(|(h, labels)| {
            let mut c = UserCorpus::new(h.clone(), &corpus.calendar, schema.clone());
            c.labels = Some(labels.clone());
            c
        })
        .collect();
    write_corpora(&Layout::new(&cfg.out).corpus(), &corpora)?;
    write_json(&cfg.out.join("synth_scenario.json"), &scenario)?;
    if corpus.resampled_durations > 0 {
        out.warn(format!("{} negative durations were redrawn", corpus.resampled_durations));
    }
    out.summary = json!({
        "users": corpora.len(),
        "days": corpora.iter().map(|c| c.history.active_days()).sum::<usize>(),
        "activities": corpora.iter().map(|c| c.history.activity_count()).sum::<usize>(),
        "resampled_durations": corpus.resampled_durations,
    });
    Ok(out)
}

/// A user's split with contexts rebuilt under the schema refitted on training days.
pub struct PreparedUser {
    pub train: UserHistory,
    pub test: UserHistory,
    pub schema: FeatureSchema,
}

/// Stations appearing in the history's trips, in first-seen order.
fn vocab_of(history: &UserHistory) -> LocationVocab {
    let mut vocab = LocationVocab::default();
    for day in &history.days {
        for trip in &day.trips {
            vocab.insert(trip.origin.clone());
            vocab.insert(trip.destination.clone());
        }
    }
    vocab
}

fn rebuild(corpus: &UserCorpus, train: &mut UserHistory, test: &mut UserHistory, schema: &FeatureSchema) -> Result<()> {
    let source = train.clone();
    rebuild_contexts(train, &corpus.calendar, &source, schema)?;
    rebuild_contexts(test, &corpus.calendar, &source, schema)?;
    train.vocab = vocab_of(train);
    Ok(())
}

fn split_of(corpus: &UserCorpus, cfg: &RunConfig) -> Result<(UserHistory, UserHistory)> {
    let h = &corpus.history;
    let (train, test) = split_positions(h.active_days(), cfg.test_fraction, user_seed(cfg.seed, "split", &h.user))?;
    Ok((h.subset(&train), h.subset(&test)))
}

/// Splits every user, refits the schema on training days and rebuilds
/// contexts. Users that cannot be split are dropped with a warning.
fn prepare_all(corpora: &[UserCorpus], cfg: &RunConfig, out: &mut Outcome) -> Result<Vec<(usize, PreparedUser)>> {
    let mut splits = Vec::new();
    for (k, c) in corpora.iter().enumerate() {
        match split_of(c, cfg) {
            Ok(s) => splits.push((k, s)),
            Err(e) => out.warn(format!("user {} skipped: {e}", c.history.user)),
        }
    }
    let trains: Vec<&UserHistory> = splits.iter().map(|(_, (tr, _))| tr).collect();
    let rates = trip_rate_constants(&trains);
    let mut prepared = Vec::with_capacity(splits.len());
    for (k, (mut train, mut test)) in splits {
        let schema = corpora[k].schema.refit(&train, rates);
        rebuild(&corpora[k], &mut train, &mut test, &schema)?;
        prepared.push((k, PreparedUser { train, test, schema }));
    }
    Ok(prepared)
}

fn load_corpora(layout: &Layout) -> Result<Vec<UserCorpus>> {
    let dir = layout.corpus();
    if !dir.exists() {
        bail!("no corpus at {}; run ingest or synth first", dir.display());
    }
    corpus_paths(&dir)?
        .iter()
        .map(|p| read_corpus(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

pub fn select_states(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let layout = Layout::new(&cfg.out);
    let corpora = load_corpora(&layout)?;
    let prepared = prepare_all(&corpora, cfg, &mut out)?;
    let selection = cfg.selection();
    let results = par_map(cfg, &prepared, |(_, p)| {
        select_state_count(&p.train, &selection, user_seed(cfg.seed, "select", &p.train.user))
    })?;
    let mut chosen = BTreeMap::new();
    let dir = layout.selection();
    for ((_, p), sel) in prepared.iter().zip(results) {
        let sel = sel?;
        for w in &sel.warnings {
            out.warn(format!("user {}: {w}", p.train.user));
        }
        *chosen.entry(sel.chosen).or_insert(0usize) += 1;
        write_json(&dir.join(format!("{}.selection.json", file_stem(&p.train.user))), &sel)?;
    }
    out.summary = json!({ "users": prepared.len(), "chosen_state_counts": chosen });
    Ok(out)
}

fn train_user(cfg: &RunConfig, p: &PreparedUser) -> Result<(ModelFile, Vec<String>)> {
    let user = &p.train.user;
    let mut notes = Vec::new();
    let selection = match cfg.n_states {
        Some(_) => None,
        None => Some(select_state_count(&p.train, &cfg.selection(), user_seed(cfg.seed, "select", user))?),
    };
    if let Some(sel) = &selection {
        notes.extend(sel.warnings.iter().map(|w| format!("user {user}: {w}")));
    }
    let n_states = cfg.n_states.or(selection.as_ref().map(|s| s.chosen)).expect("one source of N");
    let (params, em) = fit(&p.train, n_states, &p.schema, user_seed(cfg.seed, "em", user), &cfg.em)?;
    if em.max_decrease() > EM_SLACK {
        notes.push(format!("user {user}: EM log-likelihood decreased by {}", em.max_decrease()));
    }
    if !em.converged {
        notes.push(format!("user {user}: EM stopped at {} iterations without converging", em.iterations));
    }
    let mut heldout = 0.0;
    let mut activities = 0;
    let mut unscored = 0;
    for seq in &p.test.sequences {
        match log_likelihood(seq, &params) {
            Ok(ll) => {
                heldout += ll;
                activities += seq.len();
            }
            Err(_) => unscored += 1,
        }
    }
    if unscored > 0 {
        notes.push(format!("user {user}: {unscored} test day(s) visit stations unseen in training and have no held-out likelihood"));
    }
    let model = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        user: user.clone(),
        n_states,
        selection,
        train_days: p.train.sequences.iter().map(|s| s.day.clone()).collect(),
        test_days: p.test.sequences.iter().map(|s| s.day.clone()).collect(),
        lr: fit_lr(&p.train, cfg.per_index_lr)?,
        mc: fit_mc(&p.train, &p.train.vocab, cfg.mc_alpha)?,
        params,
        em,
        heldout_log_likelihood: heldout,
        heldout_activities: activities,
    };
    Ok((model, notes))
}

pub fn train(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let layout = Layout::new(&cfg.out);
    let corpora = load_corpora(&layout)?;
    let prepared = prepare_all(&corpora, cfg, &mut out)?;
    let results = par_map(cfg, &prepared, |(_, p)| train_user(cfg, p))?;
    let dir = layout.models();
    fs::create_dir_all(&dir)?;
    let mut written = BTreeSet::new();
    let mut states = BTreeMap::new();
    let (mut ll, mut n) = (0.0, 0);
    for ((_, p), r) in prepared.iter().zip(results) {
        let (model, notes) = match r {
            Ok(v) => v,
            Err(e) => {
                out.warn(format!("user {} not trained: {e}", p.train.user));
                continue;
            }
        };
        for note in notes {
            out.warn(note);
        }
        *states.entry(model.n_states).or_insert(0usize) += 1;
        ll += model.heldout_log_likelihood;
        n += model.heldout_activities;
        let path = dir.join(format!("{}{MODEL_SUFFIX}", file_stem(&model.user)));
        write_json(&path, &model)?;
        written.insert(path);
    }
    remove_stale(&dir, MODEL_SUFFIX, &written)?;
    if written.is_empty() {
        bail!("no user could be trained");
    }
    out.summary = json!({
        "users": written.len(),
        "state_counts": states,
        "heldout_log_likelihood_per_activity": if n > 0 { Some(ll / n as f64) } else { None },
    });
    Ok(out)
}

pub fn load_models(layout: &Layout) -> Result<Vec<ModelFile>> {
    let dir = layout.models();
    if !dir.exists() {
        bail!("no models at {}; run train first", dir.display());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(MODEL_SUFFIX))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let m: ModelFile = serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("reading {}", p.display()))?;
            if m.format_version != MODEL_FORMAT_VERSION {
                bail!("{}: unsupported model format {}", p.display(), m.format_version);
            }
            Ok(m)
        })
        .collect()
}

/// The user's train and test halves as recorded in the model, with contexts
/// rebuilt under the model's schema.
pub fn restore_split(layout: &Layout, model: &ModelFile) -> Result<(UserHistory, UserHistory)> {
    let path = layout.corpus().join(format!("{}{CORPUS_SUFFIX}", file_stem(&model.user)));
    let corpus = read_corpus(&path).with_context(|| format!("reading {}", path.display()))?;
    let h = &corpus.history;
    let index: BTreeMap<&str, usize> = h.sequences.iter().enumerate().map(|(i, s)| (s.day.as_str(), i)).collect();
    let positions = |days: &[String]| -> Result<Vec<usize>> {
        days.iter()
            .map(|d| index.get(d.as_str()).copied().ok_or_else(|| anyhow!("user {}: day {d} missing from corpus", model.user)))
            .collect()
    };
    let mut train = h.subset(&positions(&model.train_days)?);
    let mut test = h.subset(&positions(&model.test_days)?);
    rebuild(&corpus, &mut train, &mut test, &model.params.schema)?;
    Ok((train, test))
}

fn rank_in(dist: &[f64], vocab: &LocationVocab, truth: &mobility_iohmm::types::StationId) -> Option<usize> {
    vocab.get(truth).map(|i| rank_of(dist, i))
}

fn predict_user(cfg: &RunConfig, layout: &Layout, model: &ModelFile) -> Result<(Vec<PredictionRow>, Vec<PredictionRow>)> {
    let (_, test) = restore_split(layout, model)?;
    let pcfg = PredictionConfig {
        full_information: cfg.full_information,
        top_k: cfg.top_k,
    };
    let clamp = |d: f64| if cfg.clamp_durations { d.max(0.0) } else { d };
    let mut iohmm = Vec::new();
    let mut baseline = Vec::new();
    for seq in &test.sequences {
        let preds = predict_sequence(&model.params, seq, &pcfg)?;
        for (t, (a, pred)) in seq.activities.iter().zip(&preds).enumerate() {
            iohmm.push(PredictionRow {
                user_id: model.user.clone(),
                day: seq.day.clone(),
                step: t + 1,
                pred_duration_h: clamp(pred.duration),
                true_duration_h: a.duration,
                pred_location: pred.predicted_location.to_string(),
                true_location: a.end_location.to_string(),
                rank_of_truth: rank_in(&pred.location_distribution, &model.params.vocab, &a.end_location),
            });
            let ctx = if t == 0 {
                McContext::FirstTrip
            } else {
                McContext::After(&a.start_location)
            };
            let mc = predict_mc(&model.mc, ctx);
            let best = ranking(&mc.distribution)[0];
            baseline.push(PredictionRow {
                user_id: model.user.clone(),
                day: seq.day.clone(),
                step: t + 1,
                pred_duration_h: clamp(model.lr.predict(t + 1, &seq.contexts[t].0)),
                true_duration_h: a.duration,
                pred_location: model.mc.vocab.station(best).to_string(),
                true_location: a.end_location.to_string(),
                rank_of_truth: rank_in(&mc.distribution, &model.mc.vocab, &a.end_location),
            });
        }
    }
    Ok((iohmm, baseline))
}

pub fn predict(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let layout = Layout::new(&cfg.out);
    let models = load_models(&layout)?;
    let results = par_map(cfg, &models, |m| predict_user(cfg, &layout, m))?;
    let mut iohmm = Vec::new();
    let mut baseline = Vec::new();
    for (m, r) in models.iter().zip(results) {
        match r {
            Ok((a, b)) => {
                iohmm.extend(a);
                baseline.extend(b);
            }
            Err(e) => out.warn(format!("user {}: no predictions: {e}", m.user)),
        }
    }
    if iohmm.is_empty() {
        bail!("no test activities to predict");
    }
    let unranked = iohmm.iter().filter(|r| r.rank_of_truth.is_none()).count();
    if unranked > 0 {
        out.warn(format!("{unranked} test activities end at stations outside the training vocabulary"));
    }
    let dir = layout.predictions();
    for (name, rows) in [("iohmm", &iohmm), ("baseline", &baseline)] {
        let mut buf = Vec::new();
        write_predictions(&mut buf, rows)?;
        write_atomic(&dir.join(format!("{name}.csv")), &buf)?;
    }
    out.summary = json!({ "users": models.len(), "rows_per_model": iohmm.len(), "models": ["iohmm", "baseline"] });
    Ok(out)
}

pub fn evaluate(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let layout = Layout::new(&cfg.out);
    let dir = layout.predictions();
    if !dir.exists() {
        bail!("no predictions at {}; run predict first", dir.display());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no prediction files in {}", dir.display());
    }
    let metadata = match &cfg.metadata {
        Some(p) => read_metadata(File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        None => BTreeMap::new(),
    };
    let corpora: BTreeMap<String, UserCorpus> = load_corpora(&layout)?
        .into_iter()
        .map(|c| (c.history.user.clone(), c))
        .collect();
    let reports = layout.reports();
    let mut summaries = Vec::new();
    for path in &files {
        let model = path.file_stem().expect("file name").to_string_lossy().to_string();
        let rows = read_predictions(File::open(path)?).with_context(|| format!("reading {}", path.display()))?;
        let scores = score_all(&rows, &ScoreOptions::default());
        let covs: Vec<_> = scores
            .iter()
            .filter_map(|s| corpora.get(&s.user).map(|c| user_covariates(&c.history, metadata.get(&s.user))))
            .collect();
        let regression = predictability_regression(&scores, &covs);
        for w in &regression.warnings {
            out.warn(format!("{model}: {w}"));
        }
        write_json(&reports.join(format!("scores_{model}.json")), &scores)?;
        write_json(&reports.join(format!("predictability_{model}.json")), &regression)?;
        summaries.push(aggregate_report(&model, &scores));
    }
    write_json(&reports.join("summary.json"), &summaries)?;
    write_atomic(&reports.join("histograms.csv"), histogram_csv(&summaries).as_bytes())?;
    out.summary = json!({
        "models": summaries.iter().map(|s| json!({
            "model": s.model,
            "users": s.users,
            "mean_middle_r2": s.middle.r2.mean,
            "mean_middle_accuracy": s.middle.accuracy.mean,
        })).collect::<Vec<_>>(),
    });
    Ok(out)
}

pub fn interpret(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let layout = Layout::new(&cfg.out);
    let models = load_models(&layout)?;
    let dir = layout.patterns();
    let results = par_map(cfg, &models, |m| -> Result<()> {
        let (train, _) = restore_split(&layout, m)?;
        let seed = user_seed(cfg.seed, "gibbs", &m.user);
        let samples = gibbs_sample(&train, &m.params, cfg.gibbs_samples, seed)?;
        let report = pattern_report(
            &samples,
            &train,
            &m.params,
            seed,
            ReportOptions {
                truncate_durations: cfg.clamp_durations,
            },
        )?;
        let table = coefficient_table(&m.params, true);
        let stem = file_stem(&m.user);
        write_json(&dir.join(format!("{stem}.patterns.json")), &report)?;
        write_atomic(&dir.join(format!("{stem}.patterns.csv")), report.to_csv().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.coefficients.csv")), table.to_csv().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.duration_coefficients.txt")), table.duration_text().as_bytes())?;
        Ok(())
    })?;
    let mut done = 0;
    for (m, r) in models.iter().zip(results) {
        match r {
            Ok(()) => done += 1,
            Err(e) => out.warn(format!("user {}: no patterns: {e}", m.user)),
        }
    }
    out.summary = json!({ "users": done, "samples": cfg.gibbs_samples });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stale_files_with_the_suffix_are_removed_and_others_kept() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.model.json", "b.model.json", "notes.txt"] {
            fs::write(dir.path().join(name), "x").unwrap();
        }
        let keep: BTreeSet<PathBuf> = [dir.path().join("a.model.json")].into();
        remove_stale(dir.path(), MODEL_SUFFIX, &keep).unwrap();
        let mut left: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
            .collect();
        left.sort();
        assert_eq!(left, ["a.model.json", "notes.txt"]);
    }

    #[test]
    fn training_vocabulary_lists_stations_in_first_seen_order() {
        let scenario = SyntheticScenario::commuter(1, 5, 0);
        let h = &synthesize(&scenario).unwrap().histories[0];
        let v = vocab_of(h);
        let first = &h.days[0].trips[0];
        assert_eq!(v.station(0), &first.origin);
        for day in &h.days {
            for t in &day.trips {
                assert!(v.get(&t.origin).is_some() && v.get(&t.destination).is_some());
            }
        }
    }
}
