//! Held-out scoring, corpus aggregation and the per-user predictability
//! regression.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::types::{StationId, UserHistory};

pub const ERROR_BIN_HOURS: f64 = 0.5;
/// Absolute-error bins over `[0, 24)` plus one overflow bin.
pub const ERROR_BINS: usize = 49;

/// One row of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub user_id: String,
    pub day: String,
    /// 1-based activity index.
    pub step: usize,
    pub pred_duration_h: f64,
    pub true_duration_h: f64,
    pub pred_location: String,
    pub true_location: String,
    /// Empty when the true location is outside the model vocabulary.
    pub rank_of_truth: Option<usize>,
}

pub fn write_predictions<W: Write>(writer: W, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumScore {
    pub n: usize,
    pub r2: Option<f64>,
    /// Truth durations had zero variance (or the stratum was empty).
    pub r2_undefined: bool,
    pub accuracy: Option<f64>,
    pub error_counts: Vec<u64>,
    /// `rank_counts[k - 1]`: predictions whose truth ranked `k`.
    pub rank_counts: Vec<u64>,
    /// Truths outside the model vocabulary; excluded from the rank CDF.
    pub unranked: usize,
}

impl StratumScore {
    /// `P(rank <= k)` for `k = 1..=max rank` over ranked predictions.
    pub fn rank_cdf(&self) -> Vec<f64> {
        cdf(&self.rank_counts)
    }

    pub fn error_fractions(&self) -> Vec<f64> {
        fractions(&self.error_counts)
    }
}

fn cdf(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let mut acc = 0;
    counts
        .iter()
        .map(|c| {
            acc += c;
            if total == 0 {
                0.0
            } else {
                acc as f64 / total as f64
            }
        })
        .collect()
}

fn fractions(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|c| if total == 0 { 0.0 } else { *c as f64 / total as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserScore {
    pub user: String,
    pub first: StratumScore,
    pub middle: StratumScore,
    pub overall: StratumScore,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Centre SST on this value instead of the stratum's test mean.
    pub sst_center: Option<f64>,
}

/// `1 - SSE/SST`; `None` when SST is zero.
pub fn r_squared(pred: &[f64], truth: &[f64], center: Option<f64>) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let mean = center.unwrap_or_else(|| truth.iter().sum::<f64>() / truth.len() as f64);
    let sst: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    if sst <= 0.0 {
        return None;
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, y)| (p - y).powi(2)).sum();
    Some(1.0 - sse / sst)
}

fn score_stratum(rows: &[&PredictionRow], opts: &ScoreOptions) -> StratumScore {
    let pred: Vec<f64> = rows.iter().map(|r| r.pred_duration_h).collect();
    let truth: Vec<f64> = rows.iter().map(|r| r.true_duration_h).collect();
    let r2 = r_squared(&pred, &truth, opts.sst_center);
    let mut error_counts = vec![0u64; ERROR_BINS];
    for (p, y) in pred.iter().zip(&truth) {
        let bin = ((p - y).abs() / ERROR_BIN_HOURS) as usize;
        error_counts[bin.min(ERROR_BINS - 1)] += 1;
    }
    let mut rank_counts: Vec<u64> = Vec::new();
    let mut unranked = 0;
    for r in rows {
        match r.rank_of_truth {
            Some(k) if k >= 1 => {
                if rank_counts.len() < k {
                    rank_counts.resize(k, 0);
                }
                rank_counts[k - 1] += 1;
            }
            _ => unranked += 1,
        }
    }
    let correct = rows.iter().filter(|r| r.pred_location == r.true_location).count();
    StratumScore {
        n: rows.len(),
        r2,
        r2_undefined: r2.is_none(),
        accuracy: (!rows.is_empty()).then(|| correct as f64 / rows.len() as f64),
        error_counts,
        rank_counts,
        unranked,
    }
}

/// Scores one user's predictions. First activities are those with `step == 1`.
pub fn score_user(user: &str, rows: &[PredictionRow], opts: &ScoreOptions) -> UserScore {
    let all: Vec<&PredictionRow> = rows.iter().collect();
    let first: Vec<&PredictionRow> = rows.iter().filter(|r| r.step == 1).collect();
    let middle: Vec<&PredictionRow> = rows.iter().filter(|r| r.step >= 2).collect();
    UserScore {
        user: user.to_string(),
        first: score_stratum(&first, opts),
        middle: score_stratum(&middle, opts),
        overall: score_stratum(&all, opts),
    }
}

/// Groups rows by user (sorted by id) and scores each group.
pub fn score_all(rows: &[PredictionRow], opts: &ScoreOptions) -> Vec<UserScore> {
    let mut by_user: BTreeMap<&str, Vec<PredictionRow>> = BTreeMap::new();
    for r in rows {
        by_user.entry(r.user_id.as_str()).or_default().push(r.clone());
    }
    by_user.into_iter().map(|(u, rs)| score_user(u, &rs, opts)).collect()
}

/// Most frequent first-trip origin; ties go to the earlier vocabulary entry.
pub fn infer_home(history: &UserHistory) -> Result<StationId> {
    let mut counts = vec![0usize; history.vocab.len()];
    let mut any = false;
    for seq in &history.sequences {
        if let Some(a) = seq.activities.first() {
            counts[history.vocab.index_of(&a.end_location)?] += 1;
            any = true;
        }
    }
    if !any {
        return Err(Error::InsufficientData(format!("user {} has no active days", history.user)));
    }
    let mut best = 0;
    for (i, c) in counts.iter().enumerate() {
        if *c > counts[best] {
            best = i;
        }
    }
    Ok(history.vocab.station(best).clone())
}

/// Optional per-user attributes from the metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetadata {
    pub user_id: String,
    pub card_type: Option<String>,
    pub home_region: Option<String>,
}

pub fn read_metadata<R: Read>(reader: R) -> Result<BTreeMap<String, UserMetadata>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = BTreeMap::new();
    for r in rdr.deserialize() {
        let m: UserMetadata = r?;
        out.insert(m.user_id.clone(), m);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCovariates {
    pub user: String,
    pub days_with_travel: f64,
    pub mean_trips_per_day: f64,
    pub std_trips_per_day: f64,
    /// Standard deviation of the first trip's departure time, in hours.
    pub std_first_departure: f64,
    pub home_station: Option<String>,
    pub card_type: Option<String>,
    pub home_region: Option<String>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

pub fn user_covariates(history: &UserHistory, metadata: Option<&UserMetadata>) -> UserCovariates {
    let trips: Vec<f64> = history.sequences.iter().map(|s| s.len() as f64).collect();
    let departures: Vec<f64> = history
        .sequences
        .iter()
        .filter_map(|s| s.activities.first())
        .map(|a| a.start_time.hours() + a.duration)
        .collect();
    let (mean_trips, std_trips) = mean_std(&trips);
    UserCovariates {
        user: history.user.clone(),
        days_with_travel: history.active_days() as f64,
        mean_trips_per_day: mean_trips,
        std_trips_per_day: std_trips,
        std_first_departure: mean_std(&departures).1,
        home_station: infer_home(history).ok().map(|s| s.to_string()),
        card_type: metadata.and_then(|m| m.card_type.clone()),
        home_region: metadata.and_then(|m| m.home_region.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEstimate {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsReport {
    pub n: usize,
    pub coefficients: Vec<CoefficientEstimate>,
    pub r_squared: f64,
    pub dropped: Vec<String>,
}

/// OLS with homoskedastic standard errors and two-sided t-test p-values.
/// Columns that add no rank are dropped in order.
pub fn ols_inference(x: &[Vec<f64>], y: &[f64], names: &[String]) -> Result<OlsReport> {
    let n = y.len();
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.len() });
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..names.len() {
        let mut cols = kept.clone();
        cols.push(j);
        let m = DMatrix::from_fn(n, cols.len(), |i, c| x[i][cols[c]]);
        let sv = m.singular_values();
        let tol = 1e-10 * sv.max().max(1.0);
        if sv.iter().filter(|s| **s > tol).count() == cols.len() {
            kept.push(j);
        } else {
            log::warn!("regression column {} is collinear and was dropped", names[j]);
            dropped.push(names[j].clone());
        }
    }
    let p = kept.len();
    if n < p + 1 {
        return Err(Error::InsufficientData(format!("{n} observations for {p} coefficients")));
    }
    let xm = DMatrix::from_fn(n, p, |i, c| x[i][kept[c]]);
    let yv = DVector::from_column_slice(y);
    let gram = xm.transpose() * &xm;
    let inv = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("predictability design".into()))?
        .inverse();
    let beta = &inv * (xm.transpose() * &yv);
    let resid = &yv - &xm * &beta;
    let sse = resid.norm_squared();
    let df = (n - p) as f64;
    let sigma2 = if df > 0.0 { sse / df } else { 0.0 };
    let mean = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let t_dist = if df > 0.0 { StudentsT::new(0.0, 1.0, df).ok() } else { None };
    let coefficients = kept
        .iter()
        .enumerate()
        .map(|(c, &j)| {
            let se = (sigma2 * inv[(c, c)]).max(0.0).sqrt();
            let t = if se > 0.0 {
                beta[c] / se
            } else if beta[c] == 0.0 {
                0.0
            } else {
                beta[c].signum() * f64::INFINITY
            };
            let p_value = match &t_dist {
                Some(d) if t.is_finite() => 2.0 * (1.0 - d.cdf(t.abs())),
                _ if t.is_infinite() => 0.0,
                _ => 1.0,
            };
            CoefficientEstimate {
                name: names[j].clone(),
                estimate: beta[c],
                std_error: se,
                t_value: t,
                p_value,
            }
        })
        .collect();
    Ok(OlsReport {
        n,
        coefficients,
        r_squared: if sst > 0.0 { 1.0 - sse / sst } else { 1.0 },
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictabilityRegression {
    pub duration: Option<OlsReport>,
    pub location: Option<OlsReport>,
    pub covariates: Vec<UserCovariates>,
    pub warnings: Vec<String>,
}

fn levels(values: impl Iterator<Item = Option<String>>) -> Vec<String> {
    let mut set: Vec<String> = values.flatten().collect();
    set.sort();
    set.dedup();
    set
}

/// Design rows: intercept, the numeric covariates, then dummies for every
/// non-reference card type and home region (reference = first level).
pub fn predictability_design(covs: &[UserCovariates]) -> (Vec<String>, Vec<Vec<f64>>) {
    let cards = levels(covs.iter().map(|c| c.card_type.clone()));
    let regions = levels(covs.iter().map(|c| c.home_region.clone()));
    let mut names: Vec<String> = [
        "intercept",
        "days_with_travel",
        "mean_trips_per_day",
        "std_trips_per_day",
        "std_first_departure",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend(cards.iter().skip(1).map(|c| format!("card_type={c}")));
    names.extend(regions.iter().skip(1).map(|r| format!("home_region={r}")));
    let rows = covs
        .iter()
        .map(|c| {
            let mut row = vec![
                1.0,
                c.days_with_travel,
                c.mean_trips_per_day,
                c.std_trips_per_day,
                c.std_first_departure,
            ];
            row.extend(cards.iter().skip(1).map(|l| f64::from(c.card_type.as_deref() == Some(l))));
            row.extend(regions.iter().skip(1).map(|l| f64::from(c.home_region.as_deref() == Some(l))));
            row
        })
        .collect();
    (names, rows)
}

/// Regresses overall duration R² and overall location accuracy on the
/// covariates. Users lacking a dependent value are left out of that fit.
pub fn predictability_regression(scores: &[UserScore], covs: &[UserCovariates]) -> PredictabilityRegression {
    let by_user: BTreeMap<&str, &UserScore> = scores.iter().map(|s| (s.user.as_str(), s)).collect();
    let (names, rows) = predictability_design(covs);
    let mut warnings = Vec::new();
    let mut fit = |label: &str, get: &dyn Fn(&UserScore) -> Option<f64>| -> Option<OlsReport> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, row) in covs.iter().zip(&rows) {
            if let Some(v) = by_user.get(c.user.as_str()).and_then(|s| get(s)) {
                x.push(row.clone());
                y.push(v);
            }
        }
        if y.len() < names.len() + 1 {
            warnings.push(format!("{label}: {} users for {} covariates; regression skipped", y.len(), names.len()));
            return None;
        }
        match ols_inference(&x, &y, &names) {
            Ok(r) => {
                warnings.extend(r.dropped.iter().map(|d| format!("{label}: dropped collinear column {d}")));
                Some(r)
            }
            Err(e) => {
                warnings.push(format!("{label}: {e}"));
                None
            }
        }
    };
    let duration = fit("duration", &|s| s.overall.r2);
    let location = fit("location", &|s| s.overall.accuracy);
    PredictabilityRegression {
        duration,
        location,
        covariates: covs.to_vec(),
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> MetricSummary {
    if values.is_empty() {
        return MetricSummary {
            n: 0,
            mean: None,
            median: None,
            q25: None,
            q75: None,
            min: None,
            max: None,
        };
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    MetricSummary {
        n: s.len(),
        mean: Some(s.iter().sum::<f64>() / s.len() as f64),
        median: Some(quantile(&s, 0.5)),
        q25: Some(quantile(&s, 0.25)),
        q75: Some(quantile(&s, 0.75)),
        min: Some(s[0]),
        max: Some(s[s.len() - 1]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub r2: MetricSummary,
    pub accuracy: MetricSummary,
    /// Pooled over users.
    pub error_fractions: Vec<f64>,
    pub rank_cdf: Vec<f64>,
    pub predictions: usize,
    pub r2_undefined_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub users: usize,
    pub first: StratumSummary,
    pub middle: StratumSummary,
    pub overall: StratumSummary,
}

fn summarize_stratum(strata: &[&StratumScore]) -> StratumSummary {
    let r2: Vec<f64> = strata.iter().filter_map(|s| s.r2).collect();
    let acc: Vec<f64> = strata.iter().filter_map(|s| s.accuracy).collect();
    let mut errors = vec![0u64; ERROR_BINS];
    let mut ranks: Vec<u64> = Vec::new();
    for s in strata {
        for (e, c) in errors.iter_mut().zip(&s.error_counts) {
            *e += c;
        }
        if ranks.len() < s.rank_counts.len() {
            ranks.resize(s.rank_counts.len(), 0);
        }
        for (r, c) in ranks.iter_mut().zip(&s.rank_counts) {
            *r += c;
        }
    }
    StratumSummary {
        r2: summarize(&r2),
        accuracy: summarize(&acc),
        error_fractions: fractions(&errors),
        rank_cdf: cdf(&ranks),
        predictions: strata.iter().map(|s| s.n).sum(),
        r2_undefined_users: strata.iter().filter(|s| s.n > 0 && s.r2_undefined).count(),
    }
}

pub fn aggregate_report(model: &str, scores: &[UserScore]) -> ModelSummary {
    let pick = |f: fn(&UserScore) -> &StratumScore| -> Vec<&StratumScore> { scores.iter().map(f).collect() };
    ModelSummary {
        model: model.to_string(),
        users: scores.len(),
        first: summarize_stratum(&pick(|s| &s.first)),
        middle: summarize_stratum(&pick(|s| &s.middle)),
        overall: summarize_stratum(&pick(|s| &s.overall)),
    }
}

/// Plot-ready CSV: `model,stratum,kind,x,value` for error bins and rank CDFs.
pub fn histogram_csv(summaries: &[ModelSummary]) -> String {
    let mut out = String::from("model,stratum,kind,x,value\n");
    for m in summaries {
        for (name, s) in [("first", &m.first), ("middle", &m.middle), ("overall", &m.overall)] {
            for (b, v) in s.error_fractions.iter().enumerate() {
                let x = if b + 1 == ERROR_BINS {
                    "overflow".to_string()
                } else {
                    format!("{:.1}", b as f64 * ERROR_BIN_HOURS)
                };
                out.push_str(&format!("{},{name},abs_error,{x},{v}\n", m.model));
            }
            for (k, v) in s.rank_cdf.iter().enumerate() {
                out.push_str(&format!("{},{name},rank_cdf,{},{v}\n", m.model, k + 1));
            }
        }
    }
    out
}
