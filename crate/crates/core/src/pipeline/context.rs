//! Context vectors: the exogenous input of each activity.
//!
//! A [`FeatureSchema`] is an ordered list of feature groups. Constants that
//! depend on data (top start stations, z-scoring centres and scales) are fitted
//! on training days with [`FeatureSchema::refit`] and then frozen.

use std::collections::{BTreeMap, HashMap};

use chrono::Weekday;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::ingest::CalendarData;
use crate::types::{
    ActivitySequence, ContextVector, DayFlags, DaySequence, StationId, UserHistory,
};

pub const DEFAULT_TOP_K: usize = 10;

/// Weekday dummies in schema order; Saturday is the dropped reference.
pub const WEEKDAY_DUMMIES: [(Weekday, &str); 6] = [
    (Weekday::Mon, "monday"),
    (Weekday::Tue, "tuesday"),
    (Weekday::Wed, "wednesday"),
    (Weekday::Thu, "thursday"),
    (Weekday::Fri, "friday"),
    (Weekday::Sun, "sunday"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feature {
    Intercept,
    Rainy,
    /// Six dummies, Saturday dropped.
    DayOfWeek,
    PublicHoliday,
    /// End time of the previous trip divided by 24.
    PrevEndTime,
    /// 1-based activity index as a real number.
    ActivityIndex,
    /// One-hot of the start location over the `top_k` most frequent training
    /// start stations plus an "other" bucket; the null location is the reference.
    StartLocation { top_k: usize, stations: Vec<StationId> },
    /// User's mean trips per active day, z-scored.
    MeanTripsPerDay { center: f64, scale: f64 },
    /// User's historical mean duration of the activity at this index, z-scored.
    IndexMeanDuration { center: f64, scale: f64 },
}

impl Feature {
    fn width(&self) -> usize {
        match self {
            Feature::DayOfWeek => WEEKDAY_DUMMIES.len(),
            Feature::StartLocation { stations, .. } => stations.len() + 1,
            _ => 1,
        }
    }

    fn names(&self) -> Vec<String> {
        match self {
            Feature::Intercept => vec!["intercept".into()],
            Feature::Rainy => vec!["rainy".into()],
            Feature::DayOfWeek => WEEKDAY_DUMMIES.iter().map(|(_, n)| n.to_string()).collect(),
            Feature::PublicHoliday => vec!["public_holiday".into()],
            Feature::PrevEndTime => vec!["prev_end_time".into()],
            Feature::ActivityIndex => vec!["activity_index".into()],
            Feature::StartLocation { stations, .. } => stations
                .iter()
                .map(|s| format!("start_loc={s}"))
                .chain(std::iter::once("start_loc=other".to_string()))
                .collect(),
            Feature::MeanTripsPerDay { .. } => vec!["mean_trips_per_day".into()],
            Feature::IndexMeanDuration { .. } => vec!["index_mean_duration".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<Feature>,
}

impl FeatureSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        let schema = FeatureSchema { features };
        schema.validate()?;
        Ok(schema)
    }

    /// Intercept only.
    pub fn intercept_only() -> Self {
        FeatureSchema {
            features: vec![Feature::Intercept],
        }
    }

    /// The full default schema: weather, weekday, holiday, last-trip and history
    /// features. Data-dependent constants are neutral until [`refit`](Self::refit).
    pub fn default_schema() -> Self {
        FeatureSchema {
            features: vec![
                Feature::Intercept,
                Feature::Rainy,
                Feature::DayOfWeek,
                Feature::PublicHoliday,
                Feature::PrevEndTime,
                Feature::ActivityIndex,
                Feature::StartLocation {
                    top_k: DEFAULT_TOP_K,
                    stations: Vec::new(),
                },
                Feature::MeanTripsPerDay {
                    center: 0.0,
                    scale: 1.0,
                },
                Feature::IndexMeanDuration {
                    center: 0.0,
                    scale: 1.0,
                },
            ],
        }
    }

    /// Calendar and last-trip-time features only.
    pub fn calendar_schema() -> Self {
        FeatureSchema {
            features: vec![
                Feature::Intercept,
                Feature::Rainy,
                Feature::DayOfWeek,
                Feature::PublicHoliday,
                Feature::PrevEndTime,
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.first() != Some(&Feature::Intercept) {
            return Err(Error::InvalidInput("schema must start with the intercept".into()));
        }
        let names = self.names();
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::InvalidInput(format!("duplicate feature name {n}")));
            }
        }
        for f in &self.features {
            match f {
                Feature::MeanTripsPerDay { center, scale }
                | Feature::IndexMeanDuration { center, scale } => {
                    if !center.is_finite() || !(scale.is_finite() && *scale > 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "bad z-scoring constants in {f:?}"
                        )));
                    }
                }
                Feature::StartLocation { stations, .. } if stations.iter().any(|s| s.is_null()) => {
                    return Err(Error::InvalidInput("null location listed as a start station".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.features.iter().map(Feature::width).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().flat_map(Feature::names).collect()
    }

    /// Returns a copy whose data-dependent constants are fitted on `train`.
    ///
    /// `trip_rate_constants` gives (mean, std) of trips per active day across
    /// the training population; when absent the previous constants are kept.
    pub fn refit(&self, train: &UserHistory, trip_rate_constants: Option<(f64, f64)>) -> FeatureSchema {
        let stats = HistoryStats::from_history(train);
        let features = self
            .features
            .iter()
            .map(|f| match f {
                Feature::StartLocation { top_k, .. } => Feature::StartLocation {
                    top_k: *top_k,
                    stations: top_start_stations(train, *top_k),
                },
                Feature::MeanTripsPerDay { center, scale } => match trip_rate_constants {
                    Some((m, s)) => Feature::MeanTripsPerDay {
                        center: m,
                        scale: if s > 1e-12 { s } else { 1.0 },
                    },
                    None => Feature::MeanTripsPerDay {
                        center: *center,
                        scale: *scale,
                    },
                },
                Feature::IndexMeanDuration { .. } => {
                    let values: Vec<f64> = train
                        .sequences
                        .iter()
                        .flat_map(|s| (1..=s.len()).map(|t| stats.index_mean_duration(t)))
                        .collect();
                    let (center, scale) = mean_std(&values);
                    Feature::IndexMeanDuration {
                        center,
                        scale: if scale > 1e-12 { scale } else { 1.0 },
                    }
                }
                other => other.clone(),
            })
            .collect();
        FeatureSchema { features }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Most frequent non-null start stations, ties broken by vocabulary order.
fn top_start_stations(history: &UserHistory, k: usize) -> Vec<StationId> {
    let mut counts: HashMap<&StationId, usize> = HashMap::new();
    for seq in &history.sequences {
        for a in &seq.activities {
            if !a.start_location.is_null() {
                *counts.entry(&a.start_location).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&StationId, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.cmp(&a.1).then_with(|| {
            let ia = history.vocab.get(a.0).unwrap_or(usize::MAX);
            let ib = history.vocab.get(b.0).unwrap_or(usize::MAX);
            ia.cmp(&ib).then(a.0.cmp(b.0))
        })
    });
    ranked.into_iter().take(k).map(|(s, _)| s.clone()).collect()
}

/// Per-user travel statistics feeding the history features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryStats {
    pub mean_trips_per_day: f64,
    /// Mean duration of the t-th activity, indexed by `t - 1`.
    pub mean_duration_by_index: Vec<f64>,
}

impl HistoryStats {
    pub fn from_history(history: &UserHistory) -> Self {
        let days = history.sequences.len();
        let trips: usize = history.sequences.iter().map(|s| s.len()).sum();
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for seq in &history.sequences {
            for (t, a) in seq.activities.iter().enumerate() {
                let e = sums.entry(t).or_default();
                e.0 += a.duration;
                e.1 += 1;
            }
        }
        HistoryStats {
            mean_trips_per_day: if days == 0 { 0.0 } else { trips as f64 / days as f64 },
            mean_duration_by_index: sums.values().map(|(s, n)| s / *n as f64).collect(),
        }
    }

    /// Mean duration at 1-based index `t`; indices past the longest training
    /// day reuse the last known value.
    pub fn index_mean_duration(&self, t: usize) -> f64 {
        match self.mean_duration_by_index.len() {
            0 => 0.0,
            n => self.mean_duration_by_index[(t - 1).min(n - 1)],
        }
    }
}

/// Observed information available before activity `t` ends.
#[derive(Debug, Clone, Copy)]
pub struct ContextInputs<'a> {
    /// 1-based activity index.
    pub index: usize,
    pub weekday: Weekday,
    pub flags: DayFlags,
    pub prev_end_time: f64,
    pub start_location: &'a StationId,
}

/// Evaluates the schema on already-extracted inputs.
pub fn context_from_inputs(
    inputs: &ContextInputs<'_>,
    stats: &HistoryStats,
    schema: &FeatureSchema,
) -> ContextVector {
    let mut z = Vec::with_capacity(schema.dim());
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    for f in &schema.features {
        match f {
            Feature::Intercept => z.push(1.0),
            Feature::Rainy => z.push(flag(inputs.flags.rainy)),
            Feature::DayOfWeek => {
                z.extend(WEEKDAY_DUMMIES.iter().map(|(d, _)| flag(*d == inputs.weekday)))
            }
            Feature::PublicHoliday => z.push(flag(inputs.flags.public_holiday)),
            Feature::PrevEndTime => z.push(inputs.prev_end_time / 24.0),
            Feature::ActivityIndex => z.push(inputs.index as f64),
            Feature::StartLocation { stations, .. } => {
                let p = inputs.start_location;
                let hit = stations.iter().position(|s| s == p);
                z.extend(stations.iter().map(|s| flag(s == p)));
                z.push(flag(!p.is_null() && hit.is_none()));
            }
            Feature::MeanTripsPerDay { center, scale } => {
                z.push((stats.mean_trips_per_day - center) / scale)
            }
            Feature::IndexMeanDuration { center, scale } => {
                z.push((stats.index_mean_duration(inputs.index) - center) / scale)
            }
        }
    }
    ContextVector(z)
}

/// Context of the 1-based activity `t` of `day`.
pub fn build_context(
    t: usize,
    day: &DaySequence,
    calendar: &CalendarData,
    stats: &HistoryStats,
    schema: &FeatureSchema,
) -> Result<ContextVector> {
    if t == 0 || t > day.trips.len() {
        return Err(Error::InvalidInput(format!(
            "activity index {t} outside day {} of length {}",
            day.day,
            day.trips.len()
        )));
    }
    let null = StationId::null();
    let (prev_end_time, start_location) = if t == 1 {
        (0.0, &null)
    } else {
        let prev = &day.trips[t - 2];
        (prev.end.hours(), &prev.destination)
    };
    let inputs = ContextInputs {
        index: t,
        weekday: day.weekday,
        flags: calendar.flags(&day.day),
        prev_end_time,
        start_location,
    };
    Ok(context_from_inputs(&inputs, stats, schema))
}

/// Recomputes every context of `history` under `schema`, with history
/// statistics taken from `stats_source` (normally the training days).
pub fn rebuild_contexts(
    history: &mut UserHistory,
    calendar: &CalendarData,
    stats_source: &UserHistory,
    schema: &FeatureSchema,
) -> Result<()> {
    let stats = HistoryStats::from_history(stats_source);
    for (day, seq) in history.days.iter().zip(history.sequences.iter_mut()) {
        seq.contexts = (1..=day.trips.len())
            .map(|t| build_context(t, day, calendar, &stats, schema))
            .collect::<Result<_>>()?;
    }
    Ok(())
}

/// Builds a user's history from segmented days: derives activities, collects
/// the vocabulary in first-seen order, and evaluates contexts.
pub fn assemble_history(
    user: &str,
    days: Vec<DaySequence>,
    calendar: &CalendarData,
    schema: &FeatureSchema,
) -> Result<UserHistory> {
    let mut vocab = crate::types::LocationVocab::default();
    let mut sequences = Vec::with_capacity(days.len());
    for day in &days {
        let activities = crate::pipeline::ingest::derive_activities(day)?;
        for trip in &day.trips {
            vocab.insert(trip.origin.clone());
            vocab.insert(trip.destination.clone());
        }
        sequences.push(ActivitySequence {
            user: user.to_string(),
            day: day.day.clone(),
            activities,
            contexts: Vec::new(),
        });
    }
    let mut history = UserHistory {
        user: user.to_string(),
        days,
        sequences,
        vocab,
    };
    let source = history.clone();
    rebuild_contexts(&mut history, calendar, &source, schema)?;
    Ok(history)
}

/// Mean and standard deviation of trips per active day across users.
pub fn trip_rate_constants(histories: &[&UserHistory]) -> Option<(f64, f64)> {
    let rates: Vec<f64> = histories
        .iter()
        .filter(|h| !h.sequences.is_empty())
        .map(|h| HistoryStats::from_history(h).mean_trips_per_day)
        .collect();
    if rates.is_empty() {
        return None;
    }
    Some(mean_std(&rates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ClockTime, TripRecord};

    fn sid(s: &str) -> StationId {
        StationId::new(s).unwrap()
    }

    fn trip(o: &str, d: &str, x: f64, y: f64) -> TripRecord {
        TripRecord::new(sid(o), sid(d), ClockTime::new(x).unwrap(), ClockTime::new(y).unwrap()).unwrap()
    }

    fn day(weekday: Weekday, trips: Vec<TripRecord>) -> DaySequence {
        DaySequence {
            user: "u".into(),
            day: "2024-03-04".into(),
            weekday,
            trips,
        }
    }

    fn value(schema: &FeatureSchema, z: &ContextVector, name: &str) -> f64 {
        let i = schema.names().iter().position(|n| n == name).unwrap();
        z.0[i]
    }

    #[test]
    fn plain_monday_first_activity() {
        let schema = FeatureSchema::calendar_schema();
        let d = day(Weekday::Mon, vec![trip("A", "B", 4.0, 4.5)]);
        let z = build_context(1, &d, &CalendarData::default(), &HistoryStats::default(), &schema).unwrap();
        assert_eq!(z.len(), schema.dim());
        assert_eq!(value(&schema, &z, "intercept"), 1.0);
        assert_eq!(value(&schema, &z, "rainy"), 0.0);
        assert_eq!(value(&schema, &z, "monday"), 1.0);
        assert_eq!(value(&schema, &z, "sunday"), 0.0);
        assert_eq!(value(&schema, &z, "public_holiday"), 0.0);
        assert_eq!(value(&schema, &z, "prev_end_time"), 0.0);
    }

    #[test]
    fn rainy_holiday_sunday() {
        let schema = FeatureSchema::calendar_schema();
        let mut cal = CalendarData::default();
        cal.insert("2024-03-04", DayFlags { rainy: true, public_holiday: true });
        let d = day(Weekday::Sun, vec![trip("A", "B", 4.0, 4.5)]);
        let z = build_context(1, &d, &cal, &HistoryStats::default(), &schema).unwrap();
        assert_eq!(value(&schema, &z, "rainy"), 1.0);
        assert_eq!(value(&schema, &z, "sunday"), 1.0);
        assert_eq!(value(&schema, &z, "monday"), 0.0);
        assert_eq!(value(&schema, &z, "public_holiday"), 1.0);
    }

    #[test]
    fn saturday_is_the_reference() {
        let schema = FeatureSchema::calendar_schema();
        let d = day(Weekday::Sat, vec![trip("A", "B", 4.0, 4.5)]);
        let z = build_context(1, &d, &CalendarData::default(), &HistoryStats::default(), &schema).unwrap();
        let names = schema.names();
        for (_, n) in WEEKDAY_DUMMIES {
            assert_eq!(z.0[names.iter().position(|x| x == n).unwrap()], 0.0);
        }
    }

    #[test]
    fn trip_rate_feature_is_zscored() {
        let schema = FeatureSchema::new(vec![
            Feature::Intercept,
            Feature::MeanTripsPerDay { center: 2.5, scale: 1.0 },
        ])
        .unwrap();
        let stats = HistoryStats {
            mean_trips_per_day: 2.5,
            mean_duration_by_index: vec![],
        };
        let d = day(Weekday::Mon, vec![trip("A", "B", 4.0, 4.5)]);
        let z = build_context(1, &d, &CalendarData::default(), &stats, &schema).unwrap();
        assert_eq!(z.0, vec![1.0, 0.0]);
    }

    #[test]
    fn start_location_one_hot() {
        let schema = FeatureSchema::new(vec![
            Feature::Intercept,
            Feature::PrevEndTime,
            Feature::ActivityIndex,
            Feature::StartLocation { top_k: 1, stations: vec![sid("B")] },
        ])
        .unwrap();
        let d = day(Weekday::Mon, vec![trip("A", "B", 4.0, 4.5), trip("B", "C", 12.0, 12.5), trip("C", "A", 18.0, 18.5)]);
        let cal = CalendarData::default();
        let st = HistoryStats::default();
        let z1 = build_context(1, &d, &cal, &st, &schema).unwrap();
        let z2 = build_context(2, &d, &cal, &st, &schema).unwrap();
        let z3 = build_context(3, &d, &cal, &st, &schema).unwrap();
        assert_eq!(z1.0, vec![1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(z2.0, vec![1.0, 4.5 / 24.0, 2.0, 1.0, 0.0]);
        assert_eq!(z3.0, vec![1.0, 12.5 / 24.0, 3.0, 0.0, 1.0]);
        assert!(build_context(4, &d, &cal, &st, &schema).is_err());
    }

    #[test]
    fn schema_validation() {
        assert!(FeatureSchema::new(vec![Feature::Rainy]).is_err());
        assert!(FeatureSchema::new(vec![Feature::Intercept, Feature::Rainy, Feature::Rainy]).is_err());
        assert_eq!(FeatureSchema::calendar_schema().dim(), 10);
    }

    #[test]
    fn refit_freezes_training_constants() {
        let days = vec![
            day(Weekday::Mon, vec![trip("H", "W", 4.0, 4.5), trip("W", "H", 14.0, 14.5)]),
            day(Weekday::Tue, vec![trip("H", "W", 5.0, 5.5), trip("W", "S", 15.0, 15.5), trip("S", "H", 17.0, 17.5)]),
        ];
        let cal = CalendarData::default();
        let h = assemble_history("u", days, &cal, &FeatureSchema::default_schema()).unwrap();
        let schema = FeatureSchema::default_schema().refit(&h, Some((2.5, 0.5)));
        let names = schema.names();
        assert!(names.contains(&"start_loc=W".to_string()));
        let mut h2 = h.clone();
        rebuild_contexts(&mut h2, &cal, &h, &schema).unwrap();
        let z = &h2.sequences[0].contexts[0];
        assert_eq!(z.len(), schema.dim());
        let i = names.iter().position(|n| n == "mean_trips_per_day").unwrap();
        assert!((z.0[i] - 0.0).abs() < 1e-12);
        // build_context is a pure function
        let mut h3 = h.clone();
        rebuild_contexts(&mut h3, &cal, &h, &schema).unwrap();
        assert_eq!(h2, h3);
    }
}
