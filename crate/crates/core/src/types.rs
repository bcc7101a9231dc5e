//! Shared domain types: stations, clock times, trips, activities and user histories.
//!
//! Times are real hours since the 4:00 AM day boundary, so `0.0` is 4:00 AM and
//! `20.0` is midnight. Durations are real hours.

use std::collections::HashMap;
use std::fmt;

use chrono::Weekday;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token used as the start location of the first activity of a day.
pub const NULL_LOCATION: &str = "__NULL__";

/// Opaque station token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StationId(String);

impl StationId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidInput("empty station id".into()));
        }
        Ok(StationId(id))
    }

    pub fn null() -> Self {
        StationId(NULL_LOCATION.to_string())
    }

    pub fn is_null(&self) -> bool {
        self.0 == NULL_LOCATION
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Hours since 4:00 AM, in `[0, 24)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ClockTime(f64);

impl ClockTime {
    pub const DAY_START: ClockTime = ClockTime(0.0);

    pub fn new(hours: f64) -> Result<Self> {
        if !(0.0..24.0).contains(&hours) {
            return Err(Error::InvalidInput(format!(
                "clock time {hours} outside [0, 24)"
            )));
        }
        Ok(ClockTime(hours))
    }

    /// Largest representable clock time, used for trips that run past the day boundary.
    pub fn end_of_day() -> Self {
        ClockTime(24.0_f64.next_down())
    }

    pub fn hours(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ClockTime {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        ClockTime::new(value)
    }
}

impl From<ClockTime> for f64 {
    fn from(value: ClockTime) -> f64 {
        value.0
    }
}

/// One tap-in/tap-out trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub origin: StationId,
    pub destination: StationId,
    pub start: ClockTime,
    pub end: ClockTime,
    /// Set when the alighting time fell past the 4:00 AM boundary and was clipped.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub end_clipped: bool,
}

impl TripRecord {
    pub fn new(
        origin: StationId,
        destination: StationId,
        start: ClockTime,
        end: ClockTime,
    ) -> Result<Self> {
        if origin.is_null() || destination.is_null() {
            return Err(Error::InvalidInput("trip endpoint is the null location".into()));
        }
        if start > end {
            return Err(Error::InvalidInput(format!(
                "trip ends ({}) before it starts ({})",
                end.hours(),
                start.hours()
            )));
        }
        Ok(TripRecord {
            origin,
            destination,
            start,
            end,
            end_clipped: false,
        })
    }

    pub fn travel_time(&self) -> f64 {
        self.end.hours() - self.start.hours()
    }
}

/// Calendar attributes of one service day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayFlags {
    pub rainy: bool,
    pub public_holiday: bool,
}

/// One user-day of trips, ordered by start time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaySequence {
    pub user: String,
    /// Service date (ISO-8601) of the 4:00 AM to 4:00 AM day.
    pub day: String,
    pub weekday: Weekday,
    pub trips: Vec<TripRecord>,
}

impl DaySequence {
    pub fn len(&self) -> usize {
        self.trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trips.is_empty()
    }

    /// Checks the ordering invariant: each trip starts no earlier than the previous ends.
    pub fn validate(&self) -> Result<()> {
        if self.trips.is_empty() {
            return Err(Error::InvalidInput(format!("day {} has no trips", self.day)));
        }
        for (t, pair) in self.trips.windows(2).enumerate() {
            if pair[1].start < pair[0].end {
                return Err(Error::InvalidInput(format!(
                    "day {}: trip {} starts before trip {} ends",
                    self.day,
                    t + 2,
                    t + 1
                )));
            }
        }
        Ok(())
    }
}

/// The hidden activity preceding one trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityRecord {
    pub start_location: StationId,
    pub end_location: StationId,
    pub duration: f64,
    /// End time of the previous trip (0.0 for the first activity of a day).
    pub start_time: ClockTime,
}

/// Context vector; the first entry is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Activities of one user-day with their contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivitySequence {
    pub user: String,
    pub day: String,
    pub activities: Vec<ActivityRecord>,
    pub contexts: Vec<ContextVector>,
}

impl ActivitySequence {
    pub fn len(&self) -> usize {
        self.activities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activities.is_empty()
    }
}

/// Ordered set of stations a user has visited.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "Vec<StationId>", into = "Vec<StationId>")]
pub struct LocationVocab {
    stations: Vec<StationId>,
    index: HashMap<StationId, usize>,
}

impl PartialEq for LocationVocab {
    fn eq(&self, other: &Self) -> bool {
        self.stations == other.stations
    }
}

impl LocationVocab {
    /// Builds a vocabulary in first-seen order, skipping duplicates and the null token.
    pub fn from_stations<I: IntoIterator<Item = StationId>>(stations: I) -> Self {
        let mut vocab = LocationVocab::default();
        for s in stations {
            vocab.insert(s);
        }
        vocab
    }

    pub fn insert(&mut self, station: StationId) -> usize {
        if let Some(&i) = self.index.get(&station) {
            return i;
        }
        let i = self.stations.len();
        self.index.insert(station.clone(), i);
        self.stations.push(station);
        i
    }

    pub fn get(&self, station: &StationId) -> Option<usize> {
        self.index.get(station).copied()
    }

    pub fn index_of(&self, station: &StationId) -> Result<usize> {
        self.get(station)
            .ok_or_else(|| Error::UnknownLocation(station.to_string()))
    }

    pub fn station(&self, i: usize) -> &StationId {
        &self.stations[i]
    }

    pub fn stations(&self) -> &[StationId] {
        &self.stations
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }
}

impl From<Vec<StationId>> for LocationVocab {
    fn from(stations: Vec<StationId>) -> Self {
        LocationVocab::from_stations(stations.into_iter().filter(|s| !s.is_null()))
    }
}

impl From<LocationVocab> for Vec<StationId> {
    fn from(vocab: LocationVocab) -> Self {
        vocab.stations
    }
}

/// All active days of one user: trips, derived activities and the location vocabulary.
///
/// `days[v]` and `sequences[v]` describe the same service day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user: String,
    pub days: Vec<DaySequence>,
    pub sequences: Vec<ActivitySequence>,
    pub vocab: LocationVocab,
}

impl UserHistory {
    pub fn active_days(&self) -> usize {
        self.sequences.len()
    }

    pub fn activity_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    /// Keeps only the days whose positions are listed, preserving order.
    pub fn subset(&self, positions: &[usize]) -> UserHistory {
        UserHistory {
            user: self.user.clone(),
            days: positions.iter().map(|&i| self.days[i].clone()).collect(),
            sequences: positions.iter().map(|&i| self.sequences[i].clone()).collect(),
            vocab: self.vocab.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.days.len() != self.sequences.len() {
            return Err(Error::InvalidInput(format!(
                "user {}: {} days but {} activity sequences",
                self.user,
                self.days.len(),
                self.sequences.len()
            )));
        }
        for seq in &self.sequences {
            if seq.contexts.len() != seq.activities.len() {
                return Err(Error::InvalidInput(format!(
                    "user {} day {}: {} contexts for {} activities",
                    self.user,
                    seq.day,
                    seq.contexts.len(),
                    seq.activities.len()
                )));
            }
            for a in &seq.activities {
                self.vocab.index_of(&a.end_location)?;
                if !a.start_location.is_null() {
                    self.vocab.index_of(&a.start_location)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clock_time_bounds() {
        assert!(ClockTime::new(0.0).is_ok());
        assert!(ClockTime::new(23.99).is_ok());
        assert!(ClockTime::new(24.0).is_err());
        assert!(ClockTime::new(-0.1).is_err());
        assert!(ClockTime::end_of_day().hours() < 24.0);
    }

    #[test]
    fn null_station_is_distinct() {
        let a = StationId::new("NULL").unwrap();
        assert!(!a.is_null());
        assert!(StationId::null().is_null());
        assert!(StationId::new("").is_err());
    }

    #[test]
    fn vocab_keeps_first_seen_order() {
        let ids: Vec<_> = ["B", "A", "B", "C"]
            .iter()
            .map(|s| StationId::new(*s).unwrap())
            .collect();
        let v = LocationVocab::from_stations(ids);
        assert_eq!(v.len(), 3);
        assert_eq!(v.station(0).as_str(), "B");
        assert_eq!(v.get(&StationId::new("C").unwrap()), Some(2));
        assert!(v.index_of(&StationId::new("Z").unwrap()).is_err());
    }

    #[test]
    fn trip_rejects_null_endpoints() {
        let t = TripRecord::new(
            StationId::null(),
            StationId::new("A").unwrap(),
            ClockTime::new(1.0).unwrap(),
            ClockTime::new(2.0).unwrap(),
        );
        assert!(t.is_err());
    }

    fn arb_activity() -> impl Strategy<Value = ActivityRecord> {
        ("[A-Z]{1,4}", "[A-Z]{1,4}", 0.0..30.0f64, 0.0..23.9f64).prop_map(|(p, q, r, y)| {
            ActivityRecord {
                start_location: StationId::new(p).unwrap(),
                end_location: StationId::new(q).unwrap(),
                duration: r,
                start_time: ClockTime::new(y).unwrap(),
            }
        })
    }

    proptest! {
        #[test]
        fn activity_sequence_json_round_trip(
            acts in proptest::collection::vec(arb_activity(), 1..6),
            z in proptest::collection::vec(-5.0..5.0f64, 1..8),
        ) {
            let seq = ActivitySequence {
                user: "u".into(),
                day: "2024-01-01".into(),
                contexts: acts.iter().map(|_| ContextVector(z.clone())).collect(),
                activities: acts,
            };
            let text = serde_json::to_string(&seq).unwrap();
            let back: ActivitySequence = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, seq);
        }
    }
}
