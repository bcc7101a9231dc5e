//! Raw tap records to day sequences and hidden activities.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ActivityRecord, ClockTime, DayFlags, DaySequence, StationId, TripRecord};

/// Hour of the wall clock at which a service day starts.
pub const DAY_START_HOUR: u32 = 4;

/// One tap-in/tap-out transaction pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTapRecord {
    pub user_id: String,
    pub board_station: String,
    pub alight_station: String,
    pub board_time: NaiveDateTime,
    pub alight_time: NaiveDateTime,
}

/// Days produced from one user's taps plus the records that were dropped.
#[derive(Debug, Clone, Default)]
pub struct Segmentation {
    pub days: Vec<DaySequence>,
    pub rejected: Vec<String>,
    pub clipped: usize,
}

/// Service date of a timestamp: the calendar date of `ts - 4h`.
pub fn service_date(ts: NaiveDateTime) -> NaiveDate {
    (ts - Duration::hours(DAY_START_HOUR as i64)).date()
}

fn day_start(date: NaiveDate) -> NaiveDateTime {
    date.and_time(NaiveTime::from_hms_opt(DAY_START_HOUR, 0, 0).expect("valid time"))
}

fn hours_between(from: NaiveDateTime, to: NaiveDateTime) -> f64 {
    (to - from).num_milliseconds() as f64 / 3_600_000.0
}

/// Sorts one user's taps and cuts them into 4:00 AM to 4:00 AM service days.
///
/// A trip belongs to the day of its boarding time. Trips whose alighting time
/// passes the next 4:00 AM keep the boarding day and get `end_clipped` set. A
/// record that boards before the previous accepted trip alights is rejected.
pub fn segment_days(taps: &[RawTapRecord], user: &str) -> Segmentation {
    let mut sorted: Vec<&RawTapRecord> = taps.iter().collect();
    sorted.sort_by(|a, b| {
        a.board_time
            .cmp(&b.board_time)
            .then(a.alight_time.cmp(&b.alight_time))
    });

    let mut out = Segmentation::default();
    let mut last_alight: Option<NaiveDateTime> = None;
    let mut current: Option<(NaiveDate, Vec<TripRecord>)> = None;

    for tap in sorted {
        if tap.user_id != user {
            out.rejected.push(format!(
                "record for user {} passed to segmentation of {}",
                tap.user_id, user
            ));
            continue;
        }
        if tap.board_time >= tap.alight_time {
            out.rejected.push(format!(
                "user {}: board time {} not before alight time {}",
                user, tap.board_time, tap.alight_time
            ));
            continue;
        }
        if let Some(prev) = last_alight {
            if tap.board_time < prev {
                out.rejected.push(format!(
                    "user {}: trip boarding at {} overlaps previous trip alighting at {}",
                    user, tap.board_time, prev
                ));
                continue;
            }
        }
        let (origin, destination) = match (
            StationId::new(tap.board_station.clone()),
            StationId::new(tap.alight_station.clone()),
        ) {
            (Ok(o), Ok(d)) if !o.is_null() && !d.is_null() => (o, d),
            _ => {
                out.rejected.push(format!(
                    "user {}: invalid station in trip boarding at {}",
                    user, tap.board_time
                ));
                continue;
            }
        };

        let date = service_date(tap.board_time);
        let start_of_day = day_start(date);
        let start = ClockTime::new(hours_between(start_of_day, tap.board_time))
            .expect("boarding time lies inside its service day");
        let end_hours = hours_between(start_of_day, tap.alight_time);
        let (end, clipped) = match ClockTime::new(end_hours) {
            Ok(t) => (t, false),
            Err(_) => (ClockTime::end_of_day(), true),
        };
        let mut trip = TripRecord::new(origin, destination, start, end)
            .expect("validated endpoints and ordering");
        trip.end_clipped = clipped;
        if clipped {
            out.clipped += 1;
        }
        last_alight = Some(tap.alight_time);

        match &mut current {
            Some((d, trips)) if *d == date => trips.push(trip),
            _ => {
                if let Some((d, trips)) = current.take() {
                    out.days.push(make_day(user, d, trips));
                }
                current = Some((date, vec![trip]));
            }
        }
    }
    if let Some((d, trips)) = current.take() {
        out.days.push(make_day(user, d, trips));
    }
    out
}

fn make_day(user: &str, date: NaiveDate, trips: Vec<TripRecord>) -> DaySequence {
    DaySequence {
        user: user.to_string(),
        day: date.format("%Y-%m-%d").to_string(),
        weekday: date.weekday(),
        trips,
    }
}

/// Hidden activities of a day: activity `t` runs from the end of trip `t-1`
/// (4:00 AM for the first) to the start of trip `t`.
pub fn derive_activities(day: &DaySequence) -> Result<Vec<ActivityRecord>> {
    if day.trips.is_empty() {
        return Err(Error::InvalidInput(format!("day {} has no trips", day.day)));
    }
    let mut prev_dest = StationId::null();
    let mut prev_end = ClockTime::DAY_START;
    let mut out = Vec::with_capacity(day.trips.len());
    for (t, trip) in day.trips.iter().enumerate() {
        let duration = trip.start.hours() - prev_end.hours();
        if duration < 0.0 {
            return Err(Error::NegativeDuration {
                day: day.day.clone(),
                index: t + 1,
                duration,
            });
        }
        out.push(ActivityRecord {
            start_location: prev_dest,
            end_location: trip.origin.clone(),
            duration,
            start_time: prev_end,
        });
        prev_dest = trip.destination.clone();
        prev_end = trip.end;
    }
    Ok(out)
}

/// Per-date rainy and public-holiday flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalendarData {
    days: BTreeMap<String, DayFlags>,
}

impl CalendarData {
    pub fn insert(&mut self, day: impl Into<String>, flags: DayFlags) {
        self.days.insert(day.into(), flags);
    }

    /// Flags for a day; missing dates read as "no rain, no holiday".
    pub fn flags(&self, day: &str) -> DayFlags {
        self.days.get(day).copied().unwrap_or(DayFlags {
            rainy: false,
            public_holiday: false,
        })
    }

    pub fn contains(&self, day: &str) -> bool {
        self.days.contains_key(day)
    }

    /// Restriction to the given days, used to embed the relevant slice in a corpus file.
    pub fn restricted_to<'a, I: IntoIterator<Item = &'a str>>(&self, days: I) -> CalendarData {
        let mut out = CalendarData::default();
        for d in days {
            if let Some(f) = self.days.get(d) {
                out.days.insert(d.to_string(), *f);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }
}

const DATETIME_FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

pub fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    DATETIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

#[derive(Debug, Deserialize)]
struct TripRow {
    user_id: String,
    board_station: String,
    alight_station: String,
    board_time: String,
    alight_time: String,
}

/// Parsed trip CSV plus diagnostics for skipped rows.
#[derive(Debug, Default)]
pub struct TripCsv {
    pub records: Vec<RawTapRecord>,
    pub skipped: Vec<String>,
}

/// Reads `user_id,board_station,alight_station,board_time,alight_time`.
pub fn read_trips_csv<R: Read>(reader: R) -> Result<TripCsv> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in ["user_id", "board_station", "alight_station", "board_time", "alight_time"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::InvalidInput(format!("trip CSV lacks column {col}")));
        }
    }
    let mut out = TripCsv::default();
    for (line, row) in rdr.deserialize::<TripRow>().enumerate() {
        let line = line + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.skipped.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let (Some(board), Some(alight)) = (parse_datetime(&row.board_time), parse_datetime(&row.alight_time)) else {
            out.skipped.push(format!("line {line}: unparseable timestamp"));
            continue;
        };
        if row.user_id.is_empty() || row.board_station.is_empty() || row.alight_station.is_empty() {
            out.skipped.push(format!("line {line}: empty field"));
            continue;
        }
        if board >= alight {
            out.skipped.push(format!("line {line}: board time not before alight time"));
            continue;
        }
        out.records.push(RawTapRecord {
            user_id: row.user_id,
            board_station: row.board_station,
            alight_station: row.alight_station,
            board_time: board,
            alight_time: alight,
        });
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct CalendarRow {
    date: String,
    rainy: u8,
    public_holiday: u8,
}

/// Reads `date,rainy,public_holiday` with 0/1 flags.
pub fn read_calendar_csv<R: Read>(reader: R) -> Result<CalendarData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut cal = CalendarData::default();
    for (line, row) in rdr.deserialize::<CalendarRow>().enumerate() {
        let row = row?;
        if NaiveDate::parse_from_str(&row.date, "%Y-%m-%d").is_err() || row.rainy > 1 || row.public_holiday > 1 {
            return Err(Error::InvalidInput(format!(
                "calendar line {}: bad row {:?}",
                line + 2,
                row
            )));
        }
        cal.insert(
            row.date,
            DayFlags {
                rainy: row.rainy == 1,
                public_holiday: row.public_holiday == 1,
            },
        );
    }
    Ok(cal)
}

/// Hours since 4:00 AM of a wall-clock time, for tests and fixtures.
pub fn clock_of(ts: NaiveDateTime) -> f64 {
    let h = (ts.hour() + 24 - DAY_START_HOUR) % 24;
    h as f64 + ts.minute() as f64 / 60.0 + ts.second() as f64 / 3600.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dt(s: &str) -> NaiveDateTime {
        parse_datetime(s).unwrap()
    }

    fn tap(board: &str, alight: &str, o: &str, d: &str) -> RawTapRecord {
        RawTapRecord {
            user_id: "u1".into(),
            board_station: o.into(),
            alight_station: d.into(),
            board_time: dt(board),
            alight_time: dt(alight),
        }
    }

    #[test]
    fn empty_taps_give_no_days() {
        let seg = segment_days(&[], "u1");
        assert!(seg.days.is_empty());
        assert!(seg.rejected.is_empty());
    }

    #[test]
    fn boundary_splits_days() {
        let taps = vec![
            tap("2024-03-05 03:50", "2024-03-05 03:55", "A", "B"),
            tap("2024-03-05 04:10", "2024-03-05 04:40", "B", "C"),
        ];
        let seg = segment_days(&taps, "u1");
        assert_eq!(seg.days.len(), 2);
        assert_eq!(seg.days[0].day, "2024-03-04");
        assert_eq!(seg.days[1].day, "2024-03-05");
        assert!((seg.days[0].trips[0].start.hours() - (23.0 + 50.0 / 60.0)).abs() < 1e-12);
        assert!((seg.days[1].trips[0].start.hours() - 10.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn overlapping_trip_is_rejected() {
        let taps = vec![
            tap("2024-03-05 08:00", "2024-03-05 09:00", "A", "B"),
            tap("2024-03-05 08:30", "2024-03-05 08:50", "B", "C"),
        ];
        let seg = segment_days(&taps, "u1");
        assert_eq!(seg.days.len(), 1);
        assert_eq!(seg.days[0].trips.len(), 1);
        assert_eq!(seg.rejected.len(), 1);
    }

    #[test]
    fn overnight_trip_is_clipped_and_kept() {
        let taps = vec![tap("2024-03-06 03:40", "2024-03-06 04:20", "A", "B")];
        let seg = segment_days(&taps, "u1");
        assert_eq!(seg.clipped, 1);
        let trip = &seg.days[0].trips[0];
        assert!(trip.end_clipped);
        assert!(trip.end.hours() < 24.0);
        assert_eq!(seg.days[0].day, "2024-03-05");
    }

    #[test]
    fn two_trips_per_day_for_150_days() {
        let base = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap();
        let mut taps = Vec::new();
        for d in 0..150 {
            let date = base + Duration::days(d);
            let at = |h: u32, m: u32| date.and_hms_opt(h, m, 0).unwrap();
            taps.push(RawTapRecord {
                user_id: "u1".into(),
                board_station: "H".into(),
                alight_station: "W".into(),
                board_time: at(8, 0),
                alight_time: at(8, 45),
            });
            taps.push(RawTapRecord {
                user_id: "u1".into(),
                board_station: "W".into(),
                alight_station: "H".into(),
                board_time: at(18, 0),
                alight_time: at(18, 40),
            });
        }
        // independent grouping: count distinct dates
        let mut dates: Vec<_> = taps.iter().map(|t| t.board_time.date()).collect();
        dates.dedup();
        let seg = segment_days(&taps, "u1");
        assert_eq!(seg.days.len(), dates.len());
        assert_eq!(seg.days.len(), 150);
        assert!(seg.days.iter().all(|d| d.trips.len() == 2));
    }

    #[test]
    fn fig2_two_trip_day() {
        let taps = vec![
            tap("2024-03-05 08:00", "2024-03-05 08:30", "CSW", "MOK"),
            tap("2024-03-05 18:00", "2024-03-05 18:30", "MOK", "CSW"),
        ];
        let day = &segment_days(&taps, "u1").days[0];
        let acts = derive_activities(day).unwrap();
        assert_eq!(acts.len(), 2);
        assert!(acts[0].start_location.is_null());
        assert_eq!(acts[0].end_location.as_str(), "CSW");
        assert_eq!(acts[0].duration, 4.0);
        assert_eq!(acts[0].start_time.hours(), 0.0);
        assert_eq!(acts[1].start_location.as_str(), "MOK");
        assert_eq!(acts[1].end_location.as_str(), "MOK");
        assert!((acts[1].duration - 9.5).abs() < 1e-12);
        assert!((acts[1].start_time.hours() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn trip_at_day_start_has_zero_duration() {
        let taps = vec![tap("2024-03-05 04:00", "2024-03-05 04:30", "A", "B")];
        let day = &segment_days(&taps, "u1").days[0];
        assert_eq!(derive_activities(day).unwrap()[0].duration, 0.0);
    }

    #[test]
    fn three_trip_day_by_hand() {
        let taps = vec![
            tap("2024-03-05 07:15", "2024-03-05 07:45", "A", "B"),
            tap("2024-03-05 12:00", "2024-03-05 12:20", "C", "D"),
            tap("2024-03-05 19:30", "2024-03-05 20:00", "D", "A"),
        ];
        let day = &segment_days(&taps, "u1").days[0];
        let acts = derive_activities(day).unwrap();
        let expect = [
            (None, "A", 3.25, 0.0),
            (Some("B"), "C", 12.0 - 7.75, 3.75),
            (Some("D"), "D", 19.5 - 12.0 - 20.0 / 60.0, 8.0 + 20.0 / 60.0),
        ];
        for (a, (p, q, r, y)) in acts.iter().zip(expect) {
            match p {
                None => assert!(a.start_location.is_null()),
                Some(p) => assert_eq!(a.start_location.as_str(), p),
            }
            assert_eq!(a.end_location.as_str(), q);
            assert!((a.duration - r).abs() < 1e-12);
            assert!((a.start_time.hours() - y).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_duration_is_an_error() {
        let a = StationId::new("A").unwrap();
        let day = DaySequence {
            user: "u".into(),
            day: "d".into(),
            weekday: chrono::Weekday::Mon,
            trips: vec![
                TripRecord::new(a.clone(), a.clone(), ClockTime::new(5.0).unwrap(), ClockTime::new(6.0).unwrap()).unwrap(),
                TripRecord::new(a.clone(), a.clone(), ClockTime::new(5.5).unwrap(), ClockTime::new(7.0).unwrap()).unwrap(),
            ],
        };
        assert!(matches!(derive_activities(&day), Err(Error::NegativeDuration { index: 2, .. })));
    }

    #[test]
    fn csv_reading_skips_malformed_rows() {
        let text = "user_id,board_station,alight_station,board_time,alight_time\n\
                    u1,A,B,2024-03-05T08:00:00,2024-03-05T08:30:00\n\
                    u1,A,B,not-a-date,2024-03-05T08:30:00\n\
                    u2,C,D,2024-03-05 09:00,2024-03-05 09:10\n";
        let parsed = read_trips_csv(text.as_bytes()).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert_eq!(parsed.skipped.len(), 1);

        let cal = read_calendar_csv("date,rainy,public_holiday\n2024-03-05,1,0\n".as_bytes()).unwrap();
        assert!(cal.flags("2024-03-05").rainy);
        assert!(!cal.flags("2024-03-06").rainy);
    }

    #[test]
    fn clock_of_wraps_at_four() {
        assert_eq!(clock_of(dt("2024-01-01 04:00")), 0.0);
        assert_eq!(clock_of(dt("2024-01-01 03:00")), 23.0);
    }
}
