//! Latent activity patterns by forward sampling over a user's observed
//! contexts, and named coefficient listings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iohmm::params::IOHMMParams;
use crate::pipeline::synth::sample_categorical;
use crate::seed::derive_seed;
use crate::types::{UserHistory, NULL_LOCATION};

pub const BIN_WIDTH_HOURS: f64 = 0.5;
pub const N_BINS: usize = 48;

/// One sampled day: labels, end-location indices and durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledDay {
    pub day: usize,
    pub states: Vec<usize>,
    pub locations: Vec<usize>,
    pub durations: Vec<f64>,
}

/// All sampled days of one repetition, in history order.
pub type SampledRun = Vec<SampledDay>;

/// Draws `n` repetitions over every day of `history`, replaying its contexts.
/// Repetition `k` uses its own stream, so results do not depend on `n`.
pub fn gibbs_sample(history: &UserHistory, params: &IOHMMParams, n: usize, seed: u64) -> Result<Vec<SampledRun>> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    params.validate(0.0)?;
    for seq in &history.sequences {
        if let Some(z) = seq.contexts.iter().find(|z| z.len() != params.dim) {
            return Err(Error::DimensionMismatch {
                expected: params.dim,
                got: z.len(),
            });
        }
    }
    let mut runs = Vec::with_capacity(n);
    for k in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gibbs", k as u64));
        let mut run = Vec::with_capacity(history.sequences.len());
        for (v, seq) in history.sequences.iter().enumerate() {
            let t_len = seq.contexts.len();
            let mut day = SampledDay {
                day: v,
                states: Vec::with_capacity(t_len),
                locations: Vec::with_capacity(t_len),
                durations: Vec::with_capacity(t_len),
            };
            for (t, z) in seq.contexts.iter().enumerate() {
                let probs = if t == 0 {
                    params.initial_prob(&z.0)?
                } else {
                    params.transition_prob(day.states[t - 1], &z.0)?
                };
                let a = sample_categorical(&probs, &mut rng);
                let normal = Normal::new(params.duration_mean(a, &z.0), params.sigma[a])
                    .map_err(|e| Error::InvalidInput(e.to_string()))?;
                day.durations.push(normal.sample(&mut rng));
                day.locations.push(sample_categorical(&params.location_prob(a, &z.0)?, &mut rng));
                day.states.push(a);
            }
            run.push(day);
        }
        runs.push(run);
    }
    Ok(runs)
}

/// 0.5 h histogram over `[0, 24)` with the mass falling outside kept apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<f64>,
    pub below: f64,
    pub above: f64,
}

impl Histogram {
    fn counts(values: &[f64], truncate_negative: bool) -> Self {
        let mut h = Histogram {
            bins: vec![0.0; N_BINS],
            below: 0.0,
            above: 0.0,
        };
        for &v in values {
            let v = if truncate_negative { v.max(0.0) } else { v };
            if v < 0.0 {
                h.below += 1.0;
            } else if v >= N_BINS as f64 * BIN_WIDTH_HOURS {
                h.above += 1.0;
            } else {
                h.bins[(v / BIN_WIDTH_HOURS) as usize] += 1.0;
            }
        }
        h.normalized()
    }

    fn normalized(mut self) -> Self {
        let total = self.total();
        if total > 0.0 {
            self.bins.iter_mut().for_each(|b| *b /= total);
            self.below /= total;
            self.above /= total;
        }
        self
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum::<f64>() + self.below + self.above
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePattern {
    pub state: usize,
    pub samples: usize,
    /// No sampled activity carried this label.
    pub empty: bool,
    pub duration: Histogram,
    /// Indexed like the model vocabulary.
    pub end_location: Vec<f64>,
    pub start_time: Histogram,
    /// Indexed like `PatternReport::start_locations`.
    pub start_location: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    pub user: String,
    pub n_samples: usize,
    pub seed: u64,
    pub end_locations: Vec<String>,
    /// Model vocabulary followed by the null marker of first activities.
    pub start_locations: Vec<String>,
    pub states: Vec<StatePattern>,
    /// Row `i` is `P(A_t = j | A_{t-1} = i)`; `None` when `i` never precedes another activity.
    pub transitions: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Clip sampled durations at zero before binning.
    pub truncate_durations: bool,
}

fn normalize(v: &mut [f64]) -> bool {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
        true
    } else {
        false
    }
}

/// Counts conditional distributions over the sampled labels. Start times and
/// start locations are the observed ones paired with each sampled label.
pub fn pattern_report(
    samples: &[SampledRun],
    history: &UserHistory,
    params: &IOHMMParams,
    seed: u64,
    opts: ReportOptions,
) -> Result<PatternReport> {
    let n = params.n_states;
    let l = params.n_locations();
    let mut durations = vec![Vec::new(); n];
    let mut start_times = vec![Vec::new(); n];
    let mut end_counts = vec![vec![0.0; l]; n];
    let mut start_counts = vec![vec![0.0; l + 1]; n];
    let mut trans = vec![vec![0.0; n]; n];
    for run in samples {
        for day in run {
            let seq = history
                .sequences
                .get(day.day)
                .ok_or_else(|| Error::InvalidInput(format!("sample refers to missing day {}", day.day)))?;
            if seq.activities.len() != day.states.len() {
                return Err(Error::InvalidInput(format!("sample length mismatch on day {}", seq.day)));
            }
            for (t, &a) in day.states.iter().enumerate() {
                let act = &seq.activities[t];
                durations[a].push(day.durations[t]);
                start_times[a].push(act.start_time.hours());
                end_counts[a][day.locations[t]] += 1.0;
                let p = params.vocab.get(&act.start_location).unwrap_or(l);
                start_counts[a][p] += 1.0;
                if t > 0 {
                    trans[day.states[t - 1]][a] += 1.0;
                }
            }
        }
    }
    let states = (0..n)
        .map(|i| {
            let mut end_location = end_counts[i].clone();
            let mut start_location = start_counts[i].clone();
            normalize(&mut end_location);
            normalize(&mut start_location);
            StatePattern {
                state: i,
                samples: durations[i].len(),
                empty: durations[i].is_empty(),
                duration: Histogram::counts(&durations[i], opts.truncate_durations),
                end_location,
                start_time: Histogram::counts(&start_times[i], false),
                start_location,
            }
        })
        .collect();
    let transitions = trans
        .into_iter()
        .map(|mut row| normalize(&mut row).then_some(row))
        .collect();
    let end_locations: Vec<String> = params.vocab.stations().iter().map(|s| s.to_string()).collect();
    let mut start_locations = end_locations.clone();
    start_locations.push(NULL_LOCATION.to_string());
    Ok(PatternReport {
        user: history.user.clone(),
        n_samples: samples.len(),
        seed,
        end_locations,
        start_locations,
        states,
        transitions,
    })
}

impl PatternReport {
    /// Long-format CSV: `state,distribution,key,probability`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,distribution,key,probability\n");
        let hist_rows = |out: &mut String, state: usize, name: &str, h: &Histogram| {
            out.push_str(&format!("{state},{name},below,{}\n", h.below));
            for (b, p) in h.bins.iter().enumerate() {
                out.push_str(&format!("{state},{name},{:.1},{p}\n", b as f64 * BIN_WIDTH_HOURS));
            }
            out.push_str(&format!("{state},{name},above,{}\n", h.above));
        };
        for s in &self.states {
            if s.empty {
                continue;
            }
            hist_rows(&mut out, s.state, "duration", &s.duration);
            hist_rows(&mut out, s.state, "start_time", &s.start_time);
            for (k, p) in self.end_locations.iter().zip(&s.end_location) {
                out.push_str(&format!("{},end_location,{k},{p}\n", s.state));
            }
            for (k, p) in self.start_locations.iter().zip(&s.start_location) {
                out.push_str(&format!("{},start_location,{k},{p}\n", s.state));
            }
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if let Some(row) = row {
                for (j, p) in row.iter().enumerate() {
                    out.push_str(&format!("{i},transition,{j},{p}\n"));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub block: String,
    pub state: usize,
    /// Destination state or location for logit blocks.
    pub target: Option<String>,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub features: Vec<String>,
    pub rows: Vec<CoefficientRow>,
    pub sigma: Vec<f64>,
}

/// Duration coefficients per state, optionally followed by every logit block.
pub fn coefficient_table(params: &IOHMMParams, all_blocks: bool) -> CoefficientTable {
    let n = params.n_states;
    let mut rows: Vec<CoefficientRow> = (0..n)
        .map(|i| CoefficientRow {
            block: "duration".into(),
            state: i,
            target: None,
            coefficients: params.theta_emr_row(i).to_vec(),
        })
        .collect();
    if all_blocks {
        for j in 0..n {
            rows.push(CoefficientRow {
                block: "initial".into(),
                state: j,
                target: None,
                coefficients: params.theta_in_row(j).to_vec(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                rows.push(CoefficientRow {
                    block: "transition".into(),
                    state: i,
                    target: Some(j.to_string()),
                    coefficients: params.theta_tr_row(i, j).to_vec(),
                });
            }
        }
        for i in 0..n {
            for (l, s) in params.vocab.stations().iter().enumerate() {
                rows.push(CoefficientRow {
                    block: "location".into(),
                    state: i,
                    target: Some(s.to_string()),
                    coefficients: params.theta_emq_row(i, l).to_vec(),
                });
            }
        }
    }
    CoefficientTable {
        features: params.schema.names(),
        rows,
        sigma: params.sigma.clone(),
    }
}

impl CoefficientTable {
    /// Coefficient of `feature` for `state` in `block` (first matching row).
    pub fn get(&self, block: &str, state: usize, feature: &str) -> Option<f64> {
        let f = self.features.iter().position(|n| n == feature)?;
        self.rows
            .iter()
            .find(|r| r.block == block && r.state == state)
            .map(|r| r.coefficients[f])
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("block,state,target,{}\n", self.features.join(","));
        for r in &self.rows {
            let values: Vec<String> = r.coefficients.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.block,
                r.state,
                r.target.as_deref().unwrap_or(""),
                values.join(",")
            ));
        }
        out
    }

    /// States as rows and the duration coefficients as columns.
    pub fn duration_text(&self) -> String {
        let mut out = format!("{:<8}", "state");
        for f in &self.features {
            out.push_str(&format!(" {f:>14}"));
        }
        out.push_str(&format!(" {:>10}\n", "sigma"));
        for r in self.rows.iter().filter(|r| r.block == "duration") {
            out.push_str(&format!("{:<8}", r.state));
            for v in &r.coefficients {
                out.push_str(&format!(" {v:>14.3}"));
            }
            out.push_str(&format!(" {:>10.3}\n", self.sigma[r.state]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::context::FeatureSchema;
    use crate::types::{ActivityRecord, ActivitySequence, ClockTime, ContextVector, LocationVocab, StationId};

    fn history(days: usize, len: usize) -> UserHistory {
        let a = StationId::new("A").unwrap();
        let sequences = (0..days)
            .map(|v| ActivitySequence {
                user: "u".into(),
                day: format!("d{v}"),
                activities: (0..len)
                    .map(|t| ActivityRecord {
                        start_location: if t == 0 { StationId::null() } else { a.clone() },
                        end_location: a.clone(),
                        duration: 1.0,
                        start_time: ClockTime::new(t as f64).unwrap(),
                    })
                    .collect(),
                contexts: vec![ContextVector(vec![1.0]); len],
            })
            .collect();
        UserHistory {
            user: "u".into(),
            days: Vec::new(),
            sequences,
            vocab: LocationVocab::from_stations([a]),
        }
    }

    fn params(n: usize, locs: &[&str]) -> IOHMMParams {
        let vocab = LocationVocab::from_stations(locs.iter().map(|s| StationId::new(*s).unwrap()));
        IOHMMParams::zeros(n, FeatureSchema::intercept_only(), vocab).unwrap()
    }

    #[test]
    fn zero_samples_is_an_error() {
        assert!(gibbs_sample(&history(1, 1), &params(1, &["A"]), 0, 0).is_err());
    }

    #[test]
    fn deterministic_model_repeats_labels() {
        let mut p = params(2, &["A"]);
        p.theta_in_row_mut(1)[0] = 60.0;
        p.theta_tr_row_mut(1, 1)[0] = -60.0;
        p.theta_tr_row_mut(0, 1)[0] = 60.0;
        p.sigma = vec![0.1, 0.1];
        let runs = gibbs_sample(&history(3, 4), &p, 20, 5).unwrap();
        for run in &runs {
            for day in run {
                assert_eq!(day.states, vec![1, 0, 1, 0]);
            }
        }
    }

    #[test]
    fn reproducible_and_prefix_stable() {
        let p = params(2, &["A", "B"]);
        let h = history(2, 3);
        let a = gibbs_sample(&h, &p, 10, 9).unwrap();
        let b = gibbs_sample(&h, &p, 5, 9).unwrap();
        assert_eq!(&a[..5], &b[..]);
    }

    #[test]
    fn one_state_transition_matrix() {
        let p = params(1, &["A"]);
        let h = history(2, 3);
        let runs = gibbs_sample(&h, &p, 4, 0).unwrap();
        let r = pattern_report(&runs, &h, &p, 0, ReportOptions::default()).unwrap();
        assert_eq!(r.transitions, vec![Some(vec![1.0])]);
        assert!((r.states[0].duration.total() - 1.0).abs() < 1e-12);
        assert_eq!(r.states[0].start_location, vec![2.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn state_always_emitting_one_location() {
        let mut p = params(2, &["CSW", "B"]);
        p.theta_emq_row_mut(1, 1)[0] = -80.0;
        let h = history(3, 2);
        let runs = gibbs_sample(&h, &p, 50, 1).unwrap();
        let r = pattern_report(&runs, &h, &p, 1, ReportOptions::default()).unwrap();
        assert_eq!(r.states[1].end_location[0], 1.0);
    }

    #[test]
    fn empty_states_are_flagged() {
        let mut p = params(2, &["A"]);
        p.theta_in_row_mut(1)[0] = -80.0;
        p.theta_tr_row_mut(0, 1)[0] = -80.0;
        let h = history(2, 2);
        let runs = gibbs_sample(&h, &p, 5, 1).unwrap();
        let r = pattern_report(&runs, &h, &p, 1, ReportOptions::default()).unwrap();
        assert!(r.states[1].empty);
        assert_eq!(r.transitions[1], None);
    }

    #[test]
    fn zero_parameters_give_zero_table() {
        let t = coefficient_table(&params(3, &["A"]), true);
        assert!(t.rows.iter().all(|r| r.coefficients.iter().all(|v| *v == 0.0)));
        assert_eq!(t.rows.iter().filter(|r| r.block == "duration").count(), 3);
    }

    #[test]
    fn table_shape_with_calendar_features() {
        let vocab = LocationVocab::from_stations([StationId::new("A").unwrap()]);
        let mut p = IOHMMParams::zeros(3, FeatureSchema::calendar_schema(), vocab).unwrap();
        p.theta_emr_row_mut(1)[1] = 0.336;
        let t = coefficient_table(&p, false);
        let named = ["rainy", "monday", "sunday", "public_holiday"];
        let cells: Vec<f64> = (0..3)
            .flat_map(|i| named.iter().map(move |f| (i, *f)))
            .map(|(i, f)| t.get("duration", i, f).unwrap())
            .collect();
        assert_eq!(cells.len(), 12);
        assert_eq!(t.get("duration", 1, "rainy"), Some(0.336));
        assert!(t.duration_text().contains("0.336"));
    }
}
