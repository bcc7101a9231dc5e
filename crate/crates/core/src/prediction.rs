//! Next-activity prediction from the observed prefix of a day.
//!
//! The state posterior for step `t+1` is a forward pass over the first `t`
//! activities followed by one transition at `z_{t+1}`. By default the duration
//! posterior sees only past durations and the location posterior only past
//! locations; `full_information` feeds both modalities to both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iohmm::inference::{ForwardPass, Modality, SequenceTerms};
use crate::iohmm::params::{dot, IOHMMParams};
use crate::types::{ActivitySequence, StationId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    pub full_information: bool,
    pub top_k: usize,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            full_information: false,
            top_k: 10,
        }
    }
}

/// A day prepared for prediction. Stations outside the model vocabulary are
/// kept as `None`; they carry no location evidence and can never be predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionInput {
    pub dim: usize,
    pub contexts: Vec<f64>,
    pub locations: Vec<Option<usize>>,
    pub durations: Vec<f64>,
}

impl PredictionInput {
    pub fn new(seq: &ActivitySequence, params: &IOHMMParams) -> Result<Self> {
        if seq.contexts.len() != seq.activities.len() {
            return Err(Error::InvalidInput(format!("day {}: contexts and activities differ in length", seq.day)));
        }
        let mut contexts = Vec::with_capacity(seq.len() * params.dim);
        for z in &seq.contexts {
            if z.len() != params.dim {
                return Err(Error::DimensionMismatch {
                    expected: params.dim,
                    got: z.len(),
                });
            }
            contexts.extend_from_slice(z.as_slice());
        }
        Ok(PredictionInput {
            dim: params.dim,
            contexts,
            locations: seq.activities.iter().map(|a| params.vocab.get(&a.end_location)).collect(),
            durations: seq.activities.iter().map(|a| a.duration).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    pub fn z(&self, t: usize) -> &[f64] {
        &self.contexts[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    /// Mixture mean in hours; may be negative.
    pub duration: f64,
    /// `duration` clamped at zero, for display only.
    pub duration_clamped: f64,
    pub duration_mixture: Vec<MixtureComponent>,
    /// Probability of every vocabulary location.
    pub location_distribution: Vec<f64>,
    pub predicted_location: StationId,
    pub top_k: Vec<(StationId, f64)>,
}

fn prefix_terms(
    params: &IOHMMParams,
    input: &PredictionInput,
    t: usize,
    modality: Modality,
) -> Result<SequenceTerms> {
    let n = params.n_states;
    let initial = params.initial_prob(input.z(0))?;
    let mut transitions = Vec::with_capacity(t.saturating_sub(1));
    for s in 1..t {
        let mut m = Vec::with_capacity(n * n);
        for i in 0..n {
            m.extend(params.transition_prob(i, input.z(s))?);
        }
        transitions.push(m);
    }
    let mut log_emission = Vec::with_capacity(t * n);
    for s in 0..t {
        let z = input.z(s);
        for i in 0..n {
            let dur = params.duration_logdensity(input.durations[s], i, z);
            let loc = match input.locations[s] {
                Some(l) => params.location_logprob(l, i, z),
                None => 0.0,
            };
            log_emission.push(match modality {
                Modality::Joint => dur + loc,
                Modality::DurationOnly => dur,
                Modality::LocationOnly => loc,
            });
        }
    }
    Ok(SequenceTerms {
        n_states: n,
        initial,
        transitions,
        log_emission,
    })
}

/// `P(A_{t+1} | prefix of length t)` under `modality`. `t = 0` gives the
/// initial distribution at `z_1`.
pub fn next_state_posterior(
    params: &IOHMMParams,
    input: &PredictionInput,
    t: usize,
    modality: Modality,
) -> Result<Vec<f64>> {
    if t >= input.len() {
        return Err(Error::InvalidInput(format!(
            "prefix length {t} leaves no activity to predict in a day of {}",
            input.len()
        )));
    }
    if input.dim != params.dim {
        return Err(Error::DimensionMismatch {
            expected: params.dim,
            got: input.dim,
        });
    }
    if t == 0 {
        return params.initial_prob(input.z(0));
    }
    let n = params.n_states;
    let forward = ForwardPass::run(&prefix_terms(params, input, t, modality)?)?;
    let filtered = forward.filtered(t - 1, n);
    let z = input.z(t);
    let mut post = vec![0.0; n];
    for (i, a) in filtered.iter().enumerate() {
        for (j, p) in params.transition_prob(i, z)?.into_iter().enumerate() {
            post[j] += a * p;
        }
    }
    let total: f64 = post.iter().sum();
    post.iter_mut().for_each(|p| *p /= total);
    Ok(post)
}

/// Gaussian mixture for the duration at context `z` given state weights.
pub fn duration_mixture(params: &IOHMMParams, weights: &[f64], z: &[f64]) -> Vec<MixtureComponent> {
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| MixtureComponent {
            weight: *w,
            mean: dot(params.theta_emr_row(i), z),
            sigma: params.sigma[i],
        })
        .collect()
}

pub fn mixture_mean(mixture: &[MixtureComponent]) -> f64 {
    mixture.iter().map(|c| c.weight * c.mean).sum()
}

/// Location pmf at context `z` given state weights.
pub fn location_mixture(params: &IOHMMParams, weights: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let mut dist = vec![0.0; params.n_locations()];
    for (i, w) in weights.iter().enumerate() {
        for (d, p) in dist.iter_mut().zip(params.location_prob(i, z)?) {
            *d += w * p;
        }
    }
    Ok(dist)
}

/// Indices sorted by decreasing probability; ties keep vocabulary order.
pub fn ranking(dist: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order
}

/// 1-based rank of location `truth` under the ranking of `dist`.
pub fn rank_of(dist: &[f64], truth: usize) -> usize {
    let p = dist[truth];
    1 + dist
        .iter()
        .enumerate()
        .filter(|(j, q)| **q > p || (**q == p && *j < truth))
        .count()
}

pub fn predict_duration(
    params: &IOHMMParams,
    input: &PredictionInput,
    t: usize,
    full_information: bool,
) -> Result<Vec<MixtureComponent>> {
    let modality = if full_information { Modality::Joint } else { Modality::DurationOnly };
    let weights = next_state_posterior(params, input, t, modality)?;
    Ok(duration_mixture(params, &weights, input.z(t)))
}

pub fn predict_location(
    params: &IOHMMParams,
    input: &PredictionInput,
    t: usize,
    full_information: bool,
) -> Result<Vec<f64>> {
    let modality = if full_information { Modality::Joint } else { Modality::LocationOnly };
    let weights = next_state_posterior(params, input, t, modality)?;
    location_mixture(params, &weights, input.z(t))
}

/// Prediction for the 0-based step `t` from the first `t` activities.
pub fn predict_step(
    params: &IOHMMParams,
    input: &PredictionInput,
    t: usize,
    cfg: &PredictionConfig,
) -> Result<PredictionResult> {
    let mixture = predict_duration(params, input, t, cfg.full_information)?;
    let dist = predict_location(params, input, t, cfg.full_information)?;
    let duration = mixture_mean(&mixture);
    let order = ranking(&dist);
    let k = cfg.top_k.min(dist.len());
    Ok(PredictionResult {
        duration,
        duration_clamped: duration.max(0.0),
        duration_mixture: mixture,
        predicted_location: params.vocab.station(order[0]).clone(),
        top_k: order[..k]
            .iter()
            .map(|&l| (params.vocab.station(l).clone(), dist[l]))
            .collect(),
        location_distribution: dist,
    })
}

/// Predictions for every activity of a day, each from its own prefix.
pub fn predict_sequence(
    params: &IOHMMParams,
    seq: &ActivitySequence,
    cfg: &PredictionConfig,
) -> Result<Vec<PredictionResult>> {
    let input = PredictionInput::new(seq, params)?;
    (0..input.len()).map(|t| predict_step(params, &input, t, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::context::FeatureSchema;
    use crate::types::{ActivityRecord, ClockTime, ContextVector, LocationVocab};

    fn vocab(n: usize) -> LocationVocab {
        LocationVocab::from_stations((0..n).map(|i| StationId::new(format!("L{i}")).unwrap()))
    }

    fn sequence(locs: &[usize], durs: &[f64], z: &[Vec<f64>]) -> ActivitySequence {
        ActivitySequence {
            user: "u".into(),
            day: "d".into(),
            activities: locs
                .iter()
                .zip(durs)
                .map(|(&l, &r)| ActivityRecord {
                    start_location: StationId::null(),
                    end_location: StationId::new(format!("L{l}")).unwrap(),
                    duration: r,
                    start_time: ClockTime::new(0.0).unwrap(),
                })
                .collect(),
            contexts: z.iter().cloned().map(ContextVector).collect(),
        }
    }

    #[test]
    fn empty_prefix_is_initial_distribution() {
        let mut p = IOHMMParams::zeros(2, FeatureSchema::intercept_only(), vocab(2)).unwrap();
        p.theta_in[1] = 3f64.ln();
        let seq = sequence(&[0, 1], &[1.0, 2.0], &[vec![1.0], vec![1.0]]);
        let input = PredictionInput::new(&seq, &p).unwrap();
        let post = next_state_posterior(&p, &input, 0, Modality::DurationOnly).unwrap();
        assert!((post[0] - 0.25).abs() < 1e-15 && (post[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_state_predicts_its_mean() {
        let mut p = IOHMMParams::zeros(1, FeatureSchema::intercept_only(), vocab(3)).unwrap();
        p.theta_emr[0] = 2.5;
        let seq = sequence(&[0, 1, 2], &[1.0, 2.0, 3.0], &vec![vec![1.0]; 3]);
        for r in predict_sequence(&p, &seq, &PredictionConfig::default()).unwrap() {
            assert_eq!(r.duration_mixture[0].weight, 1.0);
            assert!((r.duration - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn mixture_mean_of_two_components() {
        let m = [
            MixtureComponent { weight: 0.5, mean: 2.0, sigma: 1.0 },
            MixtureComponent { weight: 0.5, mean: 4.0, sigma: 1.0 },
        ];
        assert_eq!(mixture_mean(&m), 3.0);
    }

    #[test]
    fn tie_goes_to_first_vocab_entry() {
        let mut p = IOHMMParams::zeros(2, FeatureSchema::intercept_only(), vocab(2)).unwrap();
        p.theta_emq_row_mut(0, 1)[0] = -200.0;
        p.theta_emq_row_mut(1, 1)[0] = 200.0;
        let dist = location_mixture(&p, &[0.5, 0.5], &[1.0]).unwrap();
        assert!((dist[0] - 0.5).abs() < 1e-12 && (dist[1] - 0.5).abs() < 1e-12);
        let exact = [0.5, 0.5];
        assert_eq!(ranking(&exact), vec![0, 1]);
        assert_eq!(rank_of(&exact, 0), 1);
        assert_eq!(rank_of(&exact, 1), 2);
    }

    #[test]
    fn unknown_station_is_tolerated() {
        let p = IOHMMParams::zeros(2, FeatureSchema::intercept_only(), vocab(2)).unwrap();
        let mut seq = sequence(&[0, 1], &[1.0, 2.0], &vec![vec![1.0]; 2]);
        seq.activities[0].end_location = StationId::new("elsewhere").unwrap();
        let input = PredictionInput::new(&seq, &p).unwrap();
        assert_eq!(input.locations[0], None);
        assert!(predict_step(&p, &input, 1, &PredictionConfig::default()).is_ok());
    }

    #[test]
    fn clamped_duration_only_affects_display() {
        let mut p = IOHMMParams::zeros(1, FeatureSchema::intercept_only(), vocab(1)).unwrap();
        p.theta_emr[0] = -1.0;
        let seq = sequence(&[0], &[1.0], &[vec![1.0]]);
        let r = &predict_sequence(&p, &seq, &PredictionConfig::default()).unwrap()[0];
        assert_eq!(r.duration, -1.0);
        assert_eq!(r.duration_clamped, 0.0);
    }
}
