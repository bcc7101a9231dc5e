//! Scaled forward-backward recursions and the E-step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iohmm::params::{EncodedSequence, IOHMMParams};
use crate::types::{ActivitySequence, UserHistory};

/// Which emission terms enter the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Location and duration together.
    Joint,
    DurationOnly,
    LocationOnly,
}

/// Per-step probabilities of one sequence under fixed parameters.
#[derive(Debug, Clone)]
pub struct SequenceTerms {
    pub n_states: usize,
    /// Initial distribution at step 0.
    pub initial: Vec<f64>,
    /// `transitions[t-1]` is the `N x N` row-major matrix used to enter step `t >= 1`.
    pub transitions: Vec<Vec<f64>>,
    /// `T x N` emission log-densities.
    pub log_emission: Vec<f64>,
}

impl SequenceTerms {
    pub fn compute(params: &IOHMMParams, seq: &EncodedSequence, modality: Modality) -> Result<Self> {
        Self::compute_prefix(params, seq, seq.len(), modality)
    }

    /// Terms for the first `len` steps.
    pub fn compute_prefix(
        params: &IOHMMParams,
        seq: &EncodedSequence,
        len: usize,
        modality: Modality,
    ) -> Result<Self> {
        let n = params.n_states;
        if seq.dim != params.dim {
            return Err(Error::DimensionMismatch {
                expected: params.dim,
                got: seq.dim,
            });
        }
        let initial = params.initial_prob(seq.z(0))?;
        let mut transitions = Vec::with_capacity(len.saturating_sub(1));
        for t in 1..len {
            let mut m = Vec::with_capacity(n * n);
            for i in 0..n {
                m.extend(params.transition_prob(i, seq.z(t))?);
            }
            transitions.push(m);
        }
        let mut log_emission = Vec::with_capacity(len * n);
        for t in 0..len {
            let z = seq.z(t);
            for i in 0..n {
                let v = match modality {
                    Modality::Joint => {
                        params.location_logprob(seq.locations[t], i, z)
                            + params.duration_logdensity(seq.durations[t], i, z)
                    }
                    Modality::DurationOnly => params.duration_logdensity(seq.durations[t], i, z),
                    Modality::LocationOnly => params.location_logprob(seq.locations[t], i, z),
                };
                log_emission.push(v);
            }
        }
        Ok(SequenceTerms {
            n_states: n,
            initial,
            transitions,
            log_emission,
        })
    }

    pub fn len(&self) -> usize {
        self.log_emission.len() / self.n_states
    }

    pub fn is_empty(&self) -> bool {
        self.log_emission.is_empty()
    }
}

/// Scaled forward variables: `alpha[t]` is `P(A_t | obs_{1:t})` and
/// `log_scale[t]` the log of the step's normaliser, so the prefix
/// log-likelihood is the running sum.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub alpha: Vec<f64>,
    pub log_scale: Vec<f64>,
    /// Raw step normalisers after the per-step max shift.
    scale: Vec<f64>,
    /// Per-step emission factors `exp(log_emission - max)`.
    emission: Vec<f64>,
}

impl ForwardPass {
    pub fn run(terms: &SequenceTerms) -> Result<Self> {
        let n = terms.n_states;
        let t_len = terms.len();
        let mut alpha = vec![0.0; t_len * n];
        let mut log_scale = vec![0.0; t_len];
        let mut scale = vec![0.0; t_len];
        let mut emission = vec![0.0; t_len * n];
        for t in 0..t_len {
            let le = &terms.log_emission[t * n..(t + 1) * n];
            let m = le.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(Error::Underflow { step: t + 1 });
            }
            for i in 0..n {
                emission[t * n + i] = (le[i] - m).exp();
            }
            let mut c = 0.0;
            for j in 0..n {
                let prior = if t == 0 {
                    terms.initial[j]
                } else {
                    let tr = &terms.transitions[t - 1];
                    (0..n).map(|i| alpha[(t - 1) * n + i] * tr[i * n + j]).sum()
                };
                let a = prior * emission[t * n + j];
                alpha[t * n + j] = a;
                c += a;
            }
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Underflow { step: t + 1 });
            }
            for j in 0..n {
                alpha[t * n + j] /= c;
            }
            scale[t] = c;
            log_scale[t] = c.ln() + m;
        }
        Ok(ForwardPass {
            alpha,
            log_scale,
            scale,
            emission,
        })
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_scale.iter().sum()
    }

    /// Normalised filtered distribution at 0-based step `t`.
    pub fn filtered(&self, t: usize, n: usize) -> &[f64] {
        &self.alpha[t * n..(t + 1) * n]
    }
}

/// Posterior quantities of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardBackwardResult {
    pub n_states: usize,
    pub log_likelihood: f64,
    /// `T x N`, row-major.
    pub gamma: Vec<f64>,
    /// `(T-1) x N x N`: `xi[t-1][i][j] = P(A_{t-1} = i, A_t = j | all)` for `t >= 1` (0-based).
    pub xi: Vec<f64>,
    /// Log of the per-step normalisers.
    pub log_scale: Vec<f64>,
}

impl ForwardBackwardResult {
    pub fn len(&self) -> usize {
        self.gamma.len() / self.n_states
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn gamma_row(&self, t: usize) -> &[f64] {
        &self.gamma[t * self.n_states..(t + 1) * self.n_states]
    }

    /// `N x N` slab for the transition into 0-based step `t >= 1`.
    pub fn xi_slab(&self, t: usize) -> &[f64] {
        let nn = self.n_states * self.n_states;
        &self.xi[(t - 1) * nn..t * nn]
    }
}

/// Forward-backward on precomputed terms.
pub fn forward_backward_terms(terms: &SequenceTerms) -> Result<ForwardBackwardResult> {
    let n = terms.n_states;
    let t_len = terms.len();
    let fwd = ForwardPass::run(terms)?;
    let mut beta = vec![1.0; t_len * n];
    for t in (0..t_len.saturating_sub(1)).rev() {
        let tr = &terms.transitions[t];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += tr[i * n + j] * fwd.emission[(t + 1) * n + j] * beta[(t + 1) * n + j];
            }
            beta[t * n + i] = s / fwd.scale[t + 1];
        }
    }
    let mut gamma = vec![0.0; t_len * n];
    for t in 0..t_len {
        let mut s = 0.0;
        for i in 0..n {
            let g = fwd.alpha[t * n + i] * beta[t * n + i];
            gamma[t * n + i] = g;
            s += g;
        }
        for i in 0..n {
            gamma[t * n + i] /= s;
        }
    }
    let mut xi = vec![0.0; t_len.saturating_sub(1) * n * n];
    for t in 1..t_len {
        let tr = &terms.transitions[t - 1];
        let slab = &mut xi[(t - 1) * n * n..t * n * n];
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = fwd.alpha[(t - 1) * n + i]
                    * tr[i * n + j]
                    * fwd.emission[t * n + j]
                    * beta[t * n + j];
                slab[i * n + j] = v;
                s += v;
            }
        }
        for v in slab.iter_mut() {
            *v /= s;
        }
    }
    Ok(ForwardBackwardResult {
        n_states: n,
        log_likelihood: fwd.log_likelihood(),
        gamma,
        xi,
        log_scale: fwd.log_scale,
    })
}

pub fn forward_backward_encoded(seq: &EncodedSequence, params: &IOHMMParams) -> Result<ForwardBackwardResult> {
    let terms = SequenceTerms::compute(params, seq, Modality::Joint)?;
    forward_backward_terms(&terms)
}

/// Posterior state and transition probabilities of one activity sequence.
pub fn forward_backward(seq: &ActivitySequence, params: &IOHMMParams) -> Result<ForwardBackwardResult> {
    let enc = EncodedSequence::encode(seq, &params.vocab, params.dim)?;
    forward_backward_encoded(&enc, params)
}

/// Log-likelihood of one sequence.
pub fn log_likelihood(seq: &ActivitySequence, params: &IOHMMParams) -> Result<f64> {
    let enc = EncodedSequence::encode(seq, &params.vocab, params.dim)?;
    let terms = SequenceTerms::compute(params, &enc, Modality::Joint)?;
    Ok(ForwardPass::run(&terms)?.log_likelihood())
}

/// Forward-backward results of every sequence plus their summed log-likelihood.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub results: Vec<ForwardBackwardResult>,
    pub log_likelihood: f64,
}

pub fn e_step_encoded(seqs: &[EncodedSequence], params: &IOHMMParams) -> Result<SufficientStats> {
    let results = seqs
        .iter()
        .map(|s| forward_backward_encoded(s, params))
        .collect::<Result<Vec<_>>>()?;
    let log_likelihood = results.iter().map(|r| r.log_likelihood).sum();
    Ok(SufficientStats {
        results,
        log_likelihood,
    })
}

/// E-step over every sequence of the given histories.
pub fn e_step(histories: &[&UserHistory], params: &IOHMMParams) -> Result<SufficientStats> {
    let seqs = encode_histories(histories, params)?;
    e_step_encoded(&seqs, params)
}

pub fn encode_histories(histories: &[&UserHistory], params: &IOHMMParams) -> Result<Vec<EncodedSequence>> {
    histories
        .iter()
        .flat_map(|h| h.sequences.iter())
        .map(|s| EncodedSequence::encode(s, &params.vocab, params.dim))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::context::FeatureSchema;
    use crate::types::{LocationVocab, StationId};

    fn one_state() -> IOHMMParams {
        let vocab = LocationVocab::from_stations(["A", "B"].iter().map(|s| StationId::new(*s).unwrap()));
        let mut p = IOHMMParams::zeros(1, FeatureSchema::intercept_only(), vocab).unwrap();
        p.theta_emq_row_mut(0, 1)[0] = 0.4;
        p.theta_emr[0] = 3.0;
        p.sigma[0] = 1.5;
        p
    }

    #[test]
    fn single_state_gamma_is_one() {
        let p = one_state();
        let seq = EncodedSequence {
            dim: 1,
            contexts: vec![1.0; 4],
            locations: vec![0, 1, 1, 0],
            durations: vec![2.0, 5.0, 3.3, 0.5],
        };
        let fb = forward_backward_encoded(&seq, &p).unwrap();
        assert!(fb.gamma.iter().all(|&g| (g - 1.0).abs() < 1e-15));
        let expected: f64 = (0..4)
            .map(|t| p.location_logprob(seq.locations[t], 0, &[1.0]) + p.duration_logdensity(seq.durations[t], 0, &[1.0]))
            .sum();
        assert!((fb.log_likelihood - expected).abs() < 1e-12);
    }

    #[test]
    fn extreme_outlier_does_not_underflow() {
        let p = one_state();
        let seq = EncodedSequence {
            dim: 1,
            contexts: vec![1.0; 2],
            locations: vec![0, 1],
            durations: vec![2.0, 500.0],
        };
        let fb = forward_backward_encoded(&seq, &p).unwrap();
        assert!(fb.log_likelihood.is_finite());
        assert!(fb.log_likelihood < -1e4);
    }

    #[test]
    fn long_sequence_is_finite() {
        let p = one_state();
        let t = 400;
        let seq = EncodedSequence {
            dim: 1,
            contexts: vec![1.0; t],
            locations: vec![1; t],
            durations: vec![9.0; t],
        };
        let fb = forward_backward_encoded(&seq, &p).unwrap();
        assert!(fb.log_likelihood.is_finite());
    }
}
